"""Uncertainty combination, reparameterized sampling and the training losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dtb import GaussianDiag
from .errors import ContractError, NumericError


@dataclass
class PriorSpec:
    mu_p: np.ndarray
    var_p: np.ndarray

    def __post_init__(self):
        self.mu_p = np.atleast_1d(np.asarray(self.mu_p, dtype=float))
        self.var_p = np.atleast_1d(np.asarray(self.var_p, dtype=float))
        if self.mu_p.shape != self.var_p.shape:
            raise ContractError("prior mean and variance must have the same length")
        if (self.var_p <= 0).any():
            raise ContractError("prior variances must be positive")

    @classmethod
    def from_labels(cls, Y, var_scale: float = 4.0) -> "PriorSpec":
        """Label mean, ``var_scale`` times the label variance (per output)."""
        Y = np.asarray(Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        var = Y.var(axis=0)
        return cls(Y.mean(axis=0), var_scale * np.where(var > 0, var, 1.0))

    def to_dict(self):
        return {"mu_p": self.mu_p.tolist(), "var_p": self.var_p.tolist()}


@dataclass
class LossWeights:
    lambda_h: float = 1.0
    lambda_cl: float = 1.0
    lambda_kl: float = 1.0

    def __post_init__(self):
        for name in ("lambda_h", "lambda_cl", "lambda_kl"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0:
                raise ContractError(f"{name} must be finite and nonnegative")
            setattr(self, name, v)


def uco_combine(kd, n: GaussianDiag, p: PriorSpec) -> GaussianDiag:
    """Convex combination of the network and prior Gaussians.

    mean = kd mu_n + (1 - kd) mu_p,  var = kd^2 var_n + (1 - kd)^2 var_p.
    ``kd`` is a scalar or one weight per row of a batched ``n``.
    """
    kd_arr = np.asarray(kd.data if isinstance(kd, Tensor) else kd, dtype=float)
    if (kd_arr < 0).any() or (kd_arr > 1).any() or not np.isfinite(kd_arr).all():
        raise ContractError("density weight k_d must lie in [0, 1]")
    kd_t = ad.as_tensor(kd)
    mu_n, var_n = ad.as_tensor(n.mean), ad.as_tensor(n.var)
    if kd_t.ndim == 1 and mu_n.ndim == 2:
        kd_t = ad.reshape(kd_t, (kd_t.shape[0], 1))
    if (var_n.data <= 0).any():
        raise ContractError("network variances must be positive")
    one_minus = 1.0 - kd_t
    mean = kd_t * mu_n + one_minus * p.mu_p
    var = kd_t * kd_t * var_n + one_minus * one_minus * p.var_p
    graph = any(isinstance(t, Tensor) for t in (kd, n.mean, n.var))
    return GaussianDiag(mean, var) if graph else GaussianDiag(mean.data, var.data)


def reparam_sample(g: GaussianDiag, rng: np.random.Generator, eps=None):
    """mu + sqrt(var) * eps, eps ~ N(0, I); differentiable in (mu, var)."""
    mean, var = ad.as_tensor(g.mean), ad.as_tensor(g.var)
    if (var.data <= 0).any():
        raise ContractError("reparam_sample requires positive variances")
    if eps is None:
        eps = rng.standard_normal(mean.shape)
    out = mean + ad.sqrt(var) * eps
    return out if isinstance(g.mean, Tensor) or isinstance(g.var, Tensor) else out.data


def hmse_loss(y_n, y_tilde, var, lambda_h: float = 1.0, reduce: str = "mean"):
    """lambda_h * sum_k log var_k + sum_k (y_k - y~_k)^2 / var_k.

    Batched inputs are reduced over rows with ``reduce`` ("mean" or "sum").
    """
    var_t = ad.as_tensor(var)
    if (var_t.data <= 0).any():
        raise ContractError("hmse_loss requires positive variances")
    resid = ad.as_tensor(y_n) - ad.as_tensor(y_tilde)
    per = lambda_h * ad.tsum(ad.log(var_t), axis=-1) + ad.tsum(resid * resid / var_t, axis=-1)
    if per.ndim == 0:
        total = per
    elif reduce == "sum":
        total = ad.tsum(per)
    else:
        total = ad.tmean(per)
    graph = any(isinstance(t, Tensor) for t in (y_n, y_tilde, var))
    return total if graph else float(total.data)


def total_loss(cl, kl, hmse, w: LossWeights):
    """lambda_cl * L_cl + lambda_kl * L_kl + L_hmse."""
    for part in (cl, kl, hmse):
        if not np.isfinite(ad.as_tensor(part).data).all():
            raise NumericError("non-finite loss component")
    out = w.lambda_cl * ad.as_tensor(cl) + w.lambda_kl * ad.as_tensor(kl) + ad.as_tensor(hmse)
    graph = any(isinstance(t, Tensor) for t in (cl, kl, hmse))
    return out if graph else float(out.data)
