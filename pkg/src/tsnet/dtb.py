"""Deep Taylor Block: mean network plus Taylor-composed heteroscedastic variance.

For an input x with feature-noise variances s_i(x) and system-noise variances
s_o(x), the first-order expansion of F(x + noise) gives per output k

    var_k = sum_i J[i, k]**2 * s_i[i] + s_o[k],      J = dF/dx.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import MLPSpec, ParamStore, Tensor
from .errors import ContractError, NumericError, ShapeError

VAR_FLOOR = 1e-6
RAW_CLAMP = 12.0


@dataclass
class GaussianDiag:
    """Diagonal Gaussian; ``var`` holds variances, not standard deviations.

    Works for a single point (shape ``(l,)``) or a batch (``(n, l)``). Fields
    may be arrays or graph tensors.
    """

    mean: object
    var: object

    def __post_init__(self):
        if np.shape(_data(self.mean)) != np.shape(_data(self.var)):
            raise ShapeError(
                f"mean shape {np.shape(_data(self.mean))} != var shape {np.shape(_data(self.var))}")

    def numpy(self) -> "GaussianDiag":
        return GaussianDiag(np.array(_data(self.mean)), np.array(_data(self.var)))

    def validate(self, floor: float = VAR_FLOOR) -> "GaussianDiag":
        m, v = _data(self.mean), _data(self.var)
        if not (np.isfinite(m).all() and np.isfinite(v).all()):
            raise NumericError("non-finite Gaussian parameters")
        if (v < floor * (1 - 1e-12)).any():
            raise ContractError(f"variance below floor {floor}")
        return self

    def __len__(self):
        return len(_data(self.mean))

    def __getitem__(self, i) -> "GaussianDiag":
        return GaussianDiag(_data(self.mean)[i], _data(self.var)[i])

    def points(self) -> list["GaussianDiag"]:
        return [self[i] for i in range(len(self))]


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=float)


def variance_head(raw):
    """Map unconstrained outputs to variances: exp(clamp(raw, -12, 12)) + 1e-6."""
    raw_t = ad.as_tensor(raw)
    if np.isnan(raw_t.data).any():
        raise NumericError("NaN passed to variance_head")
    out = ad.exp(ad.clip(raw_t, -RAW_CLAMP, RAW_CLAMP)) + VAR_FLOOR
    return out if isinstance(raw, Tensor) else out.data


@dataclass
class DTBParams:
    spec_mu: MLPSpec
    params_mu: ParamStore
    spec_si: MLPSpec
    params_si: ParamStore
    spec_so: MLPSpec
    params_so: ParamStore

    def __post_init__(self):
        m = self.spec_mu.n_in
        if self.spec_si.n_in != m or self.spec_so.n_in != m:
            raise ShapeError("all three DTB subnetworks must share the input width")
        if self.spec_si.n_out != m:
            raise ShapeError(f"feature-noise head must output {m} variances, "
                             f"got {self.spec_si.n_out}")
        if self.spec_so.n_out != self.spec_mu.n_out:
            raise ShapeError("system-noise head must match the mean output width")

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator,
             mu_hidden=(64, 64, 64), var_hidden=(32, 32)) -> "DTBParams":
        spec_mu = MLPSpec((n_in, *mu_hidden, n_out))
        spec_si = MLPSpec((n_in, *var_hidden, n_in))
        spec_so = MLPSpec((n_in, *var_hidden, n_out))
        return cls(spec_mu, ParamStore.init(spec_mu, rng),
                   spec_si, ParamStore.init(spec_si, rng),
                   spec_so, ParamStore.init(spec_so, rng))

    @property
    def n_in(self) -> int:
        return self.spec_mu.n_in

    @property
    def n_out(self) -> int:
        return self.spec_mu.n_out

    def stores(self) -> list[ParamStore]:
        return [self.params_mu, self.params_si, self.params_so]


def dtb_parts(dtb: DTBParams, x) -> dict:
    """Forward pass exposing the intermediate quantities (mean, J, s_i, s_o)."""
    x = ad.as_tensor(x)
    if x.shape[-1] != dtb.n_in:
        raise ShapeError(f"DTB expects {dtb.n_in} features, got shape {x.shape}")
    mean, jac = ad.mlp_forward_with_jacobian(dtb.spec_mu, dtb.params_mu, x)
    s_i = variance_head(ad.mlp_forward(dtb.spec_si, dtb.params_si, x))
    s_o = variance_head(ad.mlp_forward(dtb.spec_so, dtb.params_so, x))
    # diag(J^T diag(s_i) J): sum over input features i
    if x.ndim == 2:
        s_i_col = ad.reshape(s_i, (s_i.shape[0], s_i.shape[1], 1))
        var = ad.tsum(jac * jac * s_i_col, axis=1) + s_o
    else:
        s_i_col = ad.reshape(s_i, (s_i.shape[0], 1))
        var = ad.tsum(jac * jac * s_i_col, axis=0) + s_o
    if not (np.isfinite(mean.data).all() and np.isfinite(var.data).all()):
        raise NumericError("non-finite DTB output")
    return {"mean": mean, "jacobian": jac, "s_i": s_i, "s_o": s_o, "var": var}


def dtb_forward(dtb: DTBParams, x) -> GaussianDiag:
    parts = dtb_parts(dtb, x)
    return GaussianDiag(parts["mean"], parts["var"])


def _derivative(f: Callable, x0: float) -> float:
    x = Tensor(float(x0), requires_grad=True)
    try:
        y = f(x)
    except TypeError:
        y = None
    if isinstance(y, Tensor) and y.requires_grad:
        ad.backward(y)
        return float(x.grad)
    h = 1e-6
    return float((np.asarray(f(x0 + h)) - np.asarray(f(x0 - h))) / (2 * h))


def _apply(f: Callable, values: np.ndarray) -> np.ndarray:
    try:
        out = f(Tensor(values))
    except TypeError:
        out = f(values)
    return out.data if isinstance(out, Tensor) else np.asarray(out, dtype=float)


def taylor_variance_mc_check(f: Callable, x0: float, si: float, so: float,
                             n_samples: int, rng: np.random.Generator,
                             chunk: int = 250_000) -> tuple[float, float]:
    """First-order output variance next to a Monte-Carlo estimate.

    Returns ``(f'(x0)**2 * si + so, var[f(x0 + e_i) + e_o])`` with
    ``e_i ~ N(0, si)`` and ``e_o ~ N(0, so)``. ``f`` may be built from
    ``tsnet.autodiff`` operations (exact derivative) or plain numpy.
    """
    if si < 0 or so < 0:
        raise ContractError("noise variances must be nonnegative")
    slope = _derivative(f, x0)
    analytic = slope ** 2 * si + so
    # streaming Welford-style moments in chunks keeps memory flat at 1e6+ samples
    count, mean, m2 = 0, 0.0, 0.0
    # shifting by f(x0) keeps noise-free runs exactly zero
    shift = float(_apply(f, np.array([float(x0)]))[0])
    remaining = int(n_samples)
    while remaining > 0:
        k = min(chunk, remaining)
        xi = x0 + np.sqrt(si) * rng.standard_normal(k)
        y = (_apply(f, xi) - shift) + np.sqrt(so) * rng.standard_normal(k)
        b_mean = y.mean()
        b_m2 = ((y - b_mean) ** 2).sum()
        delta = b_mean - mean
        total = count + k
        mean += delta * k / total
        m2 += b_m2 + delta ** 2 * count * k / total
        count = total
        remaining -= k
    empirical = m2 / (count - 1) if count > 1 else 0.0
    return float(analytic), float(empirical)
