"""Noise-aware contrastive learning: random heteroscedastic re-noising and its loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .dtb import GaussianDiag
from .errors import ContractError, ShapeError

KINDS = ("constant", "sine", "exponential-sigmoid")
DEFAULT_CAP = 16.0


@dataclass
class NoiseFunctionSpec:
    """One noise-scale function per feature.

    ``params[j]`` holds the parameters of feature j's function; the noise
    variance at x is the square of the scale function.
    """

    kinds: list[str]
    params: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if len(self.kinds) != len(self.params):
            raise ShapeError("one parameter dict per feature is required")
        for k in self.kinds:
            if k not in KINDS:
                raise ContractError(f"unknown noise function kind {k!r}")

    @property
    def n_features(self) -> int:
        return len(self.kinds)

    def scale(self, x) -> np.ndarray:
        """Noise standard deviation per feature; ``x`` is (m,) or (n, m)."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_features:
            raise ShapeError(f"expected {self.n_features} features, got shape {x.shape}")
        out = np.empty_like(x)
        for j, (kind, p) in enumerate(zip(self.kinds, self.params)):
            xj = x[..., j]
            if kind == "constant":
                out[..., j] = p["a"]
            elif kind == "sine":
                out[..., j] = p["a"] * (np.sin(p["w"] * xj + p["p"]) + 1.0) / 2.0 + 0.01
            else:
                out[..., j] = p["a"] / (1.0 + np.exp(-(xj - p["c"])))
        return out

    def variance(self, x) -> np.ndarray:
        return self.scale(x) ** 2

    def to_dict(self) -> dict:
        return {"kinds": list(self.kinds), "params": [dict(p) for p in self.params]}


def sample_sigma_k(rng: np.random.Generator, m: int, library=KINDS) -> NoiseFunctionSpec:
    """Draw an independent random noise function for each of ``m`` features."""
    library = tuple(library)
    if not library or any(k not in KINDS for k in library):
        raise ContractError(f"library must be a non-empty subset of {KINDS}")
    kinds, params = [], []
    for _ in range(m):
        kind = library[rng.integers(len(library))]
        if kind == "constant":
            p = {"a": rng.uniform(0.01, 0.3)}
        elif kind == "sine":
            p = {"a": rng.uniform(0.01, 0.2), "w": rng.uniform(0.5, 3.0),
                 "p": rng.uniform(0.0, 2.0 * np.pi)}
        else:
            p = {"a": rng.uniform(0.02, 0.3), "c": rng.uniform(-2.0, 2.0)}
        kinds.append(kind)
        params.append({k: float(v) for k, v in p.items()})
    return NoiseFunctionSpec(kinds, params)


def add_noise(x, spec: NoiseFunctionSpec, rng: np.random.Generator) -> np.ndarray:
    """x + scale(x) * eps with eps standard normal, per feature."""
    x = np.asarray(x, dtype=float)
    return x + spec.scale(x) * rng.standard_normal(x.shape)


@dataclass
class CLPair:
    clean: GaussianDiag
    noised: GaussianDiag

    def __post_init__(self):
        if np.shape(ad.as_tensor(self.clean.mean).data) != np.shape(ad.as_tensor(self.noised.mean).data):
            raise ShapeError("clean and noised branches must have matching shapes")


def ncl_loss(pair: CLPair, lambda1: float = 1.0, lambda2: float = 0.1,
             cap: float = DEFAULT_CAP, reduce: str = "mean"):
    """lambda1 * |mu_n - mu_cl|^2 - lambda2 * sum min((log v_n - log v_cl)^2, cap).

    For batched branches the per-sample values are averaged (``reduce="mean"``)
    or summed. Returns a graph tensor when any input is one, else a float.
    """
    mu_n, mu_c = ad.as_tensor(pair.clean.mean), ad.as_tensor(pair.noised.mean)
    v_n, v_c = ad.as_tensor(pair.clean.var), ad.as_tensor(pair.noised.var)
    if (v_n.data <= 0).any() or (v_c.data <= 0).any():
        raise ContractError("ncl_loss requires strictly positive variances")
    diff = mu_n - mu_c
    logdiff = ad.log(v_n) - ad.log(v_c)
    sep = ad.minimum(logdiff * logdiff, cap)
    per_sample = lambda1 * ad.tsum(diff * diff, axis=-1) - lambda2 * ad.tsum(sep, axis=-1)
    if per_sample.ndim == 0:
        total = per_sample
    elif reduce == "sum":
        total = ad.tsum(per_sample)
    else:
        total = ad.tmean(per_sample)
    any_graph = any(isinstance(t, ad.Tensor) for t in
                    (pair.clean.mean, pair.clean.var, pair.noised.mean, pair.noised.var))
    return total if any_graph else float(total.data)
