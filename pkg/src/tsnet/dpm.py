"""Data density perception: KNN density targets, a learned density scorer, k_d."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import MLPSpec, ParamStore, Tensor, TensorGroup
from .errors import ContractError, ShapeError

EPS_DIST = 1e-8
RHO_FLOOR = 1e-12


@dataclass
class DensityField:
    points: np.ndarray
    rho: np.ndarray
    raw: np.ndarray | None = None

    def __post_init__(self):
        if len(self.rho) != len(self.points):
            raise ShapeError("one density value per point is required")


@dataclass
class DensityCalibration:
    s_min: float
    s_max: float

    def __post_init__(self):
        if self.s_min > self.s_max:
            raise ContractError("calibration requires s_min <= s_max")

    def to_dict(self):
        return {"s_min": self.s_min, "s_max": self.s_max}


def augment_features(X, sigma_aug_scale: float, rng: np.random.Generator) -> np.ndarray:
    """Stack X with one Gaussian-perturbed copy of every row.

    Feature j is perturbed with std ``sigma_aug_scale * std(X[:, j])``;
    constant features fall back to ``sigma_aug_scale * 1e-3``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or len(X) < 2:
        raise ContractError("augment_features needs a 2-D array with at least two rows")
    std = X.std(axis=0)
    std = np.where(std > 0, std, 1e-3)
    sigma = sigma_aug_scale * std
    return np.vstack([X, X + sigma * rng.standard_normal(X.shape)])


def knn_raw_scores(points, K: int, n_reference: int | None = None,
                   chunk: int = 2048) -> np.ndarray:
    """Sum of inverse squared distances to the K nearest reference points.

    The reference set is ``points[:n_reference]`` (all points by default). A
    query that is itself a reference point does not count itself.
    """
    P = np.asarray(points, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    n = len(P)
    n_ref = n if n_reference is None else int(n_reference)
    if not 1 <= K < n_ref:
        raise ContractError(f"need 1 <= K < number of reference points, got K={K}, n={n_ref}")
    R = P[:n_ref]
    r_sq = (R * R).sum(axis=1)
    raw = np.empty(n)
    for start in range(0, n, chunk):
        Q = P[start:start + chunk]
        d2 = (Q * Q).sum(axis=1)[:, None] + r_sq[None, :] - 2.0 * Q @ R.T
        rows = np.arange(start, start + len(Q))
        own = rows < n_ref
        d2[np.nonzero(own)[0], rows[own]] = np.inf
        idx = np.argpartition(d2, K - 1, axis=1)[:, :K]
        # the expanded form above cancels badly for close points; recompute exactly
        exact = ((Q[:, None, :] - R[idx]) ** 2).sum(axis=2)
        raw[start:start + len(Q)] = (1.0 / (exact + EPS_DIST)).sum(axis=1)
    return raw


def _softmax(v):
    v = np.asarray(v, dtype=float)
    e = np.exp(v - v.max())
    return e / e.sum()


def knn_density(points, K: int, n_reference: int | None = None) -> DensityField:
    """rho = softmax over points of the KNN inverse-squared-distance score."""
    raw = knn_raw_scores(points, K, n_reference)
    return DensityField(np.asarray(points, dtype=float), _softmax(raw), raw)


def density_targets(raw, form: str = "softmax") -> np.ndarray:
    """Probability targets over a subset of points from their raw KNN scores.

    ``softmax`` is the direct normalization; ``proportional`` uses
    raw / sum(raw), i.e. softmax of log(raw).
    """
    raw = np.asarray(raw, dtype=float)
    if form == "softmax":
        return _softmax(raw)
    if form == "proportional":
        return raw / raw.sum()
    raise ContractError(f"unknown density target form {form!r}")


@dataclass
class DensityNetParams:
    """Per-point scorer: feature tokens -> single-head self-attention -> MLP head.

    Feature j of a point becomes the token sigmoid(x_j * embed_w[j] + embed_b[j])
    in R^d; tokens attend to each other, are mean-pooled, and the head maps
    the pooled vector to a raw score s(x).
    """

    group: TensorGroup
    head_spec: MLPSpec
    head: ParamStore

    @classmethod
    def init(cls, m: int, rng: np.random.Generator, embed_dim: int = 16,
             head_hidden: int = 16) -> "DensityNetParams":
        if embed_dim < 2:
            raise ContractError("embedding dimension must be at least 2")
        d = embed_dim
        a_e = np.sqrt(6.0 / (1 + d))
        a_q = np.sqrt(6.0 / (2 * d))
        group = TensorGroup(
            embed_w=rng.uniform(-a_e, a_e, size=(m, d)) * 2.0,
            embed_b=rng.uniform(-1.0, 1.0, size=(m, d)),
            wq=rng.uniform(-a_q, a_q, size=(d, d)),
            wk=rng.uniform(-a_q, a_q, size=(d, d)),
            wv=rng.uniform(-a_q, a_q, size=(d, d)),
        )
        head_spec = MLPSpec((d, head_hidden, 1))
        return cls(group, head_spec, ParamStore.init(head_spec, rng))

    @property
    def n_in(self) -> int:
        return self.group["embed_w"].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.group["embed_w"].shape[1]

    def stores(self):
        return [self.group, self.head]


def density_scores(dnp: DensityNetParams, X) -> Tensor:
    """Raw per-point scores s(x), shape (n,). Each row is scored independently."""
    X = ad.as_tensor(X)
    if X.ndim == 1:
        X = ad.reshape(X, (1, X.shape[0]))
    n, m = X.shape
    if m != dnp.n_in:
        raise ShapeError(f"density net expects {dnp.n_in} features, got {m}")
    d = dnp.embed_dim
    g = dnp.group
    tokens = ad.sigmoid(ad.reshape(X, (n, m, 1)) * g["embed_w"] + g["embed_b"])
    q = ad.matmul(tokens, g["wq"])
    k = ad.matmul(tokens, g["wk"])
    v = ad.matmul(tokens, g["wv"])
    att = ad.softmax(ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(d)), axis=-1)
    hidden = tokens + ad.matmul(att, v)
    pooled = ad.tmean(hidden, axis=1)
    return ad.reshape(ad.mlp_forward(dnp.head_spec, dnp.head, pooled), (n,))


def density_net_forward(dnp: DensityNetParams, X) -> Tensor:
    """Density over the evaluation set: softmax of the per-point scores."""
    return ad.softmax(density_scores(dnp, X))


def kl_loss(kappa, rho):
    """KL(kappa || rho) with rho floored at 1e-12 and 0 log 0 = 0."""
    rho = np.maximum(np.asarray(ad.as_tensor(rho).data, dtype=float), RHO_FLOOR)
    kap = ad.as_tensor(kappa)
    if kap.shape != rho.shape:
        raise ShapeError(f"kappa shape {kap.shape} != rho shape {rho.shape}")
    if isinstance(kappa, Tensor):
        safe = ad.clip(kap, 1e-300, 1.0)
        return ad.tsum(kap * (ad.log(safe) - np.log(rho)))
    k = kap.data
    terms = np.where(k > 0, k * (np.log(np.where(k > 0, k, 1.0)) - np.log(rho)), 0.0)
    return float(terms.sum())


def kl_from_scores(scores: Tensor, rho) -> Tensor:
    """KL(softmax(scores) || rho), computed through log-softmax for stability."""
    log_k = ad.log_softmax(scores)
    log_rho = np.log(np.maximum(np.asarray(rho, dtype=float), RHO_FLOOR))
    return ad.tsum(ad.exp(log_k) * (log_k - log_rho))


def calibrate(dnp: DensityNetParams, X) -> DensityCalibration:
    s = density_scores(dnp, np.asarray(X, dtype=float)).data
    return DensityCalibration(float(s.min()), float(s.max()))


def kd_from_scores(scores, cal: DensityCalibration) -> np.ndarray:
    """Min-max map of raw scores into [0, 1]; a degenerate calibration gives 0."""
    s = np.asarray(scores, dtype=float)
    if cal.s_max <= cal.s_min:
        return np.zeros_like(s)
    return np.clip((s - cal.s_min) / (cal.s_max - cal.s_min + 1e-12), 0.0, 1.0)


def kd_tensor(scores: Tensor, cal: DensityCalibration) -> Tensor:
    """Graph version of ``kd_from_scores``; gradients pass inside the clamp."""
    scores = ad.as_tensor(scores)
    if cal.s_max <= cal.s_min:
        return Tensor(np.zeros(scores.shape))
    return ad.clip((scores - cal.s_min) * (1.0 / (cal.s_max - cal.s_min + 1e-12)), 0.0, 1.0)


def k_d(dnp: DensityNetParams, cal: DensityCalibration | None, x) -> np.ndarray | float:
    """Density weight in [0, 1] for one point (float) or a batch (array)."""
    if cal is None:
        raise ContractError("density calibration has not been recorded")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    out = kd_from_scores(density_scores(dnp, x[None, :] if single else x).data, cal)
    return float(out[0]) if single else out
