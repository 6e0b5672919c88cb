"""End-to-end training, inference, metrics and ablation variants."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import MLPSpec, ParamStore
from .config import VARIANTS, TrainConfig
from .data import Dataset, positional_embed
from .dpm import (DensityCalibration, DensityNetParams, augment_features, calibrate,
                  density_scores, density_targets, kd_from_scores, kd_tensor, kl_from_scores,
                  knn_raw_scores)
from .dtb import DTBParams, GaussianDiag, dtb_forward, variance_head
from .errors import ConfigError, ContractError, DivergenceError, NumericError
from .ncl import CLPair, add_noise, ncl_loss, sample_sigma_k
from .uco import LossWeights, PriorSpec, hmse_loss, reparam_sample, total_loss, uco_combine

CHECKPOINT_FORMAT = "tsnet-checkpoint/1"


# model pieces ---------------------------------------------------------------

@dataclass
class MLPHeads:
    """Ablation baseline: independent mean and log-variance networks."""

    spec_mu: MLPSpec
    params_mu: ParamStore
    spec_var: MLPSpec
    params_var: ParamStore

    @classmethod
    def init(cls, n_in, n_out, rng, mu_hidden=(64, 64, 64), var_hidden=(32, 32)):
        spec_mu = MLPSpec((n_in, *mu_hidden, n_out))
        spec_var = MLPSpec((n_in, *var_hidden, n_out))
        return cls(spec_mu, ParamStore.init(spec_mu, rng), spec_var, ParamStore.init(spec_var, rng))

    def stores(self):
        return [self.params_mu, self.params_var]


def head_forward(head, x) -> GaussianDiag:
    if isinstance(head, DTBParams):
        return dtb_forward(head, x)
    mean = ad.mlp_forward(head.spec_mu, head.params_mu, x)
    var = variance_head(ad.mlp_forward(head.spec_var, head.params_var, x))
    return GaussianDiag(mean, var)


@dataclass
class Normalizer:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    @classmethod
    def fit(cls, X, Y) -> "Normalizer":
        xs, ys = X.std(axis=0), Y.std(axis=0)
        return cls(X.mean(axis=0), np.where(xs > 1e-8, xs, 1.0),
                   Y.mean(axis=0), np.where(ys > 1e-8, ys, 1.0))

    def x(self, X):
        return (np.asarray(X, dtype=float) - self.x_mean) / self.x_std

    def y(self, Y):
        return (np.asarray(Y, dtype=float) - self.y_mean) / self.y_std

    def to_dict(self):
        return {k: np.asarray(getattr(self, k)).tolist()
                for k in ("x_mean", "x_std", "y_mean", "y_std")}


@dataclass
class VariantFlags:
    use_dtb: bool
    use_ncl: bool
    use_dpm: bool


def build_variant(kind: str) -> VariantFlags:
    """Component switches for one of the eight ablation variants."""
    if kind not in VARIANTS:
        raise ConfigError(f"unknown variant {kind!r}; choose from {VARIANTS}")
    if kind == "tsnet-full":
        return VariantFlags(True, True, True)
    base, *mods = kind.split("+")
    return VariantFlags(base == "dtb", "ncl" in mods, "dpn" in mods)


@dataclass
class TSNetModel:
    config: TrainConfig
    flags: VariantFlags
    head: object
    dnp: DensityNetParams | None
    prior: PriorSpec
    weights: LossWeights
    norm: Normalizer
    cal: DensityCalibration | None = None

    @property
    def embed_L(self):
        return self.config.model.embed_L

    def features(self, Xs) -> np.ndarray:
        """Standardized raw features -> network input (optionally embedded)."""
        return Xs if self.embed_L is None else positional_embed(Xs, int(self.embed_L))

    def stores(self):
        out = list(self.head.stores())
        if self.dnp is not None:
            out.extend(self.dnp.stores())
        return out

    def snapshot(self) -> list[np.ndarray]:
        return [s.flat().copy() for s in self.stores()]

    def restore(self, snap) -> None:
        for s, v in zip(self.stores(), snap):
            s.set_flat(v)


def init_model(config: TrainConfig, X_train, Y_train, rng: np.random.Generator) -> TSNetModel:
    X_train = np.asarray(X_train, dtype=float)
    Y_train = np.asarray(Y_train, dtype=float)
    flags = build_variant(config.model.variant)
    norm = Normalizer.fit(X_train, Y_train)
    m_raw, l = X_train.shape[1], Y_train.shape[1]
    L = config.model.embed_L
    m = m_raw if L is None else m_raw * (2 * int(L) + 3)
    mc = config.model
    if flags.use_dtb:
        head = DTBParams.init(m, l, rng, mc.mu_hidden, mc.var_hidden)
    else:
        head = MLPHeads.init(m, l, rng, mc.mu_hidden, mc.var_hidden)
    dnp = DensityNetParams.init(m_raw, rng, config.dpm.embed_dim) if flags.use_dpm else None
    Ys = norm.y(Y_train)
    if config.prior.mu == "auto":
        prior = PriorSpec.from_labels(Ys, config.prior.var_scale)
    else:
        mu = norm.y(np.asarray(config.prior.mu, dtype=float))
        prior = PriorSpec(mu, config.prior.var_scale * np.maximum(Ys.var(axis=0), 1e-12))
    lc = config.loss
    weights = LossWeights(lc.lambda_h, lc.lambda_cl if flags.use_ncl else 0.0,
                          lc.lambda_kl if flags.use_dpm else 0.0)
    model = TSNetModel(config, flags, head, dnp, prior, weights, norm)
    if not flags.use_dpm:
        model.cal = DensityCalibration(0.0, 0.0)
    return model


# optimizer ------------------------------------------------------------------

class Adam:
    """Adam over a list of stores with global-norm gradient clipping."""

    def __init__(self, stores, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, clip_norm=None):
        self.tensors = [t for s in stores for t in s.tensors()]
        self.lr, self.betas, self.eps, self.clip_norm = lr, betas, eps, clip_norm
        self.m = [np.zeros_like(t.data) for t in self.tensors]
        self.v = [np.zeros_like(t.data) for t in self.tensors]
        self.t = 0

    def zero_grad(self):
        for t in self.tensors:
            t.grad = None

    def step(self) -> float:
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in self.tensors]
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / (norm + 1e-12)
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for t, g, m, v in zip(self.tensors, grads, self.m, self.v):
            g = g * scale
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            t.data = t.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


# training ---------------------------------------------------------------------

@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False

    def __len__(self):
        return len(self.records)

    def column(self, key) -> list:
        return [r[key] for r in self.records]


@dataclass
class _DensityState:
    points: np.ndarray      # X_train and its augmented copies, standardized
    raw: np.ndarray         # KNN raw scores per point
    n: int


def _density_state(Xs, cfg, rng) -> _DensityState:
    pts = augment_features(Xs, cfg.sigma_aug_scale, rng)
    k = min(cfg.k, len(Xs) - 1)
    return _DensityState(pts, knn_raw_scores(pts, k, n_reference=len(Xs)), len(Xs))


def batch_losses(model: TSNetModel, xb, yb, rng, density: _DensityState | None = None,
                 rows=None, eps=None) -> dict:
    """All loss terms for one batch of standardized features/labels.

    ``rows`` indexes the batch into the training set (needed for the density
    targets). Returns graph tensors under keys cl, kl, hmse, total.
    """
    cfg = model.config
    flags = model.flags
    feats = model.features(xb)
    g_n = head_forward(model.head, feats)
    cl = ad.Tensor(0.0)
    if flags.use_ncl:
        # re-noise the network inputs, i.e. the same space the feature-noise head models
        spec = sample_sigma_k(rng, feats.shape[1], cfg.ncl.library)
        g_cl = head_forward(model.head, add_noise(feats, spec, rng))
        cl = ncl_loss(CLPair(g_n, g_cl), cfg.ncl.lambda1, cfg.ncl.lambda2, cfg.ncl.clamp_cap)
    kl = ad.Tensor(0.0)
    kd = np.ones(len(xb))
    if flags.use_dpm:
        if density is None or rows is None:
            raise ContractError("density state and batch rows are required for DPM variants")
        rows = np.asarray(rows)
        q = np.concatenate([rows, rows + density.n])
        scores = density_scores(model.dnp, density.points[q])
        rho = density_targets(density.raw[q], cfg.dpm.target_form)
        kl = kl_from_scores(scores, rho)
        kd = kd_tensor(scores[:len(rows)], model.cal)
    g = uco_combine(kd, g_n, model.prior)
    if eps is None:
        eps = rng.standard_normal(np.shape(yb))
    y_tilde = reparam_sample(g, rng, eps=eps)
    hmse = hmse_loss(yb, y_tilde, g.var, model.weights.lambda_h)
    total = total_loss(cl, kl, hmse, model.weights)
    return {"cl": cl, "kl": kl, "hmse": hmse, "total": total}


def _predict_std(model: TSNetModel, Xs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    g = head_forward(model.head, model.features(Xs))
    if model.flags.use_dpm:
        kd = kd_from_scores(density_scores(model.dnp, Xs).data, model.cal)
    else:
        kd = np.ones(len(Xs))
    out = uco_combine(kd, GaussianDiag(g.mean.data, g.var.data), model.prior)
    return np.asarray(out.mean), np.asarray(out.var), kd


def train(config: TrainConfig, dataset: Dataset, seed: int,
          log_every: int = 0) -> tuple[TSNetModel, TrainHistory]:
    """Fit a model on the training split, selecting the best validation-MSE epoch."""
    if dataset.split_indices is None:
        raise ContractError("train needs a split dataset")
    X_tr, Y_tr = dataset.part("train")
    X_va, Y_va = dataset.part("val")
    if len(X_tr) < 2:
        raise ContractError("need at least two training rows")
    ss = np.random.SeedSequence(seed)
    init_rng, aug_rng, batch_rng, noise_rng = (np.random.default_rng(s) for s in ss.spawn(4))
    model = init_model(config, X_tr, Y_tr, init_rng)
    history = TrainHistory()
    Xs, Ys = model.norm.x(X_tr), model.norm.y(Y_tr)
    Xv, Yv = model.norm.x(X_va), model.norm.y(Y_va)
    if not len(Xv):
        Xv, Yv = Xs, Ys
    density = _density_state(Xs, config.dpm, aug_rng) if model.flags.use_dpm else None
    oc = config.optim
    opt = Adam(model.stores(), oc.lr, (oc.beta1, oc.beta2), clip_norm=oc.clip_norm)

    def recalibrate():
        if model.flags.use_dpm:
            model.cal = calibrate(model.dnp, Xs)

    recalibrate()
    best = (np.inf, model.snapshot(), model.cal)
    since_best = 0
    n = len(Xs)
    for epoch in range(oc.epochs):
        t0 = time.perf_counter()
        order = batch_rng.permutation(n)
        sums = {"cl": 0.0, "kl": 0.0, "hmse": 0.0, "total": 0.0}
        n_batches = 0
        for start in range(0, n, oc.batch_size):
            rows = order[start:start + oc.batch_size]
            opt.zero_grad()
            try:
                parts = batch_losses(model, Xs[rows], Ys[rows], noise_rng, density, rows)
                ad.backward(parts["total"])
            except NumericError as exc:
                checkpoint = _checkpoint_dict(model, best[1], best[2])
                raise DivergenceError(f"epoch {epoch}: {exc}", checkpoint, epoch) from exc
            opt.step()
            for k in sums:
                sums[k] += float(parts[k].data)
            n_batches += 1
        recalibrate()
        mu_v, var_v, _ = _predict_std(model, Xv)
        val = metrics(Yv, mu_v, var_v)
        rec = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()},
               "val_mse": val["mse"], "val_mae": val["mae"], "val_nll": val["nll"],
               "wall_time": time.perf_counter() - t0}
        history.records.append(rec)
        if log_every and epoch % log_every == 0:
            print(f"epoch {epoch:5d} total {rec['total']:.4f} val_mse {val['mse']:.4f}")
        if val["mse"] < best[0]:
            best = (val["mse"], model.snapshot(), model.cal)
            history.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= oc.patience:
                history.stopped_early = True
                break
    model.restore(best[1])
    model.cal = best[2] if best[2] is not None else model.cal
    recalibrate()
    return model, history


# inference and metrics ----------------------------------------------------------

@dataclass
class Prediction:
    """Batched prediction in label units; ``k_d`` is the density weight per point."""

    mean: np.ndarray
    var: np.ndarray
    k_d: np.ndarray

    def gaussians(self) -> list[GaussianDiag]:
        return [GaussianDiag(m, v) for m, v in zip(self.mean, self.var)]


def predict(model: TSNetModel, X) -> Prediction:
    """Network Gaussian combined with the prior through k_d; no sampling."""
    if model.cal is None:
        raise ContractError("model is not calibrated; train it or load a checkpoint first")
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None] if model.norm.x_mean.size == 1 else X[None, :]
    mu, var, kd = _predict_std(model, model.norm.x(X))
    return Prediction(mu * model.norm.y_std + model.norm.y_mean,
                      var * model.norm.y_std ** 2, kd)


def metrics(y_true, mu, var=None) -> dict:
    """MSE, MAE and Gaussian NLL (log sigma + r^2 / (2 sigma^2)), averaged."""
    y = np.asarray(y_true, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if y.shape != mu.shape:
        raise ContractError(f"shape mismatch: y {y.shape} vs mu {mu.shape}")
    r = y - mu
    out = {"mse": float(np.mean(r ** 2)), "mae": float(np.mean(np.abs(r))), "nll": None}
    if var is not None:
        var = np.asarray(var, dtype=float)
        if var.shape != y.shape:
            raise ContractError(f"shape mismatch: y {y.shape} vs var {var.shape}")
        if (var <= 0).any():
            raise ContractError("NLL needs strictly positive variances")
        out["nll"] = float(np.mean(0.5 * np.log(var) + r ** 2 / (2.0 * var)))
    return out


# checkpoints ------------------------------------------------------------------

def _checkpoint_dict(model: TSNetModel, snapshot=None, cal=None) -> dict:
    snap = snapshot if snapshot is not None else model.snapshot()
    cal = cal if cal is not None else model.cal
    return {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "stores": [v.tolist() for v in snap],
        "calibration": cal.to_dict() if cal is not None else None,
        "prior": model.prior.to_dict(),
        "normalizer": model.norm.to_dict(),
        "n_in": int(model.norm.x_mean.size),
        "n_out": int(model.norm.y_mean.size),
    }


def save_checkpoint(model: TSNetModel, path, transform_log_ref: str | None = None) -> None:
    doc = _checkpoint_dict(model)
    doc["transform_log_ref"] = transform_log_ref
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> TSNetModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"unsupported checkpoint format {doc.get('format')!r}")
    config = TrainConfig.from_dict(doc["config"])
    norm = Normalizer(**{k: np.asarray(v) for k, v in doc["normalizer"].items()})
    X = np.zeros((2, doc["n_in"]))
    Y = np.zeros((2, doc["n_out"]))
    model = init_model(config, X, Y, np.random.default_rng(0))
    model.norm = norm
    model.prior = PriorSpec(doc["prior"]["mu_p"], doc["prior"]["var_p"])
    model.restore([np.asarray(v) for v in doc["stores"]])
    cal = doc["calibration"]
    model.cal = DensityCalibration(cal["s_min"], cal["s_max"]) if cal else None
    return model
