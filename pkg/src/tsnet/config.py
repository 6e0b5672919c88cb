"""Typed configuration sections, loadable from nested JSON dictionaries."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .errors import ConfigError
from .ncl import KINDS

VARIANTS = ("mlp", "mlp+ncl", "mlp+dpn", "mlp+ncl+dpn", "dtb", "dtb+ncl", "dtb+dpn", "tsnet-full")


@dataclass
class ModelConfig:
    variant: str = "tsnet-full"
    mu_hidden: tuple = (64, 64, 64)
    var_hidden: tuple = (32, 32)
    # positional-embedding level; None disables the embedding
    embed_L: int | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown model variant {self.variant!r}; choose from {VARIANTS}")
        self.mu_hidden = tuple(int(w) for w in self.mu_hidden)
        self.var_hidden = tuple(int(w) for w in self.var_hidden)
        if not self.mu_hidden or not self.var_hidden:
            raise ConfigError("subnetworks need at least one hidden layer")
        if self.embed_L is not None and int(self.embed_L) < 0:
            raise ConfigError("embed_L must be >= 0 or null")


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 64
    epochs: int = 2000
    patience: int = 200
    clip_norm: float = 10.0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ConfigError("invalid optimizer settings")


@dataclass
class NCLConfig:
    lambda1: float = 1.0
    lambda2: float = 0.1
    clamp_cap: float = 16.0
    library: tuple = KINDS

    def __post_init__(self):
        self.library = tuple(self.library)
        if not self.library or any(k not in KINDS for k in self.library):
            raise ConfigError(f"ncl.library must be a non-empty subset of {KINDS}")


@dataclass
class DPMConfig:
    k: int = 5
    sigma_aug_scale: float = 0.1
    embed_dim: int = 16
    target_form: str = "softmax"

    def __post_init__(self):
        if self.k < 1 or self.embed_dim < 2 or self.sigma_aug_scale < 0:
            raise ConfigError("invalid dpm settings")
        if self.target_form not in ("softmax", "proportional"):
            raise ConfigError("dpm.target_form must be 'softmax' or 'proportional'")


@dataclass
class LossConfig:
    lambda_h: float = 1.0
    lambda_cl: float = 1.0
    lambda_kl: float = 1.0


@dataclass
class PriorConfig:
    mu: object = "auto"
    var_scale: float = 4.0

    def __post_init__(self):
        if self.mu != "auto" and not isinstance(self.mu, (list, tuple)):
            raise ConfigError("prior.mu must be 'auto' or a list of numbers")
        if self.var_scale <= 0:
            raise ConfigError("prior.var_scale must be positive")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    ncl: NCLConfig = field(default_factory=NCLConfig)
    dpm: DPMConfig = field(default_factory=DPMConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainConfig":
        d = dict(d or {})
        sections = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(d) - set(sections)
        if unknown:
            raise ConfigError(f"unknown training config sections: {sorted(unknown)}")
        kwargs = {}
        for f in dataclasses.fields(cls):
            sub = d.get(f.name, {})
            klass = type(f.default_factory())
            names = {g.name for g in dataclasses.fields(klass)}
            bad = set(sub) - names
            if bad:
                raise ConfigError(f"unknown keys in '{f.name}': {sorted(bad)}")
            try:
                kwargs[f.name] = klass(**sub)
            except TypeError as exc:
                raise ConfigError(str(exc)) from None
        return cls(**kwargs)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for sec in out.values():
            for k, v in sec.items():
                if isinstance(v, tuple):
                    sec[k] = list(v)
        return out

    def with_updates(self, **sections) -> "TrainConfig":
        """Copy with some section fields overridden, e.g. ``model={"variant": "mlp"}``."""
        d = self.to_dict()
        for name, updates in sections.items():
            d[name].update(updates)
        return TrainConfig.from_dict(d)
