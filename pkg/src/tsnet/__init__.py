"""Heteroscedastic regression with a Taylor-propagated noise model.

The mean network's input Jacobian carries feature noise into the output
variance; contrastive re-noising regularizes the mean, and a learned density
score blends the prediction with a broad prior away from the data.
"""
from .config import TrainConfig
from .data import Dataset, EvalGrid, NoisePlan, gen_toy1d, gen_toy2d, load_csv
from .dtb import DTBParams, GaussianDiag, dtb_forward
from .errors import (ConfigError, ContractError, DataParseError, DivergenceError, NumericError,
                     SchemaError, ShapeError, TSNetError)
from .experiments import ExperimentConfig, RunReport
from .training import TSNetModel, build_variant, load_checkpoint, metrics, predict, \
    save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "TrainConfig", "Dataset", "EvalGrid", "NoisePlan", "gen_toy1d", "gen_toy2d", "load_csv",
    "DTBParams", "GaussianDiag", "dtb_forward", "ConfigError", "ContractError",
    "DataParseError", "DivergenceError", "NumericError", "SchemaError", "ShapeError",
    "TSNetError", "ExperimentConfig", "RunReport", "TSNetModel", "build_variant",
    "load_checkpoint", "metrics", "predict", "save_checkpoint", "train",
]
