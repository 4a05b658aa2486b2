"""Deep variational information bottleneck in plain numpy.

Stochastic Gaussian encoders trained with a variational bound on the
information bottleneck objective, the usual deterministic baselines,
adversarial attacks for robustness studies and an experiment runner.
"""
from .numcore import DTYPE, NumericError, Rng, ShapeError
from .nn import ConfigError
from .encoder import EncoderHeadSpec, GaussianCode, kl_to_prior
from .model import Architecture, init_params
from .objective import VibConfig, vib_loss, unsup_vib_loss, mi_zx_upper, mi_zy_lower
from .train import Objective, TrainConfig, fit, evaluate, load_checkpoint, save_checkpoint
from .data import Dataset, FormatError, load_idx, load_feature_csv, scale_to_pm1, synth_blobs
from .attack import AttackConfig, AttackResult, fgs, l2opt

__version__ = "0.1.0"

__all__ = [
    "DTYPE", "NumericError", "Rng", "ShapeError", "ConfigError",
    "EncoderHeadSpec", "GaussianCode", "kl_to_prior",
    "Architecture", "init_params",
    "VibConfig", "vib_loss", "unsup_vib_loss", "mi_zx_upper", "mi_zy_lower",
    "Objective", "TrainConfig", "fit", "evaluate", "load_checkpoint", "save_checkpoint",
    "Dataset", "FormatError", "load_idx", "load_feature_csv", "scale_to_pm1", "synth_blobs",
    "AttackConfig", "AttackResult", "fgs", "l2opt",
]
