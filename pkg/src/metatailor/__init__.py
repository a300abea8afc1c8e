"""Per-query model adaptation via conditional normalization.

The package trains feed-forward regressors whose prediction function may
fine-tune per-sample affine parameters on an unsupervised loss before
answering, and trains the shared weights to benefit from that adaptation.
"""

from .autodiff import Tensor, apply, finite_diff_check, gradient
from .engine import (
    TailorConfig,
    TrainData,
    TrainLog,
    batch_ttt,
    meta_adapt_predict,
    meta_learn_cngrad,
    optimize_output,
    predict_tailored,
    tailor,
    train_cngrad,
    train_inductive,
    train_mammoth,
)
from .errors import ContractViolation, GenerationFault, NumericFault, TrainingFault
from .losses import (
    NormStats,
    PendulumParams,
    aux_regularized_loss,
    conservation_tailor_loss,
    invariants_of,
    mse,
    pendulum_energy_loss,
    smoothness_tailor_loss,
)
from .net import (
    CnParams,
    ModelConfig,
    MlpParams,
    forward_cn,
    identity_cn,
    init_params,
    load_checkpoint,
    save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "apply",
    "gradient",
    "finite_diff_check",
    "ModelConfig",
    "MlpParams",
    "CnParams",
    "init_params",
    "identity_cn",
    "forward_cn",
    "save_checkpoint",
    "load_checkpoint",
    "NormStats",
    "PendulumParams",
    "mse",
    "invariants_of",
    "conservation_tailor_loss",
    "pendulum_energy_loss",
    "smoothness_tailor_loss",
    "aux_regularized_loss",
    "TailorConfig",
    "TrainData",
    "TrainLog",
    "tailor",
    "predict_tailored",
    "batch_ttt",
    "optimize_output",
    "train_inductive",
    "train_cngrad",
    "train_mammoth",
    "meta_learn_cngrad",
    "meta_adapt_predict",
    "ContractViolation",
    "NumericFault",
    "TrainingFault",
    "GenerationFault",
]
