"""SMART: one shared weight tensor, two sparse expert paths (clean and noisy adversarial)."""

from smartnet.attacks import AttackConfig, fgsm_attack, pgd_attack, project_linf
from smartnet.errors import SmartNetError
from smartnet.gradcheck import grad_check
from smartnet.kernels import BACKEND
from smartnet.layers import PathSelector
from smartnet.masks import MaskPlan, SparsityMask, generate_mask_pair
from smartnet.model import ResNet, desk_resnet
from smartnet.tensor import Tape, Tensor
from smartnet.training import TrainConfig, evaluate, lambda_sweep, pgd_at_train, smart_train

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "BACKEND",
    "MaskPlan",
    "PathSelector",
    "ResNet",
    "SmartNetError",
    "SparsityMask",
    "Tape",
    "Tensor",
    "TrainConfig",
    "desk_resnet",
    "evaluate",
    "fgsm_attack",
    "generate_mask_pair",
    "grad_check",
    "lambda_sweep",
    "pgd_at_train",
    "pgd_attack",
    "project_linf",
    "smart_train",
]
