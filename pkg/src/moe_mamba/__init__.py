"""Selective state-space models combined with switch-routed experts, at desk
scale, on a small numpy reverse-mode autodiff core."""

from .analysis import LevelNotAttained, LossCurve, speedup_at
from .data import decode_bytes, generate_demo_corpus, sample_batch, tokenize_bytes
from .mamba import MambaConfig, MambaLayer, mamba_param_count, selective_scan
from .model import BlockSpec, Model, ModelSpec, build_model, enumerate_variants
from .moe import RoutingDecision, SwitchConfig, SwitchMoELayer, apply_capacity, load_balance_loss, route
from .optim import AdamW, cosine_lr
from .params import ParamReport, count_params, plan_ratio
from .tensor import Tensor, no_grad
from .training import RunLog, TrainConfig, TrainingDiverged, evaluate, load_config, restore_model, train

__all__ = [
    "AdamW", "BlockSpec", "LevelNotAttained", "LossCurve", "MambaConfig",
    "MambaLayer", "Model", "ModelSpec", "ParamReport", "RoutingDecision",
    "RunLog", "SwitchConfig", "SwitchMoELayer", "Tensor", "TrainConfig",
    "TrainingDiverged", "apply_capacity", "build_model", "cosine_lr",
    "count_params", "decode_bytes", "enumerate_variants", "evaluate",
    "generate_demo_corpus", "load_balance_loss", "load_config",
    "mamba_param_count", "no_grad", "plan_ratio", "restore_model", "route",
    "sample_batch", "selective_scan", "speedup_at", "tokenize_bytes", "train",
]
