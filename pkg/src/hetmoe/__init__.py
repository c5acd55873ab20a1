"""Heterogeneous mixture-of-experts: zero-computation experts, a
pathway-aware top-k router, capacity-constrained dispatch, a tiny trainable
decoder, and an analytical expert-parallel cost simulator."""

from .backend import active_backend, set_backend
from .experts import ExpertKind, ExpertSpec, make_expert, parameter_count
from .layer import (
    DispatchPlan,
    LayerConfig,
    LoadStats,
    MoELayer,
    capacity,
    constant_expert_count,
    dispatch,
    load_balance_loss,
    total_loss,
)
from .model import LanguageModel, ModelConfig, expected_parameter_count
from .router import RouterOutput, RouterParams, init_router, route, vanilla_route
from .simulator import (
    CostModel,
    CostReport,
    Placement,
    complexity_ratio,
    predicted_speedup,
    ratio_for,
    simulate,
    tau_sweep,
)
from .tensor import DimensionError, NumericalError, Tape, Tensor
from .training import TrainConfig, Vocab, evaluate_perplexity, train

__version__ = "0.1.0"

__all__ = [
    "ExpertKind",
    "ExpertSpec",
    "make_expert",
    "parameter_count",
    "DispatchPlan",
    "LayerConfig",
    "LoadStats",
    "MoELayer",
    "capacity",
    "constant_expert_count",
    "dispatch",
    "load_balance_loss",
    "total_loss",
    "LanguageModel",
    "ModelConfig",
    "expected_parameter_count",
    "RouterOutput",
    "RouterParams",
    "init_router",
    "route",
    "vanilla_route",
    "CostModel",
    "CostReport",
    "Placement",
    "complexity_ratio",
    "predicted_speedup",
    "ratio_for",
    "simulate",
    "tau_sweep",
    "DimensionError",
    "NumericalError",
    "Tape",
    "Tensor",
    "TrainConfig",
    "Vocab",
    "evaluate_perplexity",
    "train",
    "active_backend",
    "set_backend",
    "__version__",
]
