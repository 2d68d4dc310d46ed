"""Differentiable kernels and policy architectures."""

from . import autodiff
from .autodiff import NumericError, Tensor
from .policies import (
    ConfigError,
    PolicyConfig,
    PolicyParams,
    ShapeError,
    UnsupportedVariantError,
    gnn_forward,
    init_params,
    mlp_forward,
    parameter_count,
    policy_action,
    tokenized_head_forward,
    transformer_forward,
)

__all__ = [
    "autodiff", "NumericError", "Tensor", "ConfigError", "PolicyConfig",
    "PolicyParams", "ShapeError", "UnsupportedVariantError", "gnn_forward",
    "init_params", "mlp_forward", "parameter_count", "policy_action",
    "tokenized_head_forward", "transformer_forward",
]
