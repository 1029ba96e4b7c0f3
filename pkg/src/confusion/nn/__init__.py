"""Differentiable numeric core: tape autodiff, MLPs, Gaussian heads, Adam."""
from .autodiff import Tape, Tensor, as_tensor, concat, stack, value
from .layers import (
    ConfigurationError,
    DiagGaussian,
    MlpParams,
    gaussian_head,
    kl_diag_gaussian,
    kl_to_standard_normal,
    mlp_forward,
    reparameterized_sample,
    split_head,
)
from .optim import AdamState, adam_step, clip_grad_norm, global_norm


def backward(loss, params: dict, tape: Tape) -> dict:
    """Gradient set of scalar ``loss`` for every tensor in ``params``."""
    return tape.gradient(loss, params)


def leaves(arrays: dict) -> dict:
    """Wrap named arrays as gradient-requiring tensors (sorted by name)."""
    return {k: Tensor(arrays[k], requires_grad=True) for k in sorted(arrays)}
