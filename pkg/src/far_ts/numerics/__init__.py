"""Tensor arithmetic, reverse-mode gradients, neural primitives and Adam."""
from .functional import (conv1d, cross_entropy, dropout, embedding, gelu, gru, linear,
                         rmsnorm, rope_rotate, silu, softmax, stop_gradient, straight_through)
from .gradcheck import grad_check
from .optim import Adam, AdamState, adam_update, clip_grad_norm
from .rng import make_rng, split
from .tensor import Tensor, as_tensor, concat, is_grad_enabled, masked_fill, matmul, no_grad, stack

__all__ = [
    "Adam", "AdamState", "Tensor", "adam_update", "as_tensor", "clip_grad_norm", "concat",
    "conv1d", "cross_entropy", "dropout", "embedding", "gelu", "grad_check", "gru",
    "is_grad_enabled", "linear", "make_rng", "masked_fill", "matmul", "no_grad", "rmsnorm",
    "rope_rotate", "silu", "softmax", "split", "stack", "stop_gradient", "straight_through",
]
