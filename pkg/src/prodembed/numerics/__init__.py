"""Numerical kernels, reverse-mode tape, Adam, and gradient checking."""
from . import tape as ops
from .gradcheck import grad_check
from .kernels import log_softmax, masked_cross_entropy, softmax, truncated_normal
from .optim import AdamState, adam_step
from .tape import GradTape, Var

__all__ = [
    "AdamState",
    "GradTape",
    "Var",
    "adam_step",
    "grad_check",
    "log_softmax",
    "masked_cross_entropy",
    "ops",
    "softmax",
    "truncated_normal",
]
