"""Minimal reverse-mode differentiation on numpy arrays.

Example::

    from tam import autodiff as ad
    w = ad.DiffValue([1.0, -2.0], requires_grad=True)
    loss = ad.sum(ad.mul(w, w))
    loss.backward()
    w.grad  # array([ 2., -4.])
"""

from .checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from .gradcheck import grad_check, numeric_grad
from .optim import Adam, AdamState, ParamSet, adam_step, cosine_lr
from .tensor import *  # noqa: F401,F403
from .tensor import __all__ as _tensor_all

__all__ = list(_tensor_all) + [
    "CheckpointFormatError",
    "load_checkpoint",
    "save_checkpoint",
    "grad_check",
    "numeric_grad",
    "Adam",
    "AdamState",
    "ParamSet",
    "adam_step",
    "cosine_lr",
]
