"""Minimal tensor engine: reverse-mode autodiff over the ops a 3-D ResNet needs."""

from proxysign.tensornet.gradcheck import grad_check, nudge_from_kinks
from proxysign.tensornet.ops import (
    add,
    batchnorm3d,
    conv3d,
    global_avg_pool,
    linear,
    maxpool3d,
    mul,
    relu,
    softmax,
    softmax_crossentropy,
    total,
)
from proxysign.tensornet.optim import ParamSet, sgd_update
from proxysign.tensornet.tensor import Tensor, no_grad

__all__ = [
    "ParamSet", "Tensor", "add", "batchnorm3d", "conv3d", "global_avg_pool", "grad_check",
    "linear", "maxpool3d", "mul", "no_grad", "nudge_from_kinks", "relu", "sgd_update",
    "softmax", "softmax_crossentropy", "total",
]
