"""Parameter registry and momentum SGD."""

from __future__ import annotations

import numpy as np

from proxysign.tensornet.tensor import Tensor


class ParamSet:
    """Named trainable tensors with their momentum buffers."""

    def __init__(self, params: dict[str, Tensor]):
        self.params = dict(params)
        self.momentum = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def __getitem__(self, name):
        return self.params[name]

    def grads(self):
        return {name: p.grad for name, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def sgd_update(params: ParamSet, grads, lr, momentum=0.9, weight_decay=1e-4) -> ParamSet:
    """v <- momentum*v + grad + weight_decay*param; param <- param - lr*v (in place)."""
    for name, p in params.params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        v = params.momentum[name]
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p.data
        p.data -= lr * v
    return params
