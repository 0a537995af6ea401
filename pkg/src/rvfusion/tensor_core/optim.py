"""SGD with momentum/weight decay and MSRA initialization."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


def msra_init(shape, fan_in: int, rng: np.random.Generator, dtype=np.float64) -> Tensor:
    """Normal(0, sqrt(2 / fan_in)) weights as a trainable tensor."""
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    std = math.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def sgd_step(params, grads, lr: float, momentum: float = 0.0, weight_decay: float = 0.0,
             state: dict | None = None) -> dict:
    """In-place update: v <- m*v + g + wd*p ; p <- p - lr*v.

    ``params`` and ``grads`` are parallel sequences (grads may hold None for
    parameters that received no gradient). ``state`` maps parameter index to
    its velocity buffer and is returned for the next call.
    """
    state = {} if state is None else state
    for i, (p, g) in enumerate(zip(params, grads)):
        data = p.data if isinstance(p, Tensor) else p
        if g is None:
            g = np.zeros_like(data)
        step = g + weight_decay * data if weight_decay else np.array(g, copy=True)
        if momentum:
            buf = state.get(i)
            if buf is None:
                buf = step
            else:
                buf = momentum * buf + step
            state[i] = buf
            step = buf
        data -= (lr * step).astype(data.dtype, copy=False)
    return state


class SGD:
    """Thin stateful wrapper over :func:`sgd_step` for a fixed parameter list."""

    def __init__(self, params, lr=0.001, momentum=0.9, weight_decay=1e-4):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state: dict = {}

    def step(self):
        grads = [p.grad for p in self.params]
        self.state = sgd_step(self.params, grads, self.lr, self.momentum, self.weight_decay, self.state)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
