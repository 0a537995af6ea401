"""Parameter containers and residual building blocks."""

from __future__ import annotations

import numpy as np

from ..tensor_core import ConvSpec, Tensor, add, channel_affine, conv2d, max_pool, msra_init, relu


class Module:
    """Attribute-registered parameter container.

    Tensors with ``requires_grad`` and sub-modules (also inside lists) found in
    ``__dict__`` are parameters/children, in definition order.
    """

    def named_parameters(self, prefix: str = ""):
        for name, value in self.__dict__.items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv(Module):
    def __init__(self, cin, cout, kernel, stride=1, padding=None, bias=True, *, rng, dtype):
        padding = kernel // 2 if padding is None else padding
        self.spec = ConvSpec(cin, cout, kernel, stride, padding)
        self.weight = msra_init((cout, cin, kernel, kernel), cin * kernel * kernel, rng, dtype)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.spec)


class Affine(Module):
    """Per-channel scale and shift standing where batch norm would sit."""

    def __init__(self, channels, scale=1.0, shift=True, *, dtype):
        self.scale = Tensor(np.full(channels, scale, dtype=dtype), requires_grad=True)
        self.shift = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True) if shift else None

    def forward(self, x):
        return channel_affine(x, self.scale, self.shift)


class BasicBlock(Module):
    def __init__(self, cin, cout, stride=1, *, shift=True, residual_scale=0.0, rng, dtype):
        self.conv1 = Conv(cin, cout, 3, stride, bias=False, rng=rng, dtype=dtype)
        self.aff1 = Affine(cout, shift=shift, dtype=dtype)
        self.conv2 = Conv(cout, cout, 3, 1, bias=False, rng=rng, dtype=dtype)
        self.aff2 = Affine(cout, scale=residual_scale, shift=shift, dtype=dtype)
        self.proj = None
        if stride != 1 or cin != cout:
            self.proj = Conv(cin, cout, 1, stride, padding=0, bias=False, rng=rng, dtype=dtype)
            self.proj_aff = Affine(cout, shift=shift, dtype=dtype)

    def forward(self, x):
        y = relu(self.aff1(self.conv1(x)))
        y = self.aff2(self.conv2(y))
        short = x if self.proj is None else self.proj_aff(self.proj(x))
        return relu(add(y, short))


class Bottleneck(Module):
    """1x1 reduce, 3x3 (strided), 1x1 expand; used at full paper widths."""

    def __init__(self, cin, cout, stride=1, *, shift=True, residual_scale=0.0, rng, dtype):
        mid = max(1, cout // 4)
        self.conv1 = Conv(cin, mid, 1, 1, padding=0, bias=False, rng=rng, dtype=dtype)
        self.aff1 = Affine(mid, shift=shift, dtype=dtype)
        self.conv2 = Conv(mid, mid, 3, stride, bias=False, rng=rng, dtype=dtype)
        self.aff2 = Affine(mid, shift=shift, dtype=dtype)
        self.conv3 = Conv(mid, cout, 1, 1, padding=0, bias=False, rng=rng, dtype=dtype)
        self.aff3 = Affine(cout, scale=residual_scale, shift=shift, dtype=dtype)
        self.proj = None
        if stride != 1 or cin != cout:
            self.proj = Conv(cin, cout, 1, stride, padding=0, bias=False, rng=rng, dtype=dtype)
            self.proj_aff = Affine(cout, shift=shift, dtype=dtype)

    def forward(self, x):
        y = relu(self.aff1(self.conv1(x)))
        y = relu(self.aff2(self.conv2(y)))
        y = self.aff3(self.conv3(y))
        short = x if self.proj is None else self.proj_aff(self.proj(x))
        return relu(add(y, short))


class Stem(Module):
    """7x7 stride-2 conv, affine, relu, 3x3 stride-2 max pool."""

    def __init__(self, cout, *, shift=True, rng, dtype):
        self.conv = Conv(3, cout, 7, 2, padding=3, bias=False, rng=rng, dtype=dtype)
        self.aff = Affine(cout, shift=shift, dtype=dtype)

    def forward(self, x):
        return max_pool(relu(self.aff(self.conv(x))), 3, 2, 1)
