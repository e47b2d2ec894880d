"""Parameterized building blocks on top of :mod:`stormlatent.autodiff`."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Container that discovers parameters from its attributes."""

    def __init__(self):
        self.training = True

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{prefix}{name}.{i}", item
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{key}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {state[name].shape} vs {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def _children(self):
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                yield from (v for v in value if isinstance(v, Module))
            elif isinstance(value, dict):
                yield from (v for v in value.values() if isinstance(v, Module))

    def train(self, mode: bool = True):
        self.training = mode
        for child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> Tensor:
    bound = gain / math.sqrt(fan_in)
    return ad.parameter(rng.uniform(-bound, bound, size=shape))


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng, stride: int = 1, gain: float = 1.0):
        super().__init__()
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.weight = uniform_fan_in(rng, (cout, cin, k, k), cin * k * k, gain)
        self.bias = ad.parameter(np.zeros(cout))

    def forward(self, x):
        if x.shape[1] != self.cin:
            raise ValueError(f"expected {self.cin} input channels, got {x.shape[1]}")
        return ad.conv2d(x, self.weight, self.bias, self.stride)


class Conv3dCollapse(Module):
    """Convolution whose kernel spans the whole (length-2) step axis.

    Input (N, C, S, H, W) becomes (N, cout, H, W); spatial padding is "same".
    """

    def __init__(self, cin: int, steps: int, cout: int, k: int, rng):
        super().__init__()
        self.cin, self.steps = cin, steps
        self.weight = uniform_fan_in(rng, (cout, cin, steps, k, k), cin * steps * k * k)
        self.bias = ad.parameter(np.zeros(cout))

    def forward(self, x):
        n, c, s, h, w = x.shape
        if (c, s) != (self.cin, self.steps):
            raise ValueError(f"expected (C, S)=({self.cin}, {self.steps}), got ({c}, {s})")
        o = self.weight.shape[0]
        k = self.weight.shape[-1]
        w2 = ad.reshape(self.weight, (o, c * s, k, k))
        return ad.conv2d(ad.reshape(x, (n, c * s, h, w)), w2, self.bias)


class Linear(Module):
    def __init__(self, din: int, dout: int, rng, gain: float = 1.0):
        super().__init__()
        self.weight = uniform_fan_in(rng, (din, dout), din, gain)
        self.bias = ad.parameter(np.zeros(dout))

    def forward(self, x):
        return ad.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gamma = ad.parameter(np.ones(dim))
        self.beta = ad.parameter(np.zeros(dim))

    def forward(self, x):
        return ad.layer_norm(x, self.gamma, self.beta)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 2):
        super().__init__()
        self.groups = groups
        self.gamma = ad.parameter(np.ones(channels))
        self.beta = ad.parameter(np.zeros(channels))

    def forward(self, x):
        return ad.group_norm(x, self.groups, self.gamma, self.beta)


class ConvBlock(Module):
    """conv -> GroupNorm(2 groups, 1 for odd widths) -> SiLU."""

    def __init__(self, channels: int, k: int, rng):
        super().__init__()
        self.conv = Conv2d(channels, channels, k, rng)
        self.norm = GroupNorm(channels, 2 if channels % 2 == 0 else 1)

    def forward(self, x):
        return ad.silu(self.norm(self.conv(x)))


class MultiScaleBlock(Module):
    """x + Conv1x1(concat(ConvBlock3x3(x), ConvBlock5x5(x)))."""

    def __init__(self, channels: int, rng):
        super().__init__()
        self.channels = channels
        self.branch3 = ConvBlock(channels, 3, rng)
        self.branch5 = ConvBlock(channels, 5, rng)
        self.merge = Conv2d(2 * channels, channels, 1, rng)

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"multi-scale block built for {self.channels} channels, got {x.shape[1]}")
        return x + self.merge(ad.concat([self.branch3(x), self.branch5(x)], axis=1))


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng, dropout: float = 0.0):
        super().__init__()
        if dim % heads:
            raise ValueError("attention width must divide evenly among heads")
        self.dim, self.heads, self.p = dim, heads, dropout
        self.qkv = Linear(dim, 3 * dim, rng)
        self.out = Linear(dim, dim, rng)
        self.last_weights: np.ndarray | None = None

    def forward(self, x, rng=None):
        n, t, d = x.shape
        hd = d // self.heads
        qkv = ad.reshape(self.qkv(x), (n, t, 3, self.heads, hd))
        qkv = ad.transpose(qkv, (2, 0, 3, 1, 4))  # 3, n, heads, t, hd
        q, k, v = (ad.take(qkv, i) for i in range(3))
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(hd))
        attn = ad.softmax(scores, axis=-1)
        self.last_weights = attn.data
        ctx = ad.matmul(attn, v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (n, t, d))
        return ad.dropout(self.out(ctx), self.p, rng, self.training)


class MLP(Module):
    """Two-layer feed-forward network with GELU."""

    def __init__(self, din: int, hidden: int, dout: int, rng, dropout: float = 0.0):
        super().__init__()
        self.fc1 = Linear(din, hidden, rng)
        self.fc2 = Linear(hidden, dout, rng)
        self.p = dropout

    def forward(self, x, rng=None):
        return ad.dropout(self.fc2(ad.gelu(self.fc1(x))), self.p, rng, self.training)


def to_patches(x: Tensor, p: int) -> Tensor:
    """(N, C, H, W) -> (N, H/p * W/p, p*p*C) tokens."""
    n, c, h, w = x.shape
    if h % p or w % p:
        raise ValueError(f"spatial extent {h}x{w} not divisible by patch size {p}")
    t = ad.reshape(x, (n, c, h // p, p, w // p, p))
    t = ad.transpose(t, (0, 2, 4, 3, 5, 1))
    return ad.reshape(t, (n, (h // p) * (w // p), p * p * c))


def from_patches(tokens: Tensor, p: int, c: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`to_patches`."""
    n = tokens.shape[0]
    t = ad.reshape(tokens, (n, h // p, w // p, p, p, c))
    t = ad.transpose(t, (0, 5, 1, 3, 2, 4))
    return ad.reshape(t, (n, c, h, w))
