"""Parameter containers and layers built on the autodiff ops."""

from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def kaiming_init(shape, fan_in: int, rng: np.random.Generator) -> Tensor:
    """Draw weights from Normal(0, 2 / fan_in)."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Module:
    """Minimal module: parameters are Tensor attributes, children are Module
    attributes or lists of Modules, discovered in attribute order."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} does not match {p.shape}")
            p.data = arr.copy()

    def digest(self) -> str:
        """SHA-256 over parameter names and raw bytes."""
        h = hashlib.sha256()
        for k, p in self.named_parameters():
            h.update(k.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, kernel: int = 3, stride: int = 1, padding: int = 1):
        self.weight = kaiming_init((cout, cin, kernel, kernel), cin * kernel * kernel, rng)
        self.bias = zeros_param(cout)
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        # each output pixel sees one tap per input channel
        self.weight = kaiming_init((cin, cout, 2, 2), cin, rng)
        self.bias = zeros_param(cout)

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv_transpose2d(x, self.weight, self.bias)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, eps: float = 1e-5):
        if channels % groups:
            raise ValueError(f"{channels} channels not divisible by {groups} groups")
        self.gamma = ones_param(channels)
        self.beta = zeros_param(channels)
        self.groups = groups
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ad.group_norm(x, self.groups, self.gamma, self.beta, self.eps)


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator):
        self.weight = kaiming_init((fan_out, fan_in), fan_in, rng)
        self.bias = zeros_param(fan_out)

    def forward(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class SelfAttention(Module):
    def __init__(self, channels: int, groups: int, rng: np.random.Generator):
        self.norm = GroupNorm(groups, channels)
        self.wq = kaiming_init((channels, channels), channels, rng)
        self.wk = kaiming_init((channels, channels), channels, rng)
        self.wv = kaiming_init((channels, channels), channels, rng)
        self.wo = kaiming_init((channels, channels), channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        # pre-norm for the projections, residual on the raw input
        h = self.norm(x)
        att = ad.self_attention(h, self.wq, self.wk, self.wv, self.wo)
        return ad.add(x, ad.sub(att, h))


def group_count(channels: int, preferred: int = 8) -> int:
    g = min(preferred, channels)
    while channels % g:
        g -= 1
    return g
