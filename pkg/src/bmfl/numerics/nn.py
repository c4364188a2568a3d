"""Parameter containers and the standard transformer building blocks."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from bmfl.errors import DimensionError, InputError
from bmfl.numerics.functional import multi_head_attention
from bmfl.numerics.tensor import Tensor, gelu, layer_norm


def make_rng(seed) -> np.random.Generator:
    """PCG64 generator; ``seed`` may be an int or a SeedSequence."""
    return np.random.Generator(np.random.PCG64(seed))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Derive ``n`` independent child generators (splittable stream)."""
    return list(rng.spawn(n))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std²) truncated to ±2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(np.float32)


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad)


class Module:
    """Minimal parameter registry: attributes that are Parameters, Modules or lists of Modules."""

    frozen = False

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[tuple[str, Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        return self

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = True
        self.frozen = False
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state, strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = set(own) - set(state)
            unexpected = set(state) - set(own)
            if missing or unexpected:
                raise InputError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, value in state.items():
            if name not in own:
                continue
            p = own[name]
            value = np.asarray(value)
            if value.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data = value.astype(p.data.dtype, copy=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, std: float = 0.02):
        self.weight = Parameter(trunc_normal(rng, (d_in, d_out), std))
        self.bias = Parameter(np.zeros(d_out, np.float32)) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"Linear expects last dim {self.d_in}, got input {x.shape}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(d, np.float32))
        self.bias = Parameter(np.zeros(d, np.float32))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        r1, r2 = split_rng(rng, 2)
        self.fc1 = Linear(d, hidden, r1)
        self.fc2 = Linear(hidden, d, r2)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class Attention(Module):
    """Multi-head attention with separate query/key/value/output projections."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, d_kv: int | None = None):
        if d % heads:
            raise DimensionError(f"width {d} not divisible by {heads} heads")
        rq, rk, rv, ro = split_rng(rng, 4)
        d_kv = d if d_kv is None else d_kv
        self.q = Linear(d, d, rq)
        self.k = Linear(d_kv, d, rk)
        self.v = Linear(d_kv, d, rv)
        self.out = Linear(d, d, ro)
        self.heads = heads

    def __call__(self, x: Tensor, context: Tensor | None = None) -> Tensor:
        context = x if context is None else context
        y = multi_head_attention(self.q(x), self.k(context), self.v(context), self.heads)
        return self.out(y)


class EncoderBlock(Module):
    """Pre-norm transformer encoder block: x + attn(LN x), then x + mlp(LN x)."""

    def __init__(self, d: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        ra, rm = split_rng(rng, 2)
        self.norm1 = LayerNorm(d)
        self.attn = Attention(d, heads, ra)
        self.norm2 = LayerNorm(d)
        self.mlp = MLP(d, int(d * mlp_ratio), rm)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class DecoderBlock(Module):
    """Pre-norm decoder block: query self-attention, cross-attention to memory, MLP."""

    def __init__(self, d: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        rs, rc, rm = split_rng(rng, 3)
        self.norm1 = LayerNorm(d)
        self.self_attn = Attention(d, heads, rs)
        self.norm2 = LayerNorm(d)
        self.cross_attn = Attention(d, heads, rc)
        self.norm3 = LayerNorm(d)
        self.mlp = MLP(d, int(d * mlp_ratio), rm)

    def __call__(self, queries: Tensor, memory: Tensor) -> Tensor:
        x = queries + self.self_attn(self.norm1(queries))
        x = x + self.cross_attn(self.norm2(x), memory)
        return x + self.mlp(self.norm3(x))
