"""Parameter containers and transformer layers built on :mod:`coverclip.autograd`."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor

INIT_STD = 0.02


def param(data) -> Tensor:
    return Tensor(np.array(data, dtype=ag.DTYPE), requires_grad=True)


def normal(rng: np.random.Generator, *shape, std: float = INIT_STD) -> Tensor:
    return param(rng.normal(0.0, std, size=shape))


class Module:
    """Minimal parameter tree. Children and parameters are discovered from
    attributes in assignment order, so naming is stable across runs."""

    def named_parameters(self, prefix: str = "", include_frozen: bool = False
                         ) -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and (value.requires_grad or include_frozen):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.", include_frozen)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.", include_frozen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.named_parameters(include_frozen=True))

    def load_state_dict(self, state, strict: bool = True) -> None:
        own = dict(self.named_parameters(include_frozen=True))
        if strict:
            missing = set(own) - set(state)
            unexpected = set(state) - set(own)
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={sorted(missing)}, unexpected={sorted(unexpected)}")
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name], dtype=ag.DTYPE)
            if arr.shape != p.shape:
                raise ag.ShapeError(f"{name}: checkpoint shape {arr.shape} vs model shape {p.shape}")
            p.data = arr.copy()

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True):
        # fan-in scaling keeps activations O(1) through the heads; a flat
        # 0.02 std starves the small classifier heads of signal
        self.weight = normal(rng, d_in, d_out, std=d_in ** -0.5)
        self.bias = param(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = ag.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = param(np.ones(d))
        self.beta = param(np.zeros(d))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ag.layernorm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    def __init__(self, rng, d_in: int, d_hidden: int, d_out: int):
        self.fc1 = Linear(rng, d_in, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d_out)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ag.gelu(self.fc1(x)))


class Attention(Module):
    """Multi-head attention with separate query/key/value/output projections."""

    def __init__(self, rng, d: int, heads: int):
        if d % heads:
            raise ag.ConfigError(f"width {d} is not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(rng, d, d)
        self.k = Linear(rng, d, d)
        self.v = Linear(rng, d, d)
        self.out = Linear(rng, d, d)

    def forward(self, x: Tensor, context: Tensor | None = None,
                key_mask: np.ndarray | None = None) -> Tensor:
        ctx = x if context is None else context
        return ag.multihead_attention(self.q(x), self.k(ctx), self.v(ctx), self.heads,
                                      key_mask=key_mask, out_weight=self.out.weight,
                                      out_bias=self.out.bias)


class TransformerBlock(Module):
    """Pre-norm self-attention block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, rng, d: int, heads: int, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(d)
        self.attn = Attention(rng, d, heads)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(rng, d, mlp_ratio * d, d)

    def forward(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.ln1(x), key_mask=key_mask)
        return x + self.mlp(self.ln2(x))


class CrossAttentionBlock(Module):
    """Self-attention over the query state, cross-attention into a read-only
    context sequence, then an MLP; each sublayer pre-normed and residual."""

    def __init__(self, rng, d: int, heads: int, mlp_ratio: int = 4):
        self.ln_self = LayerNorm(d)
        self.self_attn = Attention(rng, d, heads)
        self.ln_cross = LayerNorm(d)
        self.ln_ctx = LayerNorm(d)
        self.cross_attn = Attention(rng, d, heads)
        self.ln_mlp = LayerNorm(d)
        self.mlp = MLP(rng, d, mlp_ratio * d, d)

    def forward(self, x: Tensor, context: Tensor) -> Tensor:
        x = x + self.self_attn(self.ln_self(x))
        x = x + self.cross_attn(self.ln_cross(x), context=self.ln_ctx(context))
        return x + self.mlp(self.ln_mlp(x))
