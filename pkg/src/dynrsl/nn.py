"""Small layers built on the tensor core."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

INIT_SCALE = 0.02


class Module:
    """Anything holding parameters as Tensor attributes (or in sub-modules)."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = prefix + name
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None


def uniform_param(rng: np.random.Generator, shape, scale: float = INIT_SCALE) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int):
        self.weight = uniform_param(rng, (d_in, d_out))
        self.bias = uniform_param(rng, (d_out,))

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"expected feature width {self.d_in}, got input of shape {x.shape}")
        return T.add(T.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class MultiHeadAttention(Module):
    def __init__(self, rng: np.random.Generator, d: int, n_heads: int):
        if d % n_heads:
            raise ConfigError(f"width {d} is not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.qkv = Linear(rng, d, 3 * d)
        self.out = Linear(rng, d, d)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """``x``: (B, T, d). ``mask``: bool, broadcastable to (B, heads, T, T),
        True where a query may attend to a key."""
        b, t, d = x.shape
        h = self.n_heads
        dh = d // h
        qkv = T.transpose(T.reshape(self.qkv(x), (b, t, 3, h, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh))
        attn = T.softmax_rows(scores, 1.0, mask)
        ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
        return self.out(ctx)


class FeedForward(Module):
    def __init__(self, rng: np.random.Generator, d: int, hidden: int):
        self.fc1 = Linear(rng, d, hidden)
        self.fc2 = Linear(rng, hidden, d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer layer."""

    def __init__(self, rng: np.random.Generator, d: int, n_heads: int, ff_mult: int = 2):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(rng, d, n_heads)
        self.ln2 = LayerNorm(d)
        self.ff = FeedForward(rng, d, ff_mult * d)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x = T.add(x, self.attn(self.ln1(x), mask))
        return T.add(x, self.ff(self.ln2(x)))


def key_mask(valid: np.ndarray) -> np.ndarray:
    """(B, T) validity -> attention mask broadcastable to (B, heads, T, T)."""
    return valid[:, None, None, :]


def causal_mask(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t), dtype=bool))


def pad_stack(rows: list[Tensor]) -> tuple[Tensor, np.ndarray]:
    """Stack (T_i, d) tensors into (N, max T_i, d) with zero padding, plus the
    (N, max T_i) validity mask."""
    longest = max(r.shape[0] for r in rows)
    d = rows[0].shape[1]
    valid = np.zeros((len(rows), longest), dtype=bool)
    if not any(r.requires_grad for r in rows):
        out = np.zeros((len(rows), longest, d))
        for i, r in enumerate(rows):
            out[i, : r.shape[0]] = r.data
            valid[i, : r.shape[0]] = True
        return Tensor(out), valid
    padded = []
    for i, r in enumerate(rows):
        valid[i, : r.shape[0]] = True
        if r.shape[0] < longest:
            r = T.concat([r, Tensor(np.zeros((longest - r.shape[0], d)))], axis=0)
        padded.append(r)
    return T.stack(padded, axis=0), valid
