"""Causal pre-norm transformer over merged interaction embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import DropoutStream, Tensor
from .nn import LayerNorm, Linear, Module

NEG_INF = -1e9


@dataclass
class EncoderConfig:
    n_layers: int = 2
    width: int = 64
    n_heads: int = 4
    ff_mult: int = 4
    dropout: float = 0.1
    max_len: int = 512

    def __post_init__(self):
        if self.width % self.n_heads:
            raise ValueError(f"width {self.width} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @classmethod
    def named(cls, name: str, **kw) -> "EncoderConfig":
        """Desk-scale configurations: ``mini-desk`` = L2 H64, ``small-desk`` = L4 H128."""
        shapes = {"mini-desk": (2, 64, 4), "small-desk": (4, 128, 4)}
        layers, width, heads = shapes[name]
        return cls(n_layers=layers, width=width, n_heads=heads, **kw)


def causal_mask(T: int) -> np.ndarray:
    """Additive mask: position t attends to 0..t."""
    return np.triu(np.full((T, T), NEG_INF), k=1)


class SelfAttention(Module):
    def __init__(self, width: int, n_heads: int, rng: np.random.Generator):
        self.qkv = Linear(width, 3 * width, rng)
        self.out = Linear(width, width, rng, std=1.0 / np.sqrt(width) / 2)
        self.n_heads = n_heads

    def __call__(self, x: Tensor) -> Tensor:
        B, T, H = x.shape
        nh, hd = self.n_heads, H // self.n_heads
        qkv = ag.reshape(self.qkv(x), (B, T, 3, nh, hd))
        qkv = ag.transpose(qkv, (2, 0, 3, 1, 4))          # 3, B, nh, T, hd
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ag.matmul(q, ag.swap_last(k)) * (1.0 / np.sqrt(hd)) + causal_mask(T).astype(x.data.dtype)
        ctx = ag.matmul(ag.softmax(scores, axis=-1), v)   # B, nh, T, hd
        ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (B, T, H))
        return self.out(ctx)


class Block(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.ln1 = LayerNorm(cfg.width)
        self.attn = SelfAttention(cfg.width, cfg.n_heads, rng)
        self.ln2 = LayerNorm(cfg.width)
        self.fc1 = Linear(cfg.width, cfg.ff_mult * cfg.width, rng)
        self.fc2 = Linear(cfg.ff_mult * cfg.width, cfg.width, rng,
                          std=1.0 / np.sqrt(cfg.ff_mult * cfg.width) / 2)
        self.p = cfg.dropout

    def __call__(self, x: Tensor, train: bool, stream: DropoutStream | None) -> Tensor:
        x = x + ag.dropout(self.attn(self.ln1(x)), self.p, train, stream)
        ff = self.fc2(ag.gelu(self.fc1(self.ln2(x))))
        return x + ag.dropout(ff, self.p, train, stream)


class CausalEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.blocks = [Block(cfg, rng) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(cfg.width)

    def __call__(self, x: Tensor, train: bool = False, stream: DropoutStream | None = None) -> Tensor:
        """``x``: (B, T, H) merged embeddings -> hidden states h_1..h_T of the same shape."""
        if x.ndim == 2:
            return self(ag.reshape(x, (1,) + x.shape), train, stream)[0]
        T = x.shape[1]
        if T == 0:
            return x
        if T > self.cfg.max_len:
            raise ValueError(f"sequence length {T} > max_len {self.cfg.max_len}")
        x = ag.dropout(x, self.cfg.dropout, train, stream)
        for block in self.blocks:
            x = block(x, train, stream)
        return self.ln_f(x)
