"""Unified hashed embeddings, interaction merging, and the two query heads.

All categorical features share one ``M x row_dim`` table.  A feature value is
hashed ``n_lookups`` times with per-feature seeds; the looked-up rows are
concatenated.  Item ids use three lookups, small categoricals one.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import FEEDBACK_SCHEMA
from .nn import MLP, Linear, Module, normal

MASK64 = (1 << 64) - 1

ITEM_LOOKUPS = 3
CONTEXT_FEATURES = ("surface", "device")
FEEDBACK_FEATURES = tuple(name for name, _ in FEEDBACK_SCHEMA)


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def _bytes64(raw: str | bytes) -> int:
    if isinstance(raw, str):
        raw = raw.encode("utf-8")
    return int.from_bytes(hashlib.blake2b(raw, digest_size=8).digest(), "little")


def lookup_seeds(feature: str, n_lookups: int, base_seed: int) -> list[int]:
    f = _bytes64(feature)
    return [splitmix64(f ^ splitmix64((base_seed * 0x100000001B3 + j) & MASK64)) for j in range(n_lookups)]


def hash_rows(feature: str, raw_id, n_lookups: int, n_rows: int, base_seed: int = 0) -> list[int]:
    """Table rows for one raw value; a pure function of (feature, id, seed)."""
    key = _bytes64(str(raw_id))
    return [splitmix64(key ^ s) % n_rows for s in lookup_seeds(feature, n_lookups, base_seed)]


@dataclass
class EmbeddingConfig:
    n_rows: int = 1 << 14
    row_dim: int = 16
    item_lookups: int = ITEM_LOOKUPS
    hash_seed: int = 0

    @property
    def item_width(self) -> int:
        return self.item_lookups * self.row_dim

    @property
    def context_width(self) -> int:
        return len(CONTEXT_FEATURES) * self.row_dim

    @property
    def feedback_width(self) -> int:
        return len(FEEDBACK_FEATURES) * self.row_dim


@dataclass
class FeatureHasher:
    """Maps catalog / category values of one dataset to table rows."""

    config: EmbeddingConfig
    item_ids: list[str]
    surfaces: tuple[str, ...]
    devices: tuple[str, ...]
    item_rows: np.ndarray = field(init=False)       # (n_items, item_lookups)
    surface_rows: np.ndarray = field(init=False)
    device_rows: np.ndarray = field(init=False)
    feedback_rows: list[np.ndarray] = field(init=False)

    def __post_init__(self):
        c = self.config
        self.item_rows = np.array(
            [hash_rows("item_id", i, c.item_lookups, c.n_rows, c.hash_seed) for i in self.item_ids],
            dtype=np.int64).reshape(len(self.item_ids), c.item_lookups)
        self.surface_rows = np.array([hash_rows("surface", s, 1, c.n_rows, c.hash_seed)[0]
                                      for s in self.surfaces], dtype=np.int64)
        self.device_rows = np.array([hash_rows("device", d, 1, c.n_rows, c.hash_seed)[0]
                                     for d in self.devices], dtype=np.int64)
        self.feedback_rows = [
            np.array([hash_rows(name, v, 1, c.n_rows, c.hash_seed)[0] for v in range(n)], dtype=np.int64)
            for name, n in FEEDBACK_SCHEMA
        ]

    def rows_for_new_item(self, raw_id: str) -> np.ndarray:
        """Out-of-catalog ids still hash to valid rows."""
        c = self.config
        return np.array(hash_rows("item_id", raw_id, c.item_lookups, c.n_rows, c.hash_seed))

    def context_rows(self, surface: np.ndarray, device: np.ndarray) -> np.ndarray:
        return np.stack([self.surface_rows[surface], self.device_rows[device]], axis=-1)

    def feedback_rows_for(self, feedback: np.ndarray) -> np.ndarray:
        return np.stack([rows[feedback[..., k]] for k, rows in enumerate(self.feedback_rows)], axis=-1)


class UnifiedEmbeddingTable(Module):
    def __init__(self, config: EmbeddingConfig, rng: np.random.Generator):
        self.config = config
        self.table = ag.parameter(normal(rng, (config.n_rows, config.row_dim), 0.1), name="table")

    def __call__(self, rows: np.ndarray) -> Tensor:
        """Gather ``rows[..., j]`` and concatenate the lookups along the last axis."""
        rows = np.asarray(rows)
        out = ag.embedding_gather(self.table, rows)
        return ag.reshape(out, rows.shape[:-1] + (rows.shape[-1] * self.config.row_dim,))


class InteractionEmbedder(Module):
    """Concat(context, item, feedback) -> linear -> model width, plus a position row."""

    def __init__(self, config: EmbeddingConfig, width: int, max_len: int, rng: np.random.Generator):
        n_in = config.context_width + config.item_width + config.feedback_width
        self.proj = Linear(n_in, width, rng)
        self.positions = ag.parameter(normal(rng, (max_len, width), 0.02), name="positions")
        self.max_len = max_len

    def __call__(self, ctx: Tensor, item: Tensor, feedback: Tensor,
                 positions: np.ndarray | None = None) -> Tensor:
        T = ctx.shape[-2]
        if positions is None:
            positions = np.arange(T)
        if T > self.max_len or (len(positions) and positions.max() >= self.max_len):
            raise ValueError(f"position >= max_len {self.max_len}")
        merged = self.proj(ag.concat([ctx, item, feedback], axis=-1))
        return merged + ag.take(self.positions, positions)


class MergeHeads(Module):
    """Query heads over the previous encoder state.

    ``context_query`` sees (h_{t-1}, c_t); ``item_query`` additionally sees the
    current item.  Neither sees the current feedback.
    """

    def __init__(self, config: EmbeddingConfig, width: int, out_dim: int, rng: np.random.Generator):
        self.context_mlp = MLP(width + config.context_width, width, out_dim, rng)
        self.item_mlp = MLP(width + config.context_width + config.item_width, width, out_dim, rng)

    def context_query(self, h_prev: Tensor, ctx: Tensor) -> Tensor:
        return self.context_mlp(ag.concat([h_prev, ctx], axis=-1))

    def item_query(self, h_prev: Tensor, ctx: Tensor, item: Tensor) -> Tensor:
        return self.item_mlp(ag.concat([h_prev, ctx, item], axis=-1))


class ItemTower(Module):
    """Item id -> catalog embedding from the shared table rows."""

    def __init__(self, config: EmbeddingConfig, out_dim: int, rng: np.random.Generator):
        self.proj = Linear(config.item_width, out_dim, rng)

    def __call__(self, item_features: Tensor) -> Tensor:
        return self.proj(item_features)
