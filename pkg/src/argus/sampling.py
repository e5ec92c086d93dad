"""Count-min sketch and mixed (uniform + in-batch) negative sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .embedding import _bytes64

_U64 = np.uint64


def _keys(items) -> np.ndarray:
    """Integer ids pass through; anything else is hashed to 64 bits."""
    arr = np.asarray(items)
    if arr.dtype.kind in "iu":
        return arr.astype(np.uint64).reshape(-1)
    return np.array([_bytes64(str(x)) for x in arr.reshape(-1)], dtype=np.uint64)


class CountMinSketch:
    """``depth x width`` counters; row ``r`` hashes with a multiply-add-shift function.

    ``estimate`` is the minimum over rows, so it never undercounts.
    """

    def __init__(self, depth: int = 4, width: int = 1024, seed: int = 0):
        if depth < 1 or width < 1:
            raise ValueError("depth and width must be >= 1")
        self.depth, self.width = depth, width
        rng = np.random.default_rng([seed, 0x5EED])
        self.a = rng.integers(1, 2**63, depth, dtype=np.uint64) | _U64(1)
        self.b = rng.integers(0, 2**63, depth, dtype=np.uint64)
        self.counts = np.zeros((depth, width), dtype=np.int64)
        self.total = 0

    def _columns(self, keys: np.ndarray) -> np.ndarray:
        x = (keys ^ (keys >> _U64(32))) & _U64(0xFFFFFFFF)
        with np.errstate(over="ignore"):
            h = (self.a[:, None] * x[None, :] + self.b[:, None]) >> _U64(32)
        return ((h * _U64(self.width)) >> _U64(32)).astype(np.int64)   # (depth, n)

    def insert(self, item) -> None:
        self.insert_many([item])

    def insert_many(self, items) -> None:
        keys = _keys(items)
        if keys.size == 0:
            return
        cols = self._columns(keys)
        for r in range(self.depth):
            np.add.at(self.counts[r], cols[r], 1)
        self.total += keys.size

    def estimate(self, item) -> int:
        return int(self.estimate_many([item])[0])

    def estimate_many(self, items) -> np.ndarray:
        cols = self._columns(_keys(items))
        return self.counts[np.arange(self.depth)[:, None], cols].min(axis=0)

    def log_q(self, item) -> float:
        return float(self.log_q_many([item])[0])

    def log_q_many(self, items) -> np.ndarray:
        if self.total == 0:
            raise ValueError("log_q on an empty sketch")
        est = np.maximum(self.estimate_many(items), 1)
        return np.log(est / self.total)

    def state(self) -> dict[str, np.ndarray]:
        return {"counts": self.counts.copy(), "a": self.a.copy(), "b": self.b.copy(),
                "total": np.array(self.total)}

    @classmethod
    def from_state(cls, state: dict) -> "CountMinSketch":
        counts = np.asarray(state["counts"])
        sk = cls(counts.shape[0], counts.shape[1])
        sk.counts = counts.astype(np.int64).copy()
        sk.a = np.asarray(state["a"], dtype=np.uint64).copy()
        sk.b = np.asarray(state["b"], dtype=np.uint64).copy()
        sk.total = int(state["total"])
        return sk


@dataclass
class NegativeBatch:
    """Negatives shared by every query of a batch.

    ``source`` is the flat query position an in-batch negative was taken
    from (-1 for uniform draws); that query must not see it.
    """

    items: np.ndarray
    log_q: np.ndarray
    in_batch: np.ndarray
    source: np.ndarray

    def __len__(self) -> int:
        return len(self.items)

    def exclusion_mask(self, n_queries: int) -> np.ndarray:
        """(n_queries, N) True where negative n came from query q's own positive."""
        return self.source[None, :] == np.arange(n_queries)[:, None]


def draw_negatives(positives: np.ndarray, n_catalog: int, n_uniform: int, n_inbatch: int,
                   rng: np.random.Generator, sketch: CountMinSketch | None = None) -> NegativeBatch:
    """Uniform catalog draws plus draws from other positions' positives.

    ``positives`` are the catalog indices of the batch's target items, one per
    query position.  Uniform negatives get the exact ``log(1/n_catalog)``;
    in-batch negatives get the sketch estimate of the positive stream.
    """
    if n_catalog < 1:
        raise ValueError("empty catalog")
    positives = np.asarray(positives, dtype=np.int64)
    uni = rng.integers(0, n_catalog, n_uniform)
    if n_inbatch > 0:
        if len(positives) == 0:
            raise ValueError("in-batch negatives need at least one positive")
        src = rng.choice(len(positives), size=n_inbatch, replace=n_inbatch > len(positives))
        inb = positives[src]
        if sketch is None or sketch.total == 0:
            counts = np.bincount(positives, minlength=n_catalog)
            inb_logq = np.log(counts[inb] / len(positives))
        else:
            inb_logq = sketch.log_q_many(inb)
    else:
        src = np.zeros(0, dtype=np.int64)
        inb = np.zeros(0, dtype=np.int64)
        inb_logq = np.zeros(0)
    return NegativeBatch(
        items=np.concatenate([uni, inb]),
        log_q=np.concatenate([np.full(n_uniform, -math.log(n_catalog)), inb_logq]),
        in_batch=np.concatenate([np.zeros(n_uniform, bool), np.ones(n_inbatch, bool)]),
        source=np.concatenate([np.full(n_uniform, -1), src]),
    )
