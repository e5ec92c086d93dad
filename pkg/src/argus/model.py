"""The full pre-training model and batching of interaction chunks."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import DropoutStream, Tensor
from .data import FACTOR_SIZES, UserSequence
from .embedding import (EmbeddingConfig, FeatureHasher, InteractionEmbedder, ItemTower, MergeHeads,
                        UnifiedEmbeddingTable)
from .encoder import CausalEncoder, EncoderConfig
from .nn import Linear, Module, normal


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    out_dim: int = 64
    tau_init: float = float(np.log(0.05))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(encoder=EncoderConfig(**d["encoder"]), embedding=EmbeddingConfig(**d["embedding"]),
                   out_dim=d["out_dim"], tau_init=d["tau_init"])


class Temperature(Module):
    """Trainable tau; the similarity divides by e^tau clamped to [0.01, 100]."""

    LO, HI = 0.01, 100.0

    def __init__(self, tau: float = 0.0):
        self.tau = ag.parameter(np.array(tau), name="tau")

    def scale(self) -> Tensor:
        return ag.clip(ag.exp(self.tau), self.LO, self.HI)


class FeedbackHeads(Module):
    """One linear classifier per feedback factor over the item-aware query.

    Weights start small so an untrained model predicts roughly its bias,
    which :meth:`set_prior` can point at the empirical class frequencies.
    """

    INIT_STD = 0.01

    def __init__(self, in_dim: int, rng: np.random.Generator, sizes=FACTOR_SIZES):
        self.sizes = tuple(sizes)
        self.heads = [Linear(in_dim, n, rng, std=self.INIT_STD) for n in self.sizes]

    def __call__(self, x: Tensor) -> list[Tensor]:
        return [h(x) for h in self.heads]

    def set_prior(self, freqs) -> None:
        """Biases to centred log class frequencies (floored at 1e-6)."""
        for head, f in zip(self.heads, freqs):
            logp = np.log(np.maximum(np.asarray(f, dtype=np.float64), 1e-6))
            head.bias.data[:] = logp - logp.mean()


@dataclass
class Batch:
    """Right-padded (B, T) arrays for a list of chunks."""

    items: np.ndarray          # catalog index
    item_rows: np.ndarray      # (B, T, item_lookups) table rows
    ctx_rows: np.ndarray       # (B, T, 2)
    fb_rows: np.ndarray        # (B, T, 3)
    feedback: np.ndarray       # (B, T, 3) class indices
    surface: np.ndarray
    ts: np.ndarray
    impression: np.ndarray
    valid: np.ndarray          # bool, real (non-pad) positions
    target: np.ndarray         # bool, positions that are prediction targets
    rows: np.ndarray           # event-log row, -1 on padding
    users: np.ndarray          # (B,)

    @property
    def shape(self) -> tuple[int, int]:
        return self.items.shape


def make_batch(chunks: list[UserSequence], hasher: FeatureHasher, length: int | None = None) -> Batch:
    T = length or max(len(c) for c in chunks)
    B = len(chunks)
    rows = np.full((B, T), -1, dtype=np.int64)
    target = np.zeros((B, T), dtype=bool)
    for b, c in enumerate(chunks):
        n = min(len(c), T)
        rows[b, :n] = np.arange(c.start, c.start + n)
        target[b, :n] = c.target_mask[:n]
    valid = rows >= 0
    r = np.where(valid, rows, chunks[0].start)
    lg = chunks[0].log
    items = np.where(valid, lg.item[r], 0).astype(np.int64)
    feedback = np.stack([lg.like[r], lg.skip[r], lg.listen[r]], axis=-1).astype(np.int64)
    feedback[~valid] = 0
    surface = np.where(valid, lg.surface[r], 0).astype(np.int64)
    device = np.where(valid, lg.device[r], 0).astype(np.int64)
    return Batch(
        items=items, item_rows=hasher.item_rows[items], ctx_rows=hasher.context_rows(surface, device),
        fb_rows=hasher.feedback_rows_for(feedback), feedback=feedback, surface=surface,
        ts=np.where(valid, lg.ts[r], 0), impression=np.where(valid, lg.impression[r], 0).astype(bool),
        valid=valid, target=target & valid, rows=rows, users=np.array([c.user for c in chunks]),
    )


class ArgusModel(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng([seed, 7])
        enc, emb = config.encoder, config.embedding
        self.table = UnifiedEmbeddingTable(emb, rng)
        self.embedder = InteractionEmbedder(emb, enc.width, enc.max_len, rng)
        self.encoder = CausalEncoder(enc, rng)
        self.h_init = ag.parameter(normal(rng, (enc.width,), 0.02), name="h_init")
        self.merge = MergeHeads(emb, enc.width, config.out_dim, rng)
        self.item_tower = ItemTower(emb, config.out_dim, rng)
        self.temperature = Temperature(config.tau_init)
        self.feedback_heads = FeedbackHeads(config.out_dim, rng)

    HEAD_PREFIXES = ("feedback_heads.", "merge.context_mlp.fc2.", "merge.item_mlp.fc2.", "temperature.")

    def param_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        """'head': feedback heads, merge-head output layers and tau; 'backbone': the rest."""
        groups: dict[str, list] = {"backbone": [], "head": []}
        for name, p in self.named_parameters():
            groups["head" if name.startswith(self.HEAD_PREFIXES) else "backbone"].append((name, p))
        return groups

    # -- features -------------------------------------------------------
    def features(self, batch: Batch) -> tuple[Tensor, Tensor, Tensor]:
        return self.table(batch.ctx_rows), self.table(batch.item_rows), self.table(batch.fb_rows)

    def encode(self, batch: Batch, train: bool = False, stream: DropoutStream | None = None,
               feats=None) -> Tensor:
        ctx, item, fb = feats or self.features(batch)
        return self.encoder(self.embedder(ctx, item, fb), train, stream)

    def prev_states(self, h: Tensor) -> Tensor:
        """h_{t-1} for every t, with the trainable initial state before position 0."""
        B, T, H = h.shape
        init = ag.mul(ag.reshape(self.h_init, (1, 1, H)), np.ones((B, 1, 1), dtype=h.data.dtype))
        if T == 1:
            return init
        return ag.concat([init, h[:, : T - 1]], axis=1)

    def item_embeddings(self, catalog_idx: np.ndarray, hasher: FeatureHasher) -> Tensor:
        return self.item_tower(self.table(hasher.item_rows[np.asarray(catalog_idx)]))

    def user_embedding(self, states: Tensor, ctx_rows: np.ndarray) -> Tensor:
        """Two-tower user side: the context head over an aligned state and the scoring context."""
        return self.merge.context_query(states, self.table(ctx_rows))
