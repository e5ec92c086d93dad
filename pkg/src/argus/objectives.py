"""Pre-training and fine-tuning objectives.

Next-item prediction is a logQ-corrected sampled softmax over cosine
similarities scaled by a clamped temperature; feedback prediction is a sum of
per-factor cross-entropies.  Fine-tuning scores impressions by a raw dot
product between an aligned user state and the item embedding and trains with
a pairwise logistic loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import DropoutStream, Tensor
from .model import ArgusModel, Batch, FeedbackHeads, Temperature
from .sampling import NegativeBatch


def similarity(query: Tensor, item: Tensor, temperature: Temperature) -> Tensor:
    """cos(query, item) / clamp(e^tau); zero vectors give 0."""
    return ag.cosine_similarity(query, item) / temperature.scale()


def similarity_logits(queries: Tensor, items: Tensor, temperature: Temperature) -> Tensor:
    """(Q, N) matrix of :func:`similarity` for every query/item pair."""
    return ag.matmul(ag.l2_normalize(queries), ag.swap_last(ag.l2_normalize(items))) / temperature.scale()


def _check_finite(name: str, t: Tensor) -> None:
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite value in {name}")


def sampled_softmax_losses(pos_logits: Tensor, neg_logits: Tensor, log_q: np.ndarray,
                           excluded: np.ndarray | None = None) -> Tensor:
    """Per-query ``-log(e^pos / (e^pos + sum_n e^(neg_n - logQ_n)))``.

    ``excluded`` (Q, N) drops individual negatives from individual queries.
    """
    _check_finite("positive score", pos_logits)
    _check_finite("negative scores", neg_logits)
    if not np.all(np.isfinite(log_q)):
        raise FloatingPointError("non-finite value in logQ")
    corrected = neg_logits - np.asarray(log_q, dtype=neg_logits.data.dtype)
    if excluded is not None and excluded.any():
        corrected = corrected + np.where(excluded, -np.inf, 0.0).astype(neg_logits.data.dtype)
    Q = pos_logits.shape[0]
    all_logits = ag.concat([ag.reshape(pos_logits, (Q, 1)), corrected], axis=1)
    return ag.log_sum_exp(all_logits, axis=1) - pos_logits


def nip_loss(query: Tensor, positive: Tensor, negatives: Tensor, log_q: np.ndarray,
             temperature: Temperature) -> Tensor:
    """Sampled-softmax loss for one query vector, its positive item and (N, D) negatives."""
    if len(log_q) < 1:
        raise ValueError("need at least one negative")
    pos = ag.reshape(similarity(query, positive, temperature), (1,))
    neg = similarity_logits(ag.reshape(query, (1, -1)), negatives, temperature)
    return ag.reshape(sampled_softmax_losses(pos, neg, log_q), ())


def fp_losses(item_query: Tensor, feedback: np.ndarray, heads: FeedbackHeads) -> Tensor:
    """Per-position sum over factors of cross-entropy(observed class, head logits)."""
    feedback = np.asarray(feedback)
    total = None
    for k, logits in enumerate(heads(item_query)):
        ce = ag.cross_entropy_with_logits(logits, feedback[..., k])
        total = ce if total is None else total + ce
    return total


def fp_loss(item_query: Tensor, feedback, heads: FeedbackHeads) -> Tensor:
    return ag.mean(fp_losses(item_query, np.asarray(feedback), heads))


@dataclass
class PretrainOutput:
    loss: Tensor
    nip: float
    fp: float
    n_targets: int


def target_positions(batch: Batch) -> np.ndarray:
    return np.flatnonzero(batch.target.reshape(-1))


def pretrain_loss(model: ArgusModel, batch: Batch, negatives: NegativeBatch, hasher,
                  train: bool = False, stream: DropoutStream | None = None) -> PretrainOutput:
    """Mean next-item loss plus mean feedback loss over the batch's target steps.

    ``negatives.source`` must index the flattened target positions (the order
    of :func:`target_positions`).
    """
    feats = model.features(batch)
    ctx, item, _ = feats
    h = model.encode(batch, train, stream, feats)
    h_prev = model.prev_states(h)
    B, T = batch.shape
    idx = target_positions(batch)
    D = model.config.out_dim
    hc = ag.reshape(model.merge.context_query(h_prev, ctx), (B * T, D))[idx]
    hi = ag.reshape(model.merge.item_query(h_prev, ctx, item), (B * T, D))[idx]
    pos_items = batch.items.reshape(-1)[idx]
    q = ag.l2_normalize(hc)
    scale = model.temperature.scale()
    pos_emb = ag.l2_normalize(model.item_embeddings(pos_items, hasher))
    neg_emb = ag.l2_normalize(model.item_embeddings(negatives.items, hasher))
    pos_logits = ag.sum_(q * pos_emb, axis=-1) / scale
    neg_logits = ag.matmul(q, ag.swap_last(neg_emb)) / scale
    nip = ag.mean(sampled_softmax_losses(pos_logits, neg_logits, negatives.log_q,
                                         negatives.exclusion_mask(len(idx))))
    fp = ag.mean(fp_losses(hi, batch.feedback.reshape(-1, batch.feedback.shape[-1])[idx],
                           model.feedback_heads))
    return PretrainOutput(nip + fp, float(nip.data), float(fp.data), len(idx))


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

SENTINEL = -1


@dataclass(frozen=True)
class AlignedImpression:
    impression: int      # index into the impression list
    state: int           # index into the state list, or SENTINEL for the initial state
    latency: int


def align_indices(state_ts: np.ndarray, impression_ts: np.ndarray, latency: int) -> np.ndarray:
    """Index of the latest state with ``ts <= impression_ts - latency`` (-1 if none)."""
    state_ts = np.asarray(state_ts)
    return np.searchsorted(state_ts, np.asarray(impression_ts) - latency, side="right") - 1


def align_impressions(state_ts, impression_ts, latency: int) -> list[AlignedImpression]:
    if len(state_ts) > 1 and np.any(np.diff(state_ts) < 0):
        raise ValueError("states must be sorted by timestamp")
    idx = align_indices(state_ts, impression_ts, latency)
    return [AlignedImpression(j, int(s), latency) for j, s in enumerate(idx)]


def two_tower_score(h: Tensor, item: Tensor) -> Tensor:
    """Raw dot product along the last axis."""
    if h.shape[-1] != item.shape[-1]:
        raise ValueError(f"dimension mismatch: {h.shape[-1]} vs {item.shape[-1]}")
    return ag.sum_(h * item, axis=-1)


def finetune_pair_losses(s_pos: Tensor, s_neg: Tensor) -> Tensor:
    """log(1 + e^-(s_pos - s_neg)), elementwise."""
    return ag.softplus(s_neg - s_pos)


def finetune_pair_loss(s_pos, s_neg) -> Tensor:
    return ag.mean(finetune_pair_losses(ag.as_tensor(s_pos), ag.as_tensor(s_neg)))
