"""Two-stage pipeline: pre-training, fine-tuning, evaluation and checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import DropoutStream
from .data import EventLog, ImpressionPair, UserSequence, build_impression_pairs, chunk_sequences, temporal_split
from .embedding import EmbeddingConfig, FeatureHasher
from .encoder import EncoderConfig
from .metrics import (BaselineDistribution, MetricsReport, baseline_scorer, normalized_entropy,
                      normalized_entropy_feedback, pairwise_accuracy_for, pau)
from .model import ArgusModel, Batch, ModelConfig, make_batch
from .objectives import align_indices, finetune_pair_loss, pretrain_loss, sampled_softmax_losses, two_tower_score
from .optim import BACKBONE_LR, HEAD_LR, Adam, lr_schedule
from .sampling import CountMinSketch, draw_negatives
from .world import DAY, WorldConfig, world_from_header

log = logging.getLogger(__name__)

PATH_FIELDS = ("events", "out_dir", "init_ckpt", "ckpt")


@dataclass
class RunConfig:
    """Every knob of a run.  Desk-scale defaults; full-scale values stay legal.

    Full-scale reference values: batch 4096 (pre-train) / 2048 (fine-tune),
    warmup 3000, lengths 512 / 2048, 8192 + 8192 negatives.
    """

    stage: str = "pretrain"
    seed: int = 0
    deterministic: bool = False
    # paths (relative paths resolve against out_dir)
    events: str = "events.jsonl"
    out_dir: str = "runs/default"
    init_ckpt: str | None = None
    ckpt: str | None = None
    # data
    world: dict = field(default_factory=lambda: WorldConfig().to_dict())
    n_days: int = 60
    holdout_days: int = 7
    # model
    encoder: dict = field(default_factory=lambda: dataclasses.asdict(EncoderConfig()))
    embedding: dict = field(default_factory=lambda: dataclasses.asdict(EmbeddingConfig()))
    out_dim: int = 64
    tau_init: float = float(np.log(0.05))
    # negatives
    n_uniform: int = 128
    n_inbatch: int = 128
    sketch_depth: int = 4
    sketch_width: int = 4096
    eval_uniform: int = 512
    eval_inbatch: int = 512
    # losses
    latency: int = DAY
    pair_window: int = 2
    use_listen: bool = False
    # optimizer
    backbone_lr: tuple = BACKBONE_LR
    head_lr: tuple = HEAD_LR
    lr_scale: float = 10.0          # pre-training multiplier: a desk-scale epoch is a few hundred steps
    finetune_lr_scale: float = 0.3  # fine-tuning: larger steps wash out what pre-training learned
    warmup_steps: int = 300
    max_grad_norm: float = 1.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    # batching
    batch_size: int = 32
    finetune_batch_size: int | None = None
    pretrain_len: int = 128
    finetune_len: int = 512
    eval_batch_size: int = 32
    log_every: int = 50
    pau_baseline: str = "popularity"

    def __post_init__(self):
        self.backbone_lr = tuple(self.backbone_lr)
        self.head_lr = tuple(self.head_lr)
        self.betas = tuple(self.betas)
        if self.stage not in ("generate", "pretrain", "finetune", "evaluate"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.pretrain_len < 2 or self.finetune_len < 2:
            raise ValueError("sequence lengths must be >= 2")
        if self.pair_window < 2:
            raise ValueError("pair_window must be >= 2")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def path(self, p: str | None) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else Path(self.out_dir) / p

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(encoder=EncoderConfig(**self.encoder), embedding=EmbeddingConfig(**self.embedding),
                           out_dim=self.out_dim, tau_init=self.tau_init)

    @property
    def world_config(self) -> WorldConfig:
        return WorldConfig.from_dict(self.world)

    @property
    def cutoff_ts(self) -> int:
        return (self.n_days - self.holdout_days) * DAY

    @property
    def holdout_span(self) -> int:
        return self.holdout_days * DAY

    def digest(self) -> str:
        """Hash of everything but paths and the stage name."""
        d = {k: v for k, v in self.to_dict().items() if k not in PATH_FIELDS + ("stage",)}
        return _digest(d)

    def architecture_digest(self) -> str:
        return _digest(self.model_config.to_dict())


def _digest(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    """Named parameters, optimizer moments, sketch state and metadata.

    Stored as an uncompressed ``.npz``: ``param/<name>``, ``adam/m/<name>``,
    ``adam/v/<name>``, ``adam/t``, ``adam/skipped``, ``sketch/<field>`` and a
    JSON string under ``meta``.
    """

    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    sketch: dict[str, np.ndarray] | None = None
    meta: dict = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    @property
    def tau(self) -> float:
        return float(self.params["temperature.tau"])

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        arrays.update({f"adam/{k}": v for k, v in self.optimizer.items()})
        if self.sketch is not None:
            arrays.update({f"sketch/{k}": v for k, v in self.sketch.items()})
        arrays["meta"] = np.array(json.dumps(self.meta, sort_keys=True))
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        with np.load(path, allow_pickle=False) as z:
            out = cls(params={}, optimizer={}, sketch=None, meta=json.loads(str(z["meta"])))
            for key in z.files:
                kind, _, name = key.partition("/")
                if kind == "param":
                    out.params[name] = z[key]
                elif kind == "adam":
                    out.optimizer[name] = z[key]
                elif kind == "sketch":
                    out.sketch = out.sketch or {}
                    out.sketch[name] = z[key]
        return out

    def model(self) -> ArgusModel:
        m = ArgusModel(ModelConfig.from_dict(self.meta["model"]))
        m.load_state_dict(self.params)
        return m


def _checkpoint(model: ArgusModel, opt: Adam | None, sketch: CountMinSketch | None, cfg: RunConfig,
                stage: str, step: int, **extra) -> Checkpoint:
    meta = {"stage": stage, "step": step, "seed": cfg.seed, "config_digest": cfg.digest(),
            "architecture_digest": cfg.architecture_digest(), "model": model.config.to_dict(), **extra}
    return Checkpoint(params=model.state_dict(), optimizer=opt.state() if opt else {},
                      sketch=sketch.state() if sketch else None, meta=meta)


def initial_model(cfg: RunConfig, data: "Dataset | None" = None) -> ArgusModel:
    """The untrained model a run starts from; with data, feedback heads start at the training prior."""
    model = ArgusModel(cfg.model_config, seed=cfg.seed)
    if data is not None and len(data.train):
        rows = data.train_rows()
        model.feedback_heads.set_prior(BaselineDistribution.fit(data.log, rows, data.n_catalog).feedback)
    return model


def initial_checkpoint(cfg: RunConfig, data: "Dataset | None" = None) -> Checkpoint:
    return _checkpoint(initial_model(cfg, data), None, None, cfg, "init", 0)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """An event log with its temporal split and feature hashing."""

    log: EventLog
    train: list[UserSequence]
    test: list[UserSequence]
    hasher: FeatureHasher
    cutoff_ts: int

    @classmethod
    def build(cls, log_: EventLog, cfg: RunConfig, context_len: int | None = None) -> "Dataset":
        train, test = temporal_split(log_.sequences(), cfg.cutoff_ts, cfg.holdout_span, context_len)
        hasher = FeatureHasher(cfg.model_config.embedding, log_.item_ids, log_.surfaces, log_.devices)
        return cls(log_, train, test, hasher, cfg.cutoff_ts)

    @property
    def n_catalog(self) -> int:
        return len(self.log.item_ids)

    def train_rows(self) -> np.ndarray:
        return np.concatenate([np.arange(s.start, s.stop) for s in self.train]) if self.train \
            else np.zeros(0, dtype=np.int64)

    def world(self):
        if self.log.header.get("generator") != "synthetic-world":
            return None
        return world_from_header(self.log.header)


def _batches(items: list, size: int):
    for i in range(0, len(items), size):
        yield items[i: i + size]


def rolling_windows(seqs: list[UserSequence], length: int) -> list[UserSequence]:
    """Cover every target of every sequence exactly once.

    Windows hold at most ``length`` rows; each advances by ``length // 2``
    targets and keeps the preceding rows as input-only context, so every
    target after the first half-window sees at least ``length // 2`` earlier
    interactions.
    """
    step = max(length // 2, 1)
    out = []
    for seq in seqs:
        for s in range(seq.n_context, len(seq), step):
            lo = max(0, s - (length - step))
            out.append(seq.sub(lo, min(len(seq), s + step), n_context=s - lo))
    return out


# ---------------------------------------------------------------------------
# pre-training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: ArgusModel
    history: list[dict]


def _lrs(cfg: RunConfig, step: int, total: int, scale: float) -> dict[str, float]:
    return {g: scale * lr_schedule(step, g, cfg.warmup_steps, total, cfg.backbone_lr, cfg.head_lr)
            for g in ("backbone", "head")}


def _optimizer(model: ArgusModel, cfg: RunConfig) -> Adam:
    return Adam(model.param_groups(), betas=cfg.betas, eps=cfg.eps, max_grad_norm=cfg.max_grad_norm)


def pretrain(cfg: RunConfig, data: Dataset) -> TrainResult:
    """One epoch of next-item + feedback prediction over the training chunks."""
    chunks = chunk_sequences(data.train, cfg.pretrain_len)
    if not chunks:
        raise ValueError("pretrain: no training chunks (empty dataset?)")
    rng = np.random.default_rng([cfg.seed, 11])
    order = rng.permutation(len(chunks))
    chunks = [chunks[i] for i in order]
    model = initial_model(cfg, data)
    opt = _optimizer(model, cfg)
    sketch = CountMinSketch(cfg.sketch_depth, cfg.sketch_width, seed=cfg.seed)
    stream = DropoutStream(cfg.seed)
    total = math.ceil(len(chunks) / cfg.batch_size)
    history = []
    for step, group in enumerate(_batches(chunks, cfg.batch_size)):
        batch = make_batch(group, data.hasher)
        positives = batch.items.reshape(-1)[batch.target.reshape(-1)]
        sketch.insert_many(positives)
        negs = draw_negatives(positives, data.n_catalog, cfg.n_uniform, cfg.n_inbatch, rng, sketch)
        model.zero_grad()
        out = pretrain_loss(model, batch, negs, data.hasher, train=True, stream=stream)
        out.loss.backward()
        lrs = _lrs(cfg, step, total, cfg.lr_scale)
        opt.step(lrs)
        rec = {"step": step, "loss": float(out.loss.data), "nip": out.nip, "fp": out.fp,
               "grad_norm": opt.last_norm, "scale": float(model.temperature.scale().data), **lrs}
        history.append(rec)
        if cfg.log_every and (step % cfg.log_every == 0 or step == total - 1):
            log.info("pretrain step %d/%d loss %.4f nip %.4f fp %.4f", step + 1, total, rec["loss"],
                     rec["nip"], rec["fp"])
    ckpt = _checkpoint(model, opt, sketch, cfg, "pretrain", total)
    return TrainResult(ckpt, model, history)


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------


def _pair_scores(model: ArgusModel, batch: Batch, chunks: list[UserSequence], h, rows_by_chunk,
                 hasher: FeatureHasher, latency: int):
    """Two-tower scores of the given log rows, each chunk scored from its own states."""
    B, T, H = h.shape
    states = ag.concat([ag.reshape(model.h_init, (1, H)), ag.reshape(h, (B * T, H))], axis=0)
    gather, ctx_rows, items = [], [], []
    for b, (chunk, rows) in enumerate(zip(chunks, rows_by_chunk)):
        if not len(rows):
            continue
        rows = np.asarray(rows)
        pos = rows - chunk.start
        s = align_indices(batch.ts[b, : len(chunk)], batch.ts[b, pos], latency)
        gather.append(np.where(s < 0, 0, 1 + b * T + s))
        ctx_rows.append(batch.ctx_rows[b, pos])
        items.append(batch.items[b, pos])
    gather = np.concatenate(gather)
    user = model.user_embedding(states[gather], np.concatenate(ctx_rows))
    item = model.item_embeddings(np.concatenate(items), hasher)
    return two_tower_score(user, item)


def finetune(cfg: RunConfig, data: Dataset, init: Checkpoint | None = None) -> TrainResult:
    """One pass of pairwise two-tower training over the training impressions."""
    model = ArgusModel(cfg.model_config, seed=cfg.seed)
    if init is not None:
        if init.meta.get("architecture_digest") != cfg.architecture_digest():
            raise ValueError(f"init checkpoint architecture {init.meta.get('architecture_digest')} "
                             f"!= config {cfg.architecture_digest()}")
        model.load_state_dict(init.params)
    chunks = chunk_sequences(data.train, cfg.finetune_len)
    pairs = [build_impression_pairs(c, cfg.pair_window, cfg.use_listen) for c in chunks]
    keep = [i for i, p in enumerate(pairs) if p]
    if not keep:
        n_imp = int(sum(data.log.impression[c.start: c.stop].sum() for c in chunks))
        raise ValueError(f"finetune: no impression pairs found ({len(chunks)} chunks, {n_imp} impressions, "
                         f"window {cfg.pair_window}); need impressions with differing feedback")
    rng = np.random.default_rng([cfg.seed, 17])
    order = rng.permutation(keep)
    bs = cfg.finetune_batch_size or cfg.batch_size
    opt = _optimizer(model, cfg)
    stream = DropoutStream(cfg.seed + 1)
    total = math.ceil(len(order) / bs)
    history = []
    for step, idx in enumerate(_batches(list(order), bs)):
        group = [chunks[i] for i in idx]
        batch = make_batch(group, data.hasher)
        grp_pairs = [pairs[i] for i in idx]
        rows = [[p.first for p in ps] + [p.second for p in ps] for ps in grp_pairs]
        model.zero_grad()
        h = model.encode(batch, train=True, stream=stream)
        scores = _pair_scores(model, batch, group, h, rows, data.hasher, cfg.latency)
        # scores are laid out chunk by chunk as [firsts..., seconds...]
        pos_idx, neg_idx, off = [], [], 0
        for ps in grp_pairs:
            n = len(ps)
            pos_idx.append(off + np.arange(n))
            neg_idx.append(off + n + np.arange(n))
            off += 2 * n
        loss = finetune_pair_loss(scores[np.concatenate(pos_idx)], scores[np.concatenate(neg_idx)])
        loss.backward()
        lrs = _lrs(cfg, step, total, cfg.finetune_lr_scale)
        opt.step(lrs)
        rec = {"step": step, "loss": float(loss.data), "pairs": off // 2, "grad_norm": opt.last_norm, **lrs}
        history.append(rec)
        if cfg.log_every and (step % cfg.log_every == 0 or step == total - 1):
            log.info("finetune step %d/%d pair loss %.4f (%d pairs)", step + 1, total, rec["loss"], rec["pairs"])
    ckpt = _checkpoint(model, opt, None, cfg, "finetune", total, init=init is not None)
    return TrainResult(ckpt, model, history)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class Evaluation:
    report: MetricsReport
    scores: np.ndarray        # two-tower score per event-log row (NaN outside scored impressions)
    pairs: list[ImpressionPair]


def _next_item_and_feedback(model: ArgusModel, cfg: RunConfig, data: Dataset, base: BaselineDistribution):
    windows = rolling_windows(data.test, cfg.pretrain_len)
    sketch = CountMinSketch(cfg.sketch_depth, cfg.sketch_width, seed=cfg.seed)
    sketch.insert_many(data.log.item[data.train_rows()])
    rng = np.random.default_rng([cfg.seed, 13])
    log_unigram = np.log(base.unigram)
    model_loss, ref_loss = [], []
    probs = [[] for _ in base.feedback]
    labels = []
    for group in _batches(windows, cfg.eval_batch_size):
        batch = make_batch(group, data.hasher)
        tgt = batch.target.reshape(-1)
        positives = batch.items.reshape(-1)[tgt]
        negs = draw_negatives(positives, data.n_catalog, cfg.eval_uniform, cfg.eval_inbatch, rng,
                              sketch if sketch.total else None)
        excl = negs.exclusion_mask(len(positives))
        feats = model.features(batch)
        ctx, item, _ = feats
        h_prev = model.prev_states(model.encode(batch, feats=feats))
        B, T = batch.shape
        D = model.config.out_dim
        idx = np.flatnonzero(tgt)
        q = ag.l2_normalize(ag.reshape(model.merge.context_query(h_prev, ctx), (B * T, D))[idx])
        scale = model.temperature.scale()
        pos = ag.sum_(q * ag.l2_normalize(model.item_embeddings(positives, data.hasher)), axis=-1) / scale
        neg = ag.matmul(q, ag.swap_last(ag.l2_normalize(model.item_embeddings(negs.items, data.hasher)))) / scale
        model_loss.append(sampled_softmax_losses(pos, neg, negs.log_q, excl).data.astype(np.float64))
        ref_pos = ag.Tensor(log_unigram[positives])
        ref_neg = ag.Tensor(np.broadcast_to(log_unigram[negs.items], (len(idx), len(negs))))
        ref_loss.append(sampled_softmax_losses(ref_pos, ref_neg, negs.log_q, excl).data.astype(np.float64))
        hi = ag.reshape(model.merge.item_query(h_prev, ctx, item), (B * T, D))[idx]
        for k, logits in enumerate(model.feedback_heads(hi)):
            probs[k].append(ag.softmax(logits, axis=-1).data.astype(np.float64))
        labels.append(batch.feedback.reshape(-1, batch.feedback.shape[-1])[idx])
    ml, rl = np.concatenate(model_loss), np.concatenate(ref_loss)
    ne_next = math.fsum(ml) / math.fsum(rl)
    labels = np.concatenate(labels)
    ne_fb = normalized_entropy_feedback([np.concatenate(p) for p in probs], labels, base.feedback)
    return ne_next, ne_fb, len(ml)


def _two_tower_scores(model: ArgusModel, cfg: RunConfig, data: Dataset) -> np.ndarray:
    scores = np.full(len(data.log), np.nan)
    windows = rolling_windows(data.test, cfg.finetune_len)
    for group in _batches(windows, cfg.eval_batch_size):
        rows = [[r for r in range(c.start + c.n_context, c.stop) if data.log.impression[r]] for c in group]
        if not any(rows):
            continue
        batch = make_batch(group, data.hasher)
        h = model.encode(batch)
        s = _pair_scores(model, batch, group, h, rows, data.hasher, cfg.latency)
        scores[np.concatenate([r for r in rows if r])] = s.data
    return scores


def evaluate(cfg: RunConfig, data: Dataset, ckpt: Checkpoint) -> Evaluation:
    """Feedback / next-item NE, PA and PAU on the holdout window."""
    if ckpt.meta.get("architecture_digest") not in (None, cfg.architecture_digest()):
        raise ValueError(f"checkpoint architecture {ckpt.meta['architecture_digest']} does not match the "
                         f"config ({cfg.architecture_digest()})")
    if not data.test:
        raise ValueError("evaluate: empty holdout window")
    model = ckpt.model()
    base = BaselineDistribution.fit(data.log, data.train_rows(), data.n_catalog)
    with ag.no_grad():
        ne_next, ne_fb, n_steps = _next_item_and_feedback(model, cfg, data, base)
        scores = _two_tower_scores(model, cfg, data)
    pairs = [p for seq in data.test for p in build_impression_pairs(seq, cfg.pair_window, cfg.use_listen)]
    pa = pairwise_accuracy_for(scores, pairs) if pairs else None
    pa_base = {}
    if pairs:
        rows = np.array([r for p in pairs for r in (p.first, p.second)])
        kinds = ["constant", "popularity"] + (["oracle-relevance"] if data.world() is not None else [])
        for kind in kinds:
            scorer = baseline_scorer(kind, base, data.world(), data.log)
            col = np.full(len(data.log), np.nan)
            col[rows] = scorer(rows, data.log.item[rows])
            pa_base[kind] = pairwise_accuracy_for(col, pairs)
    uplift = pau(pa, pa_base[cfg.pau_baseline]) if pa is not None and cfg.pau_baseline in pa_base else None
    report = MetricsReport(
        feedback_ne=ne_fb, next_item_ne=ne_next, pa=pa, pa_baselines=pa_base, pau_baseline=cfg.pau_baseline,
        pau=uplift, n_pairs=len(pairs), n_steps=n_steps, n_users=len(data.test),
        eval_negatives={"uniform": cfg.eval_uniform, "in_batch": cfg.eval_inbatch},
        config_digest=cfg.digest(), seed=cfg.seed)
    return Evaluation(report, scores, pairs)


def export_scores(path: str | Path, data: Dataset, scores: np.ndarray) -> int:
    """One tab-separated line per scored holdout impression: user_id, timestamp, item_id, score."""
    rows = np.flatnonzero(~np.isnan(scores))
    lg = data.log
    with open(path, "w") as fh:
        fh.write("user_id\ttimestamp\titem_id\tscore\n")
        for r in rows:
            fh.write(f"{lg.user_ids[lg.user[r]]}\t{lg.ts[r]}\t{lg.item_ids[lg.item[r]]}\t{scores[r]:.9g}\n")
    return len(rows)
