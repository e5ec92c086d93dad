"""Interaction records, event-log IO, chunking, temporal split and impression pairs.

An event log is kept columnar (:class:`EventLog`): one numpy array per field,
rows grouped by user and sorted by timestamp.  :class:`UserSequence` is a
cheap view onto one user's contiguous rows.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

# (factor name, number of classes); K = 3
FEEDBACK_SCHEMA: tuple[tuple[str, int], ...] = (("like", 2), ("skip", 2), ("listen_bucket", 4))
FACTOR_NAMES = tuple(name for name, _ in FEEDBACK_SCHEMA)
FACTOR_SIZES = tuple(n for _, n in FEEDBACK_SCHEMA)

SURFACES = ("organic", "search", "recommended")
RECOMMENDATION_SURFACES = frozenset({"recommended"})
DEVICES = ("mobile", "desktop", "speaker")

MAX_MALFORMED_FRACTION = 0.01


@dataclass(frozen=True)
class Feedback:
    like: int
    skip: int
    listen_bucket: int

    def __post_init__(self):
        for name, n in FEEDBACK_SCHEMA:
            v = getattr(self, name)
            if not 0 <= v < n:
                raise ValueError(f"feedback {name}={v} outside [0, {n})")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.like, self.skip, self.listen_bucket)


@dataclass(frozen=True)
class Interaction:
    user_id: str
    timestamp: int
    surface: str
    device: str
    item_id: str
    feedback: Feedback
    is_impression: bool

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError("timestamp must be >= 0")
        if self.is_impression != (self.surface in RECOMMENDATION_SURFACES):
            raise ValueError(f"is_impression={self.is_impression} inconsistent with surface {self.surface!r}")

    def to_record(self) -> dict:
        return {
            "user_id": self.user_id, "ts": int(self.timestamp), "surface": self.surface,
            "device": self.device, "item_id": self.item_id, "like": self.feedback.like,
            "skip": self.feedback.skip, "listen_bucket": self.feedback.listen_bucket,
            "impression": int(self.is_impression),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Interaction":
        return cls(
            user_id=str(rec["user_id"]), timestamp=int(rec["ts"]), surface=str(rec["surface"]),
            device=str(rec["device"]), item_id=str(rec["item_id"]),
            feedback=Feedback(int(rec["like"]), int(rec["skip"]), int(rec["listen_bucket"])),
            is_impression=bool(int(rec["impression"])),
        )


def feedback_rank(like, skip, listen_bucket=None, use_listen: bool = False):
    """Ordering of "how positive" a reaction was: like > no skip > skip.

    With ``use_listen`` the listen bucket breaks ties inside each level.
    Works elementwise on arrays.
    """
    like = np.asarray(like)
    rank = np.where(like == 1, 2, np.where(np.asarray(skip) == 0, 1, 0))
    if use_listen:
        rank = rank * 4 + np.asarray(listen_bucket)
    return rank


@dataclass
class EventLog:
    """Columnar interactions grouped by user, time-sorted within each user."""

    user_ids: list[str]
    item_ids: list[str]
    user: np.ndarray
    ts: np.ndarray
    surface: np.ndarray
    device: np.ndarray
    item: np.ndarray
    like: np.ndarray
    skip: np.ndarray
    listen: np.ndarray
    impression: np.ndarray
    surfaces: tuple[str, ...] = SURFACES
    devices: tuple[str, ...] = DEVICES
    header: dict = field(default_factory=dict)
    offsets: np.ndarray = field(init=False)

    COLUMNS = ("user", "ts", "surface", "device", "item", "like", "skip", "listen", "impression")

    def __post_init__(self):
        counts = np.bincount(self.user, minlength=len(self.user_ids)) if len(self.user) else \
            np.zeros(len(self.user_ids), dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    def __len__(self) -> int:
        return len(self.ts)

    @classmethod
    def from_columns(cls, user_ids, item_ids, cols: dict, **kw) -> "EventLog":
        """Build from unsorted columns; sorts by (user, ts) keeping input order on ties."""
        order = np.lexsort((cols["ts"], cols["user"]))
        dtypes = dict(user=np.int32, ts=np.int64, surface=np.int8, device=np.int8, item=np.int32,
                      like=np.int8, skip=np.int8, listen=np.int8, impression=np.int8)
        sorted_cols = {k: np.asarray(cols[k], dtype=dtypes[k])[order] for k in cls.COLUMNS}
        return cls(list(user_ids), list(item_ids), **sorted_cols, **kw)

    def feedback(self, rows=slice(None)) -> np.ndarray:
        return np.stack([self.like[rows], self.skip[rows], self.listen[rows]], axis=-1)

    def sequences(self) -> list["UserSequence"]:
        return [UserSequence(self, u, int(self.offsets[u]), int(self.offsets[u + 1]))
                for u in range(len(self.user_ids)) if self.offsets[u + 1] > self.offsets[u]]

    def interaction(self, row: int) -> Interaction:
        return Interaction(
            user_id=self.user_ids[self.user[row]], timestamp=int(self.ts[row]),
            surface=self.surfaces[self.surface[row]], device=self.devices[self.device[row]],
            item_id=self.item_ids[self.item[row]],
            feedback=Feedback(int(self.like[row]), int(self.skip[row]), int(self.listen[row])),
            is_impression=bool(self.impression[row]),
        )


@dataclass
class UserSequence:
    """Rows ``[start, stop)`` of one user; the first ``n_context`` rows are input-only."""

    log: EventLog
    user: int
    start: int
    stop: int
    n_context: int = 0

    def __len__(self) -> int:
        return self.stop - self.start

    @property
    def user_id(self) -> str:
        return self.log.user_ids[self.user]

    @property
    def rows(self) -> slice:
        return slice(self.start, self.stop)

    @property
    def timestamps(self) -> np.ndarray:
        return self.log.ts[self.rows]

    @property
    def interactions(self) -> list[Interaction]:
        return [self.log.interaction(r) for r in range(self.start, self.stop)]

    @property
    def target_mask(self) -> np.ndarray:
        mask = np.ones(len(self), dtype=bool)
        mask[: self.n_context] = False
        return mask

    def sub(self, lo: int, hi: int, n_context: int = 0) -> "UserSequence":
        return UserSequence(self.log, self.user, self.start + lo, self.start + hi, n_context)


# ---------------------------------------------------------------------------
# IO
# ---------------------------------------------------------------------------


def header_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".header.json")


def write_events(path: str | Path, log_: EventLog, header: dict | None = None) -> None:
    """One JSON object per line, plus a sibling ``.header.json``."""
    path = Path(path)
    header = dict(log_.header if header is None else header)
    header.setdefault("K", len(FEEDBACK_SCHEMA))
    header.setdefault("feedback", {name: n for name, n in FEEDBACK_SCHEMA})
    header.setdefault("surfaces", list(log_.surfaces))
    header.setdefault("recommendation_surfaces", sorted(RECOMMENDATION_SURFACES))
    header.setdefault("devices", list(log_.devices))
    users, items = log_.user_ids, log_.item_ids
    surfaces, devices = log_.surfaces, log_.devices
    with open(path, "w") as fh:
        for r in range(len(log_)):
            fh.write(
                '{"user_id": %s, "ts": %d, "surface": "%s", "device": "%s", "item_id": %s, '
                '"like": %d, "skip": %d, "listen_bucket": %d, "impression": %d}\n'
                % (json.dumps(users[log_.user[r]]), log_.ts[r], surfaces[log_.surface[r]],
                   devices[log_.device[r]], json.dumps(items[log_.item[r]]), log_.like[r],
                   log_.skip[r], log_.listen[r], log_.impression[r])
            )
    with open(header_path(path), "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)


def _parse_line(line: str, surf_idx: dict, dev_idx: dict) -> tuple | None:
    try:
        rec = json.loads(line)
        like, skip, listen, imp = (int(rec["like"]), int(rec["skip"]),
                                   int(rec["listen_bucket"]), int(rec["impression"]))
        ts = int(rec["ts"])
        surface, device = surf_idx[rec["surface"]], dev_idx[rec["device"]]
    except (ValueError, KeyError, TypeError):
        return None
    if not (0 <= like < 2 and 0 <= skip < 2 and 0 <= listen < 4 and imp in (0, 1) and ts >= 0):
        return None
    return str(rec["user_id"]), ts, surface, device, str(rec["item_id"]), like, skip, listen, imp


def read_event_log(path: str | Path) -> EventLog:
    path = Path(path)
    header: dict = {}
    if header_path(path).exists():
        header = json.loads(header_path(path).read_text())
    surfaces = tuple(header.get("surfaces", SURFACES))
    devices = tuple(header.get("devices", DEVICES))
    surf_idx = {s: i for i, s in enumerate(surfaces)}
    dev_idx = {d: i for i, d in enumerate(devices)}
    rows, bad, total = [], 0, 0
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            total += 1
            rec = _parse_line(line, surf_idx, dev_idx)
            if rec is None:
                bad += 1
            else:
                rows.append(rec)
    if bad:
        log.warning("%s: %d of %d lines malformed", path, bad, total)
        if bad > MAX_MALFORMED_FRACTION * total:
            raise ValueError(f"{path}: {bad}/{total} malformed lines exceeds {MAX_MALFORMED_FRACTION:.0%}")
    user_vocab: dict[str, int] = {}
    item_vocab: dict[str, int] = {}
    for r in rows:
        user_vocab.setdefault(r[0], len(user_vocab))
        item_vocab.setdefault(r[4], len(item_vocab))
    # canonical user order keeps sequences independent of line order
    user_ids = sorted(user_vocab)
    remap = np.array([0] * len(user_ids), dtype=np.int32)
    for new, uid in enumerate(user_ids):
        remap[user_vocab[uid]] = new
    cols = {
        "user": remap[np.array([user_vocab[r[0]] for r in rows], dtype=np.int64)] if rows else np.zeros(0, int),
        "ts": np.array([r[1] for r in rows], dtype=np.int64),
        "surface": np.array([r[2] for r in rows]), "device": np.array([r[3] for r in rows]),
        "item": np.array([item_vocab[r[4]] for r in rows]),
        "like": np.array([r[5] for r in rows]), "skip": np.array([r[6] for r in rows]),
        "listen": np.array([r[7] for r in rows]), "impression": np.array([r[8] for r in rows]),
    }
    item_ids = list(header.get("item_ids", [])) or list(item_vocab)
    if header.get("item_ids"):
        pos = {iid: i for i, iid in enumerate(item_ids)}
        for iid in item_vocab:
            if iid not in pos:
                pos[iid] = len(item_ids)
                item_ids.append(iid)
        lookup = np.array([pos[iid] for iid in item_vocab], dtype=np.int32)
        cols["item"] = lookup[cols["item"]] if rows else cols["item"]
    return EventLog.from_columns(user_ids, item_ids, cols, surfaces=surfaces, devices=devices,
                                 header=header)


def load_events(path: str | Path) -> list[UserSequence]:
    """Per-user, time-sorted sequences from a newline-delimited JSON event log."""
    return read_event_log(path).sequences()


# ---------------------------------------------------------------------------
# sequence transforms
# ---------------------------------------------------------------------------


def chunk_sequences(seqs: Iterable[UserSequence], chunk_len: int) -> list[UserSequence]:
    """Non-overlapping chunks of at most ``chunk_len``; trailing chunks shorter than 2 are dropped."""
    if chunk_len < 2:
        raise ValueError("chunk_len must be >= 2")
    chunks = []
    for seq in seqs:
        for lo in range(0, len(seq), chunk_len):
            hi = min(lo + chunk_len, len(seq))
            if hi - lo >= 2:
                chunks.append(seq.sub(lo, hi))
    return chunks


def temporal_split(seqs: Sequence[UserSequence], cutoff_ts: int, holdout_span: int,
                   context_len: int | None = None) -> tuple[list[UserSequence], list[UserSequence]]:
    """Split at ``cutoff_ts``.

    Train sequences hold interactions with ``ts < cutoff_ts``.  Test sequences
    hold the targets in ``[cutoff_ts, cutoff_ts + holdout_span)`` preceded by up
    to ``context_len`` pre-cutoff interactions marked as context (``n_context``).
    """
    train, test = [], []
    end = cutoff_ts + holdout_span
    for seq in seqs:
        ts = seq.timestamps
        n_before = int(np.searchsorted(ts, cutoff_ts, side="left"))
        n_end = int(np.searchsorted(ts, end, side="left"))
        if n_before:
            train.append(seq.sub(0, n_before))
        if n_end > n_before:
            ctx_lo = 0 if context_len is None else max(0, n_before - context_len)
            test.append(seq.sub(ctx_lo, n_end, n_context=n_before - ctx_lo))
    if not test:
        log.warning("temporal_split: no interactions in [%d, %d)", cutoff_ts, end)
    return train, test


@dataclass(frozen=True)
class ImpressionPair:
    """Two impressions of one user; ``first`` got the more positive feedback.

    ``first``/``second`` are row indices into the sequence's event log.
    """

    user: int
    first: int
    second: int


def build_impression_pairs(seq: UserSequence, window: int = 2, use_listen: bool = False,
                           targets_only: bool = True) -> list[ImpressionPair]:
    """Pairs of impressions fewer than ``window`` impressions apart with different rank."""
    lg = seq.log
    rows = np.arange(seq.start, seq.stop)
    keep = lg.impression[rows] == 1
    if targets_only:
        keep &= seq.target_mask
    imp = rows[keep]
    rank = feedback_rank(lg.like[imp], lg.skip[imp], lg.listen[imp], use_listen)
    pairs = []
    for gap in range(1, window):
        a, b = imp[:-gap], imp[gap:]
        ra, rb = rank[:-gap], rank[gap:]
        for x, y, rx, ry in zip(a, b, ra, rb):
            if rx > ry:
                pairs.append(ImpressionPair(seq.user, int(x), int(y)))
            elif ry > rx:
                pairs.append(ImpressionPair(seq.user, int(y), int(x)))
    pairs.sort(key=lambda p: (min(p.first, p.second), max(p.first, p.second)))
    return pairs
