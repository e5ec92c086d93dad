"""Offline metrics: normalized entropies, pairwise accuracy and its uplift."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import FACTOR_NAMES, FACTOR_SIZES, EventLog, ImpressionPair

log = logging.getLogger(__name__)


@dataclass
class BaselineDistribution:
    """Empirical distributions estimated on the training window only."""

    feedback: list[np.ndarray]     # per factor, class frequencies
    unigram: np.ndarray            # over the catalog, training positives
    impression_counts: np.ndarray  # per catalog item, training impressions

    @classmethod
    def fit(cls, log_: EventLog, rows: np.ndarray, n_catalog: int, smoothing: float = 1.0):
        fb = log_.feedback(rows)
        feedback = [np.bincount(fb[:, k], minlength=n) / max(len(rows), 1) for k, n in enumerate(FACTOR_SIZES)]
        counts = np.bincount(log_.item[rows], minlength=n_catalog).astype(np.float64) + smoothing
        imp_rows = rows[log_.impression[rows] == 1]
        return cls(feedback=feedback, unigram=counts / counts.sum(),
                   impression_counts=np.bincount(log_.item[imp_rows], minlength=n_catalog).astype(np.float64))


def cross_entropy_from_probs(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    p = np.take_along_axis(np.asarray(probs, dtype=np.float64), np.asarray(labels)[:, None], axis=1)[:, 0]
    return -np.log(np.clip(p, 1e-300, None))


def normalized_entropy(probs: np.ndarray, labels: np.ndarray, baseline: np.ndarray) -> float:
    """Mean model cross-entropy over mean cross-entropy of the constant ``baseline``."""
    labels = np.asarray(labels)
    base = cross_entropy_from_probs(np.broadcast_to(baseline, (len(labels), len(baseline))), labels)
    denom = math.fsum(base) / len(labels)
    if denom <= 0:
        raise ZeroDivisionError("baseline has zero entropy")
    return (math.fsum(cross_entropy_from_probs(probs, labels)) / len(labels)) / denom


def normalized_entropy_feedback(probs: Sequence[np.ndarray], labels: np.ndarray,
                                baseline: Sequence[np.ndarray]) -> dict[str, float]:
    """Per factor NE; factors whose baseline has zero entropy are skipped with a warning."""
    out = {}
    for k, name in enumerate(FACTOR_NAMES):
        try:
            out[name] = normalized_entropy(probs[k], labels[:, k], baseline[k])
        except ZeroDivisionError:
            log.warning("feedback factor %s: degenerate baseline, skipped", name)
    return out


def binary_ne_example(p1: Sequence[float], labels: Sequence[int], base_p1: float) -> float:
    probs = np.stack([1 - np.asarray(p1), np.asarray(p1)], axis=1)
    return normalized_entropy(probs, np.asarray(labels), np.array([1 - base_p1, base_p1]))


def pairwise_accuracy(scores_first: np.ndarray, scores_second: np.ndarray) -> float:
    """Mean of 1 / 0.5 / 0 for first-above / tie / first-below over all pairs."""
    a = np.asarray(scores_first, dtype=np.float64)
    b = np.asarray(scores_second, dtype=np.float64)
    if a.size == 0:
        raise ValueError("pairwise accuracy of an empty pair set")
    wins = np.count_nonzero(a > b)
    ties = np.count_nonzero(a == b)
    return (wins + 0.5 * ties) / a.size


def pairwise_accuracy_for(score_of: Callable[[int], float] | np.ndarray,
                          pairs: Sequence[ImpressionPair]) -> float:
    """PA with scores given per event-log row (array or callable)."""
    if not len(pairs):
        raise ValueError("pairwise accuracy of an empty pair set")
    first = np.array([p.first for p in pairs])
    second = np.array([p.second for p in pairs])
    if callable(score_of):
        return pairwise_accuracy([score_of(r) for r in first], [score_of(r) for r in second])
    score_of = np.asarray(score_of)
    return pairwise_accuracy(score_of[first], score_of[second])


def pau(pa_model: float, pa_baseline: float) -> float:
    """Relative PA improvement over the baseline, in percent."""
    if pa_baseline <= 0:
        raise ZeroDivisionError("baseline PA must be > 0")
    return (pa_model - pa_baseline) / pa_baseline * 100.0


def popularity_scorer(baseline: BaselineDistribution) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    counts = baseline.impression_counts
    return lambda rows, items: counts[items]


def constant_scorer() -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    return lambda rows, items: np.zeros(len(items))


def oracle_scorer(world, log_: EventLog) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Ground-truth relevance at the event's day (synthetic data only)."""
    from .world import DAY
    st = world.state

    def score(rows, items):
        days = np.minimum(log_.ts[rows] // DAY, len(st.drift) - 1)
        users = st.users[log_.user[rows]] + st.drift[days, log_.user[rows]]
        return np.einsum("nd,nd->n", users, st.items[items])

    return score


def baseline_scorer(kind: str, baseline: BaselineDistribution | None = None, world=None,
                    log_: EventLog | None = None):
    if kind == "constant":
        return constant_scorer()
    if kind == "popularity":
        if baseline is None:
            raise ValueError("popularity scorer needs training-window counts")
        return popularity_scorer(baseline)
    if kind == "oracle-relevance":
        if world is None or log_ is None:
            raise ValueError("oracle-relevance scorer needs a synthetic dataset with world state")
        return oracle_scorer(world, log_)
    raise ValueError(f"unknown baseline scorer {kind!r}")


@dataclass
class MetricsReport:
    feedback_ne: dict[str, float]
    next_item_ne: float | None
    pa: float | None
    pa_baselines: dict[str, float] = field(default_factory=dict)
    pau_baseline: str = "popularity"
    pau: float | None = None
    n_pairs: int = 0
    n_steps: int = 0
    n_users: int = 0
    eval_negatives: dict[str, int] = field(default_factory=dict)
    config_digest: str = ""
    seed: int = 0

    def __post_init__(self):
        if any(v < 0 for v in self.feedback_ne.values()) or (self.next_item_ne is not None and self.next_item_ne < 0):
            raise ValueError("normalized entropy must be >= 0")
        if self.pa is not None and not 0.0 <= self.pa <= 1.0:
            raise ValueError("PA must be in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))

    def to_table(self) -> str:
        """Plain-text table: feedback NE | next-item NE | standalone PA / PAU."""
        consumption = self.feedback_ne.get("listen_bucket", float("nan"))
        engagement = {k: v for k, v in self.feedback_ne.items() if k != "listen_bucket"}
        header = ["Consumption NE", *[f"Engagement NE ({k})" for k in engagement], "Next-item NE",
                  "PA", f"PAU vs {self.pau_baseline}"]
        def fmt(x, pct=False):
            if x is None or (isinstance(x, float) and math.isnan(x)):
                return "-"
            return f"{x:+.2f}%" if pct else f"{x:.4f}"
        row = [fmt(consumption), *[fmt(v) for v in engagement.values()], fmt(self.next_item_ne),
               fmt(self.pa), fmt(self.pau, pct=True)]
        widths = [max(len(h), len(r)) for h, r in zip(header, row)]
        lines = [" | ".join(h.ljust(w) for h, w in zip(header, widths)),
                 "-+-".join("-" * w for w in widths),
                 " | ".join(r.ljust(w) for r, w in zip(row, widths))]
        if self.pa_baselines:
            lines.append("")
            lines += [f"PA[{k}] = {v:.4f}" for k, v in sorted(self.pa_baselines.items())]
        lines.append(f"pairs={self.n_pairs} steps={self.n_steps} users={self.n_users} "
                     f"seed={self.seed} digest={self.config_digest}")
        return "\n".join(lines)
