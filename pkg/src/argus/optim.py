"""Adam with global-norm clipping and the two-group learning-rate schedule."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor

log = logging.getLogger(__name__)

# (start, end of warmup, end of training)
BACKBONE_LR = (1e-5, 1e-4, 1e-4)
HEAD_LR = (1e-3, 1e-3, 1e-4)


def lr_schedule(step: int, group: str, warmup: int, total: int,
                backbone: tuple[float, float, float] = BACKBONE_LR,
                head: tuple[float, float, float] = HEAD_LR) -> float:
    """Piecewise-linear rate through (0, v0), (warmup, v1), (total, v2).

    With the default triples the backbone warms up linearly then stays
    constant, and the head holds its rate through warmup then decays
    linearly.  Steps past ``total`` keep the final value.
    """
    if group not in ("backbone", "head"):
        raise ValueError(f"unknown parameter group {group!r}")
    v0, v1, v2 = backbone if group == "backbone" else head
    step = min(max(step, 0), total)
    if step < warmup:
        return v0 + (v1 - v0) * step / warmup
    if total <= warmup:
        return v1 if step < total else v2
    return v1 + (v2 - v1) * (step - warmup) / (total - warmup)


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale all gradients together so their global L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = [g * scale for g in grads]
    return grads, norm


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction; ``t`` counts from 1."""
    b1, b2 = betas
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * grad * grad
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)


@dataclass
class Adam:
    """Adam over named parameters split into 'backbone' and 'head' groups."""

    groups: dict[str, list[tuple[str, Tensor]]]
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    max_grad_norm: float = 1.0
    t: int = 0
    skipped: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    last_norm: float = 0.0

    def __post_init__(self):
        for _, params in self.groups.items():
            for name, p in params:
                self.m.setdefault(name, np.zeros_like(p.data))
                self.v.setdefault(name, np.zeros_like(p.data))

    def step(self, lrs: dict[str, float]) -> bool:
        """Clip, then update every parameter; returns False if the step was skipped."""
        named = [(g, n, p) for g, ps in self.groups.items() for n, p in ps]
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for _, _, p in named]
        if not all(np.all(np.isfinite(g)) for g in grads):
            self.skipped += 1
            log.warning("non-finite gradient, step skipped (%d so far)", self.skipped)
            return False
        grads, self.last_norm = clip_grad_norm(grads, self.max_grad_norm)
        self.t += 1
        for (group, name, p), g in zip(named, grads):
            adam_step(p.data, g, self.m[name], self.v[name], self.t, lrs[group], self.betas, self.eps)
        return True

    def state(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        out["t"] = np.array(self.t)
        out["skipped"] = np.array(self.skipped)
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k in self.m:
            self.m[k] = np.array(state[f"m/{k}"], dtype=self.m[k].dtype)
            self.v[k] = np.array(state[f"v/{k}"], dtype=self.v[k].dtype)
        self.t = int(state["t"])
        self.skipped = int(state["skipped"])
