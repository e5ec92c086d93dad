"""Synthetic listening world with a popularity-biased logging policy.

Users and items live in a shared latent space.  Relevance of item ``v`` to
user ``u`` on day ``d`` is ``<u + drift_d, v>``.  Each simulated day every user
has a few sessions; each event happens either on an organic surface (the user
picks an item) or on the recommendation surface (the logging policy shows one
item, an impression).  Feedback is sampled from the relevance.

Item choice uses the identity "argmax of (score + Gumbel noise) is a draw from
softmax(score)": the logging policy shows the top item under
``boost * log(popularity) + policy_relevance * relevance / T`` plus Gumbel noise,
which is sampled exactly as a categorical draw.  Organic picks are drawn with
probability proportional to ``popularity * exp(relevance / T)``, except that a
``repeat_rate`` share of them replays one of the user's recent likes from
earlier days.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from .data import DEVICES, SURFACES, EventLog

DAY = 86_400


@dataclass(frozen=True)
class WorldConfig:
    n_users: int = 2000
    n_items: int = 5000
    latent_dim: int = 8
    zipf_exponent: float = 0.8
    organic_fraction: float = 0.4       # share of events on organic surfaces
    search_fraction: float = 0.5        # share of organic events coming from search
    sessions_per_day: float = 1.5       # Poisson mean
    session_length: float = 8.0         # mean events per session (>= 1)
    choice_temperature: float = 0.1     # relevance -> item choice sharpness
    noise_temperature: float = 0.35     # relevance -> feedback sharpness
    taste_spread: float = 1.0           # std of personal taste per latent dim
    shared_taste: float = 1.0           # weight of the taste all users share
    popularity_quality: float = 3.0     # how strongly popularity follows shared taste
    policy_boost: float = 0.5           # popularity exponent of the logging policy
    policy_relevance: float = 1.0       # relevance weight of the logging policy
    repeat_rate: float = 0.3            # chance an organic pick replays a recently liked item
    repeat_memory: int = 50             # how many recent likes a user can replay
    like_bias: float = -3.0
    skip_bias: float = 1.0
    drift_rate: float = 0.01            # std of daily taste change, relative to taste_spread
    seed: int = 0

    def __post_init__(self):
        if self.n_users < 1 or self.n_items < 1 or self.latent_dim < 1:
            raise ValueError("n_users, n_items and latent_dim must be >= 1")
        if self.zipf_exponent <= 0:
            raise ValueError("zipf_exponent must be > 0")
        for name in ("organic_fraction", "search_fraction", "repeat_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if self.noise_temperature <= 0 or self.choice_temperature <= 0 or self.sessions_per_day <= 0:
            raise ValueError("temperatures and sessions_per_day must be > 0")
        if self.session_length < 1:
            raise ValueError("session_length must be >= 1")
        if self.drift_rate < 0:
            raise ValueError("drift_rate must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class LatentState:
    users: np.ndarray          # (n_users, dim) taste on day 0
    items: np.ndarray          # (n_items, dim), unit norm
    popularity: np.ndarray     # (n_items,), sums to 1
    drift: np.ndarray          # (n_days, n_users, dim) offsets added on each day

    def user_vectors(self, day: int) -> np.ndarray:
        day = min(max(int(day), 0), len(self.drift) - 1)
        return self.users + self.drift[day]


@dataclass
class World:
    config: WorldConfig
    state: LatentState
    user_ids: list[str]
    item_ids: list[str]

    def __post_init__(self):
        self._user_index = {u: i for i, u in enumerate(self.user_ids)}
        self._item_index = {v: i for i, v in enumerate(self.item_ids)}

    def user_index(self, user_id: str) -> int:
        try:
            return self._user_index[user_id]
        except KeyError:
            raise KeyError(f"unknown user {user_id!r}") from None

    def item_index(self, item_id: str) -> int:
        try:
            return self._item_index[item_id]
        except KeyError:
            raise KeyError(f"unknown item {item_id!r}") from None


def zipf_weights(n: int, exponent: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** exponent
    return w / w.sum()


def make_world(config: WorldConfig, n_days: int) -> World:
    rng = np.random.default_rng([config.seed, 0])
    d = config.latent_dim
    shared = rng.standard_normal(d)
    shared /= np.linalg.norm(shared)
    items = rng.standard_normal((config.n_items, d))
    taste = rng.standard_normal((config.n_users, d))
    items /= np.linalg.norm(items, axis=1, keepdims=True)
    users = config.shared_taste * shared + config.taste_spread * taste
    # popularity rank follows shared taste (plus noise), so popular items are liked more often
    quality = items @ shared
    order = np.argsort(-(config.popularity_quality * quality + rng.standard_normal(config.n_items) * 0.5),
                       kind="stable")
    popularity = np.empty(config.n_items)
    popularity[order] = zipf_weights(config.n_items, config.zipf_exponent)
    steps = rng.standard_normal((max(n_days, 1), config.n_users, d)) * (config.drift_rate * config.taste_spread)
    steps[0] = 0.0
    drift = np.cumsum(steps, axis=0)
    width_u = len(str(config.n_users - 1))
    width_i = len(str(config.n_items - 1))
    return World(
        config=config,
        state=LatentState(users=users, items=items, popularity=popularity, drift=drift),
        user_ids=[f"u{u:0{width_u}d}" for u in range(config.n_users)],
        item_ids=[f"i{i:0{width_i}d}" for i in range(config.n_items)],
    )


def oracle_relevance(world: World, user_id: str, item_id: str, day: int | None = None) -> float:
    """Ground-truth relevance used by the generator (tests and baselines only)."""
    u = world.user_index(user_id)
    i = world.item_index(item_id)
    day = len(world.state.drift) - 1 if day is None else day
    return float(world.state.user_vectors(day)[u] @ world.state.items[i])


def relevance_matrix(world: World, day: int) -> np.ndarray:
    return world.state.user_vectors(day) @ world.state.items.T


def _categorical_rows(logits: np.ndarray, rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw from softmax(logits[r]) for each r in ``rows`` (rows may repeat)."""
    if len(rows) == 0:
        return np.zeros(0, dtype=np.int64)
    uniq, inverse = np.unique(rows, return_inverse=True)
    sub = logits[uniq]
    p = np.exp(sub - sub.max(axis=1, keepdims=True))
    cdf = np.cumsum(p, axis=1)
    cdf /= cdf[:, -1:]
    n = sub.shape[1]
    flat = (cdf + np.arange(len(uniq))[:, None]).ravel()
    u = np.minimum(rng.random(len(rows)), 1.0 - 1e-12) + inverse
    idx = np.searchsorted(flat, u, side="right")
    return np.minimum(idx - inverse * n, n - 1)


def _remember(memory: np.ndarray, n_memory: np.ndarray, users: np.ndarray, items: np.ndarray) -> None:
    """Append liked items to each user's ring buffer (users arrive grouped or not; order kept)."""
    size = memory.shape[1]
    order = np.argsort(users, kind="stable")
    users, items = users[order], items[order]
    starts = np.searchsorted(users, users, side="left")
    rank = np.arange(len(users)) - starts
    slot = (n_memory[users] + rank) % size
    memory[users, slot] = items
    np.add.at(n_memory, users, 1)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


LISTEN_LEVELS = np.arange(4)
LISTEN_BIAS = np.array([0.0, 0.3, 0.3, 0.0])


def sample_feedback(rel: np.ndarray, config: WorldConfig, rng: np.random.Generator):
    """like, skip, listen_bucket for relevances ``rel``."""
    s = rel / config.noise_temperature
    like = rng.random(rel.shape) < _sigmoid(s + config.like_bias)
    skip = rng.random(rel.shape) < _sigmoid(-s + config.skip_bias)
    # ordered categorical: higher relevance moves mass to higher buckets
    logits = 0.5 * s[:, None] * (LISTEN_LEVELS - 1.5) + LISTEN_BIAS
    listen = _categorical_rows(logits, np.arange(len(rel)), rng)
    return like.astype(np.int8), skip.astype(np.int8), listen.astype(np.int8)


def generate(config: WorldConfig, n_days: int) -> tuple[EventLog, World]:
    """Simulate ``n_days`` of activity.  Output is fully determined by ``config.seed``."""
    world = make_world(config, n_days)
    st = world.state
    rng = np.random.default_rng([config.seed, 1])
    n_u = config.n_users
    preferred_device = rng.integers(0, len(DEVICES), n_u)
    log_pop = np.log(st.popularity)
    surf = {s: i for i, s in enumerate(SURFACES)}
    memory = np.zeros((n_u, max(config.repeat_memory, 1)), dtype=np.int64)
    n_memory = np.zeros(n_u, dtype=np.int64)
    cols: dict[str, list[np.ndarray]] = {k: [] for k in EventLog.COLUMNS}
    for day in range(n_days):
        rel = relevance_matrix(world, day)
        n_sessions = rng.poisson(config.sessions_per_day, n_u)
        sess_user = np.repeat(np.arange(n_u), n_sessions)
        sess_len = 1 + rng.poisson(config.session_length - 1.0, len(sess_user))
        sess_start = day * DAY + rng.integers(0, DAY - 4 * 3600, len(sess_user))
        sess_device = np.where(rng.random(len(sess_user)) < 0.8, preferred_device[sess_user],
                               rng.integers(0, len(DEVICES), len(sess_user)))
        ev_user = np.repeat(sess_user, sess_len)
        first = np.repeat(np.cumsum(sess_len) - sess_len, sess_len)
        pos_in_sess = np.arange(len(ev_user)) - first
        gaps = rng.integers(120, 300, len(ev_user))
        ev_ts = np.repeat(sess_start, sess_len) + pos_in_sess * 200 + gaps % 60
        ev_device = np.repeat(sess_device, sess_len)
        organic = rng.random(len(ev_user)) < config.organic_fraction
        search = rng.random(len(ev_user)) < config.search_fraction
        ev_surface = np.where(organic, np.where(search, surf["search"], surf["organic"]),
                              surf["recommended"])
        ev_item = np.empty(len(ev_user), dtype=np.int64)
        org_rows = np.flatnonzero(organic)
        rec_rows = np.flatnonzero(~organic)
        ev_item[org_rows] = _categorical_rows(log_pop + rel / config.choice_temperature,
                                              ev_user[org_rows], rng) if len(org_rows) else []
        ev_item[rec_rows] = _categorical_rows(
            config.policy_boost * log_pop + config.policy_relevance * rel / config.choice_temperature,
            ev_user[rec_rows], rng) if len(rec_rows) else []
        repeat = organic & (rng.random(len(ev_user)) < config.repeat_rate) & (n_memory[ev_user] > 0)
        rep_rows = np.flatnonzero(repeat)
        if len(rep_rows):
            slot = (rng.random(len(rep_rows)) * np.minimum(n_memory[ev_user[rep_rows]], memory.shape[1])).astype(np.int64)
            ev_item[rep_rows] = memory[ev_user[rep_rows], slot]
        like, skip, listen = sample_feedback(rel[ev_user, ev_item], config, rng)
        if config.repeat_memory > 0:
            _remember(memory, n_memory, ev_user[like == 1], ev_item[like == 1])
        for k, v in (("user", ev_user), ("ts", ev_ts), ("surface", ev_surface), ("device", ev_device),
                     ("item", ev_item), ("like", like), ("skip", skip), ("listen", listen),
                     ("impression", (~organic).astype(np.int8))):
            cols[k].append(v)
    merged = {k: np.concatenate(v) if v else np.zeros(0) for k, v in cols.items()}
    header = {"generator": "synthetic-world", "seed": config.seed, "n_days": n_days,
              "world_config": config.to_dict(), "item_ids": world.item_ids}
    return EventLog.from_columns(world.user_ids, world.item_ids, merged, header=header), world


def world_from_header(header: dict) -> World:
    """Rebuild the latent world that generated a log from its header."""
    cfg = WorldConfig.from_dict(header["world_config"])
    return make_world(cfg, int(header["n_days"]))


def save_world_config(path, config: WorldConfig, n_days: int) -> None:
    with open(path, "w") as fh:
        json.dump({"world_config": config.to_dict(), "n_days": n_days}, fh, indent=2)
