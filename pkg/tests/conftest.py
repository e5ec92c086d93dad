import dataclasses

import numpy as np
import pytest

from argus.data import EventLog
from argus.encoder import EncoderConfig
from argus.train import Dataset, RunConfig
from argus.world import WorldConfig, generate

TINY_WORLD = WorldConfig(n_users=24, n_items=150, sessions_per_day=1.0, session_length=5.0, seed=3)
TINY_DAYS = 12


def make_log(records, item_ids=None) -> EventLog:
    """EventLog from (user, ts, surface, item, like, skip, listen) tuples; device 0."""
    users = sorted({r[0] for r in records})
    items = item_ids or sorted({r[3] for r in records})
    cols = {
        "user": [users.index(r[0]) for r in records], "ts": [r[1] for r in records],
        "surface": [r[2] for r in records], "device": [0] * len(records),
        "item": [items.index(r[3]) for r in records], "like": [r[4] for r in records],
        "skip": [r[5] for r in records], "listen": [r[6] for r in records],
        "impression": [int(r[2] == 2) for r in records],
    }
    return EventLog.from_columns(users, items, cols)


def tiny_config(**kw) -> RunConfig:
    base = dict(
        world=TINY_WORLD.to_dict(), n_days=TINY_DAYS, holdout_days=3, seed=0, log_every=0,
        encoder=dataclasses.asdict(EncoderConfig(n_layers=1, width=16, n_heads=2, max_len=64)),
        embedding={"n_rows": 512, "row_dim": 8, "item_lookups": 3, "hash_seed": 0},
        out_dim=16, n_uniform=16, n_inbatch=16, eval_uniform=32, eval_inbatch=32, sketch_width=256,
        batch_size=8, pretrain_len=16, finetune_len=16, warmup_steps=5,
    )
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def tiny_log():
    log_, world = generate(TINY_WORLD, TINY_DAYS)
    return log_


@pytest.fixture(scope="session")
def tiny_world():
    return generate(TINY_WORLD, TINY_DAYS)


@pytest.fixture(scope="session")
def tiny_data(tiny_log):
    return Dataset.build(tiny_log, tiny_config())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion that ran."""
    import test_acceptance

    if not test_acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(test_acceptance.RESULTS):
        ok, detail = test_acceptance.RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
