"""
The synthetic world and its baseline scorers
============================================

Generates a small world, looks at what the log contains and how the three
reference scorers rank adjacent impressions on the holdout week.

Run with ``python3 notebooks/01_world_and_baselines.py``.
"""

# %%
import numpy as np

from argus.data import build_impression_pairs
from argus.metrics import BaselineDistribution, baseline_scorer, pairwise_accuracy_for
from argus.train import Dataset, RunConfig
from argus.world import WorldConfig, generate

world_cfg = WorldConfig(n_users=300, n_items=1000, seed=0)
log_, world = generate(world_cfg, 30)
print(f"{len(log_)} events from {len(log_.user_ids)} users over {len(log_.item_ids)} items")

# %%
# Organic plays have no impression; recommendation-surface plays do.
surface, counts = np.unique(log_.surface, return_counts=True)
for s, c in zip(surface, counts):
    print(f"surface {s}: {c} events, impression rate {log_.impression[log_.surface == s].mean():.2f}")

# %%
# Item popularity is heavy-tailed: the top 1% of items take a large share of plays.
plays = np.sort(np.bincount(log_.item, minlength=len(log_.item_ids)))[::-1]
print(f"top 1% of items: {plays[: len(plays) // 100].sum() / plays.sum():.1%} of plays")

# %%
# Feedback rates over the whole log.
for name, col in (("like", log_.like), ("skip", log_.skip)):
    print(f"{name} rate {col.mean():.3f}")
print("listen bucket frequencies", np.bincount(log_.listen, minlength=4) / len(log_))

# %%
# Reference scorers on holdout impression pairs.  The relevance oracle reads the
# world's latent state, so it bounds what a learned scorer can reach.
cfg = RunConfig(world=world_cfg.to_dict(), n_days=30, seed=0)
data = Dataset.build(log_, cfg)
base = BaselineDistribution.fit(data.log, data.train_rows(), data.n_catalog)
pairs = [p for s in data.test for p in build_impression_pairs(s)]
rows = np.arange(len(data.log))
for kind in ("constant", "popularity", "oracle-relevance"):
    score = baseline_scorer(kind, base, data.world(), data.log)(rows, data.log.item)
    print(f"{kind:>16s} PA {pairwise_accuracy_for(score, pairs):.4f} on {len(pairs)} pairs")
