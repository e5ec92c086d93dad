"""
Pre-training, fine-tuning and evaluation
========================================

The two-stage recipe end to end on a small world: pre-train on interaction
histories, fine-tune a two-tower scorer on impression pairs, and compare the
fine-tuned scorer with one trained from scratch.  Takes a few minutes on CPU.

Run with ``python3 notebooks/02_two_stage_pipeline.py``.
"""

# %%
import dataclasses

import numpy as np

from argus.encoder import EncoderConfig
from argus.train import Dataset, RunConfig, evaluate, finetune, initial_checkpoint, pretrain
from argus.world import WorldConfig, generate

world_cfg = WorldConfig(n_users=500, n_items=1500, seed=1)
cfg = RunConfig(world=world_cfg.to_dict(), n_days=30, seed=1, log_every=0, finetune_len=256,
                encoder=dataclasses.asdict(EncoderConfig.named("mini-desk")))
log_, _ = generate(world_cfg, cfg.n_days)
data = Dataset.build(log_, cfg)
print(f"{len(data.train)} training sequences, {len(data.test)} holdout sequences")

# %%
# An untrained model with its feedback heads set to the training prior scores
# close to the baseline on feedback NE.
print(evaluate(cfg, data, initial_checkpoint(cfg, data)).report.to_table())

# %%
# One pre-training epoch.  Next-item NE below 1 means the model beats the
# unigram distribution; feedback NE below 1 means it beats the class prior.
pre = pretrain(cfg, data)
print(f"{len(pre.history)} steps, final temperature {pre.history[-1]['scale']:.3f}")
print(evaluate(cfg, data, pre.checkpoint).report.to_table())

# %%
# Fine-tuning from the pre-trained weights versus from scratch.
for name, init in (("pre-trained", pre.checkpoint), ("scratch", None)):
    ft = finetune(cfg, data, init)
    losses = [h["loss"] for h in ft.history]
    report = evaluate(cfg, data, ft.checkpoint).report
    print(f"{name:>11s}: {len(losses)} steps, pair loss {np.mean(losses[:5]):.4f} -> {np.mean(losses[-5:]):.4f}, "
          f"PA {report.pa:.4f}, PAU vs popularity {report.pau:+.2f}%")
