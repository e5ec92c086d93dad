"""Command line entry point: ``argus {generate,pretrain,finetune,evaluate}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .data import read_event_log, write_events
from .train import Checkpoint, Dataset, RunConfig, evaluate, export_scores, finetune, pretrain
from .world import generate

log = logging.getLogger("argus")

STAGES = ("generate", "pretrain", "finetune", "evaluate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="argus", description=__doc__)
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage)
        p.add_argument("--config", type=Path, help="JSON run config; missing fields take defaults")
        p.add_argument("--seed", type=int)
        p.add_argument("--deterministic", action="store_true", help="serial data order (the only mode)")
        p.add_argument("--out-dir", type=Path)
        p.add_argument("-v", "--verbose", action="store_true")
        if stage == "finetune":
            p.add_argument("--init", type=Path, help="pre-trained checkpoint; omit to start from scratch")
        if stage == "evaluate":
            p.add_argument("--ckpt", type=Path, required=True)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    raw = json.loads(args.config.read_text()) if args.config else {}
    raw["stage"] = args.stage
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.deterministic:
        raw["deterministic"] = True
    if args.out_dir is not None:
        raw["out_dir"] = str(args.out_dir)
    if getattr(args, "init", None) is not None:
        raw["init_ckpt"] = str(args.init)
    if getattr(args, "ckpt", None) is not None:
        raw["ckpt"] = str(args.ckpt)
    return RunConfig.from_dict(raw)


def _require(path: Path | None, what: str) -> Path:
    if path is None or not path.exists():
        raise SystemExit(f"argus: {what} not found: {path}")
    return path


def _load_data(cfg: RunConfig) -> Dataset:
    return Dataset.build(read_event_log(_require(cfg.path(cfg.events), "event log")), cfg)


def run(cfg: RunConfig) -> dict:
    """Execute one stage; returns a summary of what was written."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"config.{cfg.stage}.json").write_text(cfg.to_json() + "\n")
    if cfg.stage == "generate":
        # the run seed drives generation too, so one --seed fixes the whole pipeline
        world_cfg = dataclasses.replace(cfg.world_config, seed=cfg.seed)
        log_, _ = generate(world_cfg, cfg.n_days)
        path = cfg.path(cfg.events)
        write_events(path, log_, log_.header)
        return {"events": str(path), "n_events": len(log_), "seed": world_cfg.seed}
    if cfg.stage == "pretrain":
        res = pretrain(cfg, _load_data(cfg))
        path = res.checkpoint.save(cfg.path(cfg.ckpt or "pretrain.npz"))
        return {"checkpoint": str(path), "steps": res.checkpoint.step, "final_loss": res.history[-1]["loss"],
                "seed": cfg.seed}
    if cfg.stage == "finetune":
        init = Checkpoint.load(_require(cfg.path(cfg.init_ckpt), "init checkpoint")) if cfg.init_ckpt else None
        res = finetune(cfg, _load_data(cfg), init)
        path = res.checkpoint.save(cfg.path(cfg.ckpt or "finetune.npz"))
        return {"checkpoint": str(path), "steps": res.checkpoint.step, "final_loss": res.history[-1]["loss"],
                "from_pretrained": init is not None, "seed": cfg.seed}
    ckpt = Checkpoint.load(_require(cfg.path(cfg.ckpt), "checkpoint"))
    data = _load_data(cfg)
    ev = evaluate(cfg, data, ckpt)
    (out / "metrics.json").write_text(ev.report.to_json() + "\n")
    (out / "metrics.txt").write_text(ev.report.to_table() + "\n")
    n = export_scores(out / "scores.tsv", data, ev.scores)
    print(ev.report.to_table())
    return {"metrics": str(out / "metrics.json"), "scores": str(out / "scores.tsv"), "n_scores": n,
            "seed": cfg.seed}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        print(f"argus: bad config: {exc}", file=sys.stderr)
        return 2
    summary = run(cfg)
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
