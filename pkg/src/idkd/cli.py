"""Command-line entry point: ``idkd run | partition | inspect``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Log verbosity comes from the ``IDKD_LOG_LEVEL`` environment variable.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, config_digest, parse_config
from .data import dirichlet_partition
from .engine import build_data, run_experiment
from .errors import ConfigError, InvalidInputError
from .metrics import export_csv

log = logging.getLogger("idkd")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _parse_seeds(text: str | None, cfg: ExperimentConfig) -> tuple[int, ...]:
    if not text:
        return tuple(cfg.run.seeds)
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise UsageError("--seeds is empty")
    return seeds


def _summary_row(method: str, accs) -> dict:
    accs = np.asarray(accs, dtype=np.float64)
    std = float(accs.std(ddof=1)) if accs.size > 1 else 0.0
    return {"method": method, "n_seeds": int(accs.size), "mean_acc": float(accs.mean()), "std_acc": std,
            "accs": [float(a) for a in accs]}


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_run(args) -> int:
    cfg = parse_config(args.config)
    if args.workers is not None:
        cfg = cfg.replace(run={"workers": args.workers})
    seeds = _parse_seeds(args.seeds, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.compare:
        methods = {"baseline": cfg.replace(idkd={"enabled": False}), "idkd": cfg.replace(idkd={"enabled": True})}
    else:
        methods = {"idkd" if cfg.idkd.enabled else "baseline": cfg}
    runs = {m: {str(s): str(out / m / f"seed_{s}") for s in seeds} for m in methods}
    _write_json(out / "manifest.json", {
        "tool_version": __version__,
        "config_path": str(Path(args.config).resolve()),
        "config_digest": config_digest(args.config),
        "config": cfg.to_dict(),
        "seeds": list(seeds),
        "runs": runs,
    })
    data = build_data(cfg)
    rows = []
    for method, mcfg in methods.items():
        accs = []
        for seed in seeds:
            run_dir = Path(runs[method][str(seed)])
            run_dir.mkdir(parents=True, exist_ok=True)
            events_path = run_dir / "events.jsonl"
            events_path.write_text("")
            with events_path.open("a") as fh:
                def sink(ev, fh=fh):
                    fh.write(json.dumps(ev, sort_keys=True) + "\n")
                    fh.flush()
                log.info("run %s seed %d", method, seed)
                rec = run_experiment(mcfg, seed, data=data, sink=sink)
            _write_json(run_dir / "record.json", {
                "method": method, "seed": seed, "final_acc": rec.final_acc, "final_loss": rec.final_loss,
                "iterations": rec.iterations, "gossip_bytes": rec.ledger.gossip_bytes,
                "label_bytes": rec.ledger.label_bytes, "overhead_ratio": rec.ledger.overhead_ratio(),
                "exchanges": len(rec.exchanges),
            })
            accs.append(rec.final_acc)
            print(f"{method:8s} seed {seed:>5d}  acc {rec.final_acc:.4f}  iters {rec.iterations}")
        rows.append(_summary_row(method, accs))
    _write_json(out / "summary.json", rows)
    summary_csv = out / "summary.csv"
    summary_csv.unlink(missing_ok=True)
    export_csv([{k: r[k] for k in ("method", "n_seeds", "mean_acc", "std_acc")} for r in rows], summary_csv)
    for r in rows:
        print(f"{r['method']:8s} {100 * r['mean_acc']:.2f} +- {100 * r['std_acc']:.2f}  ({r['n_seeds']} seeds)")
    return EXIT_OK


def partition_table(cfg: ExperimentConfig, seed: int) -> list[list[int]]:
    data = build_data(cfg)
    part = dirichlet_partition(data.train.labels, cfg.n_nodes, cfg.data.alpha, seed)
    return part.class_histograms(data.train.labels, cfg.data.num_classes).tolist()


def cmd_partition(args) -> int:
    cfg = parse_config(args.config)
    seed = args.seed if args.seed is not None else cfg.run.seeds[0]
    table = partition_table(cfg, seed)
    c = cfg.data.num_classes
    print(f"alpha={cfg.data.alpha} nodes={cfg.n_nodes} seed={seed}")
    print("node " + " ".join(f"{k:>6d}" for k in range(c)) + "   total  top-share")
    for i, row in enumerate(table):
        total = sum(row)
        print(f"{i:>4d} " + " ".join(f"{v:>6d}" for v in row) + f" {total:>7d}  {max(row) / total:9.3f}")
    if args.csv:
        path = Path(args.csv)
        path.unlink(missing_ok=True)
        export_csv([{"node": i, **{f"class_{k}": v for k, v in enumerate(row)}} for i, row in enumerate(table)],
                   path)
    return EXIT_OK


def cmd_inspect(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise UsageError(f"{run_dir} is not a directory")
    summary = run_dir / "summary.json"
    records = sorted(run_dir.glob("*/seed_*/record.json"))
    if not summary.is_file() and not records:
        raise UsageError(f"{run_dir} holds no run results")
    print(f"{'method':8s} {'seed':>6s} {'acc':>8s} {'iters':>7s} {'exch':>5s} {'overhead':>9s}")
    for p in records:
        r = json.loads(p.read_text())
        print(f"{r['method']:8s} {r['seed']:>6d} {r['final_acc']:>8.4f} {r['iterations']:>7d} "
              f"{r['exchanges']:>5d} {r['overhead_ratio']:>9.5f}")
    if summary.is_file():
        for row in json.loads(summary.read_text()):
            print(f"{row['method']:8s} mean {100 * row['mean_acc']:.2f} +- {100 * row['std_acc']:.2f} "
                  f"over {row['n_seeds']} seeds")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="idkd", description="Decentralized training simulator with IDKD.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train one run per seed and write a summary")
    r.add_argument("--config", required=True)
    r.add_argument("--seeds", help="comma-separated seeds (default: run.seeds)")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--workers", type=int, help="gradient worker threads")
    r.add_argument("--compare", action="store_true", help="run baseline and IDKD on the same seeds")
    r.set_defaults(func=cmd_run)

    q = sub.add_parser("partition", help="print per-node class counts")
    q.add_argument("--config", required=True)
    q.add_argument("--seed", type=int)
    q.add_argument("--csv", help="also write the table as CSV")
    q.set_defaults(func=cmd_partition)

    i = sub.add_parser("inspect", help="summarize a results directory")
    i.add_argument("run_dir")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    level = os.environ.get("IDKD_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"idkd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvalidInputError, RuntimeError, ArithmeticError, OSError) as exc:
        print(f"idkd: run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
