"""Command-line entry points.

All subcommands read the same experiment-config JSON (see
``slimnas.experiments.ExperimentConfig``); the ``SLIMNAS_OUTPUT_ROOT``
environment variable overrides the configured output directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config_io
from .data import ingest_dataset
from .evaluation import consistency_report, read_records, train_standalone
from .experiments import (
    ExperimentConfig,
    emit_plots,
    experiment_succeeded,
    load_experiment_config,
    run_experiment,
    tiny_consistency_config,
    _resolve_output_root,
    _standalone_config,
)
from .network import build_supernet, save_checkpoint
from .proxies import score_proxy
from .space import decode_arch
from .training import train_supernet


def _load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return tiny_consistency_config()
    return load_experiment_config(path)


def _cmd_train_supernet(args) -> int:
    config = _load_config(args.config)
    out = _resolve_output_root(config) / (config.name or "supernet")
    out.mkdir(parents=True, exist_ok=True)
    dataset = ingest_dataset(config.dataset)
    state = build_supernet(config.supernet, np.random.default_rng([config.train.seed, 5]))
    train_supernet(config.train, dataset, state, log_path=out / "train_log.jsonl")
    save_checkpoint(state, out / "supernet.npz")
    print(f"checkpoint: {out / 'supernet.npz'}")
    print(f"log stream: {out / 'train_log.jsonl'}")
    return 0


def _cmd_train_standalone(args) -> int:
    config = _load_config(args.config)
    arch = decode_arch(args.arch, config.supernet.space)
    dataset = ingest_dataset(config.dataset)
    record = train_standalone(
        arch, _standalone_config(config), dataset, args.seed, config.supernet
    )
    print(json.dumps(config_io.to_plain(record), sort_keys=True))
    return 1 if record.failed else 0


def _cmd_score_proxy(args) -> int:
    config = _load_config(args.config)
    for enc in args.arch:
        arch = decode_arch(enc, config.supernet.space)
        score = score_proxy(args.kind, arch, config.supernet, seed=args.seed)
        print(score.value)
    return 0


def _cmd_eval_consistency(args) -> int:
    records = read_records(args.records)
    report = consistency_report(records, args.x, args.y)
    print(json.dumps(config_io.to_plain(report), sort_keys=True))
    return 0


def _cmd_run_experiment(args) -> int:
    config = _load_config(args.config)
    result_dir = run_experiment(config)
    ok = experiment_succeeded(result_dir)
    print(f"result directory: {result_dir}")
    print("status: ok" if ok else "status: some cells failed (see manifest.json)")
    return 0 if ok else 1


def _cmd_plot(args) -> int:
    records = read_records(args.records)
    emission = emit_plots(records, Path(args.out))
    for path in emission.paths:
        print(path)
    for note in emission.notes:
        print(f"note: {note}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slimnas",
        description="Slimmable-supernet training and ranking-consistency lab.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-supernet", help="train a weight-sharing supernet")
    p.add_argument("--config", help="experiment config JSON (default: built-in tiny profile)")
    p.set_defaults(fn=_cmd_train_supernet)

    p = sub.add_parser("train-standalone", help="train one subnet from scratch")
    p.add_argument("--config")
    p.add_argument("--arch", required=True, help="architecture string, e.g. d=1,2;r=0,1,2")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_train_standalone)

    p = sub.add_parser("score-proxy", help="print zero-cost prior values")
    p.add_argument("--kind", required=True, choices=["params", "flops", "zen_score"])
    p.add_argument("--arch", required=True, action="append",
                   help="architecture string (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.set_defaults(fn=_cmd_score_proxy)

    p = sub.add_parser("eval-consistency", help="correlation report from a record file")
    p.add_argument("--records", required=True)
    p.add_argument("--x", required=True)
    p.add_argument("--y", required=True)
    p.set_defaults(fn=_cmd_eval_consistency)

    p = sub.add_parser("run-experiment", help="run a full sweep with manifest and plots")
    p.add_argument("--config")
    p.set_defaults(fn=_cmd_run_experiment)

    p = sub.add_parser("plot", help="scatter plots from a record file")
    p.add_argument("--records", required=True)
    p.add_argument("--out", default="plots")
    p.set_defaults(fn=_cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
