"""Experiment orchestration: sweeps, ground-truth tables, manifests, plots.

Every cell (variant x seed) is deterministic given the experiment config,
so a result directory can be reproduced byte-for-byte from its manifest.
Stand-alone ground truth is cached by content digest and reused across
variants and reruns.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import __version__, config_io
from .config_io import ConfigError
from .data import Dataset, DatasetSpec, DataSource, TemplateStyle, ingest_dataset
from .evaluation import (
    TrialRecord,
    append_record,
    consistency_report,
    correlation,
    evaluate_subnet,
    read_records,
    recalibrate_bn,
    train_standalone,
    write_summary_csv,
)
from .network import SupernetConfig, build_supernet, save_checkpoint
from .proxies import ProxyKind, count_flops, count_params, zen_score_result
from .space import ArchSpec, decode_arch, encode_arch, enumerate_space, tiny_space
from .layers import ActivationKind
from .training import (
    ScheduleKind,
    ScheduleSpec,
    TrainConfig,
    TrainStrategy,
    train_supernet,
)


class ExperimentError(RuntimeError):
    """Experiment could not start (bad config, unresolvable dataset)."""


class ExperimentKind(str, Enum):
    ACTIVATION_SWEEP = "activation_sweep"
    SAMPLER_SWEEP = "sampler_sweep"
    SCHEDULE_SWEEP = "schedule_sweep"
    PRIOR_SWEEP = "prior_sweep"
    CONSISTENCY = "consistency"


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one reproducible experiment needs."""

    supernet: SupernetConfig
    train: TrainConfig
    dataset: DatasetSpec
    kind: ExperimentKind = ExperimentKind.CONSISTENCY
    output_dir: str = "runs"
    name: str | None = None
    seeds: tuple[int, ...] = (0, 1, 2)
    ground_truth_archs: int = 64
    standalone_epochs: int = 10
    standalone_lr: float = 0.05
    bn_recal_batches: int = 20
    workers: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ExperimentError("seeds must be non-empty")
        if self.ground_truth_archs < 3:
            raise ExperimentError("ground_truth_archs must be >= 3")
        if self.standalone_epochs < 1 or self.bn_recal_batches < 1:
            raise ExperimentError("standalone_epochs and bn_recal_batches must be >= 1")
        if self.workers < 1:
            raise ExperimentError("workers must be >= 1")


def load_experiment_config(path) -> ExperimentConfig:
    """Parse a JSON experiment config; unknown keys are hard errors."""
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: not valid JSON ({err})") from err
    return config_io.from_plain(ExperimentConfig, data)


def tiny_consistency_config(
    output_dir: str = "runs",
    seeds: tuple[int, ...] = (0, 1, 2),
    kind: ExperimentKind = ExperimentKind.CONSISTENCY,
    workers: int = 1,
) -> ExperimentConfig:
    """The desk-scale profile: 144-arch space, synthetic data, CI-sized budgets.

    Multi-mode class templates under heavy pixel noise spread stand-alone
    accuracy along every capacity axis; the deliberately narrow stem makes
    stage-1 width the critical re-encoder of full-resolution content.
    """
    space = tiny_space()
    return ExperimentConfig(
        supernet=SupernetConfig(space=space, stem_channels=8),
        train=TrainConfig(
            total_epochs=20,
            batch_size=64,
            lr=0.03,
            n_subnets=4,
            m_pairs=2,
            prior=ProxyKind.FLOPS,
            schedule=ScheduleSpec(kind=ScheduleKind.WARMUP, lambda_max=2.0, warmup_epochs=10),
            balanced_candidates=8,
        ),
        dataset=DatasetSpec(
            source=DataSource.SYNTHETIC,
            num_classes=10,
            resolution=(8, 8),
            train_count=1024,
            val_count=1024,
            style=TemplateStyle.BLOBS,
            noise=0.6,
            scale_mix=(0.7, 0.3, 0.0),
            modes_per_class=3,
        ),
        kind=kind,
        output_dir=output_dir,
        seeds=seeds,
        standalone_epochs=16,
        standalone_lr=0.05,
        workers=workers,
    )


# -- variants -----------------------------------------------------------------


@dataclass(frozen=True)
class Variant:
    name: str
    train: TrainConfig
    supernet: SupernetConfig


def experiment_variants(config: ExperimentConfig) -> list[Variant]:
    """Sweep cells implied by the experiment kind."""
    base, sup = config.train, config.supernet
    kind = config.kind

    def sandwich(**kw) -> TrainConfig:
        return replace(base, strategy=TrainStrategy.SANDWICH, **kw)

    if kind is ExperimentKind.SAMPLER_SWEEP:
        return [
            Variant("uniform", replace(base, strategy=TrainStrategy.UNIFORM, m_pairs=0), sup),
            Variant("sandwich", sandwich(balanced_candidates=1, m_pairs=0), sup),
            Variant("balanced", sandwich(balanced_candidates=max(2, base.balanced_candidates),
                                         m_pairs=0), sup),
        ]
    if kind is ExperimentKind.SCHEDULE_SWEEP:
        m = max(1, base.m_pairs)
        return [
            Variant(
                sk.value,
                sandwich(m_pairs=m, schedule=replace(base.schedule, kind=sk)),
                sup,
            )
            for sk in ScheduleKind
        ]
    if kind is ExperimentKind.PRIOR_SWEEP:
        m = max(1, base.m_pairs)
        return [
            Variant("no_rank", sandwich(m_pairs=0), sup),
            Variant("flops_guided", sandwich(m_pairs=m, prior=ProxyKind.FLOPS), sup),
            Variant("zen_guided", sandwich(m_pairs=m, prior=ProxyKind.ZEN_SCORE), sup),
        ]
    if kind is ExperimentKind.ACTIVATION_SWEEP:
        return [
            Variant(act.value, base, replace(sup, external_activation=act))
            for act in ActivationKind
        ]
    return [
        Variant("uniform", replace(base, strategy=TrainStrategy.UNIFORM, m_pairs=0), sup),
        Variant("sandwich", sandwich(balanced_candidates=1, m_pairs=0), sup),
        Variant("balanced", sandwich(balanced_candidates=max(2, base.balanced_candidates),
                                     m_pairs=0), sup),
        Variant("balanced_rank", sandwich(balanced_candidates=max(2, base.balanced_candidates),
                                          m_pairs=max(1, base.m_pairs)), sup),
    ]


# -- ground truth -------------------------------------------------------------


def select_ground_truth_archs(config: ExperimentConfig, seed: int) -> list[ArchSpec]:
    """Deterministic per-seed subset of the enumerated space."""
    archs = list(enumerate_space(config.supernet.space))
    if len(archs) <= config.ground_truth_archs:
        return archs
    rng = np.random.default_rng([seed, 911])
    idx = sorted(rng.choice(len(archs), size=config.ground_truth_archs, replace=False))
    return [archs[i] for i in idx]


def _standalone_seed(seed: int, enc: str) -> int:
    h = hashlib.sha256(f"{seed}:{enc}".encode()).digest()
    return int.from_bytes(h[:4], "big")


def _standalone_config(config: ExperimentConfig) -> TrainConfig:
    return replace(
        config.train,
        total_epochs=config.standalone_epochs,
        lr=config.standalone_lr,
        strategy=TrainStrategy.SANDWICH,
        m_pairs=0,
    )


_WORKER: dict = {}


def _gt_worker_init(config: ExperimentConfig):
    _WORKER["dataset"] = ingest_dataset(config.dataset)
    _WORKER["net_config"] = config.supernet
    _WORKER["train_config"] = _standalone_config(config)


def _gt_worker_run(args: tuple[str, int]) -> TrialRecord:
    enc, seed = args
    arch = decode_arch(enc, _WORKER["net_config"].space)
    return train_standalone(
        arch, _WORKER["train_config"], _WORKER["dataset"], seed, _WORKER["net_config"]
    )


def ground_truth_digest(config: ExperimentConfig) -> str:
    payload = {
        "supernet": config_io.to_plain(config.supernet),
        "dataset": config_io.to_plain(config.dataset),
        "standalone": config_io.to_plain(_standalone_config(config)),
        "ground_truth_archs": config.ground_truth_archs,
    }
    return config_io.digest(payload)[:16]


def build_ground_truth(
    config: ExperimentConfig, dataset: Dataset, seed: int, cache_dir: Path | None = None
) -> list[TrialRecord]:
    """Stand-alone accuracy plus all proxy values for the selected archs.

    Cached as JSON lines under ``cache_dir`` keyed by config digest + seed;
    a rerun reuses the table instead of retraining.
    """
    cache_path = None
    if cache_dir is not None:
        cache_dir.mkdir(parents=True, exist_ok=True)
        cache_path = cache_dir / f"gt_{ground_truth_digest(config)}_{seed}.jsonl"
        if cache_path.exists():
            return read_records(cache_path)

    archs = select_ground_truth_archs(config, seed)
    tasks = [(encode_arch(a), _standalone_seed(seed, encode_arch(a))) for a in archs]
    if config.workers > 1:
        with ProcessPoolExecutor(
            max_workers=config.workers, initializer=_gt_worker_init, initargs=(config,)
        ) as pool:
            done = {rec.arch: rec for rec in pool.map(_gt_worker_run, tasks)}
        results = [done[enc] for enc, _ in tasks]
    else:
        std_cfg = _standalone_config(config)
        results = [
            train_standalone(
                decode_arch(enc, config.supernet.space), std_cfg, dataset, s, config.supernet
            )
            for enc, s in tasks
        ]

    records = []
    for arch, rec in zip(archs, results):
        zen = zen_score_result(arch, config.supernet, seed=seed)
        records.append(
            rec.merged(
                flops=float(count_flops(arch, config.supernet)),
                params=float(count_params(arch, config.supernet)),
                zen_score=zen.value if zen.finite else None,
                note=rec.note if zen.finite else (rec.note or "") + "[zen degenerate]",
                seeds={**rec.seeds, "experiment": seed, "zen": seed},
            )
        )
    if cache_path is not None:
        for rec in records:
            append_record(cache_path, rec)
    return records


# -- the experiment runner -----------------------------------------------------


def _resolve_output_root(config: ExperimentConfig) -> Path:
    root = os.environ.get("SLIMNAS_OUTPUT_ROOT")
    return Path(root) if root else Path(config.output_dir)


def _check_dataset_resolvable(spec: DatasetSpec) -> None:
    if spec.source is DataSource.DIRECTORY and not Path(spec.path or "").is_dir():
        raise ExperimentError(f"dataset directory not resolvable: {spec.path}")


def run_cell(
    config: ExperimentConfig,
    variant: Variant,
    seed: int,
    dataset: Dataset,
    gt_records: list[TrialRecord],
    cell_dir: Path,
) -> dict:
    """Train one supernet variant and score it against the ground truth."""
    cell_dir.mkdir(parents=True, exist_ok=True)
    train_cfg = replace(variant.train, seed=seed)
    state = build_supernet(variant.supernet, np.random.default_rng([seed, 5]))
    train_supernet(train_cfg, dataset, state, log_path=cell_dir / "train_log.jsonl")
    save_checkpoint(state, cell_dir / "supernet.npz")

    merged = []
    for rec in gt_records:
        arch = decode_arch(rec.arch, variant.supernet.space)
        snap = recalibrate_bn(state, arch, dataset, steps=config.bn_recal_batches, seed=seed)
        loss, acc = evaluate_subnet(snap, arch, dataset)
        merged.append(rec.merged(supernet_loss=loss, supernet_accuracy=acc))

    records_path = cell_dir / "records.jsonl"
    records_path.unlink(missing_ok=True)
    for rec in merged:
        append_record(records_path, rec)
    write_summary_csv(merged, cell_dir / "summary.csv")

    report = consistency_report(merged, "supernet_accuracy", "standalone_accuracy")
    proxy_reports = {}
    for proxy in ("flops", "params", "zen_score"):
        try:
            proxy_reports[proxy] = config_io.to_plain(
                consistency_report(merged, proxy, "standalone_accuracy")
            )
        except Exception as err:
            proxy_reports[proxy] = {"error": str(err)}
    cell_report = {
        "variant": variant.name,
        "seed": seed,
        "consistency": config_io.to_plain(report),
        "proxies": proxy_reports,
    }
    (cell_dir / "report.json").write_text(json.dumps(cell_report, sort_keys=True, indent=2))
    return cell_report


def run_experiment(config: ExperimentConfig) -> Path:
    """Run every (variant, seed) cell; failures are recorded, not fatal.

    Returns the result directory containing per-cell outputs, emitted
    plots, and ``manifest.json`` (config digest, code version, per-cell
    reports) from which the run can be reproduced exactly.
    """
    _check_dataset_resolvable(config.dataset)
    root = _resolve_output_root(config)
    result_dir = root / (config.name or config.kind.value)
    result_dir.mkdir(parents=True, exist_ok=True)

    dataset = ingest_dataset(config.dataset)
    variants = experiment_variants(config)
    manifest = {
        "config": config_io.to_plain(config),
        "config_digest": config_io.digest(config),
        "code_version": __version__,
        "cells": {},
    }

    all_records: list[TrialRecord] = []
    for seed in config.seeds:
        try:
            gt_records = build_ground_truth(config, dataset, seed, cache_dir=root / "ground_truth")
        except Exception as err:  # noqa: BLE001 - partial failure is recorded
            for variant in variants:
                manifest["cells"][f"{variant.name}_{seed}"] = {
                    "status": "failed",
                    "error": f"ground truth failed: {err}",
                }
            continue
        failed_gt = sum(rec.failed for rec in gt_records)
        for variant in variants:
            cell_name = f"{variant.name}_{seed}"
            try:
                report = run_cell(
                    config, variant, seed, dataset, gt_records, result_dir / cell_name
                )
                report["ground_truth_failures"] = failed_gt
                manifest["cells"][cell_name] = {"status": "ok", "report": report}
                all_records.extend(read_records(result_dir / cell_name / "records.jsonl"))
            except Exception as err:  # noqa: BLE001
                manifest["cells"][cell_name] = {"status": "failed", "error": str(err)}

    emission = emit_plots(all_records, result_dir / "plots")
    manifest["plots"] = [str(p.name) for p in emission.paths]
    manifest["plot_notes"] = emission.notes
    (result_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2))
    return result_dir


def experiment_succeeded(result_dir: Path) -> bool:
    manifest = json.loads((result_dir / "manifest.json").read_text())
    return all(cell["status"] == "ok" for cell in manifest["cells"].values())


# -- plots ----------------------------------------------------------------------

PLOT_PAIRS = (
    ("flops", "zen_score"),
    ("params", "flops"),
    ("params", "zen_score"),
    ("flops", "standalone_accuracy"),
    ("params", "standalone_accuracy"),
    ("zen_score", "standalone_accuracy"),
    ("supernet_accuracy", "standalone_accuracy"),
)


@dataclass
class PlotEmission:
    paths: list
    notes: list
    annotations: dict


def emit_plots(records, out_dir: Path) -> PlotEmission:
    """Scatter plots for proxy pairs and proxy-vs-ground-truth.

    Each plot is annotated with the Pearson coefficient (0-100 scale);
    the emission returns those values keyed by field pair.  Undersized
    pairs are skipped with a note rather than an error.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    paths: list[Path] = []
    notes: list[str] = []
    annotations: dict[tuple[str, str], float | None] = {}
    for x_field, y_field in PLOT_PAIRS:
        xs, ys = [], []
        for rec in records:
            if rec.failed:
                continue
            xv, yv = rec.field_value(x_field), rec.field_value(y_field)
            if xv is not None and yv is not None:
                xs.append(xv)
                ys.append(yv)
        if len(xs) < 3:
            notes.append(f"skipped {x_field} vs {y_field}: only {len(xs)} usable records")
            continue
        try:
            value = 100.0 * correlation(xs, ys, "pearson")
            annotations[(x_field, y_field)] = value
            label = f"pearson = {value:.2f}"
        except Exception as err:  # zero variance etc.
            annotations[(x_field, y_field)] = None
            label = f"pearson undefined ({err})"
        out_dir.mkdir(parents=True, exist_ok=True)
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.scatter(xs, ys, s=12, alpha=0.7)
        ax.set_xlabel(x_field)
        ax.set_ylabel(y_field)
        ax.set_title(f"{x_field} vs {y_field}\n{label}", fontsize=9)
        fig.tight_layout()
        path = out_dir / f"scatter_{x_field}_vs_{y_field}.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        paths.append(path)
    return PlotEmission(paths=paths, notes=notes, annotations=annotations)
