"""Ground truth, inherited-weight evaluation, and ranking-consistency stats.

The consistency question: does the supernet's ranking of subnets (by
inherited-weight accuracy) agree with the ranking under stand-alone
training?  Records pair both measurements per architecture; reports
quantify agreement with Pearson, Spearman, and Kendall coefficients on
the 0-100 scale.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import config_io
from .network import SlimResNet, Supernet, SupernetConfig, subnet_plan
from .space import ArchSpec, encode_arch
from .training import SGD, TrainConfig, lr_at, softmax_cross_entropy


class EvaluationError(ValueError):
    """Evaluation preconditions violated."""


class CorrelationError(EvaluationError):
    """Correlation inputs unusable (too few, mismatched)."""


class UndefinedCorrelationError(CorrelationError):
    """Zero variance makes the requested coefficient undefined."""


@dataclass(frozen=True)
class TrialRecord:
    """Per-architecture measurements; immutable once written.

    Proxy values and the two accuracy measurements are optional because
    they arrive at different pipeline stages; ``failed`` marks diverged
    stand-alone runs so reports can exclude them with a logged count.
    """

    arch: str
    flops: float | None = None
    params: float | None = None
    zen_score: float | None = None
    supernet_loss: float | None = None
    supernet_accuracy: float | None = None
    standalone_loss: float | None = None
    standalone_accuracy: float | None = None
    seeds: dict = field(default_factory=dict)
    timestamp: str | None = None
    failed: bool = False
    note: str | None = None

    def __post_init__(self):
        for name in ("supernet_accuracy", "standalone_accuracy"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise EvaluationError(f"{name} must lie in [0, 1], got {v}")

    def field_value(self, name: str) -> float | None:
        if not hasattr(self, name) or name in ("seeds", "timestamp", "arch"):
            raise EvaluationError(f"unknown record field {name!r}")
        return getattr(self, name)

    def merged(self, **updates) -> "TrialRecord":
        return replace(self, **updates)


@dataclass(frozen=True)
class CorrelationReport:
    """Agreement between two record fields, coefficients on the 0-100 scale."""

    pearson: float
    spearman: float
    kendall: float
    n: int
    x_label: str
    y_label: str


def utc_timestamp() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


# -- correlation engine -------------------------------------------------------


def _average_ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=np.float64)
    sv = v[order]
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(np.sqrt((xc * xc).sum()))
    sy = float(np.sqrt((yc * yc).sum()))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError("zero variance in at least one argument")
    return float((xc * yc).sum() / (sx * sy))


def _kendall_tau_b(x: np.ndarray, y: np.ndarray) -> float:
    n = len(x)
    dx = np.sign(x[:, None] - x[None, :])
    dy = np.sign(y[:, None] - y[None, :])
    iu = np.triu_indices(n, k=1)
    s = float((dx[iu] * dy[iu]).sum())
    n0 = n * (n - 1) / 2
    ties_x = n0 - float((dx[iu] != 0).sum())
    ties_y = n0 - float((dy[iu] != 0).sum())
    denom = math.sqrt((n0 - ties_x) * (n0 - ties_y))
    if denom == 0.0:
        raise UndefinedCorrelationError("zero variance in at least one argument")
    return s / denom


def correlation(xs, ys, kind: str = "pearson") -> float:
    """Sample Pearson / Spearman rank / Kendall tau-b on the [-1, 1] scale."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise CorrelationError(f"need two equal-length vectors, got {x.shape} and {y.shape}")
    if len(x) < 3:
        raise CorrelationError(f"need at least 3 points, got {len(x)}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise CorrelationError("inputs must be finite")
    if kind == "pearson":
        return _pearson(x, y)
    if kind == "spearman":
        return _pearson(_average_ranks(x), _average_ranks(y))
    if kind == "kendall":
        return _kendall_tau_b(x, y)
    raise CorrelationError(f"unknown correlation kind {kind!r}")


def consistency_report(records, x_field: str, y_field: str) -> CorrelationReport:
    """All three coefficients between two record fields, scaled by 100."""
    xs, ys = [], []
    for rec in records:
        if rec.failed:
            continue
        xv = rec.field_value(x_field)
        yv = rec.field_value(y_field)
        if xv is None or yv is None:
            continue
        xs.append(float(xv))
        ys.append(float(yv))
    if len(xs) < 3:
        raise CorrelationError(
            f"need at least 3 usable records for {x_field} vs {y_field}, got {len(xs)}"
        )
    return CorrelationReport(
        pearson=100.0 * correlation(xs, ys, "pearson"),
        spearman=100.0 * correlation(xs, ys, "spearman"),
        kendall=100.0 * correlation(xs, ys, "kendall"),
        n=len(xs),
        x_label=x_field,
        y_label=y_field,
    )


# -- inherited-weight evaluation ----------------------------------------------


def recalibrate_bn(
    state: Supernet,
    arch: ArchSpec,
    data,
    steps: int = 20,
    batch_size: int = 64,
    seed: int = 0,
) -> Supernet:
    """Fresh evaluation snapshot with re-estimated normalisation statistics.

    Runs ``steps`` forward batches through the subnet with weights frozen,
    then replaces the active slices' running statistics by the plain
    average of the observed batch statistics.  The original state is left
    untouched.
    """
    if steps < 1:
        raise EvaluationError(f"steps must be >= 1, got {steps}")
    snap = state.clone()
    for bn in snap.bn_layers():
        bn.begin_calibration()
    done = 0
    epoch = 0
    while done < steps:
        progressed = False
        for x, _ in data.train_batches(batch_size, seed=[seed, 31, epoch]):
            snap.forward_arch(arch, x, mode="calibrate", need_grad=False)
            done += 1
            progressed = True
            if done >= steps:
                break
        epoch += 1
        if not progressed:
            raise EvaluationError(
                f"dataset yields no batches of size {batch_size}; cannot recalibrate"
            )
    for bn in snap.bn_layers():
        bn.finish_calibration()
    snap.eval()
    return snap


def _evaluate(forward_fn, data, batch_size: int = 256) -> tuple[float, float]:
    total, correct, loss_sum = 0, 0, 0.0
    for x, y in data.val_batches(batch_size):
        logits = forward_fn(x)
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss_sum += float(-logp[np.arange(len(y)), y].sum())
        correct += int((logits.argmax(axis=1) == y).sum())
        total += len(y)
    if total == 0:
        raise EvaluationError("empty evaluation set")
    return loss_sum / total, correct / total


def evaluate_subnet(state: Supernet, arch: ArchSpec, eval_data) -> tuple[float, float]:
    """Mean cross-entropy and top-1 accuracy with inherited weights.

    Expects an evaluation snapshot (typically post ``recalibrate_bn``);
    normalisation uses the snapshot's running statistics.
    """
    return _evaluate(
        lambda x: state.forward_arch(arch, x, mode="eval", need_grad=False)[0], eval_data
    )


def evaluate_standalone(net: SlimResNet, eval_data) -> tuple[float, float]:
    """Mean cross-entropy and top-1 accuracy of a standalone network."""
    return _evaluate(lambda x: net.forward_full(x, mode="eval", need_grad=False)[0], eval_data)


def train_standalone(
    arch: ArchSpec,
    train_config: TrainConfig,
    data,
    seed: int,
    net_config: SupernetConfig,
) -> TrialRecord:
    """Ground-truth oracle: train the subnet alone from a fresh init.

    Uses the same optimizer family as supernet training.  A diverged run
    (non-finite loss) yields a record marked failed instead of raising.
    """
    arch.validate(net_config.space)
    net = SlimResNet(subnet_plan(net_config, arch), np.random.default_rng([seed, 3]))
    net.train()
    opt = SGD(net.parameters(), lr_at(train_config, 0), train_config.momentum,
              train_config.weight_decay)
    enc = encode_arch(arch)
    for epoch in range(train_config.total_epochs):
        opt.lr = lr_at(train_config, epoch)
        for x, y in data.train_batches(train_config.batch_size, seed=[seed, 4, epoch]):
            logits, tape = net.forward_full(x, mode="train", need_grad=True)
            loss, dlogits = softmax_cross_entropy(logits, y)
            if not math.isfinite(loss):
                return TrialRecord(
                    arch=enc,
                    seeds={"standalone": seed},
                    timestamp=utc_timestamp(),
                    failed=True,
                    note=f"diverged at epoch {epoch}",
                )
            net.backward(tape, dlogits)
            opt.step()
            opt.zero_grad()
    net.eval()
    loss, acc = evaluate_standalone(net, data)
    return TrialRecord(
        arch=enc,
        standalone_loss=loss,
        standalone_accuracy=acc,
        seeds={"standalone": seed},
        timestamp=utc_timestamp(),
    )


# -- record store ---------------------------------------------------------------


def append_record(path, record: TrialRecord) -> None:
    """Append one record as a JSON line (atomic per record)."""
    line = json.dumps(config_io.to_plain(record), sort_keys=True)
    with open(path, "a") as fh:
        fh.write(line + "\n")
        fh.flush()


def read_records(path) -> list[TrialRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(config_io.from_plain(TrialRecord, json.loads(line)))
    return records


SUMMARY_COLUMNS = ("arch", "flops", "params", "zen_score", "supernet_acc", "standalone_acc")


def write_summary_csv(records, path) -> None:
    """Summary table with one row per record."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for rec in records:
            writer.writerow(
                [
                    rec.arch,
                    rec.flops,
                    rec.params,
                    rec.zen_score,
                    rec.supernet_accuracy,
                    rec.standalone_accuracy,
                ]
            )
