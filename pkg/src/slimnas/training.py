"""Supernet training: balanced sandwich steps, in-place distillation,
prior-guided pairwise rank loss under a per-epoch coefficient schedule.

One sandwich step performs, in order: the maximum path with hard-label
cross-entropy, the minimum path distilled from the (gradient-stopped)
maximum logits, ``n_subnets - 2`` balanced-sampler middle paths also
distilled, then ``m_pairs`` random pairs whose hard-label losses feed a
hinge that penalises disagreement with the prior's ordering.  Gradients
accumulate across all paths; a single optimizer step closes the step.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .network import Supernet
from . import layers as _layers


def layers_dtype():
    return _layers.DTYPE
from .proxies import (
    NonFiniteScoreError,
    ProxyKind,
    count_flops,
    count_params,
    zen_score,
)
from .space import ArchSpec, SamplerKind, encode_arch, maximum_arch, minimum_arch, sample
from enum import Enum


class TrainingError(ValueError):
    """Invalid training configuration or loss-contract violation."""


class ScheduleError(TrainingError):
    """Schedule evaluated outside its domain."""


class ScheduleKind(str, Enum):
    CONSTANT = "constant"
    WARMUP = "warmup"
    COSINE = "cosine"
    MULTISTAGE = "multistage"


class TrainStrategy(str, Enum):
    SANDWICH = "sandwich"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class ScheduleSpec:
    """Rank-loss coefficient schedule, evaluated once per epoch."""

    kind: ScheduleKind = ScheduleKind.WARMUP
    lambda_max: float = 2.0
    warmup_epochs: int = 20
    stage_fractions: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)

    def __post_init__(self):
        if self.lambda_max < 0:
            raise TrainingError(f"lambda_max must be >= 0, got {self.lambda_max}")
        if self.warmup_epochs < 0:
            raise TrainingError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if len(self.stage_fractions) != 4:
            raise TrainingError("stage_fractions needs exactly 4 entries")
        if any(f < 0 for f in self.stage_fractions):
            raise TrainingError("stage_fractions must be non-negative")
        if abs(sum(self.stage_fractions) - 1.0) > 1e-9:
            raise TrainingError(f"stage_fractions must sum to 1, got {sum(self.stage_fractions)}")


def lambda_at(schedule: ScheduleSpec, epoch: int, total_epochs: int) -> float:
    """Coefficient for the rank-loss term at a given epoch.

    constant: lambda_max throughout.
    warmup: linear 0 -> lambda_max over ``warmup_epochs``, then constant.
    cosine: lambda_max * (1 - cos(2*pi*epoch/total)) / 2, rising then falling.
    multistage: zero / linear-warmup / constant / linear-decay stages split
        by ``stage_fractions`` of the total epoch count.
    """
    if total_epochs < 1:
        raise ScheduleError(f"total_epochs must be >= 1, got {total_epochs}")
    if not 0 <= epoch < total_epochs:
        raise ScheduleError(f"epoch {epoch} outside [0, {total_epochs})")
    lam = schedule.lambda_max
    if schedule.kind is ScheduleKind.CONSTANT:
        return lam
    if schedule.kind is ScheduleKind.WARMUP:
        if schedule.warmup_epochs > total_epochs:
            raise ScheduleError(
                f"warmup_epochs {schedule.warmup_epochs} exceeds total_epochs {total_epochs}"
            )
        if schedule.warmup_epochs == 0:
            return lam
        return lam * min(1.0, epoch / schedule.warmup_epochs)
    if schedule.kind is ScheduleKind.COSINE:
        return lam * 0.5 * (1.0 - math.cos(2.0 * math.pi * epoch / total_epochs))
    f0, f1, f2, _ = schedule.stage_fractions
    b0 = f0 * total_epochs
    b1 = (f0 + f1) * total_epochs
    b2 = (f0 + f1 + f2) * total_epochs
    if epoch < b0:
        return 0.0
    if epoch < b1:
        return lam * (epoch - b0) / (b1 - b0)
    if epoch < b2:
        return lam
    if total_epochs == b2:
        return lam
    return lam * (1.0 - (epoch - b2) / (total_epochs - b2))


@dataclass(frozen=True)
class TrainConfig:
    """Knobs of one supernet training run."""

    total_epochs: int
    batch_size: int = 64
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_warmup_epochs: int = 5
    n_subnets: int = 4
    m_pairs: int = 2
    prior: ProxyKind = ProxyKind.FLOPS
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    seed: int = 0
    balanced_candidates: int = 8
    strategy: TrainStrategy = TrainStrategy.SANDWICH
    margin: float = 0.0

    def __post_init__(self):
        if self.total_epochs < 1:
            raise TrainingError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.n_subnets < 2:
            raise TrainingError(f"n_subnets must be >= 2, got {self.n_subnets}")
        if self.m_pairs < 0:
            raise TrainingError(f"m_pairs must be >= 0, got {self.m_pairs}")
        if self.balanced_candidates < 1:
            raise TrainingError(
                f"balanced_candidates must be >= 1, got {self.balanced_candidates}"
            )


@dataclass(frozen=True)
class RankPairLog:
    arch_a: str
    arch_b: str
    prior_a: float
    prior_b: float
    loss_a: float
    loss_b: float
    value: float


@dataclass(frozen=True)
class TrainStepLog:
    """Structured record of one optimizer step."""

    step: int
    epoch: int
    lambda_value: float
    lr: float
    arch_encodings: tuple[str, ...]
    n_forwards: int
    optimizer_steps: int
    max_loss: float | None = None
    min_distill_loss: float | None = None
    middle_distill_losses: tuple[float, ...] = ()
    rank_pairs: tuple[RankPairLog, ...] = ()
    single_path_loss: float | None = None
    skipped_pairs: int = 0
    aborted: bool = False
    diagnostic: str | None = None

    def all_losses(self) -> list[float]:
        out = [self.max_loss, self.min_distill_loss, self.single_path_loss]
        out.extend(self.middle_distill_losses)
        for p in self.rank_pairs:
            out.extend((p.loss_a, p.loss_b, p.value))
        return [v for v in out if v is not None]


# -- losses ---------------------------------------------------------------


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(logits))


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean hard-label cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise TrainingError(f"bad shapes: logits {logits.shape}, labels {labels.shape}")
    n = logits.shape[0]
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, (grad / n).astype(layers_dtype())


def distill_loss(teacher_logits: np.ndarray, student_logits: np.ndarray) -> float:
    """Soft cross-entropy from gradient-stopped teacher logits (batch mean)."""
    return _distill(teacher_logits, student_logits)[0]


def distill_loss_grad(
    teacher_logits: np.ndarray, student_logits: np.ndarray
) -> tuple[float, np.ndarray]:
    """Soft cross-entropy and its gradient w.r.t. the student logits only."""
    return _distill(teacher_logits, student_logits)


def _distill(teacher_logits: np.ndarray, student_logits: np.ndarray) -> tuple[float, np.ndarray]:
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    student_logits = np.asarray(student_logits, dtype=np.float64)
    if teacher_logits.shape != student_logits.shape or teacher_logits.ndim != 2:
        raise TrainingError(
            f"teacher/student shape mismatch: {teacher_logits.shape} vs {student_logits.shape}"
        )
    n = teacher_logits.shape[0]
    p_teacher = softmax(teacher_logits)
    logp_student = _log_softmax(student_logits)
    loss = float(-(p_teacher * logp_student).sum(axis=1).mean())
    grad = (np.exp(logp_student) - p_teacher) / n
    return loss, grad.astype(layers_dtype())


def rank_loss(k_a: float, k_b: float, loss_a: float, loss_b: float, margin: float = 0.0) -> float:
    """Hinge on prior-vs-loss ordering disagreement.

    The member with the higher prior is predicted better, hence should
    carry the LOWER supernet loss; the hinge activates when it does not
    (plus an optional margin).
    """
    return rank_loss_grad(k_a, k_b, loss_a, loss_b, margin)[0]


def rank_loss_grad(
    k_a: float, k_b: float, loss_a: float, loss_b: float, margin: float = 0.0
) -> tuple[float, float, float]:
    """Rank loss plus its derivatives w.r.t. ``loss_a`` and ``loss_b``."""
    for name, v in (("k_a", k_a), ("k_b", k_b), ("loss_a", loss_a), ("loss_b", loss_b)):
        if not math.isfinite(v):
            raise TrainingError(f"{name} must be finite, got {v}")
    if k_a == k_b:
        raise TrainingError("rank loss needs strictly ordered priors (k_a != k_b)")
    if k_a > k_b:
        raw = loss_a - loss_b + margin
        sign_a, sign_b = 1.0, -1.0
    else:
        raw = loss_b - loss_a + margin
        sign_a, sign_b = -1.0, 1.0
    if raw <= 0.0:
        return 0.0, 0.0, 0.0
    return raw, sign_a, sign_b


# -- optimizer and prior cache ---------------------------------------------


class SGD:
    """Plain SGD with classical momentum and optional L2 weight decay."""

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.value
            v *= self.momentum
            v += g
            p.value -= self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Cosine decay with linear warmup over ``lr_warmup_epochs``."""
    w = min(config.lr_warmup_epochs, config.total_epochs)
    if epoch < w:
        return config.lr * (epoch + 1) / w
    if config.total_epochs == w:
        return config.lr
    t = (epoch - w) / (config.total_epochs - w)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * t))


class PriorCache:
    """Per-architecture prior values, computed once and reused.

    FLOPs/params are exact; the expressivity score uses one fixed seed for
    the whole run so the prior stays a consistent function of the
    architecture.
    """

    def __init__(self, net_config, kind: ProxyKind, zen_seed: int = 0):
        self.net_config = net_config
        self.kind = ProxyKind(kind)
        self.zen_seed = zen_seed
        self._flops: dict[str, int] = {}
        self._prior: dict[str, float] = {}

    def flops(self, arch: ArchSpec) -> int:
        key = encode_arch(arch)
        if key not in self._flops:
            self._flops[key] = count_flops(arch, self.net_config)
        return self._flops[key]

    def prior(self, arch: ArchSpec) -> float:
        key = encode_arch(arch)
        if key not in self._prior:
            if self.kind is ProxyKind.FLOPS:
                value = float(self.flops(arch))
            elif self.kind is ProxyKind.PARAMS:
                value = float(count_params(arch, self.net_config))
            else:
                value = zen_score(arch, self.net_config, self.zen_seed)
            self._prior[key] = value
        return self._prior[key]


# -- the training step -------------------------------------------------------


def train_step(
    state: Supernet,
    batch: tuple[np.ndarray, np.ndarray],
    config: TrainConfig,
    epoch: int,
    rng: np.random.Generator,
    optimizer: SGD,
    priors: PriorCache,
    step_index: int = 0,
) -> TrainStepLog:
    """One optimizer step of the configured strategy on one mini-batch."""
    if not state.training:
        raise TrainingError("train_step requires the supernet in training mode")
    lam = lambda_at(config.schedule, epoch, config.total_epochs)
    lr = optimizer.lr
    if config.strategy is TrainStrategy.UNIFORM:
        return _train_step_single_path(
            state, batch, config, epoch, rng, optimizer, lam, lr, step_index
        )

    x, y = batch
    space = state.config.space
    encs: list[str] = []
    n_forwards = 0

    # 1) maximum path against the true labels.
    arch_max = maximum_arch(space)
    logits_max, tape = state.forward_arch(arch_max, x, need_grad=True)
    n_forwards += 1
    encs.append(encode_arch(arch_max))
    max_loss, dlogits = softmax_cross_entropy(logits_max, y)
    state.backward(tape, dlogits)

    # 2) gradient-stopped maximum logits become the distillation target.
    teacher = logits_max.copy()

    # 3) minimum path distilled from the teacher.
    arch_min = minimum_arch(space)
    logits, tape = state.forward_arch(arch_min, x, need_grad=True)
    n_forwards += 1
    encs.append(encode_arch(arch_min))
    min_loss, dlogits = distill_loss_grad(teacher, logits)
    state.backward(tape, dlogits)

    # 4) balanced-sampler middle paths, also distilled.
    middle_losses = []
    for _ in range(config.n_subnets - 2):
        arch = sample(
            SamplerKind.BALANCED,
            space,
            rng,
            n_candidates=config.balanced_candidates,
            flops_fn=priors.flops,
        )
        logits, tape = state.forward_arch(arch, x, need_grad=True)
        n_forwards += 1
        encs.append(encode_arch(arch))
        loss, dlogits = distill_loss_grad(teacher, logits)
        middle_losses.append(loss)
        state.backward(tape, dlogits)

    # 5) prior-guided rank loss on fresh random pairs.
    pair_logs = []
    skipped = 0
    diagnostic = None
    for _ in range(config.m_pairs):
        pair = _draw_ranked_pair(space, rng, priors)
        if pair is None:
            skipped += 1
            continue
        arch_a, arch_b, k_a, k_b = pair
        logits_a, tape_a = state.forward_arch(arch_a, x, need_grad=True)
        logits_b, tape_b = state.forward_arch(arch_b, x, need_grad=True)
        n_forwards += 2
        encs.extend((encode_arch(arch_a), encode_arch(arch_b)))
        loss_a, dl_a = softmax_cross_entropy(logits_a, y)
        loss_b, dl_b = softmax_cross_entropy(logits_b, y)
        value, g_a, g_b = rank_loss_grad(k_a, k_b, loss_a, loss_b, config.margin)
        if lam != 0.0 and value > 0.0:
            state.backward(tape_a, (lam * g_a) * dl_a)
            state.backward(tape_b, (lam * g_b) * dl_b)
        pair_logs.append(
            RankPairLog(
                arch_a=encode_arch(arch_a),
                arch_b=encode_arch(arch_b),
                prior_a=k_a,
                prior_b=k_b,
                loss_a=loss_a,
                loss_b=loss_b,
                value=value,
            )
        )

    log = TrainStepLog(
        step=step_index,
        epoch=epoch,
        lambda_value=lam,
        lr=lr,
        arch_encodings=tuple(encs),
        n_forwards=n_forwards,
        optimizer_steps=0,
        max_loss=max_loss,
        min_distill_loss=min_loss,
        middle_distill_losses=tuple(middle_losses),
        rank_pairs=tuple(pair_logs),
        skipped_pairs=skipped,
    )
    return _finish_step(state, optimizer, log)


def _train_step_single_path(
    state, batch, config, epoch, rng, optimizer, lam, lr, step_index
) -> TrainStepLog:
    """SPOS-style baseline: one uniform path, hard labels, one step."""
    x, y = batch
    arch = sample(SamplerKind.UNIFORM, state.config.space, rng)
    logits, tape = state.forward_arch(arch, x, need_grad=True)
    loss, dlogits = softmax_cross_entropy(logits, y)
    state.backward(tape, dlogits)
    log = TrainStepLog(
        step=step_index,
        epoch=epoch,
        lambda_value=lam,
        lr=lr,
        arch_encodings=(encode_arch(arch),),
        n_forwards=1,
        optimizer_steps=0,
        single_path_loss=loss,
    )
    return _finish_step(state, optimizer, log)


def _draw_ranked_pair(space, rng, priors: PriorCache):
    """Two uniform archs with strictly ordered priors.

    Equal-prior draws are retried once, then the pair slot is skipped.
    """
    for _ in range(2):
        arch_a = sample(SamplerKind.UNIFORM, space, rng)
        arch_b = sample(SamplerKind.UNIFORM, space, rng)
        try:
            k_a = priors.prior(arch_a)
            k_b = priors.prior(arch_b)
        except NonFiniteScoreError:
            continue
        if k_a != k_b:
            return arch_a, arch_b, k_a, k_b
    return None


def _finish_step(state: Supernet, optimizer: SGD, log: TrainStepLog) -> TrainStepLog:
    losses = log.all_losses()
    if not all(math.isfinite(v) for v in losses):
        optimizer.zero_grad()
        return _replace(log, aborted=True, diagnostic=f"non-finite loss in step {log.step}")
    optimizer.step()
    optimizer.zero_grad()
    return _replace(log, optimizer_steps=1)


def _replace(log: TrainStepLog, **kw) -> TrainStepLog:
    import dataclasses

    return dataclasses.replace(log, **kw)


# -- the full loop ------------------------------------------------------------


@dataclass
class TrainResult:
    state: Supernet
    step_logs: list[TrainStepLog]

    @property
    def final_max_loss(self) -> float | None:
        for log in reversed(self.step_logs):
            if log.max_loss is not None:
                return log.max_loss
        return None


def train_supernet(
    config: TrainConfig,
    data,
    state: Supernet,
    log_path=None,
    priors: PriorCache | None = None,
) -> TrainResult:
    """Run ``total_epochs`` of training steps over the dataset.

    Deterministic given ``config.seed`` and the dataset: batch order and
    every sampler draw derive from it.  Per-step logs are returned and,
    when ``log_path`` is given, streamed as JSON lines.
    """
    from . import config_io

    state.train()
    optimizer = SGD(state.parameters(), lr_at(config, 0), config.momentum, config.weight_decay)
    priors = priors or PriorCache(state.config, config.prior, zen_seed=config.seed)
    sampler_rng = np.random.default_rng([config.seed, 1])
    logs: list[TrainStepLog] = []
    sink = open(log_path, "w") if log_path is not None else None
    step = 0
    try:
        for epoch in range(config.total_epochs):
            optimizer.lr = lr_at(config, epoch)
            for batch in data.train_batches(config.batch_size, seed=[config.seed, 2, epoch]):
                log = train_step(
                    state, batch, config, epoch, sampler_rng, optimizer, priors, step_index=step
                )
                logs.append(log)
                if sink is not None:
                    sink.write(json.dumps(config_io.to_plain(log), sort_keys=True) + "\n")
                step += 1
    finally:
        if sink is not None:
            sink.close()
    return TrainResult(state=state, step_logs=logs)
