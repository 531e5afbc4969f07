"""Zero-cost priors: parameter count, FLOPs, and a Gaussian-complexity score.

All three are pure functions of (architecture, network config[, seed]).
FLOPs are multiply-accumulate counts (MACs, not 2x MACs); normalisation
and activation layers are excluded.  The convention only matters up to a
constant factor since priors feed ratios and orderings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import layers
from .layers import ActivationKind, conv_output_hw
from .network import NetPlan, SlimResNet, SupernetConfig, subnet_plan
from .space import ArchSpec

ZEN_DEFAULT_ALPHA = 0.01
ZEN_DEFAULT_REPEATS = 32
ZEN_DEFAULT_BATCH = 16


class ProxyError(ValueError):
    """Proxy computation failed."""


class NonFiniteScoreError(ProxyError):
    """A proxy score came out non-finite; carries a diagnostic."""

    def __init__(self, diagnostic: str):
        super().__init__(diagnostic)
        self.diagnostic = diagnostic


class ProxyKind(str, Enum):
    PARAMS = "params"
    FLOPS = "flops"
    ZEN_SCORE = "zen_score"


@dataclass(frozen=True)
class ProxyScore:
    """A prior value attached to one architecture."""

    kind: ProxyKind
    value: float
    arch: ArchSpec
    seed: int | None = None


@dataclass(frozen=True)
class ZenScoreResult:
    """Gaussian-complexity score with a finiteness flag.

    ``finite`` is False when the score degenerated (zero feature
    difference or zero channel variance); ``diagnostic`` then names the
    offending term instead of leaking a silent NaN downstream.
    """

    value: float
    finite: bool
    diagnostic: str | None
    seed: int
    alpha: float
    repeats: int
    batch: int


def conv_flops(kernel: int, c_in: int, c_out: int, h_out: int, w_out: int) -> int:
    """MACs of one convolution layer: k^2 * Cin * Cout * Hout * Wout."""
    return kernel * kernel * c_in * c_out * h_out * w_out


def linear_flops(c_in: int, c_out: int) -> int:
    """MACs of one dense layer (per sample, bias excluded)."""
    return c_in * c_out


def linear_params(c_in: int, c_out: int) -> int:
    """Scalar parameters of one dense layer with bias."""
    return c_in * c_out + c_out


def plan_flops(plan: NetPlan) -> int:
    """MAC count of a concrete plan; normalisation and activations excluded."""
    h, w = plan.input_resolution
    ho, wo = conv_output_hw(h, w, plan.stem_kernel, 1)
    total = conv_flops(plan.stem_kernel, plan.in_channels, plan.stem_channels, ho, wo)
    h, w = ho, wo
    for stage in plan.stages:
        for bp in stage:
            ho, wo = conv_output_hw(h, w, 3, bp.stride)
            total += conv_flops(3, bp.in_channels, bp.max_width, ho, wo)
            total += conv_flops(3, bp.max_width, bp.base_channels, ho, wo)
            if bp.has_projection:
                total += conv_flops(1, bp.in_channels, bp.base_channels, ho, wo)
            h, w = ho, wo
    total += linear_flops(plan.stages[-1][0].base_channels, plan.num_classes)
    return total


def plan_params(plan: NetPlan) -> int:
    """Trainable scalar count: conv weights, BN affine terms, PReLU slopes, classifier."""
    total = plan.stem_kernel**2 * plan.in_channels * plan.stem_channels
    total += 2 * plan.stem_channels
    act_slopes = int(plan.internal_activation is ActivationKind.PRELU) + int(
        plan.external_activation is ActivationKind.PRELU
    )
    for stage in plan.stages:
        for bp in stage:
            total += 9 * bp.in_channels * bp.max_width + 2 * bp.max_width
            total += 9 * bp.max_width * bp.base_channels + 2 * bp.base_channels
            if bp.has_projection:
                total += bp.in_channels * bp.base_channels + 2 * bp.base_channels
            total += act_slopes
    total += linear_params(plan.stages[-1][0].base_channels, plan.num_classes)
    return total


def count_flops(arch: ArchSpec, config: SupernetConfig) -> int:
    """MACs of one subnet at the widths/depths it actually executes."""
    return plan_flops(subnet_plan(config, arch))


def count_params(arch: ArchSpec, config: SupernetConfig) -> int:
    """Scalar parameters one subnet actually uses."""
    return plan_params(subnet_plan(config, arch))


def gaussian_complexity(
    forward_fn,
    input_shape: tuple[int, ...],
    rng: np.random.Generator,
    alpha: float,
    repeats: int,
    batch: int,
) -> tuple[float, str | None]:
    """Core of the expressivity score.

    ``forward_fn(x)`` must return ``(pre_gap_features, bn_batch_variances)``
    where the second element lists each normalisation layer's per-channel
    batch variance for that forward (empty list if the net has none).

    Score = log( mean_r || (f(x_r) - f(x_r + alpha*eps_r)) / alpha ||_F )
          + sum over normalisation layers of log sqrt(mean_c variance_c),
    with variances averaged over repeats from the unperturbed forwards.

    Returns ``(score, diagnostic)``; diagnostic is None when the score is
    finite.
    """
    if alpha <= 0:
        raise ProxyError(f"alpha must be positive, got {alpha}")
    if repeats < 1:
        raise ProxyError(f"repeats must be >= 1, got {repeats}")
    norms = []
    var_sums: list[np.ndarray] | None = None
    for _ in range(repeats):
        x = rng.standard_normal((batch, *input_shape)).astype(layers.DTYPE)
        eps = rng.standard_normal((batch, *input_shape)).astype(layers.DTYPE)
        f1, bn_vars = forward_fn(x)
        f2, _ = forward_fn(x + alpha * eps)
        norms.append(float(np.linalg.norm((f1.astype(np.float64) - f2) / alpha)))
        if var_sums is None:
            var_sums = [np.asarray(v, dtype=np.float64).copy() for v in bn_vars]
        else:
            for acc, v in zip(var_sums, bn_vars):
                acc += v
    mean_norm = float(np.mean(norms))
    if not math.isfinite(mean_norm) or mean_norm <= 0.0:
        return float("nan"), f"degenerate feature difference (mean norm {mean_norm})"
    score = math.log(mean_norm)
    for i, acc in enumerate(var_sums or []):
        mean_var = float(np.mean(acc / repeats))
        if not math.isfinite(mean_var) or mean_var <= 0.0:
            return float("nan"), f"normalisation layer {i} has degenerate variance {mean_var}"
        score += math.log(math.sqrt(mean_var))
    if not math.isfinite(score):
        return float("nan"), "non-finite score"
    return score, None


def zen_score_result(
    arch: ArchSpec,
    config: SupernetConfig,
    seed: int,
    alpha: float = ZEN_DEFAULT_ALPHA,
    repeats: int = ZEN_DEFAULT_REPEATS,
    batch: int = ZEN_DEFAULT_BATCH,
) -> ZenScoreResult:
    """Expressivity prior of one architecture; never raises on degeneracy.

    The subnet is built fresh with Gaussian fan-scaled weights (never from
    trained supernet weights), features are taken before global average
    pooling, and normalisation runs on batch statistics.
    """
    rng = np.random.default_rng(seed)
    net = SlimResNet(subnet_plan(config, arch), rng)
    net.train()

    def forward_fn(x):
        with np.errstate(over="ignore", invalid="ignore"):
            feats, bn_vars = net.forward_full(
                x, mode="train", need_grad=False, pre_gap=True, collect_bn_variance=True
            )
        return feats, bn_vars

    h, w = config.space.input_resolution
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        value, diagnostic = gaussian_complexity(
            forward_fn, (config.in_channels, h, w), rng, alpha, repeats, batch
        )
    return ZenScoreResult(
        value=value,
        finite=diagnostic is None,
        diagnostic=diagnostic,
        seed=seed,
        alpha=alpha,
        repeats=repeats,
        batch=batch,
    )


def zen_score(
    arch: ArchSpec,
    config: SupernetConfig,
    seed: int,
    alpha: float = ZEN_DEFAULT_ALPHA,
    repeats: int = ZEN_DEFAULT_REPEATS,
    batch: int = ZEN_DEFAULT_BATCH,
) -> float:
    """Expressivity prior; raises NonFiniteScoreError on degeneracy."""
    result = zen_score_result(arch, config, seed, alpha, repeats, batch)
    if not result.finite:
        raise NonFiniteScoreError(result.diagnostic or "non-finite score")
    return result.value


def score_proxy(
    kind: ProxyKind | str,
    arch: ArchSpec,
    config: SupernetConfig,
    seed: int = 0,
    **zen_kwargs,
) -> ProxyScore:
    """Uniform entry point used by the CLI and the prior cache."""
    kind = ProxyKind(kind)
    if kind is ProxyKind.PARAMS:
        return ProxyScore(kind, count_params(arch, config), arch)
    if kind is ProxyKind.FLOPS:
        return ProxyScore(kind, count_flops(arch, config), arch)
    return ProxyScore(kind, zen_score(arch, config, seed, **zen_kwargs), arch, seed=seed)
