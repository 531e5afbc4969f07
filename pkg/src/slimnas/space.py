"""Searchable architecture space: definition, counting, sampling, encoding.

The space describes a slimmable residual backbone.  Each stage has a
searchable block count (depth), and every active block has a searchable
expansion ratio drawn from a fixed ratio set.  Channel widths derived
from ratios are snapped to a hardware-friendly divisor.

Two distinct ratio choices count as distinct architectures even when
they snap to the same width; this is the convention under which the
full-scale space has exactly ``19600**3 * 6725593`` members.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_ENUMERATION_CAP = 100_000


class SpaceError(ValueError):
    """Invalid space configuration, architecture, or sampler request."""


class ArchParseError(SpaceError):
    """An architecture string could not be parsed or validated.

    Attributes:
        position: character offset into the string where parsing failed.
    """

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


@dataclass(frozen=True)
class SpaceConfig:
    """Definition of the searchable space.

    Attributes:
        stage_base_channels: output channels of each stage at ratio 1.0.
        depth_ranges: inclusive (min, max) block counts per stage.
        ratio_set: candidate expansion ratios, strictly decreasing,
            starting at 1.0.
        divisor: widths are snapped to multiples of this value.
        input_resolution: (height, width) of network inputs.
        num_classes: classifier output size.
    """

    stage_base_channels: tuple[int, ...]
    depth_ranges: tuple[tuple[int, int], ...]
    ratio_set: tuple[float, ...]
    divisor: int = 8
    input_resolution: tuple[int, int] = (32, 32)
    num_classes: int = 10

    def __post_init__(self):
        if len(self.stage_base_channels) != len(self.depth_ranges):
            raise SpaceError(
                "stage_base_channels and depth_ranges must have equal length, "
                f"got {len(self.stage_base_channels)} and {len(self.depth_ranges)}"
            )
        if not self.stage_base_channels:
            raise SpaceError("space needs at least one stage")
        if self.divisor < 1:
            raise SpaceError(f"divisor must be >= 1, got {self.divisor}")
        for c in self.stage_base_channels:
            if c < 1:
                raise SpaceError(f"stage base channels must be positive, got {c}")
            if c % self.divisor != 0:
                raise SpaceError(
                    f"stage base channels must be divisible by {self.divisor}, got {c}"
                )
        for lo, hi in self.depth_ranges:
            if lo < 1 or lo > hi:
                raise SpaceError(f"bad depth range ({lo}, {hi}): need 1 <= min <= max")
        if not self.ratio_set or self.ratio_set[0] != 1.0:
            raise SpaceError("ratio_set must start at 1.0")
        for a, b in zip(self.ratio_set, self.ratio_set[1:]):
            if not b < a:
                raise SpaceError("ratio_set must be strictly decreasing")
        if any(not 0.0 < r <= 1.0 for r in self.ratio_set):
            raise SpaceError("ratios must lie in (0, 1]")
        if self.num_classes < 1:
            raise SpaceError(f"num_classes must be positive, got {self.num_classes}")
        h, w = self.input_resolution
        if h < 1 or w < 1:
            raise SpaceError(f"bad input resolution {self.input_resolution}")

    @property
    def num_stages(self) -> int:
        return len(self.stage_base_channels)

    @property
    def max_depths(self) -> tuple[int, ...]:
        return tuple(hi for _, hi in self.depth_ranges)

    @property
    def min_depths(self) -> tuple[int, ...]:
        return tuple(lo for lo, _ in self.depth_ranges)


@dataclass(frozen=True)
class ArchSpec:
    """One candidate architecture.

    ``ratio_indices`` holds one index into the ratio set per ACTIVE block,
    in stage-major order; truncating a stage's depth drops that stage's
    trailing entries.  Length always equals ``sum(depths)``.
    """

    depths: tuple[int, ...]
    ratio_indices: tuple[int, ...]

    def validate(self, config: SpaceConfig) -> None:
        """Raise SpaceError unless this spec is valid for ``config``."""
        if len(self.depths) != config.num_stages:
            raise SpaceError(
                f"arch has {len(self.depths)} stages, space has {config.num_stages}"
            )
        for s, d in enumerate(self.depths):
            lo, hi = config.depth_ranges[s]
            if not lo <= d <= hi:
                raise SpaceError(f"stage {s} depth {d} outside range ({lo}, {hi})")
        if len(self.ratio_indices) != sum(self.depths):
            raise SpaceError(
                f"expected {sum(self.depths)} ratio indices, got {len(self.ratio_indices)}"
            )
        for i in self.ratio_indices:
            if not 0 <= i < len(config.ratio_set):
                raise SpaceError(f"ratio index {i} outside ratio set")

    def stage_ratio_indices(self, stage: int) -> tuple[int, ...]:
        """Ratio indices of the active blocks of one stage."""
        start = sum(self.depths[:stage])
        return self.ratio_indices[start : start + self.depths[stage]]


class SamplerKind(str, Enum):
    UNIFORM = "uniform"
    MAXIMUM = "maximum"
    MINIMUM = "minimum"
    BALANCED = "balanced"


def resnet48_space() -> SpaceConfig:
    """Full-scale space over the ResNet48 backbone (4 stages, 7 ratios)."""
    return SpaceConfig(
        stage_base_channels=(64, 128, 256, 512),
        depth_ranges=((2, 5), (2, 5), (2, 8), (2, 5)),
        ratio_set=(1.0, 0.95, 0.9, 0.85, 0.8, 0.75, 0.7),
        divisor=8,
        input_resolution=(224, 224),
        num_classes=1000,
    )


def tiny_space(num_classes: int = 10, resolution: tuple[int, int] = (8, 8)) -> SpaceConfig:
    """Desk-scale space: 2 stages, 144 architectures, fully enumerable."""
    return SpaceConfig(
        stage_base_channels=(16, 32),
        depth_ranges=((1, 2), (1, 2)),
        ratio_set=(1.0, 0.75, 0.5),
        divisor=8,
        input_resolution=resolution,
        num_classes=num_classes,
    )


def make_divisible(value: float, divisor: int) -> int:
    """Snap a channel count to a multiple of ``divisor``.

    Rounds to the nearest multiple (half up), never below ``divisor``,
    and bumps up one multiple if the result would fall under 90% of the
    requested value.
    """
    if value <= 0:
        raise SpaceError(f"channel count must be positive, got {value}")
    if divisor < 1:
        raise SpaceError(f"divisor must be >= 1, got {divisor}")
    snapped = max(divisor, int(math.floor(value + divisor / 2)) // divisor * divisor)
    if snapped < 0.9 * value:
        snapped += divisor
    return snapped


def block_width(stage_base: int, ratio: float, divisor: int) -> int:
    """Active internal width of a block: ratio-scaled base, snapped."""
    return make_divisible(stage_base * ratio, divisor)


def block_widths(config: SpaceConfig, arch: ArchSpec) -> tuple[int, ...]:
    """Active internal widths of every active block, stage-major."""
    arch.validate(config)
    widths = []
    for s in range(config.num_stages):
        base = config.stage_base_channels[s]
        for idx in arch.stage_ratio_indices(s):
            widths.append(block_width(base, config.ratio_set[idx], config.divisor))
    return tuple(widths)


def space_size(config: SpaceConfig) -> int:
    """Exact number of architectures in the space.

    Per stage the count is sum over admissible depths d of R**d where R
    is the ratio-set size; stages multiply.  Ratio choices that snap to
    equal widths still count as distinct.
    """
    r = len(config.ratio_set)
    total = 1
    for lo, hi in config.depth_ranges:
        total *= sum(r**d for d in range(lo, hi + 1))
    return total


def maximum_arch(config: SpaceConfig) -> ArchSpec:
    """Largest member: max depth everywhere, every ratio at 1.0."""
    depths = config.max_depths
    return ArchSpec(depths, (0,) * sum(depths))


def minimum_arch(config: SpaceConfig) -> ArchSpec:
    """Smallest member: min depth everywhere, every ratio at the smallest value."""
    depths = config.min_depths
    return ArchSpec(depths, (len(config.ratio_set) - 1,) * sum(depths))


def _stage_choices(config: SpaceConfig, stage: int) -> list[tuple[int, tuple[int, ...]]]:
    lo, hi = config.depth_ranges[stage]
    r = len(config.ratio_set)
    out = []
    for d in range(lo, hi + 1):
        out.extend((d, idxs) for idxs in itertools.product(range(r), repeat=d))
    return out


def enumerate_space(
    config: SpaceConfig, cap: int = DEFAULT_ENUMERATION_CAP
) -> Iterator[ArchSpec]:
    """Yield every architecture exactly once, in a fixed deterministic order.

    Refuses spaces larger than ``cap`` so a typo'd config cannot start a
    yotta-scale enumeration.
    """
    size = space_size(config)
    if size > cap:
        raise SpaceError(
            f"space holds {size} architectures, refusing to enumerate above cap {cap}"
        )
    per_stage = [_stage_choices(config, s) for s in range(config.num_stages)]
    for combo in itertools.product(*per_stage):
        depths = tuple(d for d, _ in combo)
        ratios = tuple(i for _, idxs in combo for i in idxs)
        yield ArchSpec(depths, ratios)


def sample(
    kind: SamplerKind,
    config: SpaceConfig,
    rng: np.random.Generator | None = None,
    n_candidates: int = 8,
    flops_fn: Callable[[ArchSpec], float] | None = None,
) -> ArchSpec:
    """Draw one architecture.

    ``maximum`` and ``minimum`` are deterministic and ignore ``rng``.
    ``uniform`` draws each stage depth and each active ratio index
    uniformly.  ``balanced`` draws ``n_candidates`` uniform specs and
    keeps one with probability proportional to its FLOPs; candidates are
    drawn fresh on every call.
    """
    kind = SamplerKind(kind)
    if kind is SamplerKind.MAXIMUM:
        return maximum_arch(config)
    if kind is SamplerKind.MINIMUM:
        return minimum_arch(config)
    if rng is None:
        raise SpaceError(f"{kind.value} sampler needs an rng")
    if kind is SamplerKind.UNIFORM:
        return _sample_uniform(config, rng)
    if n_candidates < 1:
        raise SpaceError(f"balanced sampler needs n_candidates >= 1, got {n_candidates}")
    if flops_fn is None:
        raise SpaceError("balanced sampler needs a flops_fn")
    candidates = [_sample_uniform(config, rng) for _ in range(n_candidates)]
    return balanced_select(candidates, [flops_fn(a) for a in candidates], rng)


def balanced_select(
    candidates: Sequence[ArchSpec], flops: Sequence[float], rng: np.random.Generator
) -> ArchSpec:
    """Pick one candidate with probability proportional to its FLOPs."""
    if len(candidates) != len(flops) or not candidates:
        raise SpaceError("need one FLOPs value per candidate")
    weights = np.asarray(flops, dtype=np.float64)
    if (weights <= 0).any():
        raise SpaceError("FLOPs must be positive")
    probs = weights / weights.sum()
    return candidates[int(rng.choice(len(candidates), p=probs))]


def _sample_uniform(config: SpaceConfig, rng: np.random.Generator) -> ArchSpec:
    depths = tuple(int(rng.integers(lo, hi + 1)) for lo, hi in config.depth_ranges)
    n_blocks = sum(depths)
    ratios = tuple(int(i) for i in rng.integers(0, len(config.ratio_set), size=n_blocks))
    return ArchSpec(depths, ratios)


def encode_arch(arch: ArchSpec) -> str:
    """Stable human-readable token form: ``d=<d1,..>;r=<i1,..>``."""
    d = ",".join(str(x) for x in arch.depths)
    r = ",".join(str(x) for x in arch.ratio_indices)
    return f"d={d};r={r}"


def decode_arch(text: str, config: SpaceConfig) -> ArchSpec:
    """Parse an encoded architecture and validate it against the space.

    Raises ArchParseError (with character position) for malformed text or
    values outside the space.
    """
    pos = 0

    def expect(token: str) -> None:
        nonlocal pos
        if not text.startswith(token, pos):
            raise ArchParseError(f"expected {token!r}", pos)
        pos += len(token)

    def int_list() -> list[int]:
        nonlocal pos
        values = []
        while True:
            start = pos
            while pos < len(text) and text[pos].isdigit():
                pos += 1
            if pos == start:
                raise ArchParseError("expected an integer", pos)
            values.append(int(text[start:pos]))
            if pos < len(text) and text[pos] == ",":
                pos += 1
                continue
            return values

    expect("d=")
    depth_pos = pos
    depths = int_list()
    expect(";r=")
    ratio_pos = pos
    ratios = int_list()
    if pos != len(text):
        raise ArchParseError("trailing characters after architecture", pos)

    spec = ArchSpec(tuple(depths), tuple(ratios))
    try:
        spec.validate(config)
    except SpaceError as err:
        where = depth_pos if "depth" in str(err) or "stages" in str(err) else ratio_pos
        raise ArchParseError(str(err), where) from err
    return spec
