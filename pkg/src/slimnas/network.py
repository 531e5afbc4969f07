"""Weight-sharing slimmable residual network.

The supernet holds parameters at maximal depth and width.  A subnet
forward executes only the first ``depths[s]`` blocks of each stage and,
inside each block, slices the first ``width`` channels of the first
weight layer (the second weight layer maps back to the stage's base
channels so shortcut additions stay well-typed).

``extract_subnet`` deep-copies exactly the slices a subnet forward
reads, yielding a self-contained standalone network.
"""

from __future__ import annotations

import dataclasses
import io
from dataclasses import dataclass, field

import numpy as np

from . import config_io
from . import layers
from .layers import (
    Activation,
    ActivationKind,
    BatchNorm2d,
    Conv2d,
    GlobalAvgPool,
    Linear,
    apply_activation,
    conv_output_hw,
)
from .space import ArchSpec, SpaceConfig, block_widths, maximum_arch

CHECKPOINT_MAGIC = "SLIMNAS-CHECKPOINT"
CHECKPOINT_FORMAT_VERSION = "1"


class ContractError(ValueError):
    """An architecture, input, or checkpoint does not match this network."""


class CheckpointError(ContractError):
    """A checkpoint file is malformed or belongs to a different space."""


@dataclass(frozen=True)
class SupernetConfig:
    """Supernet construction knobs on top of a search space."""

    space: SpaceConfig
    internal_activation: ActivationKind = ActivationKind.RELU
    external_activation: ActivationKind = ActivationKind.RELU
    stem_channels: int = 32
    stem_kernel: int = 3
    in_channels: int = 3

    def __post_init__(self):
        if self.stem_channels < 1:
            raise ContractError(f"stem_channels must be positive, got {self.stem_channels}")
        if self.stem_kernel < 1 or self.stem_kernel % 2 == 0:
            raise ContractError(f"stem_kernel must be odd and positive, got {self.stem_kernel}")
        if self.in_channels < 1:
            raise ContractError(f"in_channels must be positive, got {self.in_channels}")


@dataclass(frozen=True)
class BlockPlan:
    """Concrete shape of one residual block."""

    in_channels: int
    base_channels: int
    max_width: int
    stride: int
    has_projection: bool


@dataclass(frozen=True)
class NetPlan:
    """Concrete layer plan of a slimmable residual network."""

    in_channels: int
    stem_channels: int
    stem_kernel: int
    stages: tuple[tuple[BlockPlan, ...], ...]
    num_classes: int
    input_resolution: tuple[int, int]
    internal_activation: ActivationKind
    external_activation: ActivationKind

    @property
    def block_count(self) -> int:
        return sum(len(s) for s in self.stages)


def _stage_plans(
    config: SupernetConfig, depths: tuple[int, ...], widths: tuple[int, ...]
) -> tuple[tuple[BlockPlan, ...], ...]:
    space = config.space
    stages = []
    cursor = 0
    prev = config.stem_channels
    for s in range(space.num_stages):
        base = space.stage_base_channels[s]
        blocks = []
        for b in range(depths[s]):
            entry = b == 0
            blocks.append(
                BlockPlan(
                    in_channels=prev if entry else base,
                    base_channels=base,
                    max_width=widths[cursor],
                    stride=2 if entry else 1,
                    has_projection=entry,
                )
            )
            cursor += 1
        prev = base
        stages.append(tuple(blocks))
    return tuple(stages)


def supernet_plan(config: SupernetConfig) -> NetPlan:
    """Plan at maximal depth and width (ratio 1.0 everywhere)."""
    space = config.space
    depths = space.max_depths
    widths = tuple(
        space.stage_base_channels[s] for s in range(space.num_stages) for _ in range(depths[s])
    )
    return NetPlan(
        in_channels=config.in_channels,
        stem_channels=config.stem_channels,
        stem_kernel=config.stem_kernel,
        stages=_stage_plans(config, depths, widths),
        num_classes=space.num_classes,
        input_resolution=space.input_resolution,
        internal_activation=config.internal_activation,
        external_activation=config.external_activation,
    )


def subnet_plan(config: SupernetConfig, arch: ArchSpec) -> NetPlan:
    """Plan of one subnet at its exact active shapes."""
    arch.validate(config.space)
    widths = block_widths(config.space, arch)
    return NetPlan(
        in_channels=config.in_channels,
        stem_channels=config.stem_channels,
        stem_kernel=config.stem_kernel,
        stages=_stage_plans(config, arch.depths, widths),
        num_classes=config.space.num_classes,
        input_resolution=config.space.input_resolution,
        internal_activation=config.internal_activation,
        external_activation=config.external_activation,
    )


class ResidualBlock:
    """Two 3x3 weight layers; internal activation between them, external
    activation after the shortcut addition.  Entry blocks downsample via a
    1x1 projection shortcut."""

    def __init__(self, plan: BlockPlan, internal: ActivationKind, external: ActivationKind, rng):
        self.plan = plan
        self.conv1 = Conv2d(plan.in_channels, plan.max_width, 3, plan.stride, rng)
        self.bn1 = BatchNorm2d(plan.max_width)
        self.act_internal = Activation(internal)
        self.conv2 = Conv2d(plan.max_width, plan.base_channels, 3, 1, rng)
        self.bn2 = BatchNorm2d(plan.base_channels)
        self.act_external = Activation(external)
        self.proj_conv = None
        self.proj_bn = None
        if plan.has_projection:
            self.proj_conv = Conv2d(plan.in_channels, plan.base_channels, 1, plan.stride, rng)
            self.proj_bn = BatchNorm2d(plan.base_channels)

    def named_children(self):
        yield "conv1", self.conv1
        yield "bn1", self.bn1
        yield "act_internal", self.act_internal
        yield "conv2", self.conv2
        yield "bn2", self.bn2
        yield "act_external", self.act_external
        if self.proj_conv is not None:
            yield "proj_conv", self.proj_conv
            yield "proj_bn", self.proj_bn

    def forward(self, x, width, mode, need_grad, var_sink=None):
        base = self.plan.base_channels
        cache = {"width": width}
        if self.proj_conv is not None:
            idn, cache["proj_conv"] = self.proj_conv.forward(
                x, self.plan.in_channels, base, need_grad
            )
            idn, cache["proj_bn"] = self.proj_bn.forward(idn, base, mode, need_grad, var_sink)
        else:
            idn = x
        h, cache["conv1"] = self.conv1.forward(x, self.plan.in_channels, width, need_grad)
        h, cache["bn1"] = self.bn1.forward(h, width, mode, need_grad, var_sink)
        h, cache["act_internal"] = self.act_internal.forward(h, need_grad)
        h, cache["conv2"] = self.conv2.forward(h, width, base, need_grad)
        h, cache["bn2"] = self.bn2.forward(h, base, mode, need_grad, var_sink)
        y, cache["act_external"] = self.act_external.forward(h + idn, need_grad)
        return y, (cache if need_grad else None)

    def backward(self, cache, dy):
        dsum = self.act_external.backward(cache["act_external"], dy)
        dh = self.bn2.backward(cache["bn2"], dsum)
        dh = self.conv2.backward(cache["conv2"], dh)
        dh = self.act_internal.backward(cache["act_internal"], dh)
        dh = self.bn1.backward(cache["bn1"], dh)
        dx = self.conv1.backward(cache["conv1"], dh)
        if self.proj_conv is not None:
            didn = self.proj_bn.backward(cache["proj_bn"], dsum)
            dx = dx + self.proj_conv.backward(cache["proj_conv"], didn)
        else:
            dx = dx + dsum
        return dx


class SlimResNet:
    """A residual network built from a concrete plan.

    Built from a supernet plan it acts as the weight-sharing supernet
    (forwards take per-block widths below the maxima); built from a
    subnet plan it is a standalone network forwarded at full shape.
    """

    def __init__(self, plan: NetPlan, rng: np.random.Generator):
        self.plan = plan
        self.training = True
        self.stem_conv = Conv2d(plan.in_channels, plan.stem_channels, plan.stem_kernel, 1, rng)
        self.stem_bn = BatchNorm2d(plan.stem_channels)
        self.stem_act = Activation(ActivationKind.RELU)
        self.stages = [
            [
                ResidualBlock(bp, plan.internal_activation, plan.external_activation, rng)
                for bp in stage
            ]
            for stage in plan.stages
        ]
        last_base = plan.stages[-1][0].base_channels
        self.pool = GlobalAvgPool()
        self.head = Linear(last_base, plan.num_classes, rng)

    # -- parameter bookkeeping -------------------------------------------------

    def named_modules(self):
        yield "stem_conv", self.stem_conv
        yield "stem_bn", self.stem_bn
        yield "stem_act", self.stem_act
        for s, stage in enumerate(self.stages):
            for b, block in enumerate(stage):
                for child_name, child in block.named_children():
                    yield f"stages.{s}.{b}.{child_name}", child
        yield "head", self.head

    def named_parameters(self):
        for mod_name, mod in self.named_modules():
            params = mod.parameters() if hasattr(mod, "parameters") else []
            if isinstance(mod, Conv2d):
                yield f"{mod_name}.weight", mod.weight
            elif isinstance(mod, BatchNorm2d):
                yield f"{mod_name}.gamma", mod.gamma
                yield f"{mod_name}.beta", mod.beta
            elif isinstance(mod, Linear):
                yield f"{mod_name}.weight", mod.weight
                yield f"{mod_name}.bias", mod.bias
            elif isinstance(mod, Activation) and params:
                yield f"{mod_name}.slope", mod.slope

    def named_stats(self):
        for mod_name, mod in self.named_modules():
            if isinstance(mod, BatchNorm2d):
                yield f"{mod_name}.running_mean", mod.running_mean
                yield f"{mod_name}.running_var", mod.running_var

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def bn_layers(self) -> list[BatchNorm2d]:
        return [m for _, m in self.named_modules() if isinstance(m, BatchNorm2d)]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def train(self) -> "SlimResNet":
        self.training = True
        return self

    def eval(self) -> "SlimResNet":
        self.training = False
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"param/{n}": p.value.copy() for n, p in self.named_parameters()}
        out.update({f"stat/{n}": a.copy() for n, a in self.named_stats()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        stats = dict(self.named_stats())
        expected = {f"param/{n}" for n in params} | {f"stat/{n}" for n in stats}
        missing = expected - set(state)
        extra = set(state) - expected
        if missing or extra:
            raise CheckpointError(
                f"state dict mismatch: missing {sorted(missing)[:4]}, extra {sorted(extra)[:4]}"
            )
        for name, p in params.items():
            src = state[f"param/{name}"]
            if src.shape != p.value.shape:
                raise CheckpointError(f"shape mismatch for {name}: {src.shape} vs {p.value.shape}")
            p.value[...] = src
        for name, arr in stats.items():
            arr[...] = state[f"stat/{name}"]

    # -- forward / backward ----------------------------------------------------

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=layers.DTYPE)
        h, w = self.plan.input_resolution
        if x.ndim != 4 or x.shape[1] != self.plan.in_channels or x.shape[2:] != (h, w):
            raise ContractError(
                f"expected input of shape (B, {self.plan.in_channels}, {h}, {w}), got {x.shape}"
            )
        return x

    def forward_full(
        self,
        x: np.ndarray,
        mode: str | None = None,
        need_grad: bool = False,
        pre_gap: bool = False,
        collect_bn_variance: bool = False,
    ):
        """Forward at the plan's own maximal depth/width."""
        depths = tuple(len(s) for s in self.plan.stages)
        widths = tuple(bp.max_width for stage in self.plan.stages for bp in stage)
        return self._forward(x, depths, widths, mode, need_grad, pre_gap, collect_bn_variance)

    def _forward(
        self,
        x: np.ndarray,
        depths: tuple[int, ...],
        widths: tuple[int, ...],
        mode: str | None = None,
        need_grad: bool = False,
        pre_gap: bool = False,
        collect_bn_variance: bool = False,
    ):
        """Run the first ``depths[s]`` blocks per stage at the given widths.

        Returns ``(logits, tape)`` or ``(pre_gap_features, tape)``; the tape
        replays through :meth:`backward`.  When ``collect_bn_variance`` is
        set the tape is replaced by a list of per-BN batch variances.
        """
        if mode is None:
            mode = "train" if self.training else "eval"
        if len(depths) != len(self.stages):
            raise ContractError(f"arch has {len(depths)} stages, network has {len(self.stages)}")
        if sum(depths) != len(widths):
            raise ContractError("one width per active block required")
        x = self._check_input(x)
        var_sink: list[np.ndarray] | None = [] if collect_bn_variance else None

        tape: list[tuple] = []
        h, c = self.stem_conv.forward(x, need_grad=need_grad)
        tape.append(("stem_conv", c))
        h, c = self.stem_bn.forward(h, mode=mode, need_grad=need_grad, var_sink=var_sink)
        tape.append(("stem_bn", c))
        h, c = self.stem_act.forward(h, need_grad=need_grad)
        tape.append(("stem_act", c))

        cursor = 0
        for s, stage in enumerate(self.stages):
            depth = depths[s]
            if depth > len(stage):
                raise ContractError(f"stage {s} depth {depth} exceeds built depth {len(stage)}")
            for b in range(depth):
                block = stage[b]
                width = widths[cursor]
                cursor += 1
                if width > block.plan.max_width:
                    raise ContractError(
                        f"block {s}.{b} width {width} exceeds built width {block.plan.max_width}"
                    )
                h, c = block.forward(h, width, mode, need_grad, var_sink)
                tape.append((f"block.{s}.{b}", c, block))
        if pre_gap:
            return h, (var_sink if collect_bn_variance else (tape if need_grad else None))

        h, c = self.pool.forward(h, need_grad=need_grad)
        tape.append(("pool", c))
        logits, c = self.head.forward(h, need_grad=need_grad)
        tape.append(("head", c))
        return logits, (var_sink if collect_bn_variance else (tape if need_grad else None))

    def backward(self, tape: list, dout: np.ndarray) -> None:
        """Replay a tape in reverse, accumulating parameter gradients."""
        grad = dout
        for entry in reversed(tape):
            name, cache = entry[0], entry[1]
            if name == "head":
                grad = self.head.backward(cache, grad)
            elif name == "pool":
                grad = self.pool.backward(cache, grad)
            elif name.startswith("block."):
                grad = entry[2].backward(cache, grad)
            elif name == "stem_act":
                grad = self.stem_act.backward(cache, grad)
            elif name == "stem_bn":
                grad = self.stem_bn.backward(cache, grad)
            elif name == "stem_conv":
                grad = self.stem_conv.backward(cache, grad)
            else:  # pragma: no cover
                raise RuntimeError(f"unknown tape entry {name}")


class Supernet(SlimResNet):
    """SlimResNet bound to a SupernetConfig, forwardable per architecture."""

    def __init__(self, config: SupernetConfig, rng: np.random.Generator):
        super().__init__(supernet_plan(config), rng)
        self.config = config
        self.version = CHECKPOINT_FORMAT_VERSION

    def arch_widths(self, arch: ArchSpec) -> tuple[int, ...]:
        return block_widths(self.config.space, arch)

    def forward_arch(
        self,
        arch: ArchSpec,
        x: np.ndarray,
        mode: str | None = None,
        need_grad: bool = False,
        pre_gap: bool = False,
        collect_bn_variance: bool = False,
    ):
        try:
            arch.validate(self.config.space)
        except Exception as err:
            raise ContractError(f"architecture does not fit this supernet: {err}") from err
        return self._forward(
            x, arch.depths, self.arch_widths(arch), mode, need_grad, pre_gap, collect_bn_variance
        )

    def clone(self) -> "Supernet":
        twin = Supernet(self.config, np.random.default_rng(0))
        twin.load_state_dict(self.state_dict())
        twin.training = self.training
        return twin


def build_supernet(config: SupernetConfig, rng: np.random.Generator | int) -> Supernet:
    """Construct the maximal weight-sharing network, deterministic per seed."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return Supernet(config, rng)


def forward_subnet(state: Supernet, arch: ArchSpec, batch: np.ndarray) -> np.ndarray:
    """Run one subnet on a batch of images; returns (B, num_classes) logits.

    Uses the state's training flag to pick batch vs running statistics.
    """
    logits, _ = state.forward_arch(arch, batch, need_grad=False)
    return logits


def extract_subnet(state: Supernet, arch: ArchSpec) -> SlimResNet:
    """Deep-copy the slices a subnet forward reads into a standalone net."""
    plan = subnet_plan(state.config, arch)
    sub = SlimResNet(plan, np.random.default_rng(0))
    widths = state.arch_widths(arch)

    sub.stem_conv.weight.value[...] = state.stem_conv.weight.value
    _copy_bn(state.stem_bn, sub.stem_bn, state.plan.stem_channels)
    _copy_activation(state.stem_act, sub.stem_act)

    cursor = 0
    for s, stage in enumerate(sub.stages):
        for b, dst in enumerate(stage):
            src = state.stages[s][b]
            w = widths[cursor]
            cursor += 1
            dst.conv1.weight.value[...] = src.conv1.weight.value[:w, : src.plan.in_channels]
            _copy_bn(src.bn1, dst.bn1, w)
            _copy_activation(src.act_internal, dst.act_internal)
            dst.conv2.weight.value[...] = src.conv2.weight.value[: src.plan.base_channels, :w]
            _copy_bn(src.bn2, dst.bn2, src.plan.base_channels)
            _copy_activation(src.act_external, dst.act_external)
            if src.proj_conv is not None:
                dst.proj_conv.weight.value[...] = src.proj_conv.weight.value
                _copy_bn(src.proj_bn, dst.proj_bn, src.plan.base_channels)
    sub.head.weight.value[...] = state.head.weight.value
    sub.head.bias.value[...] = state.head.bias.value
    sub.training = state.training
    return sub


def _copy_bn(src: BatchNorm2d, dst: BatchNorm2d, c: int) -> None:
    dst.gamma.value[...] = src.gamma.value[:c]
    dst.beta.value[...] = src.beta.value[:c]
    dst.running_mean[...] = src.running_mean[:c]
    dst.running_var[...] = src.running_var[:c]


def _copy_activation(src: Activation, dst: Activation) -> None:
    if src.slope is not None:
        dst.slope.value[...] = src.slope.value


def space_digest(config: SupernetConfig) -> str:
    return config_io.digest(config.space)


def save_checkpoint(state: Supernet, path) -> None:
    """Write a versioned checkpoint: header fields plus named blobs."""
    blobs = state.state_dict()
    np.savez(
        path,
        __magic__=np.array(CHECKPOINT_MAGIC),
        __format_version__=np.array(CHECKPOINT_FORMAT_VERSION),
        __space_digest__=np.array(space_digest(state.config)),
        __config_json__=np.array(config_io.canonical_json(state.config)),
        **blobs,
    )


def load_checkpoint(path, config: SupernetConfig) -> Supernet:
    """Rebuild a supernet from a checkpoint; rejects space digest mismatches."""
    with np.load(path, allow_pickle=False) as data:
        if "__magic__" not in data or str(data["__magic__"]) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a supernet checkpoint")
        version = str(data["__format_version__"])
        if version != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        found = str(data["__space_digest__"])
        expected = space_digest(config)
        if found != expected:
            raise CheckpointError(
                f"{path}: checkpoint was trained on a different space "
                f"(digest {found[:12]}.. != {expected[:12]}..)"
            )
        blobs = {k: data[k] for k in data.files if not k.startswith("__")}
    state = build_supernet(config, np.random.default_rng(0))
    state.load_state_dict(blobs)
    return state
