"""NumPy building blocks with explicit forward/backward passes.

All parameters live in maximal-size buffers.  Every forward call names
the active channel slice ("first k channels" convention), so one layer
serves every subnet of a slimmable network; gradients accumulate into
the matching slice of the parameter's grad buffer.

Forward calls return ``(output, cache)``; the cache is passed back to
``backward`` together with the upstream gradient.  Multiple caches from
the same layer may be alive at once (rank-loss pairs), so caches never
alias layer-owned scratch memory.
"""

from __future__ import annotations

import math
from enum import Enum

import numpy as np

DTYPE = np.float32
"""Float type for all layer math; tests may switch to float64
for finite-difference checks (set before constructing networks)."""

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
PRELU_INIT_SLOPE = 0.25

SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805


class Parameter:
    """A trainable array and its accumulated gradient."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.ascontiguousarray(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def numel(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


def _pad_amount(kernel: int) -> int:
    return kernel // 2


def conv_output_hw(h: int, w: int, kernel: int, stride: int) -> tuple[int, int]:
    """Spatial output size for same-padded convolution."""
    p = _pad_amount(kernel)
    return (h + 2 * p - kernel) // stride + 1, (w + 2 * p - kernel) // stride + 1


class Conv2d:
    """Same-padded convolution without bias, sliceable on both channel axes."""

    def __init__(
        self,
        max_in: int,
        max_out: int,
        kernel: int,
        stride: int = 1,
        rng: np.random.Generator | None = None,
    ):
        self.max_in = max_in
        self.max_out = max_out
        self.kernel = kernel
        self.stride = stride
        # He initialisation, fan_in mode: layer gain is then independent of
        # the active output slice, which keeps slimmed paths well-scaled.
        std = math.sqrt(2.0 / (kernel * kernel * max_in))
        rng = rng or np.random.default_rng()
        self.weight = Parameter(rng.normal(0.0, std, (max_out, max_in, kernel, kernel)))
        self._pad_ws: dict[tuple, np.ndarray] = {}

    def parameters(self) -> list[Parameter]:
        return [self.weight]

    def _im2col(self, x: np.ndarray) -> tuple[np.ndarray, int, int]:
        """Return column matrix (B, C*k*k, Ho*Wo) for the active input."""
        b, c, h, w = x.shape
        k, s = self.kernel, self.stride
        p = _pad_amount(k)
        ho, wo = conv_output_hw(h, w, k, s)
        if p > 0:
            key = (b, c, h, w, DTYPE)
            xp = self._pad_ws.get(key)
            if xp is None:
                xp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=DTYPE)
                self._pad_ws[key] = xp
            xp[:, :, p : p + h, p : p + w] = x
        else:
            xp = x
        cols = np.empty((b, c, k, k, ho, wo), dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                cols[:, :, i, j] = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
        return cols.reshape(b, c * k * k, ho * wo), ho, wo

    def forward(
        self,
        x: np.ndarray,
        c_in: int | None = None,
        c_out: int | None = None,
        need_grad: bool = True,
    ) -> tuple[np.ndarray, dict | None]:
        c_in = x.shape[1] if c_in is None else c_in
        c_out = self.max_out if c_out is None else c_out
        if x.shape[1] != c_in:
            raise ValueError(f"input has {x.shape[1]} channels, expected {c_in}")
        cols, ho, wo = self._im2col(x)
        w_active = self.weight.value[:c_out, :c_in].reshape(c_out, -1)
        y = np.matmul(w_active, cols)  # (B, c_out, Ho*Wo)
        b = x.shape[0]
        y = y.reshape(b, c_out, ho, wo)
        if not need_grad:
            return y, None
        cache = {
            "cols": cols,
            "c_in": c_in,
            "c_out": c_out,
            "in_hw": x.shape[2:],
            "out_hw": (ho, wo),
        }
        return y, cache

    def backward(self, cache: dict, dy: np.ndarray) -> np.ndarray:
        c_in, c_out = cache["c_in"], cache["c_out"]
        k, s = self.kernel, self.stride
        h, w = cache["in_hw"]
        ho, wo = cache["out_hw"]
        b = dy.shape[0]
        dy2 = dy.reshape(b, c_out, ho * wo)
        cols = cache["cols"]
        dw = np.tensordot(dy2, cols, axes=([0, 2], [0, 2]))  # (c_out, c_in*k*k)
        self.weight.grad[:c_out, :c_in] += dw.reshape(c_out, c_in, k, k)
        w_active = self.weight.value[:c_out, :c_in].reshape(c_out, -1)
        dcols = np.matmul(w_active.T, dy2)  # (B, c_in*k*k, Ho*Wo)
        # col2im: scatter-add the column gradient back onto the padded input.
        p = _pad_amount(k)
        dxp = np.zeros((b, c_in, h + 2 * p, w + 2 * p), dtype=DTYPE)
        d6 = dcols.reshape(b, c_in, k, k, ho, wo)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += d6[:, :, i, j]
        if p > 0:
            return dxp[:, :, p : p + h, p : p + w]
        return dxp


class BatchNorm2d:
    """Per-channel batch normalisation with affine terms and running stats.

    Modes:
        train      normalise by batch stats, EMA-update running stats.
        eval       normalise by running stats.
        calibrate  normalise by batch stats, accumulate them for later
                   averaging (see ``begin_calibration``/``finish_calibration``).
    """

    def __init__(self, max_channels: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        self.max_channels = max_channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(max_channels, dtype=DTYPE))
        self.beta = Parameter(np.zeros(max_channels, dtype=DTYPE))
        self.running_mean = np.zeros(max_channels, dtype=DTYPE)
        self.running_var = np.ones(max_channels, dtype=DTYPE)
        self._calib_mean: np.ndarray | None = None
        self._calib_var: np.ndarray | None = None
        self._calib_count = 0
        self._calib_width = 0

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def begin_calibration(self) -> None:
        self._calib_mean = np.zeros(self.max_channels, dtype=np.float64)
        self._calib_var = np.zeros(self.max_channels, dtype=np.float64)
        self._calib_count = 0
        self._calib_width = 0

    def finish_calibration(self) -> None:
        """Replace running stats of the calibrated slice by plain batch averages."""
        if self._calib_count > 0:
            c = self._calib_width
            self.running_mean[:c] = (self._calib_mean[:c] / self._calib_count).astype(DTYPE)
            self.running_var[:c] = (self._calib_var[:c] / self._calib_count).astype(DTYPE)
        self._calib_mean = None
        self._calib_var = None
        self._calib_count = 0
        self._calib_width = 0

    def forward(
        self,
        x: np.ndarray,
        c: int | None = None,
        mode: str = "train",
        need_grad: bool = True,
        var_sink: list | None = None,
    ) -> tuple[np.ndarray, dict | None]:
        c = x.shape[1] if c is None else c
        if var_sink is not None:
            var_sink.append(x.var(axis=(0, 2, 3)))
        if mode == "eval":
            mean = self.running_mean[:c]
            var = self.running_var[:c]
        else:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            if mode == "train":
                m = self.momentum
                self.running_mean[:c] = (1 - m) * self.running_mean[:c] + m * mean
                self.running_var[:c] = (1 - m) * self.running_var[:c] + m * var
            elif mode == "calibrate":
                if self._calib_mean is None:
                    self.begin_calibration()
                self._calib_mean[:c] += mean
                self._calib_var[:c] += var
                self._calib_count += 1
                self._calib_width = c
            else:
                raise ValueError(f"unknown BN mode {mode!r}")
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        y = self.gamma.value[None, :c, None, None] * xhat + self.beta.value[None, :c, None, None]
        cache = None
        if need_grad:
            cache = {"xhat": xhat, "inv_std": inv_std, "c": c, "mode": mode}
        return y.astype(DTYPE, copy=False), cache

    def backward(self, cache: dict, dy: np.ndarray) -> np.ndarray:
        c = cache["c"]
        xhat = cache["xhat"]
        inv_std = cache["inv_std"]
        self.beta.grad[:c] += dy.sum(axis=(0, 2, 3))
        self.gamma.grad[:c] += (dy * xhat).sum(axis=(0, 2, 3))
        if cache["mode"] == "eval":
            # Frozen statistics: plain affine rescale.
            return dy * (self.gamma.value[:c] * inv_std)[None, :, None, None]
        n = dy.shape[0] * dy.shape[2] * dy.shape[3]
        dxhat = dy * self.gamma.value[None, :c, None, None]
        sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dx = (inv_std[None, :, None, None] / n) * (
            n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat
        )
        return dx.astype(DTYPE, copy=False)


class Linear:
    """Dense layer with bias."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng()
        bound = 1.0 / math.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, (out_features, in_features)))
        self.bias = Parameter(rng.uniform(-bound, bound, out_features))

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray, need_grad: bool = True) -> tuple[np.ndarray, dict | None]:
        y = x @ self.weight.value.T + self.bias.value
        cache = {"x": x} if need_grad else None
        return y, cache

    def backward(self, cache: dict, dy: np.ndarray) -> np.ndarray:
        self.weight.grad += dy.T @ cache["x"]
        self.bias.grad += dy.sum(axis=0)
        return dy @ self.weight.value


class GlobalAvgPool:
    """Mean over the spatial axes: (B, C, H, W) -> (B, C)."""

    def forward(self, x: np.ndarray, need_grad: bool = True) -> tuple[np.ndarray, dict | None]:
        y = x.mean(axis=(2, 3))
        cache = {"hw": x.shape[2:]} if need_grad else None
        return y, cache

    def backward(self, cache: dict, dy: np.ndarray) -> np.ndarray:
        h, w = cache["hw"]
        return np.broadcast_to(dy[:, :, None, None], dy.shape + (h, w)).astype(
            DTYPE
        ) / (h * w)


class ActivationKind(str, Enum):
    RELU = "relu"
    SELU = "selu"
    PRELU = "prelu"
    SWISH = "swish"
    MISH = "mish"


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


class Activation:
    """Pointwise activation; PReLU carries one trainable slope per layer."""

    def __init__(self, kind: ActivationKind | str):
        self.kind = ActivationKind(kind)
        self.slope: Parameter | None = None
        if self.kind is ActivationKind.PRELU:
            self.slope = Parameter(np.array([PRELU_INIT_SLOPE], dtype=DTYPE))

    def parameters(self) -> list[Parameter]:
        return [self.slope] if self.slope is not None else []

    def forward(self, x: np.ndarray, need_grad: bool = True) -> tuple[np.ndarray, dict | None]:
        k = self.kind
        if k is ActivationKind.RELU:
            y = np.maximum(x, 0.0)
            cache = {"x": x} if need_grad else None
        elif k is ActivationKind.SELU:
            y = np.where(x > 0, SELU_SCALE * x, SELU_SCALE * SELU_ALPHA * np.expm1(x))
            cache = {"x": x} if need_grad else None
        elif k is ActivationKind.PRELU:
            a = float(self.slope.value[0])
            y = np.where(x > 0, x, a * x)
            cache = {"x": x} if need_grad else None
        elif k is ActivationKind.SWISH:
            s = _sigmoid(x)
            y = x * s
            cache = {"x": x, "s": s} if need_grad else None
        elif k is ActivationKind.MISH:
            t = np.tanh(_softplus(x))
            y = x * t
            cache = {"x": x, "t": t} if need_grad else None
        else:  # pragma: no cover - closed enumeration
            raise ValueError(f"unknown activation {k}")
        return y.astype(DTYPE, copy=False), cache

    def backward(self, cache: dict, dy: np.ndarray) -> np.ndarray:
        k = self.kind
        x = cache["x"]
        if k is ActivationKind.RELU:
            dx = dy * (x > 0)
        elif k is ActivationKind.SELU:
            dx = dy * np.where(x > 0, SELU_SCALE, SELU_SCALE * SELU_ALPHA * np.exp(x))
        elif k is ActivationKind.PRELU:
            a = float(self.slope.value[0])
            neg = x <= 0
            self.slope.grad[0] += float((dy * np.where(neg, x, 0.0)).sum())
            dx = dy * np.where(neg, a, 1.0)
        elif k is ActivationKind.SWISH:
            s = cache["s"]
            dx = dy * (s * (1.0 + x * (1.0 - s)))
        elif k is ActivationKind.MISH:
            t = cache["t"]
            dx = dy * (t + x * (1.0 - t * t) * _sigmoid(x))
        else:  # pragma: no cover
            raise ValueError(f"unknown activation {k}")
        return dx.astype(DTYPE, copy=False)


def apply_activation(activation: Activation | ActivationKind | str, x: np.ndarray) -> np.ndarray:
    """Apply an activation pointwise (no gradient bookkeeping)."""
    if not isinstance(activation, Activation):
        activation = Activation(activation)
    y, _ = activation.forward(np.asarray(x, dtype=DTYPE), need_grad=False)
    return y
