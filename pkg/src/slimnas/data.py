"""Dataset handling: synthetic class-separable images and directory ingestion.

Synthetic mode draws, per class, a few smooth template images and emits
noisy copies of them; capacity then matters because classes are
multi-modal.  Generation is fully determined by the spec's seed.

Images are float32, normalised with mean 0.5 / std 0.5 from the nominal
[0, 1] pixel range (the documented constants for both sources).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import ndimage

NORM_MEAN = 0.5
NORM_STD = 0.5


class DataError(ValueError):
    """Dataset spec or source problem."""


class DataSource(str, Enum):
    SYNTHETIC = "synthetic"
    DIRECTORY = "directory"


class TemplateStyle(str, Enum):
    BLOBS = "blobs"
    TEXTURE = "texture"
    HYBRID = "hybrid"


@dataclass(frozen=True)
class DatasetSpec:
    """Where the data comes from and how much of it there is."""

    source: DataSource = DataSource.SYNTHETIC
    num_classes: int = 10
    resolution: tuple[int, int] = (8, 8)
    train_count: int = 2000
    val_count: int = 400
    channels: int = 3
    path: str | None = None
    seed: int = 0
    style: TemplateStyle = TemplateStyle.BLOBS
    noise: float = 0.5
    modes_per_class: int = 3
    scale_mix: tuple[float, float, float] = (0.5, 0.35, 0.15)
    tile_size: int = 2
    shared_vocab: int = 0
    mixture_alpha: float = 0.6
    pixel_stat_classes: int = 0
    teacher_features: int = 32
    teacher_margin: float = 0.4
    teacher_gain: float = 1.5
    noise_mix: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if self.num_classes < 2:
            raise DataError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.train_count < 1 or self.val_count < 1:
            raise DataError("train/val counts must be positive")
        if self.channels < 1:
            raise DataError(f"channels must be >= 1, got {self.channels}")
        h, w = self.resolution
        if h < 1 or w < 1:
            raise DataError(f"bad resolution {self.resolution}")
        if self.source is DataSource.DIRECTORY and not self.path:
            raise DataError("directory source needs a path")
        if self.modes_per_class < 1:
            raise DataError("modes_per_class must be >= 1")
        if self.style is TemplateStyle.TEXTURE and (
            h % self.tile_size or w % self.tile_size
        ):
            raise DataError(f"texture tiles of size {self.tile_size} must divide {h}x{w}")
        if any(v < 0 for v in self.scale_mix) or sum(self.scale_mix) <= 0:
            raise DataError(f"scale_mix must be non-negative and non-zero, got {self.scale_mix}")
        if any(v < 0 for v in self.noise_mix) or sum(self.noise_mix) <= 0:
            raise DataError(f"noise_mix must be non-negative and non-zero, got {self.noise_mix}")


class Dataset:
    """In-memory dataset with deterministic, seed-controlled batch order."""

    def __init__(
        self,
        train_x: np.ndarray,
        train_y: np.ndarray,
        val_x: np.ndarray,
        val_y: np.ndarray,
        num_classes: int,
    ):
        self.train_x = train_x
        self.train_y = train_y
        self.val_x = val_x
        self.val_y = val_y
        self.num_classes = num_classes

    @property
    def train_count(self) -> int:
        return len(self.train_x)

    @property
    def val_count(self) -> int:
        return len(self.val_x)

    def train_batches(self, batch_size: int, seed) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Shuffled full batches (the trailing partial batch is dropped)."""
        order = np.random.default_rng(seed).permutation(self.train_count)
        for start in range(0, self.train_count - batch_size + 1, batch_size):
            idx = order[start : start + batch_size]
            yield self.train_x[idx], self.train_y[idx]

    def val_batches(self, batch_size: int = 256) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Unshuffled batches covering every validation sample."""
        for start in range(0, self.val_count, batch_size):
            yield (
                self.val_x[start : start + batch_size],
                self.val_y[start : start + batch_size],
            )

    def batch_order_hash(self, batch_size: int, seed) -> str:
        """Digest of the index order one seed produces (reproducibility probe)."""
        order = np.random.default_rng(seed).permutation(self.train_count)
        usable = self.train_count - self.train_count % batch_size
        return hashlib.sha256(order[:usable].astype(np.int64).tobytes()).hexdigest()


def _grid_component(rng: np.random.Generator, channels: int, h: int, w: int, cells: int):
    """Zero-mean pattern constant on a cells x cells grid, upsampled to h x w."""
    grid = rng.uniform(-0.5, 0.5, (channels, cells, cells))
    return np.repeat(np.repeat(grid, -(-h // cells), axis=1), -(-w // cells), axis=2)[:, :h, :w]


def _class_template(
    rng: np.random.Generator,
    channels: int,
    h: int,
    w: int,
    scale_mix: tuple[float, float, float],
) -> np.ndarray:
    """Class prototype in [0, 1], mixing three pattern scales.

    The mix weights cover (quadrant, half-resolution, per-pixel) grids.
    Coarse content keeps classes learnable by narrow models; the finer
    shares only pay off for models with width at high resolution.
    """
    wq, wm, wf = scale_mix
    total = wq + wm + wf
    mix = 0.5 + (
        wq * _grid_component(rng, channels, h, w, 2)
        + wm * _grid_component(rng, channels, h, w, max(1, h // 2))
        + wf * _grid_component(rng, channels, h, w, h)
    ) / (total if total > 0 else 1.0)
    return np.clip(mix, 0.0, 1.0)


def _noise_field(spec: DatasetSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-scale noise mixing quadrant / half-resolution / per-pixel grids.

    Structured shares are constant within grid cells, so they survive local
    averaging and must be filtered in channel space instead.
    """
    h, w = spec.resolution
    wq, wm, wf = spec.noise_mix
    total = wq + wm + wf
    out = np.zeros((count, spec.channels, h, w))
    if wq:
        g = rng.normal(size=(count, spec.channels, 2, 2))
        out += wq * np.repeat(np.repeat(g, -(-h // 2), 2), -(-w // 2), 3)[:, :, :h, :w]
    if wm:
        ch, cw = max(1, h // 2), max(1, w // 2)
        g = rng.normal(size=(count, spec.channels, ch, cw))
        out += wm * np.repeat(np.repeat(g, -(-h // ch), 2), -(-w // cw), 3)[:, :, :h, :w]
    if wf:
        out += wf * rng.normal(size=(count, spec.channels, h, w))
    return out / total


def _synthetic_split(
    spec: DatasetSpec, templates: np.ndarray, count: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    labels = np.arange(count) % spec.num_classes
    modes = rng.integers(0, spec.modes_per_class, size=count)
    x = templates[labels, modes] + spec.noise * _noise_field(spec, count, rng)
    x = np.clip(x, 0.0, 1.0)
    x = (x - NORM_MEAN) / NORM_STD
    perm = rng.permutation(count)
    return x[perm].astype(np.float32), labels[perm].astype(np.int64)


def _texture_split(
    spec: DatasetSpec, tiles: np.ndarray, count: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Images assembled from a class-specific tile library, then noised.

    The class signal is a location-invariant texture statistic, so the
    discriminative work happens at local (early, high-resolution) scale.
    """
    h, w = spec.resolution
    t = spec.tile_size
    gh, gw = h // t, w // t
    labels = np.arange(count) % spec.num_classes
    choice = rng.integers(0, spec.modes_per_class, size=(count, gh, gw))
    picked = tiles[labels[:, None, None], choice]  # (count, gh, gw, C, t, t)
    x = picked.transpose(0, 3, 1, 4, 2, 5).reshape(count, spec.channels, gh * t, gw * t)
    x = np.clip(x + spec.noise * rng.normal(size=x.shape), 0.0, 1.0)
    x = (x - NORM_MEAN) / NORM_STD
    perm = rng.permutation(count)
    return x[perm].astype(np.float32), labels[perm].astype(np.int64)


def _mixture_split(
    spec: DatasetSpec,
    vocab: np.ndarray,
    weights: np.ndarray,
    count: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Texture over a shared tile vocabulary with class-specific mixture weights.

    Every class uses the same tiles, only their frequencies differ, so a
    single cell never identifies the class; accuracy tracks how precisely
    per-cell tile posteriors are estimated before pooling.
    """
    h, w = spec.resolution
    t = spec.tile_size
    gh, gw = h // t, w // t
    labels = np.arange(count) % spec.num_classes
    cdf = np.cumsum(weights, axis=1)
    u = rng.uniform(size=(count, gh, gw))
    choice = (u[..., None] > cdf[labels][:, None, None, :]).sum(axis=-1)
    picked = vocab[choice]  # (count, gh, gw, C, t, t)
    x = picked.transpose(0, 3, 1, 4, 2, 5).reshape(count, spec.channels, gh * t, gw * t)
    x = np.clip(x + spec.noise * rng.normal(size=x.shape), 0.0, 1.0)
    x = (x - NORM_MEAN) / NORM_STD
    perm = rng.permutation(count)
    return x[perm].astype(np.float32), labels[perm].astype(np.int64)


class _PixelStatTeacher:
    """Labels images by global averages of pointwise nonlinear colour features.

    The class signal is a location-free pixel statistic: estimating it well
    under pixel noise needs nonlinear per-position features at full
    resolution, which is what rewards early width.  Low-margin samples are
    rejected so the labels stay learnable.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        channels: int,
        classes: int,
        features: int,
        gain: float = 1.5,
    ):
        self.a = rng.normal(0.0, gain, (features, channels))
        self.b = rng.normal(0.0, 0.5, features)
        self.w = rng.normal(0.0, 1.0, (classes, features))
        self.mu = np.zeros(classes)
        self.sd = np.ones(classes)
        self.margin_threshold = 0.0

    def logits(self, x: np.ndarray) -> np.ndarray:
        pix = x.transpose(0, 2, 3, 1).reshape(len(x), -1, x.shape[1])
        f = np.maximum(pix @ self.a.T + self.b, 0.0)
        return (f.mean(axis=1) @ self.w.T - self.mu) / self.sd

    def calibrate(self, x: np.ndarray, margin_quantile: float) -> None:
        raw = self.logits(x)
        self.mu = self.mu + raw.mean(axis=0) * self.sd
        self.sd = self.sd * (raw.std(axis=0) + 1e-9)
        z = self.logits(x)
        top2 = np.sort(z, axis=1)[:, -2:]
        self.margin_threshold = float(np.quantile(top2[:, 1] - top2[:, 0], margin_quantile))

    def label_or_reject(self, x_normalised: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = self.logits(x_normalised)
        top2 = np.sort(z, axis=1)[:, -2:]
        keep = (top2[:, 1] - top2[:, 0]) > self.margin_threshold
        return z.argmax(axis=1), keep


def _field_images(rng: np.random.Generator, count: int, channels: int, h: int, w: int):
    """Unlabelled mixed-scale random fields in [0, 1]."""
    parts = (
        0.45 * _grid_component_batch(rng, count, channels, h, w, 2),
        0.35 * _grid_component_batch(rng, count, channels, h, w, max(1, h // 2)),
        0.2 * rng.uniform(-0.5, 0.5, (count, channels, h, w)),
    )
    return np.clip(0.5 + sum(parts), 0.0, 1.0)


def _grid_component_batch(rng, count: int, channels: int, h: int, w: int, cells: int):
    g = rng.uniform(-0.5, 0.5, (count, channels, cells, cells))
    return np.repeat(np.repeat(g, -(-h // cells), axis=2), -(-w // cells), axis=3)[:, :, :h, :w]


def _make_hybrid(spec: DatasetSpec) -> Dataset:
    """Half template classes, half pixel-statistic classes.

    Template classes reward total capacity (coarse layouts under heavy
    noise); pixel-statistic classes reward width at high resolution.
    """
    h, w = spec.resolution
    rng = np.random.default_rng([spec.seed, 17])
    n_pix = spec.pixel_stat_classes or spec.num_classes // 2
    n_tpl = spec.num_classes - n_pix
    if n_tpl < 1 or n_pix < 2:
        raise DataError(
            f"hybrid needs >=1 template and >=2 pixel-statistic classes, "
            f"got {n_tpl} and {n_pix}"
        )
    templates = np.stack(
        [
            np.stack(
                [
                    _class_template(rng, spec.channels, h, w, spec.scale_mix)
                    for _ in range(spec.modes_per_class)
                ]
            )
            for _ in range(n_tpl)
        ]
    )
    teacher = _PixelStatTeacher(
        rng, spec.channels, n_pix, spec.teacher_features, spec.teacher_gain
    )
    calib = _field_images(rng, 4096, spec.channels, h, w)
    teacher.calibrate((calib - NORM_MEAN) / NORM_STD, spec.teacher_margin)

    def split(count: int) -> tuple[np.ndarray, np.ndarray]:
        n_from_tpl = count // 2
        g = np.arange(n_from_tpl) % n_tpl
        m = rng.integers(0, spec.modes_per_class, n_from_tpl)
        tpl_x = templates[g, m]
        tpl_y = g
        pix_need = count - n_from_tpl
        pix_xs, pix_ys, have = [], [], 0
        while have < pix_need:
            x = _field_images(rng, pix_need, spec.channels, h, w)
            y, keep = teacher.label_or_reject((x - NORM_MEAN) / NORM_STD)
            pix_xs.append(x[keep])
            pix_ys.append(y[keep])
            have += int(keep.sum())
        pix_x = np.concatenate(pix_xs)[:pix_need]
        pix_y = np.concatenate(pix_ys)[:pix_need] + n_tpl
        x = np.concatenate([tpl_x, pix_x])
        y = np.concatenate([tpl_y, pix_y]).astype(np.int64)
        x = np.clip(x + spec.noise * rng.normal(size=x.shape), 0.0, 1.0)
        x = (x - NORM_MEAN) / NORM_STD
        perm = rng.permutation(count)
        return x[perm].astype(np.float32), y[perm]

    train_x, train_y = split(spec.train_count)
    val_x, val_y = split(spec.val_count)
    return Dataset(train_x, train_y, val_x, val_y, spec.num_classes)


def _make_synthetic(spec: DatasetSpec) -> Dataset:
    h, w = spec.resolution
    rng = np.random.default_rng([spec.seed, 17])
    if spec.style is TemplateStyle.HYBRID:
        return _make_hybrid(spec)
    if spec.style is TemplateStyle.TEXTURE:
        t = spec.tile_size
        if spec.shared_vocab > 0:
            vocab = rng.uniform(0.0, 1.0, (spec.shared_vocab, spec.channels, t, t))
            weights = rng.dirichlet(
                np.full(spec.shared_vocab, spec.mixture_alpha), size=spec.num_classes
            )
            train_x, train_y = _mixture_split(spec, vocab, weights, spec.train_count, rng)
            val_x, val_y = _mixture_split(spec, vocab, weights, spec.val_count, rng)
            return Dataset(train_x, train_y, val_x, val_y, spec.num_classes)
        tiles = rng.uniform(
            0.0, 1.0, (spec.num_classes, spec.modes_per_class, spec.channels, t, t)
        )
        train_x, train_y = _texture_split(spec, tiles, spec.train_count, rng)
        val_x, val_y = _texture_split(spec, tiles, spec.val_count, rng)
        return Dataset(train_x, train_y, val_x, val_y, spec.num_classes)
    templates = np.stack(
        [
            np.stack(
                [
                    _class_template(rng, spec.channels, h, w, spec.scale_mix)
                    for _ in range(spec.modes_per_class)
                ]
            )
            for _ in range(spec.num_classes)
        ]
    )  # (classes, modes, C, H, W)
    train_x, train_y = _synthetic_split(spec, templates, spec.train_count, rng)
    val_x, val_y = _synthetic_split(spec, templates, spec.val_count, rng)
    return Dataset(train_x, train_y, val_x, val_y, spec.num_classes)


def _load_image(path: Path, channels: int, resolution: tuple[int, int]) -> np.ndarray:
    import matplotlib.image as mpimg

    raw = mpimg.imread(str(path))
    if raw.dtype == np.uint8:
        raw = raw.astype(np.float32) / 255.0
    if raw.ndim == 2:
        raw = raw[:, :, None]
    raw = raw[:, :, :channels]
    if raw.shape[2] < channels:
        raw = np.repeat(raw[:, :, :1], channels, axis=2)
    x = np.transpose(raw, (2, 0, 1)).astype(np.float32)
    h, w = resolution
    if x.shape[1:] != (h, w):
        x = ndimage.zoom(x, (1, h / x.shape[1], w / x.shape[2]), order=1)
        x = x[:, :h, :w]
    return x


def _make_from_directory(spec: DatasetSpec) -> Dataset:
    root = Path(spec.path)
    if not root.is_dir():
        raise DataError(f"dataset directory not readable: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) != spec.num_classes:
        raise DataError(
            f"{root} has {len(class_dirs)} class folders but the spec says {spec.num_classes}"
        )
    xs, ys = [], []
    for label, cdir in enumerate(class_dirs):
        files = sorted(cdir.glob("*.png"))
        if not files:
            raise DataError(f"class folder {cdir} holds no .png files")
        for f in files:
            xs.append(_load_image(f, spec.channels, spec.resolution))
            ys.append(label)
    x = (np.stack(xs) - NORM_MEAN) / NORM_STD
    y = np.array(ys, dtype=np.int64)
    need = spec.train_count + spec.val_count
    if len(x) < need:
        raise DataError(f"{root} holds {len(x)} images, spec needs {need}")
    order = np.random.default_rng([spec.seed, 23]).permutation(len(x))
    x, y = x[order].astype(np.float32), y[order]
    return Dataset(
        x[: spec.train_count],
        y[: spec.train_count],
        x[spec.train_count : need],
        y[spec.train_count : need],
        spec.num_classes,
    )


def ingest_dataset(spec: DatasetSpec) -> Dataset:
    """Materialise a dataset from its spec (synthetic or directory-of-images)."""
    if spec.source is DataSource.SYNTHETIC:
        return _make_synthetic(spec)
    return _make_from_directory(spec)
