"""Desk-scale datasets: synthetic spirals, IDX files, batching, normalization."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError
from .tensor import RngStream

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

# RngStream ids (key word 1 of the Philox key)
_SPIRAL_STREAMS = {"train": 2, "val": 3, "test": 4}
_BATCH_STREAM_BASE = 5 << 32  # + epoch


@dataclass
class Dataset:
    X: np.ndarray  # n x d float64
    Y: np.ndarray  # n int64 labels
    classes: int
    split: str = "train"

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.int64)
        if self.X.ndim != 2 or self.Y.ndim != 1 or self.X.shape[0] != self.Y.shape[0]:
            raise DataError(f"inconsistent dataset shapes X{self.X.shape} Y{self.Y.shape}")
        if self.n == 0:
            raise DataError("dataset is empty")
        if not np.isfinite(self.X).all():
            raise DataError("dataset features contain NaN/Inf")
        if self.Y.min() < 0 or self.Y.max() >= self.classes:
            raise DataError(f"labels outside [0, {self.classes})")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str = "spirals"
    classes: int = 3
    samples_per_class: int = 100
    noise: float = 0.1
    seed: int = 0
    split: str = "train"


def spiral_coords(t, arm: int, classes: int, angle_jitter=0.0) -> tuple[np.ndarray, np.ndarray]:
    """Spiral arm points: radius t, angle t*4pi plus the arm's offset.

    ``angle_jitter`` perturbs the angle (radians); zero jitter puts points
    exactly on the analytic arm.
    """
    t = np.asarray(t, dtype=np.float64)
    angle = t * (4.0 * np.pi) + 2.0 * np.pi * arm / classes + angle_jitter
    return t * np.cos(angle), t * np.sin(angle)


def gen_spirals(spec: SyntheticSpec) -> Dataset:
    """K interleaved 2-D spiral arms with Gaussian angle jitter.

    Noise perturbs the angular coordinate (the usual spiral-benchmark
    convention); with the tight 2-turn winding, jitter on both Cartesian
    coordinates would drown the inter-arm gaps and pin every classifier
    near chance.
    """
    if spec.kind != "spirals":
        raise DataError(f"unknown synthetic kind {spec.kind!r}")
    if spec.classes < 2 or spec.samples_per_class < 1 or spec.noise < 0:
        raise DataError(f"invalid synthetic spec {spec}")
    rng = RngStream(spec.seed, _SPIRAL_STREAMS.get(spec.split, 2))
    m = spec.samples_per_class
    t = np.linspace(0.0, 1.0, m)
    xs, ys = [], []
    for arm in range(spec.classes):
        jitter = rng.normal(m, 1)[:, 0] * spec.noise
        x, y = spiral_coords(t, arm, spec.classes, jitter)
        xs.append(np.column_stack([x, y]))
        ys.append(np.full(m, arm, dtype=np.int64))
    return Dataset(np.vstack(xs), np.concatenate(ys), spec.classes, spec.split)


def _read_be_u32(buf: bytes, offset: int, what: str) -> int:
    if offset + 4 > len(buf):
        raise FormatError(f"truncated IDX file while reading {what}")
    return struct.unpack_from(">I", buf, offset)[0]


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Load an IDX image/label file pair; pixels scaled to [0, 1]."""
    with open(images_path, "rb") as f:
        img = f.read()
    with open(labels_path, "rb") as f:
        lab = f.read()

    magic = _read_be_u32(img, 0, "image magic")
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
    count = _read_be_u32(img, 4, "image count")
    rows = _read_be_u32(img, 8, "row count")
    cols = _read_be_u32(img, 12, "column count")
    payload = img[16:]
    if len(payload) != count * rows * cols:
        raise FormatError(
            f"image payload holds {len(payload)} bytes, header promises {count * rows * cols}"
        )

    lmagic = _read_be_u32(lab, 0, "label magic")
    if lmagic != IDX_LABEL_MAGIC:
        raise FormatError(f"bad label magic 0x{lmagic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
    lcount = _read_be_u32(lab, 4, "label count")
    lpayload = lab[8:]
    if len(lpayload) != lcount:
        raise FormatError(f"label payload holds {len(lpayload)} bytes, header promises {lcount}")
    if lcount != count:
        raise FormatError(f"image count {count} != label count {lcount}")

    X = np.frombuffer(payload, dtype=np.uint8).astype(np.float64).reshape(count, rows * cols)
    X /= 255.0
    Y = np.frombuffer(lpayload, dtype=np.uint8).astype(np.int64)
    classes = int(Y.max()) + 1 if count else 0
    return Dataset(X, Y, classes, split)


def save_idx(dataset: Dataset, images_path, labels_path, rows: int, cols: int) -> None:
    """Write a dataset whose features are u8/255 pixel values back to IDX."""
    if rows * cols != dataset.dim:
        raise FormatError(f"{rows}x{cols} does not match feature dim {dataset.dim}")
    pixels = np.round(dataset.X * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, dataset.n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, dataset.n))
        f.write(dataset.Y.astype(np.uint8).tobytes())


def batches(dataset: Dataset, batch_size: int, seed: int, epoch: int):
    """Shuffled batches for one epoch; the final short batch is kept.

    The permutation depends only on (seed, epoch).
    """
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    perm = RngStream(seed, _BATCH_STREAM_BASE + epoch).permutation(dataset.n)
    out = []
    for start in range(0, dataset.n, batch_size):
        idx = perm[start : start + batch_size]
        out.append((dataset.X[idx], dataset.Y[idx]))
    return out


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray  # 1 x d
    std: np.ndarray  # 1 x d, floored at 1e-8


def standardize_fit(dataset: Dataset) -> tuple[Dataset, NormStats]:
    """Per-feature standardization fitted on (and applied to) this split."""
    if dataset.n < 2:
        raise DataError("need at least 2 samples to fit normalization stats")
    mean = dataset.X.mean(axis=0, keepdims=True)
    std = np.maximum(dataset.X.std(axis=0, keepdims=True), 1e-8)
    stats = NormStats(mean=mean, std=std)
    return standardize_apply(stats, dataset), stats


def standardize_apply(stats: NormStats, dataset: Dataset) -> Dataset:
    """Apply previously fitted stats (train stats go to val/test unchanged)."""
    X = (dataset.X - stats.mean) / stats.std
    return Dataset(X, dataset.Y, dataset.classes, dataset.split)
