"""Dataset loading, common-dimension preprocessing and synthetic generators.

Feature vectors are flattened channel-planar (C, H, W), which is the native
CIFAR-10 binary layout; grayscale sources have C = 1.
"""
from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

DATA_ROOT_ENV = "HETFED_DATA_ROOT"

CIFAR_RECORD = 3073
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class FormatError(ValueError):
    """Raised when a dataset file does not match its declared format."""


@dataclass(frozen=True)
class DatasetView:
    name: str
    train_features: np.ndarray
    train_labels: np.ndarray
    test_features: np.ndarray
    test_labels: np.ndarray
    num_classes: int
    image_shape: tuple
    # ground-truth class -> cluster map for planted synthetic data
    planted_clusters: Optional[tuple] = field(default=None, compare=False)

    def __post_init__(self):
        h, w, c = self.image_shape
        dim = h * w * c
        for feats, labels, split in (
            (self.train_features, self.train_labels, "train"),
            (self.test_features, self.test_labels, "test"),
        ):
            if feats.ndim != 2 or feats.shape[1] != dim:
                raise ValueError(f"{split} features must be (n, {dim}), got {feats.shape}")
            if labels.shape != (feats.shape[0],):
                raise ValueError(f"{split} labels do not match feature rows")
            if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise ValueError(f"{split} labels outside [0, {self.num_classes})")

    @property
    def dim(self) -> int:
        h, w, c = self.image_shape
        return h * w * c

    @property
    def num_train(self) -> int:
        return self.train_features.shape[0]

    def class_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.train_labels == label)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.train_labels, minlength=self.num_classes)


def _check_unit_range(features: np.ndarray, source: str) -> None:
    if features.size and (features.min() < 0.0 or features.max() > 1.0):
        raise FormatError(f"{source}: pixel values outside [0, 1]")


def _empty(dim: int) -> tuple[np.ndarray, np.ndarray]:
    return np.zeros((0, dim), dtype=np.float32), np.zeros(0, dtype=np.int64)


def data_root(configured: Optional[str | os.PathLike] = None) -> Optional[Path]:
    """Configured path first, then the ``HETFED_DATA_ROOT`` environment variable."""
    if configured:
        return Path(configured)
    env = os.environ.get(DATA_ROOT_ENV)
    return Path(env) if env else None


# --------------------------------------------------------------- CIFAR-10 ---

def parse_cifar10_records(raw: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    if len(raw) % CIFAR_RECORD:
        raise FormatError(
            f"{source}: truncated record ({len(raw)} bytes is not a multiple of {CIFAR_RECORD})"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() >= 10:
        bad = int(np.argmax(labels >= 10))
        raise FormatError(f"{source}: record {bad} has label byte {labels[bad]} >= 10")
    pixels = records[:, 1:].astype(np.float32) / np.float32(255.0)
    return pixels, labels


def load_cifar10_binary(
    train_paths: Sequence[str | os.PathLike],
    test_paths: Sequence[str | os.PathLike] = (),
    name: str = "CIFAR-10",
) -> DatasetView:
    """Load CIFAR-10 binary batches; sample order is file order."""

    def load_all(paths):
        if not paths:
            return _empty(3072)
        parts = [parse_cifar10_records(Path(p).read_bytes(), str(p)) for p in paths]
        return np.concatenate([f for f, _ in parts]), np.concatenate([l for _, l in parts])

    xtr, ytr = load_all(train_paths)
    xte, yte = load_all(test_paths)
    return DatasetView(name, xtr, ytr, xte, yte, 10, (32, 32, 3))


def cifar10_to_bytes(features: np.ndarray, labels: np.ndarray) -> bytes:
    """Inverse of :func:`parse_cifar10_records`."""
    pix = np.rint(np.asarray(features, dtype=np.float64) * 255.0).astype(np.uint8)
    rec = np.empty((pix.shape[0], CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = np.asarray(labels, dtype=np.uint8)
    rec[:, 1:] = pix
    return rec.tobytes()


def cifar10_paths(root: str | os.PathLike) -> tuple[list[Path], list[Path]]:
    root = Path(root)
    base = root / "cifar-10-batches-bin" if (root / "cifar-10-batches-bin").is_dir() else root
    train = [base / f"data_batch_{i}.bin" for i in range(1, 6)]
    return train, [base / "test_batch.bin"]


# -------------------------------------------------------------------- IDX ---

def parse_idx(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    """Parse an unsigned-byte IDX file into an array of its declared shape."""
    if len(raw) < 4:
        raise FormatError(f"{source}: too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise FormatError(f"{source}: bad magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise FormatError(f"{source}: expected {count} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def idx_to_bytes(array: np.ndarray) -> bytes:
    a = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | a.ndim
    return struct.pack(f">I{a.ndim}I", magic, *a.shape) + a.tobytes()


def _idx_split(image_path, label_path) -> tuple[np.ndarray, np.ndarray, tuple]:
    images = parse_idx(Path(image_path).read_bytes(), str(image_path))
    labels = parse_idx(Path(label_path).read_bytes(), str(label_path))
    if images.ndim != 3:
        raise FormatError(f"{image_path}: expected a 3-D image array, got {images.ndim}-D")
    if labels.ndim != 1:
        raise FormatError(f"{label_path}: expected a 1-D label array")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    n, h, w = images.shape
    feats = images.reshape(n, h * w).astype(np.float32) / np.float32(255.0)
    return feats, labels.astype(np.int64), (h, w, 1)


def load_idx(
    image_path,
    label_path,
    test_image_path=None,
    test_label_path=None,
    num_classes: int = 10,
    name: str = "IDX",
) -> DatasetView:
    xtr, ytr, shape = _idx_split(image_path, label_path)
    if test_image_path is not None:
        xte, yte, tshape = _idx_split(test_image_path, test_label_path)
        if tshape != shape:
            raise FormatError(f"train/test image shapes differ: {shape} vs {tshape}")
    else:
        xte, yte = _empty(xtr.shape[1])
    for lab in (ytr, yte):
        if lab.size and lab.max() >= num_classes:
            raise FormatError(f"label {lab.max()} >= num_classes {num_classes}")
    return DatasetView(name, xtr, ytr, xte, yte, num_classes, shape)


# -------------------------------------------------------------------- CSV ---

def _read_csv_rows(path, num_classes: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    labels, rows = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != dim + 1:
                raise FormatError(f"{path}:{lineno}: expected {dim + 1} columns, got {len(row)}")
            lab = int(float(row[0]))
            if not 0 <= lab < num_classes:
                raise FormatError(f"{path}:{lineno}: label {lab} out of range")
            labels.append(lab)
            rows.append([float(v) for v in row[1:]])
    if not rows:
        return _empty(dim)
    x = np.asarray(rows, dtype=np.float64)
    if x.max() > 1.0:
        x = x / 255.0
    x = x.astype(np.float32)
    _check_unit_range(x, str(path))
    return x, np.asarray(labels, dtype=np.int64)


def load_csv(
    path,
    num_classes: int,
    image_shape: tuple,
    test_path=None,
    name: str = "CSV",
) -> DatasetView:
    """One sample per row: label, then H*W*C pixels (planar order).

    Pixel values are taken as [0, 255] if any value exceeds 1, otherwise
    passed through unscaled.
    """
    h, w, c = image_shape
    dim = h * w * c
    xtr, ytr = _read_csv_rows(path, num_classes, dim)
    if test_path is not None:
        xte, yte = _read_csv_rows(test_path, num_classes, dim)
    else:
        xte, yte = _empty(dim)
    return DatasetView(name, xtr, ytr, xte, yte, num_classes, (h, w, c))


# ----------------------------------------------------------- preprocessing ---

def _pad_block(x: np.ndarray, shape: tuple, target: tuple) -> np.ndarray:
    h, w, c = shape
    th, tw, tc = target
    n = x.shape[0]
    planes = x.reshape(n, c, h, w)
    top, left = (th - h) // 2, (tw - w) // 2
    out = np.zeros((n, c, th, tw), dtype=x.dtype)
    out[:, :, top:top + h, left:left + w] = planes
    if c == 1 and tc > 1:
        out = np.repeat(out, tc, axis=1)
    return out.reshape(n, tc * th * tw)


def to_common_dim(view: DatasetView, target: tuple = (32, 32, 3)) -> DatasetView:
    """Center zero-pad to ``target`` H x W; replicate single-channel inputs."""
    h, w, c = view.image_shape
    th, tw, tc = target
    if h > th or w > tw:
        raise ValueError(f"{view.name}: source {h}x{w} larger than target {th}x{tw}")
    if c != tc and c != 1:
        raise ValueError(f"{view.name}: cannot map {c} channels to {tc}")
    if (h, w, c) == (th, tw, tc):
        return view
    return replace(
        view,
        train_features=_pad_block(view.train_features, view.image_shape, target),
        test_features=_pad_block(view.test_features, view.image_shape, target),
        image_shape=tuple(target),
    )


def concat_views(views: Sequence[DatasetView], name: str = "MIX") -> tuple[DatasetView, list[int], list[int]]:
    """Stack datasets with label offsets; returns (view, label_offsets, index_offsets)."""
    if not views:
        raise ValueError("no datasets to concatenate")
    shape = views[0].image_shape
    for v in views:
        if v.image_shape != shape:
            raise ValueError(f"{v.name}: shape {v.image_shape} differs from {shape}; apply to_common_dim")
    label_off = np.cumsum([0] + [v.num_classes for v in views[:-1]]).tolist()
    index_off = np.cumsum([0] + [v.num_train for v in views[:-1]]).tolist()
    view = DatasetView(
        name,
        np.concatenate([v.train_features for v in views]),
        np.concatenate([v.train_labels + o for v, o in zip(views, label_off)]),
        np.concatenate([v.test_features for v in views]),
        np.concatenate([v.test_labels + o for v, o in zip(views, label_off)]),
        int(sum(v.num_classes for v in views)),
        shape,
    )
    return view, [int(o) for o in label_off], [int(o) for o in index_off]


# ----------------------------------------------------------- synthetic data ---

def _random_orthonormal(rng: np.random.Generator, m: int, k: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((m, k)))
    return q * np.sign(np.diag(r))


def synth_superclusters(
    num_clusters: int,
    classes_per_cluster: int,
    samples_per_class: int,
    ambient_dim: int,
    within_angle: float,
    across_angle: float,
    noise: float,
    seed: int,
    class_dim: int = 2,
    test_per_class: int = 0,
    mean_scale: float = 3.0,
) -> DatasetView:
    """Classes living on planted subspaces grouped into super clusters.

    Every class owns a ``class_dim``-dimensional subspace.  All principal
    angles between two classes of the same cluster equal ``within_angle``;
    between classes of different clusters they equal ``across_angle``.
    Samples are ``B @ z + noise * e`` with ``z ~ N(mean, I)``, where the
    non-zero mean keeps classes linearly separable.  Features are not
    restricted to [0, 1].
    """
    if not 0.0 <= within_angle <= across_angle <= 90.0:
        raise ValueError("need 0 <= within_angle <= across_angle <= 90")
    if within_angle == across_angle and num_clusters > 1 and within_angle < 90.0:
        raise ValueError("across_angle must exceed within_angle")
    q = class_dim
    k, j = num_clusters, classes_per_cluster
    needed = q * (1 + k + k * j)
    if ambient_dim < needed:
        raise ValueError(f"ambient_dim {ambient_dim} too small; need at least {needed}")

    cos_w = np.cos(np.radians(within_angle))
    cos_a = np.cos(np.radians(across_angle))
    # class-to-class inner products: cos(phi)^2 within, cos(phi)^2 cos(psi)^2 across
    phi = np.arccos(np.sqrt(cos_w))
    ratio = 0.0 if cos_w == 0 else cos_a / cos_w
    psi = np.arccos(np.sqrt(min(max(ratio, 0.0), 1.0)))

    rng = np.random.default_rng(seed)
    frame = _random_orthonormal(rng, ambient_dim, needed)
    blocks = [frame[:, i * q:(i + 1) * q] for i in range(needed // q)]
    shared, rest = blocks[0], blocks[1:]
    private_cluster, private_class = rest[:k], rest[k:]

    mean = np.linspace(mean_scale, mean_scale / 2.0, q)
    bases, clusters = [], []
    for ci in range(k):
        center = np.cos(psi) * shared + np.sin(psi) * private_cluster[ci]
        for cj in range(j):
            bases.append(np.cos(phi) * center + np.sin(phi) * private_class[ci * j + cj])
            clusters.append(ci)

    def draw(per_class):
        feats, labels = [], []
        for label, b in enumerate(bases):
            z = mean + rng.standard_normal((per_class, q))
            x = z @ b.T + noise * rng.standard_normal((per_class, ambient_dim))
            feats.append(x)
            labels.append(np.full(per_class, label, dtype=np.int64))
        return np.concatenate(feats), np.concatenate(labels)

    xtr, ytr = draw(samples_per_class)
    if test_per_class:
        xte, yte = draw(test_per_class)
    else:
        xte, yte = np.zeros((0, ambient_dim)), np.zeros(0, dtype=np.int64)
    return DatasetView(
        name="synthetic",
        train_features=xtr,
        train_labels=ytr,
        test_features=xte,
        test_labels=yte,
        num_classes=k * j,
        image_shape=(ambient_dim, 1, 1),
        planted_clusters=tuple(clusters),
    )
