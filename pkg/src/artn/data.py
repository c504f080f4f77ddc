"""Domain-shift generators, file readers and minibatch iteration."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class DomainDataset:
    features: np.ndarray
    class_labels: Optional[np.ndarray] = None
    domain_label: int = 0
    name: str = ""
    # when set, labels exist for evaluation but must not be used for training
    labels_hidden: bool = False

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError(f"{self.name or 'dataset'}: non-finite feature values")
        x.setflags(write=False)
        object.__setattr__(self, "features", x)
        if self.class_labels is not None:
            y = np.asarray(self.class_labels, dtype=np.int64).reshape(-1)
            if y.shape[0] != x.shape[0]:
                raise ValueError(f"{y.shape[0]} labels for {x.shape[0]} rows")
            if np.any(y < 0):
                raise ValueError("class labels must be non-negative")
            y.setflags(write=False)
            object.__setattr__(self, "class_labels", y)
        if self.domain_label not in (0, 1):
            raise ValueError("domain_label must be 0 (source) or 1 (target)")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.class_labels.max()) + 1 if self.class_labels is not None else 0

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features, dtype="<f8").tobytes())
        if self.class_labels is not None:
            h.update(np.ascontiguousarray(self.class_labels, dtype="<i8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class ShiftSpec:
    rotation: float = 0.0
    translation: Sequence[float] = ()
    scale: float = 1.0
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not self.noise_std >= 0:
            raise ValueError(f"noise_std must be non-negative, got {self.noise_std}")


@dataclass
class Batch:
    x: np.ndarray
    y: Optional[np.ndarray]
    domain: int
    indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))


def _rotation_matrix(dim: int, angle: float) -> np.ndarray:
    """Rotation by ``angle`` in the plane of the first two coordinates."""
    R = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    R[:2, :2] = [[c, -s], [s, c]]
    return R


def _apply_shift(x: np.ndarray, shift: ShiftSpec) -> np.ndarray:
    dim = x.shape[1]
    out = x @ _rotation_matrix(dim, shift.rotation).T if shift.rotation else x.copy()
    out = out * shift.scale
    if len(shift.translation):
        t = np.zeros(dim)
        tr = np.asarray(shift.translation, dtype=float)
        if tr.size > dim:
            raise ValueError(f"translation has {tr.size} entries for dimension {dim}")
        t[:tr.size] = tr
        out = out + t
    return out


def make_blobs_pair(k_classes: int, n_per_class: int, dim: int, shift: ShiftSpec,
                    seed: int, center_spread: float = 4.0, cluster_std: float = 0.5):
    """Gaussian class clusters; the target is an affine image of a fresh sample.

    Class centres are drawn once from ``seed`` and shared by both domains.
    Target labels are retained but flagged hidden.
    """
    if k_classes < 2 or n_per_class < 1 or dim < 2:
        raise ValueError("need k_classes >= 2, n_per_class >= 1 and dim >= 2")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, center_spread, size=(k_classes, dim))
    ss, ts = rng.spawn(2)

    def sample(r):
        y = np.repeat(np.arange(k_classes), n_per_class)
        x = centers[y] + r.normal(0.0, cluster_std, size=(y.size, dim))
        return x, y

    xs, ys = sample(ss)
    xt, yt = sample(ts)
    xt = _apply_shift(xt, shift)
    if shift.noise_std > 0:
        xt = xt + np.random.default_rng(shift.seed).normal(0.0, shift.noise_std, size=xt.shape)
    return (DomainDataset(xs, ys, 0, "blobs-source"),
            DomainDataset(xt, yt, 1, "blobs-target", labels_hidden=True))


def _moons(n: int, noise: float, rng) -> tuple:
    half = n // 2
    t0 = rng.uniform(0.0, np.pi, half)
    t1 = rng.uniform(0.0, np.pi, half)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.concatenate([upper, lower]) - np.array([0.5, 0.25])
    x = x + rng.normal(0.0, noise, size=x.shape)
    y = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(half, dtype=np.int64)])
    return x, y


def make_two_moons_pair(n: int, noise: float, rotation: float, seed: int):
    """Two interleaving half circles centred on the origin; target rotated."""
    if n < 2 or n % 2:
        raise ValueError(f"n must be an even number >= 2, got {n}")
    rng = np.random.default_rng(seed)
    ss, ts = rng.spawn(2)
    xs, ys = _moons(n, noise, ss)
    xt, yt = _moons(n, noise, ts)
    xt = xt @ _rotation_matrix(2, rotation).T
    return (DomainDataset(xs, ys, 0, "moons-source"),
            DomainDataset(xt, yt, 1, "moons-target", labels_hidden=True))


def add_gaussian_noise(ds: DomainDataset, std: float, seed: int) -> DomainDataset:
    """Zero-mean Gaussian corruption of every feature entry."""
    if not std >= 0:
        raise ValueError(f"noise std must be non-negative, got {std}")
    if std == 0:
        return ds
    noise = np.random.default_rng(seed).normal(0.0, std, size=ds.features.shape)
    return replace(ds, features=ds.features + noise, name=f"{ds.name}+noise{std:g}")


# ------------------------------------------------------------------- IDX


def read_idx(path_images, path_labels=None, domain_label: int = 0,
             name: str = "") -> DomainDataset:
    """Read big-endian IDX images (and labels); pixels scaled to [0, 1]."""
    buf = Path(path_images).read_bytes()
    if len(buf) < 16:
        raise FormatError(f"{path_images}: truncated IDX header")
    magic, count, rows, cols = struct.unpack(">IIII", buf[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"{path_images}: bad image magic 0x{magic:08x}")
    need = count * rows * cols
    if len(buf) - 16 < need:
        raise FormatError(f"{path_images}: truncated payload ({len(buf) - 16} of {need} bytes)")
    pixels = np.frombuffer(buf, dtype=np.uint8, count=need, offset=16)
    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    labels = None
    if path_labels is not None:
        lbuf = Path(path_labels).read_bytes()
        if len(lbuf) < 8:
            raise FormatError(f"{path_labels}: truncated IDX header")
        lmagic, lcount = struct.unpack(">II", lbuf[:8])
        if lmagic != IDX_LABEL_MAGIC:
            raise FormatError(f"{path_labels}: bad label magic 0x{lmagic:08x}")
        if lcount != count:
            raise FormatError(f"label count {lcount} does not match image count {count}")
        if len(lbuf) - 8 < lcount:
            raise FormatError(f"{path_labels}: truncated payload")
        labels = np.frombuffer(lbuf, dtype=np.uint8, count=lcount, offset=8).astype(np.int64)
    return DomainDataset(features, labels, domain_label, name or Path(path_images).stem)


def write_idx(path_images, images: np.ndarray, path_labels=None, labels=None) -> None:
    """Write ``images`` (count x rows x cols, uint8) and optional labels as IDX."""
    images = np.asarray(images)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise ValueError("images must be a uint8 array of shape (count, rows, cols)")
    header = struct.pack(">IIII", IDX_IMAGE_MAGIC, *images.shape)
    Path(path_images).write_bytes(header + images.tobytes())
    if path_labels is not None:
        labels = np.asarray(labels, dtype=np.uint8)
        Path(path_labels).write_bytes(struct.pack(">II", IDX_LABEL_MAGIC, labels.size) + labels.tobytes())


# ------------------------------------------------------------ sparse text


def read_sparse_bow(path, dim: int, domain_label: int = 0, name: str = "") -> DomainDataset:
    """Parse ``<label> <idx>:<val> ...`` lines (1-based indices) into dense rows."""
    rows, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            try:
                label = int(tokens[0])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: malformed label {tokens[0]!r}") from None
            if label not in (0, 1):
                raise FormatError(f"{path}:{lineno}: label must be 0 or 1, got {label}")
            row = np.zeros(dim)
            for tok in tokens[1:]:
                idx, sep, val = tok.partition(":")
                try:
                    i, v = int(idx), float(val)
                except ValueError:
                    raise FormatError(f"{path}:{lineno}: malformed token {tok!r}") from None
                if not sep:
                    raise FormatError(f"{path}:{lineno}: malformed token {tok!r}")
                if not 1 <= i <= dim:
                    raise FormatError(f"{path}:{lineno}: index {i} outside [1, {dim}]")
                row[i - 1] = v
            rows.append(row)
            labels.append(label)
    features = np.array(rows).reshape(len(rows), dim)
    return DomainDataset(features, np.array(labels, dtype=np.int64), domain_label,
                         name or Path(path).stem)


def write_sparse_bow(path, ds: DomainDataset) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row, label in zip(ds.features, ds.class_labels):
            nz = np.flatnonzero(row)
            fh.write(" ".join([str(int(label))] + [f"{i + 1}:{float(row[i])!r}" for i in nz]) + "\n")


# ---------------------------------------------------------------- batches


def batch_iter(ds: DomainDataset, batch_size: int, seed: int, epoch: int) -> list:
    """Shuffled minibatches for one epoch; the last one may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    if n == 0:
        raise ValueError(f"{ds.name or 'dataset'} is empty")
    order = np.random.default_rng([seed, epoch]).permutation(n)
    labels = None if ds.labels_hidden else ds.class_labels
    return [Batch(ds.features[idx], None if labels is None else labels[idx], ds.domain_label, idx)
            for idx in (order[i:i + batch_size] for i in range(0, n, batch_size))]


def paired_batches(source: DomainDataset, target: DomainDataset, batch_size: int,
                   seed: int, epoch: int) -> Iterator[tuple]:
    """Zip source and target batches; the stream with fewer batches cycles."""
    bs = batch_iter(source, batch_size, seed, epoch)
    bt = batch_iter(target, batch_size, seed + 1_000_003, epoch)
    n = max(len(bs), len(bt))
    for i in range(n):
        yield bs[i % len(bs)], bt[i % len(bt)]
