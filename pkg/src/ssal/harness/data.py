"""Datasets: IDX files and the synthetic striped-image generator."""

from __future__ import annotations

import colorsys
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

IDX_UBYTE = 0x08


class IdxError(ValueError):
    pass


def write_idx(data: np.ndarray, path) -> None:
    """Write an unsigned-byte IDX file (big-endian dimension sizes)."""
    arr = np.asarray(data)
    if arr.dtype != np.uint8:
        raise IdxError("only unsigned 8-bit payloads are supported")
    if not 1 <= arr.ndim <= 255:
        raise IdxError("IDX needs between 1 and 255 dimensions")
    header = bytes([0, 0, IDX_UBYTE, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(arr).tobytes())


def parse_idx(buf: bytes) -> np.ndarray:
    if len(buf) < 4:
        raise IdxError("truncated IDX header")
    if buf[0] != 0 or buf[1] != 0:
        raise IdxError("bad IDX magic bytes")
    if buf[2] != IDX_UBYTE:
        raise IdxError(f"unsupported IDX type code 0x{buf[2]:02x}")
    ndim = buf[3]
    if ndim == 0:
        raise IdxError("IDX file declares zero dimensions")
    end = 4 + 4 * ndim
    if len(buf) < end:
        raise IdxError("truncated IDX dimension table")
    shape = struct.unpack(f">{ndim}I", buf[4:end])
    size = int(np.prod(shape, dtype=np.int64))
    if len(buf) - end < size:
        raise IdxError(f"truncated IDX payload: expected {size} bytes, found {len(buf) - end}")
    if len(buf) - end > size:
        raise IdxError("trailing bytes after IDX payload")
    return np.frombuffer(buf, dtype=np.uint8, count=size, offset=end).reshape(shape).copy()


def read_idx(path) -> np.ndarray:
    return parse_idx(Path(path).read_bytes())


def to_unit(images: np.ndarray) -> np.ndarray:
    """uint8 IDX images (N×H×W or N×3×H×W) -> float32 N×C×H×W in [0, 1]."""
    if images.ndim == 3:
        images = images[:, None]
    elif images.ndim != 4 or images.shape[1] not in (1, 3):
        raise IdxError(f"unsupported image layout {images.shape}")
    return images.astype(np.float32) / np.float32(255.0)


def to_bytes(images: np.ndarray) -> np.ndarray:
    """float N×C×H×W in [0, 1] -> uint8, with 1-channel images stored as N×H×W."""
    out = np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)
    return out[:, 0] if out.shape[1] == 1 else out


@dataclass
class Dataset:
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if len(self.train_images) != len(self.train_labels) or len(self.test_images) != len(self.test_labels):
            raise ValueError("image and label counts differ")

    @property
    def channels(self) -> int:
        return self.train_images.shape[1]


SPLIT_FILES = {
    "train_images": "train-images.idx",
    "train_labels": "train-labels.idx",
    "test_images": "test-images.idx",
    "test_labels": "test-labels.idx",
}


def save_dataset(ds: Dataset, directory) -> Path:
    """Write the four IDX files plus a manifest.json naming them."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_idx(to_bytes(ds.train_images), d / SPLIT_FILES["train_images"])
    write_idx(ds.train_labels.astype(np.uint8), d / SPLIT_FILES["train_labels"])
    write_idx(to_bytes(ds.test_images), d / SPLIT_FILES["test_images"])
    write_idx(ds.test_labels.astype(np.uint8), d / SPLIT_FILES["test_labels"])
    manifest = {
        **SPLIT_FILES,
        "num_classes": ds.num_classes,
        "train_count": len(ds.train_labels),
        "test_count": len(ds.test_labels),
    }
    path = d / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_idx_dataset(train_images, train_labels, test_images, test_labels, num_classes: Optional[int] = None) -> Dataset:
    tr_x, tr_y = to_unit(read_idx(train_images)), read_idx(train_labels)
    te_x, te_y = to_unit(read_idx(test_images)), read_idx(test_labels)
    for y in (tr_y, te_y):
        if y.ndim != 1:
            raise IdxError("label files must be 1-dimensional")
    if len(tr_x) != len(tr_y) or len(te_x) != len(te_y):
        raise IdxError("image count does not match label count")
    if num_classes is None:
        num_classes = int(max(tr_y.max(), te_y.max())) + 1
    return Dataset(tr_x, tr_y.astype(np.int64), te_x, te_y.astype(np.int64), num_classes)


def load_manifest(path) -> Dataset:
    path = Path(path)
    m = json.loads(path.read_text())
    d = path.parent
    return load_idx_dataset(*(d / m[k] for k in SPLIT_FILES), num_classes=m.get("num_classes"))


# ------------------------------------------------------------ synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Striped class patterns with random phase, translation, hue and noise.

    Class c uses stripe orientation ``orientations[c]`` (degrees), spatial
    frequency ``frequencies[c]`` (cycles per image) and base hue ``hues[c]``.
    Orientations default to 0/90 degrees, which a horizontal flip maps to
    themselves, so weak augmentation never changes a class signature.
    """

    num_classes: int = 4
    train_per_class: int = 600
    test_per_class: int = 200
    channels: int = 3
    size: int = 16
    seed: int = 0
    noise: float = 0.5
    max_shift: int = 3
    hue_spread: float = 0.2
    orientations: Optional[tuple] = None
    frequencies: Optional[tuple] = None
    hues: Optional[tuple] = None
    imbalance: Optional[tuple] = None

    def __post_init__(self):
        if self.num_classes < 2 or self.size < 3 or self.channels not in (1, 3):
            raise ValueError("need >= 2 classes, size >= 3 and 1 or 3 channels")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ValueError("per-class counts must be positive")
        if self.noise < 0 or self.max_shift < 0 or self.hue_spread < 0:
            raise ValueError("noise, max_shift and hue_spread must be non-negative")
        for name in ("orientations", "frequencies", "hues", "imbalance"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, tuple(v))
                if len(v) != self.num_classes:
                    raise ValueError(f"{name} needs one entry per class")
        sigs = self.signatures()
        if len(set(sigs)) != len(sigs):
            raise ValueError("class signatures must be pairwise distinct")
        if self.imbalance is not None and any(not 0 < f <= 1 for f in self.imbalance):
            raise ValueError("imbalance fractions must lie in (0, 1]")

    def signatures(self) -> list[tuple[float, float, float]]:
        c = self.num_classes
        theta = self.orientations or tuple(90.0 * (i % 2) for i in range(c))
        freq = self.frequencies or tuple(2.0 + 1.5 * (i // 2) for i in range(c))
        hue = self.hues or tuple(i / c for i in range(c))
        return [(float(theta[i]), float(freq[i]), float(hue[i])) for i in range(c)]


def _render(spec: SyntheticSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    theta, freq, hue = spec.signatures()[label]
    n = spec.size
    phase = rng.uniform(0, 2 * np.pi)
    if spec.max_shift == 0:
        phase = 0.0  # phase jitter counts as translation; drawn anyway to keep the stream layout
    ty, tx = rng.integers(-spec.max_shift, spec.max_shift + 1, size=2)
    h = (hue + rng.uniform(-spec.hue_spread, spec.hue_spread)) % 1.0
    noise = rng.uniform(-spec.noise, spec.noise, size=(spec.channels, n, n))

    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    t = np.deg2rad(theta)
    coord = (xx - tx) * np.cos(t) + (yy - ty) * np.sin(t)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * coord / n + phase)
    if spec.channels == 3:
        color = np.array(colorsys.hsv_to_rgb(h, 0.8, 1.0))[:, None, None]
        img = 0.15 + 0.7 * stripes[None] * color
    else:
        img = (0.15 + 0.7 * stripes * (0.4 + 0.6 * hue))[None]
    return np.clip(img + noise, 0.0, 1.0)


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> Dataset:
    """Deterministic per seed; labels are balanced unless ``imbalance`` scales
    the per-class training counts."""
    root = np.random.SeedSequence([spec.seed, 31337])
    train_seq, test_seq = root.spawn(2)

    def build(seq, counts):
        rng = np.random.default_rng(seq)
        labels = np.repeat(np.arange(spec.num_classes), counts)
        order = rng.permutation(len(labels))
        labels = labels[order]
        imgs = np.stack([_render(spec, int(y), rng) for y in labels]).astype(np.float32)
        return imgs, labels.astype(np.int64)

    train_counts = [spec.train_per_class] * spec.num_classes
    if spec.imbalance is not None:
        train_counts = [max(1, int(round(spec.train_per_class * f))) for f in spec.imbalance]
    tr_x, tr_y = build(train_seq, train_counts)
    te_x, te_y = build(test_seq, [spec.test_per_class] * spec.num_classes)
    return Dataset(tr_x, tr_y, te_x, te_y, spec.num_classes)
