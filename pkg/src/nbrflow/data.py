"""Synthetic generators, CSV / IDX ingestion, and dataset digests."""
from __future__ import annotations

import csv
import gzip
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

IDX_UBYTE_3D = 0x00000803
GENERATORS = ("moons", "rings", "gaussian-grid", "pinwheel")


@dataclass
class Dataset:
    x: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise ValueError("dataset must be a 2-D matrix")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.x),):
                raise ValueError("one label per row required")

    def __len__(self):
        return len(self.x)

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.x[idx], None if self.labels is None else self.labels[idx])

    def digest(self) -> str:
        return dataset_digest(self.x, self.labels)


def dataset_digest(x, labels=None) -> str:
    x = np.ascontiguousarray(x, dtype="<f8")
    h = hashlib.sha256()
    h.update(struct.pack("<II", *x.shape))
    h.update(x.tobytes())
    if labels is not None:
        h.update(np.ascontiguousarray(labels, dtype="<i8").tobytes())
    return h.hexdigest()


# generators; every one is a pure function of (n, noise, rng)

def make_moons(n: int, noise: float, rng: np.random.Generator) -> Dataset:
    n_out = n // 2
    n_in = n - n_out
    t_out = np.linspace(0.0, np.pi, n_out)
    t_in = np.linspace(0.0, np.pi, n_in)
    outer = np.c_[np.cos(t_out), np.sin(t_out)]
    inner = np.c_[1.0 - np.cos(t_in), 0.5 - np.sin(t_in)]
    x = np.vstack([outer, inner]) + rng.normal(0.0, noise, size=(n, 2))
    y = np.r_[np.zeros(n_out, dtype=np.int64), np.ones(n_in, dtype=np.int64)]
    perm = rng.permutation(n)
    return Dataset(x[perm], y[perm])


def make_rings(n: int, noise: float, rng: np.random.Generator, radii=(1.0, 2.0)) -> Dataset:
    labels = rng.integers(len(radii), size=n)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    r = np.asarray(radii)[labels]
    x = np.c_[r * np.cos(theta), r * np.sin(theta)] + rng.normal(0.0, noise, size=(n, 2))
    return Dataset(x, labels)


def grid_centers(side: int = 3, spacing: float = 2.0) -> np.ndarray:
    g = (np.arange(side) - (side - 1) / 2.0) * spacing
    return np.array([(a, b) for a in g for b in g])


def make_gaussian_grid(n: int, noise: float, rng: np.random.Generator, side: int = 3,
                       spacing: float = 2.0) -> Dataset:
    centers = grid_centers(side, spacing)
    labels = rng.integers(len(centers), size=n)
    x = centers[labels] + rng.normal(0.0, noise, size=(n, 2))
    return Dataset(x, labels)


def make_pinwheel(n: int, noise: float, rng: np.random.Generator, n_arms: int = 5,
                  rate: float = 0.25) -> Dataset:
    labels = rng.integers(n_arms, size=n)
    radial = rng.normal(1.0, max(noise, 1e-3) * 3.0, size=n)
    tangential = rng.normal(0.0, max(noise, 1e-3), size=n)
    angle = 2.0 * np.pi * labels / n_arms + rate * np.exp(radial)
    c, s = np.cos(angle), np.sin(angle)
    x = np.c_[c * radial - s * tangential, s * radial + c * tangential]
    return Dataset(x, labels)


def generate(kind: str, n: int, noise: float, rng: np.random.Generator) -> Dataset:
    if kind == "moons":
        return make_moons(n, noise, rng)
    if kind == "rings":
        return make_rings(n, noise, rng)
    if kind == "gaussian-grid":
        return make_gaussian_grid(n, noise, rng)
    if kind == "pinwheel":
        return make_pinwheel(n, noise, rng)
    raise ValueError(f"unknown generator {kind!r}; choose from {GENERATORS}")


# file formats

def write_csv(path, ds: Dataset) -> None:
    header = [f"x{j}" for j in range(ds.d)] + (["label"] if ds.labels is not None else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(ds)):
            row = [repr(float(v)) for v in ds.x[i]]
            if ds.labels is not None:
                row.append(str(int(ds.labels[i])))
            w.writerow(row)


def read_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = rows[0]
    has_label = bool(header) and header[-1] == "label"
    n_feat = len(header) - int(has_label)
    body = [r for r in rows[1:] if r]
    x = np.array([[float(v) for v in r[:n_feat]] for r in body], dtype=np.float64).reshape(-1, n_feat)
    labels = np.array([int(r[-1]) for r in body], dtype=np.int64) if has_label else None
    return Dataset(x, labels)


def _open_maybe_gz(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx_images(path, downsample: int = 1) -> np.ndarray:
    """Read an IDX ubyte image file (magic 0x00000803) into rows scaled to [0, 1].

    ``downsample`` averages non-overlapping blocks (2 turns 28x28 into 14x14).
    """
    with _open_maybe_gz(path) as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise ValueError("truncated IDX header")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_UBYTE_3D:
        raise ValueError(f"bad IDX magic {magic:#010x}")
    body = np.frombuffer(raw, dtype=np.uint8, offset=16)
    if body.size != n * rows * cols:
        raise ValueError("IDX payload size does not match header")
    imgs = body.reshape(n, rows, cols).astype(np.float64) / 255.0
    if downsample > 1:
        r2, c2 = rows // downsample, cols // downsample
        imgs = imgs[:, :r2 * downsample, :c2 * downsample]
        imgs = imgs.reshape(n, r2, downsample, c2, downsample).mean(axis=(2, 4))
    return imgs.reshape(n, -1)


def read_idx_labels(path) -> np.ndarray:
    with _open_maybe_gz(path) as fh:
        raw = fh.read()
    magic, n = struct.unpack(">II", raw[:8])
    if magic != 0x00000801:
        raise ValueError(f"bad IDX label magic {magic:#010x}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8)[:n].astype(np.int64)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_UBYTE_3D, n, rows, cols))
        fh.write(images.tobytes())


def split(ds: Dataset, fractions, rng: np.random.Generator) -> list[Dataset]:
    """Disjoint random splits with the given fractions (last one takes the rest)."""
    perm = rng.permutation(len(ds))
    out, start = [], 0
    for i, f in enumerate(fractions):
        stop = len(ds) if i == len(fractions) - 1 else start + int(round(f * len(ds)))
        out.append(ds.subset(np.sort(perm[start:stop])))
        start = stop
    return out
