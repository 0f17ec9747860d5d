"""Synthetic datasets, Gaussian-noise corruption and IDX (MNIST) ingestion."""

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

OOD_LABEL = -1
SPLITS = ("train", "val", "test", "ood", "shifted")
SEVERITY_SIGMA = {0: 0.0, 1: 0.02, 2: 0.05, 3: 0.1, 4: 0.2, 5: 0.4}

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    def __init__(self, path, offset, message):
        super().__init__(f"{path}: byte offset {offset}: {message}")
        self.path = str(path)
        self.offset = offset


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    split: np.ndarray
    n_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        self.y = np.asarray(self.y, dtype=int)
        self.split = np.asarray(self.split, dtype=object)
        if not (len(self.X) == len(self.y) == len(self.split)):
            raise ValueError("X, y and split must have the same number of rows")
        bad = set(self.split.tolist()) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split tag(s) {sorted(bad)}")
        ood = self.split == "ood"
        if np.any(self.y[ood] != OOD_LABEL):
            raise ValueError("OOD rows must carry the sentinel label")
        if np.any((self.y[~ood] < 0) | (self.y[~ood] >= self.n_classes)):
            raise ValueError("labels out of range")

    @property
    def dim(self):
        return self.X.shape[1]

    def subset(self, split):
        m = self.split == split
        return self.X[m], self.y[m]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(self.dim)] + ["y", "split"])
        for xi, yi, si in zip(self.X, self.y, self.split):
            w.writerow([repr(float(v)) for v in xi] + [int(yi), si])
        return buf.getvalue()


def _stack(parts, n_classes, meta):
    X = np.concatenate([p[0] for p in parts])
    y = np.concatenate([p[1] for p in parts])
    split = np.concatenate([np.full(len(p[1]), p[2], dtype=object) for p in parts])
    return Dataset(X, y, split, n_classes, meta)


# ---------------------------------------------------------------- two moons

def moons(n, noise, rng):
    """n points, n/2 per class, on the two interleaved half-circles."""
    if n % 2:
        raise ValueError("n must be even")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    half = n // 2
    t0 = rng.uniform(0.0, np.pi, half)
    t1 = rng.uniform(0.0, np.pi, half)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    X = np.concatenate([upper, lower])
    y = np.r_[np.zeros(half, dtype=int), np.ones(half, dtype=int)]
    if noise > 0:
        X = X + noise * rng.standard_normal(X.shape)
    return X, y


def gen_two_moons(n=2000, noise=0.1, n_test=1000, ood_center=(2.5, 2.0), ood_radius=0.3, n_ood=400,
                  ring=None, seed=0):
    """Two moons (train/test) plus an isotropic OOD cluster.

    ``ring`` = dict(center, radius, width, n) adds ring-shaped near-OOD rows
    tagged "ood" with meta["ood_kind"] marking which rows are which.
    """
    rng = np.random.default_rng(seed)
    Xtr, ytr = moons(n, noise, rng)
    parts = [(Xtr, ytr, "train")]
    if n_test:
        Xte, yte = moons(n_test, noise, rng)
        parts.append((Xte, yte, "test"))
    kinds = []
    if n_ood:
        Xo = np.asarray(ood_center, dtype=np.float64) + ood_radius * rng.standard_normal((n_ood, 2))
        parts.append((Xo, np.full(n_ood, OOD_LABEL), "ood"))
        kinds += ["cluster"] * n_ood
    if ring:
        Xr = ring_points(rng=rng, **ring)
        parts.append((Xr, np.full(len(Xr), OOD_LABEL), "ood"))
        kinds += ["ring"] * len(Xr)
    meta = {"name": "two_moons", "seed": seed, "noise": noise, "ood_center": list(ood_center),
            "ood_radius": ood_radius, "ring": ring, "ood_kind": kinds}
    return _stack(parts, 2, meta)


def ring_points(center=(0.5, 0.25), radius=2.0, width=0.1, n=400, rng=None):
    rng = rng if rng is not None else np.random.default_rng(0)
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    r = radius + width * rng.standard_normal(n)
    return np.asarray(center, dtype=np.float64) + np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


def ood_rows(ds, kind):
    """Inputs of OOD rows of the given kind ("cluster" or "ring")."""
    Xo, _ = ds.subset("ood")
    kinds = np.asarray(ds.meta.get("ood_kind", ["cluster"] * len(Xo)))
    return Xo[kinds == kind]


# ---------------------------------------------------------------- blobs, 1D

def gen_blobs(n_classes=3, n_per_class=200, centers=None, sigma=0.5, n_test_per_class=100, seed=0):
    rng = np.random.default_rng(seed)
    if centers is None:
        ang = 2.0 * np.pi * np.arange(n_classes) / n_classes
        centers = 3.0 * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    centers = np.asarray(centers, dtype=np.float64)
    if len(centers) != n_classes:
        raise ValueError("need one center per class")

    def draw(m):
        X = np.concatenate([c + sigma * rng.standard_normal((m, centers.shape[1])) for c in centers])
        y = np.repeat(np.arange(n_classes), m)
        return X, y

    parts = [(*draw(n_per_class), "train")]
    if n_test_per_class:
        parts.append((*draw(n_test_per_class), "test"))
    return _stack(parts, n_classes, {"name": "blobs", "seed": seed, "sigma": sigma,
                                     "centers": centers.tolist()})


# class segments interleave so each class is multi-modal
TOY1D_SEGMENTS = {0: [(-3.0, -2.0), (0.0, 1.0)], 1: [(-1.5, -0.5), (1.5, 2.5)]}
TOY1D_OOD = (4.0, 5.0)


def gen_toy1d(n_per_segment=100, n_ood=100, seed=0):
    """1D inputs with two disjoint segments per class and an OOD interval."""
    rng = np.random.default_rng(seed)

    def draw(m):
        xs, ys = [], []
        for c, segs in TOY1D_SEGMENTS.items():
            for lo, hi in segs:
                xs.append(rng.uniform(lo, hi, m))
                ys.append(np.full(m, c))
        return np.concatenate(xs)[:, None], np.concatenate(ys)

    parts = [(*draw(n_per_segment), "train"), (*draw(max(1, n_per_segment // 2)), "test")]
    if n_ood:
        parts.append((rng.uniform(*TOY1D_OOD, n_ood)[:, None], np.full(n_ood, OOD_LABEL), "ood"))
    return _stack(parts, 2, {"name": "toy1d", "seed": seed, "segments": TOY1D_SEGMENTS})


# --------------------------------------------------------------- corruption

@dataclass(frozen=True)
class CorruptionSpec:
    kind: str = "gaussian_noise"
    severity: int = 1

    def __post_init__(self):
        if self.kind != "gaussian_noise":
            raise ValueError(f"unsupported corruption {self.kind!r}")
        if self.severity not in SEVERITY_SIGMA:
            raise ValueError("severity must be in 1..5 (0 is the identity)")

    @property
    def sigma(self):
        return SEVERITY_SIGMA[self.severity]


def corrupt(ds, spec, seed=0, split="test"):
    """Gaussian-noise copy of one split, tagged "shifted"; labels unchanged."""
    rng = np.random.default_rng(seed)
    X, y = ds.subset(split)
    Xs = X + spec.sigma * rng.standard_normal(X.shape) if spec.sigma > 0 else X.copy()
    meta = dict(ds.meta, corruption={"kind": spec.kind, "severity": spec.severity, "sigma": spec.sigma})
    return Dataset(Xs, y, np.full(len(y), "shifted", dtype=object), ds.n_classes, meta)


# ---------------------------------------------------------------------- IDX

def _read_header(path, data, magic, ndims):
    need = 4 + 4 * ndims
    if len(data) < 4:
        raise IdxFormatError(path, len(data), "file too short for magic number")
    got = struct.unpack(">I", data[:4])[0]
    if got != magic:
        raise IdxFormatError(path, 0, f"bad magic 0x{got:08x}, expected 0x{magic:08x}")
    if len(data) < need:
        raise IdxFormatError(path, len(data), f"header truncated, need {need} bytes")
    return struct.unpack(f">{ndims}I", data[4:need]), need


def read_idx_images(path, limit=None):
    path = Path(path)
    data = path.read_bytes()
    (n, rows, cols), off = _read_header(path, data, IDX_IMAGES_MAGIC, 3)
    count = n if limit is None else min(n, limit)
    size = rows * cols
    end = off + count * size
    if len(data) < end:
        raise IdxFormatError(path, len(data), f"truncated pixel data, expected {end} bytes")
    pix = np.frombuffer(data, dtype=np.uint8, count=count * size, offset=off)
    return pix.reshape(count, size).astype(np.float64) / 255.0, n


def read_idx_labels(path, limit=None):
    path = Path(path)
    data = path.read_bytes()
    (n,), off = _read_header(path, data, IDX_LABELS_MAGIC, 1)
    count = n if limit is None else min(n, limit)
    if len(data) < off + count:
        raise IdxFormatError(path, len(data), f"truncated label data, expected {off + count} bytes")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=off).astype(int), n


def load_idx(images_path, labels_path, limit=None, split="train", n_classes=10):
    X, n_img = read_idx_images(images_path, limit)
    y, n_lab = read_idx_labels(labels_path, limit)
    if n_img != n_lab:
        raise IdxFormatError(labels_path, 4, f"label count {n_lab} does not match image count {n_img}")
    return Dataset(X, y, np.full(len(y), split, dtype=object), n_classes,
                   {"name": "idx", "images": str(images_path), "labels": str(labels_path), "limit": limit})


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 images (N, rows, cols) and labels in IDX layout."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())
