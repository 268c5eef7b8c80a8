"""Episodic n-way k-shot sampling, synthetic image classes and ATDS files."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

ATDS_MAGIC = b"ATDS"
ATDS_VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    """Images stored as ``(classes, per_class, channels, height, width)``."""

    images: np.ndarray
    class_names: list[str] = field(default_factory=list)
    prototypes: np.ndarray | None = field(default=None, repr=False)  # noise-free class means, synthetic data only

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 5:
            raise DataError(f"expected a 5-d image stack, got shape {self.images.shape}")
        if not self.class_names:
            self.class_names = [f"class_{i}" for i in range(self.classes)]

    @property
    def classes(self) -> int:
        return self.images.shape[0]

    @property
    def per_class(self) -> int:
        return self.images.shape[1]

    @property
    def channels(self) -> int:
        return self.images.shape[2]

    @property
    def height(self) -> int:
        return self.images.shape[3]

    @property
    def width(self) -> int:
        return self.images.shape[4]

    def subset(self, class_ids) -> Dataset:
        ids = list(class_ids)
        protos = None if self.prototypes is None else self.prototypes[ids]
        return Dataset(self.images[ids], [self.class_names[i] for i in ids], protos)


@dataclass
class Episode:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    classes: np.ndarray  # original class id of each remapped label
    support_idx: np.ndarray = field(default=None, repr=False)  # (class, image) pairs
    query_idx: np.ndarray = field(default=None, repr=False)

    @property
    def support(self):
        return self.support_x, self.support_y

    @property
    def query(self):
        return self.query_x, self.query_y

    @property
    def n_way(self) -> int:
        return len(self.classes)


def sample_episode(ds: Dataset, n: int, k: int, q: int, rng: np.random.Generator) -> Episode:
    """Draw ``n`` classes, then ``k`` support and ``q`` query images per class,
    all without replacement. Labels are remapped to ``0..n-1``."""
    if n < 1 or k < 1 or q < 0:
        raise DataError(f"bad episode shape n={n}, k={k}, q={q}")
    if ds.classes < n:
        raise DataError(f"dataset has {ds.classes} classes, episode needs {n}")
    if ds.per_class < k + q:
        raise DataError(f"dataset has {ds.per_class} images per class, episode needs {k + q}")
    classes = rng.choice(ds.classes, size=n, replace=False)
    s_idx, q_idx = [], []
    for c in classes:
        picks = rng.choice(ds.per_class, size=k + q, replace=False)
        s_idx += [(c, p) for p in picks[:k]]
        q_idx += [(c, p) for p in picks[k:]]
    s_idx = np.array(s_idx, dtype=np.int64).reshape(-1, 2)
    q_idx = np.array(q_idx, dtype=np.int64).reshape(-1, 2)
    labels = np.arange(n)
    return Episode(
        support_x=ds.images[s_idx[:, 0], s_idx[:, 1]],
        support_y=np.repeat(labels, k),
        query_x=ds.images[q_idx[:, 0], q_idx[:, 1]],
        query_y=np.repeat(labels, q),
        classes=classes,
        support_idx=s_idx,
        query_idx=q_idx,
    )


class TaskPool:
    """Indexable pool of episodes. Episode ``i`` is drawn with a generator
    seeded by ``(seed, i)``, so its contents never depend on who asks."""

    def __init__(self, dataset: Dataset, n: int, k: int, q: int, size: int, seed: int = 0):
        self.dataset, self.n, self.k, self.q = dataset, n, k, q
        self.size, self.seed = size, seed
        self._cache: dict[int, Episode] = {}

    def __len__(self):
        return self.size

    def episode(self, i: int) -> Episode:
        if not 0 <= i < self.size:
            raise IndexError(f"task {i} outside pool of {self.size}")
        ep = self._cache.get(i)
        if ep is None:
            ep = sample_episode(self.dataset, self.n, self.k, self.q, np.random.default_rng([self.seed, i]))
            self._cache[i] = ep
        return ep

    def __getitem__(self, i):
        return self.episode(i)

    def __iter__(self):
        return (self.episode(i) for i in range(self.size))


def _prototype(h, w, channels, rng):
    field_ = rng.normal(size=(channels, h, w))
    smooth = ndimage.gaussian_filter(field_, sigma=(0, h / 8, w / 8), mode="wrap")
    lo = smooth.min(axis=(1, 2), keepdims=True)
    hi = smooth.max(axis=(1, 2), keepdims=True)
    return (smooth - lo) / (hi - lo)


def gen_synth(classes: int, per_class: int, h: int = 16, w: int = 16, noise_sigma: float = 0.1,
              rng: np.random.Generator | None = None, channels: int = 1) -> Dataset:
    """Each class is a smooth random field in [0, 1]; its images add i.i.d.
    Gaussian pixel noise and clip back to [0, 1]."""
    if min(classes, per_class, h, w, channels) < 1 or noise_sigma < 0:
        raise DataError("gen_synth needs positive sizes and a non-negative noise level")
    rng = np.random.default_rng() if rng is None else rng
    protos = np.stack([_prototype(h, w, channels, rng) for _ in range(classes)])
    noise = rng.normal(scale=noise_sigma, size=(classes, per_class, channels, h, w)) if noise_sigma else 0.0
    images = np.clip(protos[:, None] + noise, 0.0, 1.0)
    return Dataset(images, prototypes=protos)


def atds_bytes(ds: Dataset) -> bytes:
    header = _HEADER.pack(ATDS_MAGIC, ATDS_VERSION, ds.classes, ds.per_class, ds.height, ds.width, ds.channels)
    pixels = np.rint(np.clip(ds.images, 0.0, 1.0) * 255.0).astype(np.uint8)
    return header + pixels.tobytes()


def write_atds(ds: Dataset, path):
    Path(path).write_bytes(atds_bytes(ds))


def atds_from_bytes(data: bytes) -> Dataset:
    if len(data) < _HEADER.size:
        raise DataError(f"truncated ATDS header ({len(data)} bytes)")
    magic, version, classes, per_class, h, w, c = _HEADER.unpack_from(data)
    if magic != ATDS_MAGIC:
        raise DataError(f"bad ATDS magic {magic!r}")
    if version != ATDS_VERSION:
        raise DataError(f"unsupported ATDS version {version}")
    body = classes * per_class * c * h * w
    if len(data) - _HEADER.size != body:
        raise DataError(f"ATDS body is {len(data) - _HEADER.size} bytes, header declares {body}")
    pixels = np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size).reshape(classes, per_class, c, h, w)
    return Dataset(pixels.astype(np.float64) / 255.0)


def read_atds(path) -> Dataset:
    return atds_from_bytes(Path(path).read_bytes())
