"""
Labeled image datasets and the class-partitioned sampling used for crafting.

Readers cover the IDX format (MNIST family, optionally gzipped) and the
CIFAR-10 binary format. ``synth_blobs`` builds small Gaussian-template
datasets for fast, fully controlled experiments.
"""

import gzip
import logging
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass
class LabeledDataset:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    num_classes: int
    split: str = "train"
    name: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be [N, C, H, W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataError("pixels outside [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    @property
    def class_index(self):
        """Positions of each class, in dataset order."""
        return {c: np.flatnonzero(self.labels == c) for c in range(self.num_classes)}

    def subset(self, positions, split=None):
        positions = np.asarray(positions, dtype=np.int64)
        return LabeledDataset(self.images[positions], self.labels[positions], self.num_classes,
                              split or self.split, self.name)


# ---------------------------------------------------------------------------
# IDX


def _open(path):
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def _read_idx(path, magic, ndim):
    with _open(path) as f:
        head = f.read(4)
        if len(head) < 4:
            raise DataError(f"{path}: truncated IDX header")
        (found,) = struct.unpack(">I", head)
        if found != magic:
            raise DataError(f"{path}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")
        raw_dims = f.read(4 * ndim)
        if len(raw_dims) < 4 * ndim:
            raise DataError(f"{path}: truncated IDX dimension block")
        dims = struct.unpack(f">{ndim}I", raw_dims)
        count = int(np.prod(dims))
        payload = f.read(count + 1)
    if len(payload) < count:
        raise DataError(f"{path}: truncated IDX payload ({len(payload)} of {count} bytes)")
    if len(payload) > count:
        raise DataError(f"{path}: trailing bytes after IDX payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, num_classes=None, split="train", name="idx"):
    """Load an IDX image/label file pair; pixels are scaled by 1/255.

    ``num_classes`` defaults to ``max(label) + 1``; when given, any label at
    or above it is rejected.
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise DataError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 1
    elif len(labels) and labels.max() >= num_classes:
        raise DataError(f"label {int(labels.max())} >= class count {num_classes}")
    pixels = images.astype(np.float32)[:, None] / np.float32(255)
    return LabeledDataset(pixels, labels.astype(np.int64), num_classes, split, name)


def save_idx(dataset, images_path, labels_path):
    """Write a single-channel dataset as an IDX pair (pixels rounded to bytes)."""
    if dataset.images.shape[1] != 1:
        raise ConfigError("IDX images are single-channel")
    if dataset.num_classes > 256:
        raise ConfigError("IDX labels are single bytes")
    pixels = np.rint(dataset.images[:, 0] * 255).astype(np.uint8)
    opener = lambda p: gzip.open(p, "wb") if os.fspath(p).endswith(".gz") else open(p, "wb")  # noqa: E731
    with opener(images_path) as f:
        f.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        f.write(struct.pack(">3I", *pixels.shape))
        f.write(pixels.tobytes())
    with opener(labels_path) as f:
        f.write(struct.pack(">I", IDX_LABELS_MAGIC))
        f.write(struct.pack(">I", len(dataset)))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def _find(directory, *names):
    for n in names:
        for candidate in (n, n + ".gz"):
            p = os.path.join(directory, candidate)
            if os.path.exists(p):
                return p
    raise FileNotFoundError(os.path.join(directory, names[0]))


def load_idx_dir(directory, num_classes=10):
    """Load the standard MNIST file names from ``directory``; returns ``(train, validation)``."""
    train = load_idx(_find(directory, "train-images-idx3-ubyte", "train-images.idx3-ubyte"),
                     _find(directory, "train-labels-idx1-ubyte", "train-labels.idx1-ubyte"),
                     num_classes, "train", os.path.basename(os.path.normpath(directory)))
    val = load_idx(_find(directory, "t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
                   _find(directory, "t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"),
                   num_classes, "validation", train.name)
    return train, val


# ---------------------------------------------------------------------------
# CIFAR-10 binary


def load_cifar_binary(paths, split="train", name="cifar10"):
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    chunks = []
    for path in paths:
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) % CIFAR_RECORD:
            raise DataError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    records = np.concatenate(chunks) if chunks else np.zeros((0, CIFAR_RECORD), np.uint8)
    labels = records[:, 0].astype(np.int64)
    if len(labels) and labels.max() >= 10:
        raise DataError(f"CIFAR-10 label {int(labels.max())} out of range")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255)
    return LabeledDataset(images, labels, 10, split, name)


def load_cifar_dir(directory):
    train_files = sorted(os.path.join(directory, f) for f in os.listdir(directory)
                         if f.startswith("data_batch") and f.endswith(".bin"))
    if not train_files:
        raise FileNotFoundError(os.path.join(directory, "data_batch_1.bin"))
    return (load_cifar_binary(train_files, "train"),
            load_cifar_binary(_find(directory, "test_batch.bin"), "validation"))


# ---------------------------------------------------------------------------
# synthetic blobs


def synth_templates(num_classes, image_shape, seed, margin, low=0.2, high=0.8, max_tries=1000):
    """Draw per-class template images pairwise at least ``margin`` apart in L2."""
    d = int(np.prod(image_shape))
    if margin <= 0:
        raise ConfigError("margin must be positive")
    if margin > (high - low) * math.sqrt(d):
        raise ConfigError(f"margin {margin} infeasible for {d} pixels in [{low}, {high}]")
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        t = rng.uniform(low, high, size=(num_classes, d))
        gaps = np.linalg.norm(t[:, None] - t[None], axis=-1)
        if num_classes < 2 or gaps[np.triu_indices(num_classes, 1)].min() >= margin:
            return t.reshape((num_classes,) + tuple(image_shape)).astype(np.float32)
    raise ConfigError(f"could not place {num_classes} templates {margin} apart in {max_tries} tries")


def synth_blobs(num_classes, per_class, image_shape=(1, 8, 8), seed=0, margin=1.0, sigma=0.1,
                template_seed=None, split="train", name="blobs"):
    """Gaussian clouds around distinct template images, clipped to [0, 1].

    ``template_seed`` fixes the templates independently of the noise, so that
    train and validation splits can share templates with different samples.
    """
    templates = synth_templates(num_classes, image_shape, seed if template_seed is None else template_seed, margin)
    rng = np.random.default_rng([seed, 1])
    labels = np.repeat(np.arange(num_classes), per_class)
    noise = rng.normal(0.0, sigma, size=(len(labels),) + tuple(image_shape))
    images = np.clip(templates[labels] + noise, 0.0, 1.0).astype(np.float32)
    ds = LabeledDataset(images, labels, num_classes, split, name)
    ds.templates = templates
    return ds


BLOB_FIXTURE = {
    "num_classes": 10,
    "image_shape": (1, 16, 16),
    "margin": 2.0,
    "sigma": 0.2,
    "template_seed": 7,
}


def blob_fixture(train_per_class=1000, val_per_class=200, **overrides):
    """Fixed-seed train/validation blob pair used by tests and demos."""
    kw = {**BLOB_FIXTURE, **overrides}
    train = synth_blobs(per_class=train_per_class, seed=11, split="train", name="blobs", **kw)
    val = synth_blobs(per_class=val_per_class, seed=12, split="validation", name="blobs", **kw)
    return train, val


# ---------------------------------------------------------------------------
# crafting pools


@dataclass
class ClassSplit:
    """Crafting pools: correctly classified targeted / non-targeted positions."""

    dataset: LabeledDataset
    sources: tuple
    targeted: np.ndarray
    nontargeted: np.ndarray
    clean_pred: np.ndarray  # victim's clean prediction for every dataset position
    cap: int = None
    source_pools: dict = field(default_factory=dict)


def build_split(dataset, victim, sources, cap=None, clean_pred=None):
    """Partition correctly classified samples into targeted / non-targeted pools.

    ``cap`` limits each class to its first ``cap`` correct samples in both
    pools. ``clean_pred`` may be passed to reuse cached victim predictions.
    """
    sources = tuple(sorted({int(s) for s in np.atleast_1d(sources)}))
    if not sources:
        raise ConfigError("source set is empty")
    if min(sources) < 0 or max(sources) >= dataset.num_classes:
        raise ConfigError(f"source classes {sources} outside [0, {dataset.num_classes})")
    if cap is not None and cap < 1:
        raise ConfigError("cap must be positive")
    if clean_pred is None:
        from .models import predict

        _, clean_pred = predict(victim, dataset.images)
    clean_pred = np.asarray(clean_pred, dtype=np.int64)
    correct = clean_pred == dataset.labels
    targeted, nontargeted, source_pools = [], [], {}
    for c in range(dataset.num_classes):
        pos = np.flatnonzero(correct & (dataset.labels == c))
        if cap is not None:
            pos = pos[:cap]
        if c in sources:
            if len(pos) == 0:
                raise DataError(f"no correctly classified samples left for source class {c}")
            source_pools[c] = pos
            targeted.append(pos)
        else:
            nontargeted.append(pos)
    targeted = np.sort(np.concatenate(targeted))
    nontargeted = np.sort(np.concatenate(nontargeted)) if nontargeted else np.zeros(0, np.int64)
    if len(nontargeted) == 0:
        raise DataError("non-targeted pool is empty")
    return ClassSplit(dataset, sources, targeted, nontargeted, clean_pred, cap, source_pools)


@dataclass
class Batch:
    images: np.ndarray
    clean_pred: np.ndarray
    positions: np.ndarray
    n_targeted: int  # the first n_targeted rows come from the targeted pool

    @property
    def labels(self):
        return self.clean_pred


def _draw(pool, k, rng, which, warn):
    replace = len(pool) < k
    if replace:
        warn(f"{which} pool has {len(pool)} samples < {k}; sampling with replacement")
    return rng.choice(pool, size=k, replace=replace)


def sample_batch(split, m, rng, warn=None):
    """Draw ``m/2`` targeted then ``m/2`` non-targeted samples."""
    if m < 2 or m % 2:
        raise ConfigError(f"mini-batch size must be even and >= 2, got {m}")
    warn = warn or logger.warning
    half = m // 2
    pos = np.concatenate([_draw(split.targeted, half, rng, "targeted", warn),
                          _draw(split.nontargeted, half, rng, "non-targeted", warn)])
    ds = split.dataset
    return Batch(ds.images[pos], split.clean_pred[pos], pos, half)


def iteration_rng(seed, iteration):
    """Generator determined by ``(seed, iteration)`` alone."""
    return np.random.default_rng([int(seed), int(iteration)])


class BatchSampler:
    """Reproducible per-iteration batches; pool-size warnings are logged once."""

    def __init__(self, split, m, seed):
        self.split = split
        self.m = m
        self.seed = seed
        self.warnings = []

    def _warn(self, msg):
        if msg not in self.warnings:
            self.warnings.append(msg)
            logger.warning(msg)

    def __call__(self, iteration):
        return sample_batch(self.split, self.m, iteration_rng(self.seed, iteration), warn=self._warn)
