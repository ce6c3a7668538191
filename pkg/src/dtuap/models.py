"""
Desk-scale victim classifiers: definition, training, prediction and the
``DTAC`` checkpoint format.

Three architectures are available:

* ``mlp-2``         flatten -> dense -> relu -> dense
* ``cnn-small``     4 conv layers (two 2x2 max-pools) followed by 2 dense layers
* ``cnn-resnetish`` conv stem, two residual blocks around a stride-2 conv,
                    global average pooling, dense head

Per-channel input normalization is part of the model, so callers (and the
attack) always work with raw pixels in [0, 1].
"""

import json
import logging
import math
import struct
from contextlib import contextmanager

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DataError, NumericError, ShapeError
from .optim import SGD

logger = logging.getLogger(__name__)

ARCHITECTURES = ("mlp-2", "cnn-small", "cnn-resnetish")

CHECKPOINT_MAGIC = b"DTAC"
CHECKPOINT_VERSION = 1

# predict() pads every chunk to this many rows so the BLAS kernels see the
# same problem size regardless of batch, which keeps results batch-invariant.
PREDICT_CHUNK = 128

# victim recipe for the blob fixture: long enough for confident logits
BLOB_VICTIM = {"arch": "mlp-2", "epochs": 20, "lr": 0.05, "weight_decay": 0.0, "lr_step": 10}


def _param_shapes(arch, input_shape, num_classes, hp):
    c, h, w = input_shape
    if arch == "mlp-2":
        hidden = hp["hidden"]
        return [
            ("fc1.weight", (c * h * w, hidden)), ("fc1.bias", (hidden,)),
            ("fc2.weight", (hidden, num_classes)), ("fc2.bias", (num_classes,)),
        ]
    if arch == "cnn-small":
        k, hidden = hp["width"], hp["hidden"]
        flat = 2 * k * (h // 4) * (w // 4)
        return [
            ("conv1.weight", (k, c, 3, 3)), ("conv1.bias", (k,)),
            ("conv2.weight", (k, k, 3, 3)), ("conv2.bias", (k,)),
            ("conv3.weight", (2 * k, k, 3, 3)), ("conv3.bias", (2 * k,)),
            ("conv4.weight", (2 * k, 2 * k, 3, 3)), ("conv4.bias", (2 * k,)),
            ("fc1.weight", (flat, hidden)), ("fc1.bias", (hidden,)),
            ("fc2.weight", (hidden, num_classes)), ("fc2.bias", (num_classes,)),
        ]
    if arch == "cnn-resnetish":
        k = hp["width"]
        return [
            ("stem.weight", (k, c, 3, 3)), ("stem.bias", (k,)),
            ("block1a.weight", (k, k, 3, 3)), ("block1a.bias", (k,)),
            ("block1b.weight", (k, k, 3, 3)), ("block1b.bias", (k,)),
            ("down.weight", (2 * k, k, 3, 3)), ("down.bias", (2 * k,)),
            ("block2a.weight", (2 * k, 2 * k, 3, 3)), ("block2a.bias", (2 * k,)),
            ("block2b.weight", (2 * k, 2 * k, 3, 3)), ("block2b.bias", (2 * k,)),
            ("fc.weight", (2 * k, num_classes)), ("fc.bias", (num_classes,)),
        ]
    raise ConfigError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")


_DEFAULT_HPARAMS = {
    "mlp-2": {"hidden": 128},
    "cnn-small": {"width": 8, "hidden": 64},
    "cnn-resnetish": {"width": 8},
}


class Classifier:
    """A differentiable image classifier mapping [batch, C_in, H, W] pixels to logits."""

    def __init__(self, arch, input_shape, num_classes, params, mean=None, std=None, hparams=None, metadata=None):
        if arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
        self.arch = arch
        self.input_shape = tuple(int(s) for s in input_shape)
        self.num_classes = int(num_classes)
        self.params = dict(params)
        channels = self.input_shape[0]
        self.mean = np.zeros(channels, np.float32) if mean is None else np.asarray(mean, np.float32).reshape(channels)
        self.std = np.ones(channels, np.float32) if std is None else np.asarray(std, np.float32).reshape(channels)
        self.hparams = dict(hparams or {})
        self.metadata = dict(metadata or {})

    def __repr__(self):
        return f"Classifier({self.arch}, input={self.input_shape}, classes={self.num_classes})"

    def parameters(self):
        return list(self.params.values())

    def requires_grad_(self, flag=True):
        for p in self.params.values():
            p.requires_grad = flag
            if not flag:
                p.grad = None
        return self

    @contextmanager
    def frozen(self):
        """Temporarily disable parameter gradients (used while crafting)."""
        prev = {name: p.requires_grad for name, p in self.params.items()}
        self.requires_grad_(False)
        try:
            yield self
        finally:
            for name, p in self.params.items():
                p.requires_grad = prev[name]

    def _normalize(self, x):
        shift = Tensor((-self.mean).reshape(-1, 1, 1))
        x = ag.add(x, shift)
        return ag.scale(x, (1.0 / self.std).reshape(-1, 1, 1))

    def forward(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ShapeError(self.arch, f"expected input [batch, {', '.join(map(str, self.input_shape))}], got {x.shape}")
        p = self.params
        h = self._normalize(x)
        if self.arch == "mlp-2":
            h = ag.relu(ag.dense(ag.flatten(h), p["fc1.weight"], p["fc1.bias"]))
            return ag.dense(h, p["fc2.weight"], p["fc2.bias"])
        if self.arch == "cnn-small":
            h = ag.relu(ag.conv2d(h, p["conv1.weight"], p["conv1.bias"], padding=1))
            h = ag.relu(ag.conv2d(h, p["conv2.weight"], p["conv2.bias"], padding=1))
            h = ag.maxpool2d(h, 2)
            h = ag.relu(ag.conv2d(h, p["conv3.weight"], p["conv3.bias"], padding=1))
            h = ag.relu(ag.conv2d(h, p["conv4.weight"], p["conv4.bias"], padding=1))
            h = ag.maxpool2d(h, 2)
            h = ag.relu(ag.dense(ag.flatten(h), p["fc1.weight"], p["fc1.bias"]))
            return ag.dense(h, p["fc2.weight"], p["fc2.bias"])
        # cnn-resnetish
        h = ag.relu(ag.conv2d(h, p["stem.weight"], p["stem.bias"], padding=1))
        r = ag.relu(ag.conv2d(h, p["block1a.weight"], p["block1a.bias"], padding=1))
        r = ag.conv2d(r, p["block1b.weight"], p["block1b.bias"], padding=1)
        h = ag.relu(ag.add(h, r))
        h = ag.relu(ag.conv2d(h, p["down.weight"], p["down.bias"], stride=2, padding=1))
        r = ag.relu(ag.conv2d(h, p["block2a.weight"], p["block2a.bias"], padding=1))
        r = ag.conv2d(r, p["block2b.weight"], p["block2b.bias"], padding=1)
        h = ag.relu(ag.add(h, r))
        if h.shape[2] != h.shape[3]:
            raise ShapeError(self.arch, f"global pooling needs square feature maps, got {h.shape[2:]}")
        h = ag.flatten(ag.avgpool2d(h, h.shape[2]))
        return ag.dense(h, p["fc.weight"], p["fc.bias"])

    __call__ = forward


def build(arch, input_shape, num_classes, seed=0, mean=None, std=None, **hparams):
    """Create a classifier with He-uniform weights and zero biases."""
    if arch not in _DEFAULT_HPARAMS:
        raise ConfigError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
    input_shape = tuple(int(s) for s in input_shape)
    if len(input_shape) != 3 or min(input_shape) < 1 or num_classes < 1:
        raise ConfigError(f"invalid input shape {input_shape} or class count {num_classes}")
    if arch == "cnn-small" and min(input_shape[1:]) < 4:
        raise ConfigError("cnn-small needs inputs of at least 4x4")
    hp = {**_DEFAULT_HPARAMS[arch], **hparams}
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _param_shapes(arch, input_shape, num_classes, hp):
        if name.endswith(".bias"):
            data = np.zeros(shape, np.float32)
        else:
            fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return Classifier(arch, input_shape, num_classes, params, mean=mean, std=std, hparams=hp,
                      metadata={"seed": seed})


def predict(model, images, chunk=PREDICT_CHUNK):
    """Return ``(logits, labels)``; labels are row-wise argmax (lowest index on ties)."""
    images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float32)
    if images.ndim != 4 or images.shape[1:] != model.input_shape:
        raise ShapeError("predict", f"expected [batch, {model.input_shape}], got {images.shape}")
    n = images.shape[0]
    logits = np.empty((n, model.num_classes), np.float32)
    with model.frozen():
        for start in range(0, n, chunk):
            block = images[start:start + chunk]
            k = block.shape[0]
            if k < chunk:
                block = np.concatenate([block, np.zeros((chunk - k,) + block.shape[1:], np.float32)])
            logits[start:start + k] = model(block).data[:k]
    return logits, logits.argmax(axis=1)


def accuracy(model, dataset):
    _, labels = predict(model, dataset.images)
    return float(np.mean(labels == dataset.labels)) if len(dataset) else float("nan")


def train(model, dataset, epochs, lr=0.01, momentum=0.9, weight_decay=5e-4, batch_size=128,
          lr_step=2, lr_gamma=0.1, seed=0, val=None, hflip=False):
    """Train in place with momentum SGD and a step-decayed learning rate.

    Returns ``(model, log)`` where ``log`` holds one dict per epoch with the
    mean training loss, the learning rate used and the validation accuracy
    (``None`` when no validation set is given).
    """
    if dataset.num_classes != model.num_classes:
        raise ConfigError(f"dataset has {dataset.num_classes} classes, model expects {model.num_classes}")
    if dataset.images.shape[1:] != model.input_shape:
        raise ShapeError("train", f"dataset images {dataset.images.shape[1:]} vs model input {model.input_shape}")
    rng = np.random.default_rng(seed)
    model.requires_grad_(True)
    opt = SGD(model.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay)
    log = []
    n = len(dataset)
    for epoch in range(epochs):
        opt.lr = lr * lr_gamma ** (epoch // lr_step) if lr_step else lr
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            x = dataset.images[idx]
            if hflip:
                flip = rng.random(len(idx)) < 0.5
                x = np.where(flip[:, None, None, None], x[..., ::-1], x)
            loss = ag.reduce_mean(ag.softmax_cross_entropy(model(x), dataset.labels[idx]))
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"training diverged at epoch {epoch}, batch {start // batch_size}: loss={value}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value * len(idx)
            seen += len(idx)
        entry = {"epoch": epoch + 1, "loss": total / max(seen, 1), "lr": opt.lr,
                 "val_acc": accuracy(model, val) if val is not None else None}
        logger.info("epoch %d loss %.4f val_acc %s", entry["epoch"], entry["loss"], entry["val_acc"])
        log.append(entry)
    model.requires_grad_(False)
    model.metadata.update({
        "dataset": getattr(dataset, "name", None),
        "epochs": model.metadata.get("epochs", 0) + epochs,
    })
    if log and log[-1]["val_acc"] is not None:
        model.metadata["clean_accuracy"] = log[-1]["val_acc"]
    return model, log


# ---------------------------------------------------------------------------
# checkpoint I/O


def _write_tensor(f, name, arr):
    raw = name.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise DataError(f"truncated checkpoint while reading {what}")
    return buf


def save_checkpoint(model, path, log=None):
    header = {
        "architecture": model.arch,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "hparams": model.hparams,
        "mean": model.mean.tolist(),
        "std": model.std.tolist(),
        "metadata": model.metadata,
        "training_log": log or [],
        "tensors": list(model.params),
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        for name, p in model.params.items():
            _write_tensor(f, name, p.data)


def load_checkpoint(path):
    """Read a ``DTAC`` file; returns ``(classifier, header)``."""
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a DTAC checkpoint")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", _read_exact(f, 4, "header length"))
        header = json.loads(_read_exact(f, hlen, "header").decode("utf-8"))
        params = {}
        for _ in header["tensors"]:
            (nlen,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            name = _read_exact(f, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "dims"))
            count = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(_read_exact(f, 4 * count, name), dtype="<f4").astype(np.float32).reshape(dims)
            params[name] = Tensor(data, name=name)
        if f.read(1):
            raise DataError(f"{path}: trailing bytes after last tensor")
    expected = [n for n, _ in _param_shapes(header["architecture"], header["input_shape"],
                                            header["num_classes"], header["hparams"])]
    if list(params) != expected:
        raise DataError(f"{path}: tensor names {list(params)} do not match architecture")
    model = Classifier(header["architecture"], header["input_shape"], header["num_classes"], params,
                       mean=header["mean"], std=header["std"], hparams=header["hparams"],
                       metadata=header["metadata"])
    return model, header


def train_blob_victim(train_set, val=None, seed=0):
    """Build and train the mlp-2 victim used with the blob fixture."""
    recipe = dict(BLOB_VICTIM)
    model = build(recipe.pop("arch"), train_set.image_shape, train_set.num_classes, seed=seed)
    return train(model, train_set, val=val, seed=seed, **recipe)
