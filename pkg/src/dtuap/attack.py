"""
Double targeted universal perturbations.

A single additive perturbation ``delta`` is optimized so that samples of the
chosen source class(es) are classified as the sink class, while samples of
every other class keep their clean prediction. Each iteration draws a
half-targeted / half-non-targeted batch, evaluates

    L = L_t1 + L_t2 + alpha * L_nt

on ``clamp(x + delta, 0, 1)``, takes an Adam step on ``delta`` with the
batch-averaged gradient and projects back onto the norm ball (or, in patch
mode, onto a circular support).
"""

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import BatchSampler
from .errors import ConfigError, DataError, NumericError, ShapeError
from .optim import Adam

logger = logging.getLogger(__name__)

PERTURBATION_MAGIC = b"DTAP"
PERTURBATION_VERSION = 1

NORMS = ("linf", "l2")
PROJECTIONS = ("clip", "rescale")

# canonical loss configuration -> (L_t1 term, L_t2 term, use L_nt)
LOSS_CONFIGS = {
    "dta": ("margin", "margin", True),
    "ce": ("ce", "ce", True),
    "t_only": ("margin", "margin", False),
    "t1": ("margin", None, True),
    "t2": (None, "margin", True),
}
LOSS_ALIASES = {
    "L_t+L_nt": "dta",
    "L_t^CE+L_nt": "ce",
    "L_t only": "t_only",
    "L_t": "t_only",
    "L_t1+L_nt": "t1",
    "L_t2+L_nt": "t2",
}


def canonical_loss(name):
    key = LOSS_ALIASES.get(name, name)
    if key not in LOSS_CONFIGS:
        raise ConfigError(f"unknown loss configuration {name!r}")
    return key


@dataclass
class AttackSpec:
    sources: tuple
    sink: int
    norm: str = "linf"
    eps: float = 15 / 255
    alpha: float = 1.0
    dominance: float = 5.0
    iterations: int = 500
    batch_size: int = 64
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss: str = "dta"
    projection: str = "clip"

    def __post_init__(self):
        self.sources = tuple(sorted({int(s) for s in np.atleast_1d(self.sources)}))
        self.sink = int(self.sink)
        if not self.sources:
            raise ConfigError("source set is empty")
        if self.sink in self.sources:
            raise ConfigError(f"sink class {self.sink} is also a source class")
        if self.norm not in NORMS:
            raise ConfigError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        if self.alpha < 0 or self.dominance < 0:
            raise ConfigError("alpha and dominance must be non-negative")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError(f"batch size must be even, got {self.batch_size}")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.projection not in PROJECTIONS:
            raise ConfigError(f"projection must be one of {PROJECTIONS}")
        self.loss = canonical_loss(self.loss)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["sources"] = list(self.sources)
        return d

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass
class Perturbation:
    delta: np.ndarray
    norm: str  # "linf", "l2" or "patch"
    eps: float
    spec: AttackSpec
    mask: np.ndarray = None
    mask_desc: dict = None
    log: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def apply(self, images):
        """Adversarial images ``clamp(x + delta, 0, 1)``."""
        return np.clip(images + self.delta, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# losses


def _check_logits(logits):
    if logits.ndim != 2:
        raise ShapeError("loss", f"expected [batch, C] logits, got {logits.shape}")
    if logits.shape[1] < 2:
        raise ShapeError("loss", "need at least 2 classes")


def loss_t1(logits, clean_pred):
    """Mean hinge pushing the clean class below the runner-up logit."""
    _check_logits(logits)
    gap = ag.sub(ag.pick(logits, clean_pred), ag.reduce_max_excluding(logits, clean_pred))
    return ag.reduce_mean(ag.clamp(gap, lo=0.0))


def loss_t2(logits, sink, dominance=5.0):
    """Mean hinge making the sink logit dominate every other one by ``dominance``."""
    _check_logits(logits)
    gap = ag.sub(ag.reduce_max_excluding(logits, sink), ag.pick(logits, sink))
    return ag.reduce_mean(ag.clamp(gap, lo=-float(dominance)))


def loss_nt(logits, clean_pred):
    """Cross-entropy towards the clean predictions."""
    _check_logits(logits)
    return ag.reduce_mean(ag.softmax_cross_entropy(logits, clean_pred))


def loss_t1_ce(logits, clean_pred):
    return ag.scale(ag.reduce_mean(ag.softmax_cross_entropy(logits, clean_pred)), -1.0)


def loss_t2_ce(logits, sink):
    return ag.reduce_mean(ag.softmax_cross_entropy(logits, sink))


def adversarial_input(x, delta):
    return ag.clamp(ag.add(ag.as_tensor(x), delta), 0.0, 1.0)


def loss_total(victim, batch, delta, spec):
    """Forward the batch through ``victim`` at ``x + delta`` and combine the loss terms.

    Returns ``(loss, components)``; ``components`` maps ``L``, ``L_t1``,
    ``L_t2`` and ``L_nt`` to floats, inactive terms reported as 0.
    """
    n_t = getattr(batch, "n_targeted", None)
    if n_t is None:
        raise ConfigError("batch carries no targeted/non-targeted partition")
    m = len(batch.clean_pred)
    logits = victim(adversarial_input(batch.images, delta))
    t1_kind, t2_kind, use_nt = LOSS_CONFIGS[spec.loss]
    terms = {}
    if n_t:
        lt = ag.take_rows(logits, 0, n_t)
        p = batch.clean_pred[:n_t]
        if t1_kind == "margin":
            terms["L_t1"] = loss_t1(lt, p)
        elif t1_kind == "ce":
            terms["L_t1"] = loss_t1_ce(lt, p)
        if t2_kind == "margin":
            terms["L_t2"] = loss_t2(lt, spec.sink, spec.dominance)
        elif t2_kind == "ce":
            terms["L_t2"] = loss_t2_ce(lt, spec.sink)
    if use_nt and n_t < m:
        terms["L_nt"] = loss_nt(ag.take_rows(logits, n_t, m), batch.clean_pred[n_t:])

    total = None
    for key in ("L_t1", "L_t2", "L_nt"):
        if key not in terms:
            continue
        term = ag.scale(terms[key], spec.alpha) if key == "L_nt" else terms[key]
        total = term if total is None else ag.add(total, term)
    if total is None:
        raise ConfigError("loss configuration selects no term for this batch")
    components = {"L": total.item()}
    for key in ("L_t1", "L_t2", "L_nt"):
        components[key] = terms[key].item() if key in terms else 0.0
    return total, components


# ---------------------------------------------------------------------------
# projection and masks


def project(delta, norm, eps, mode="clip"):
    """Map ``delta`` back into the ``norm`` ball of radius ``eps``.

    ``clip`` is the Euclidean projection (elementwise clip for linf, radial
    shrink for l2 when outside). ``rescale`` always sets the norm to ``eps``.
    """
    if not eps > 0:
        raise ConfigError("eps must be positive")
    if norm == "linf":
        if mode == "clip":
            return np.clip(delta, -eps, eps).astype(delta.dtype, copy=False)
        size = np.abs(delta).max()
    elif norm == "l2":
        size = np.linalg.norm(delta.astype(np.float64).ravel())
        if mode == "clip" and size <= eps:
            return delta
    else:
        raise ConfigError(f"unknown norm {norm!r}")
    if mode not in PROJECTIONS:
        raise ConfigError(f"unknown projection mode {mode!r}")
    if size == 0:
        return delta
    out = (delta * (eps / size)).astype(delta.dtype)
    if norm == "linf":
        # float32 rounding may overshoot by an ulp
        out = np.clip(out, -eps, eps)
    return out


def norm_of(delta, norm):
    if norm == "linf":
        return float(np.abs(delta).max()) if delta.size else 0.0
    return float(np.linalg.norm(delta.astype(np.float64).ravel()))


def circle_mask(shape, center, radius):
    """Binary mask [C, H, W] of pixels whose centre lies within ``radius`` of ``center`` (row, col)."""
    c, h, w = shape
    cy, cx = (float(v) for v in center)
    if radius <= 0:
        raise ConfigError("patch radius must be positive")
    if cy - radius < -0.5 or cx - radius < -0.5 or cy + radius > h - 0.5 or cx + radius > w - 0.5:
        raise ConfigError(f"circle at {center} radius {radius} does not fit in {h}x{w}")
    yy, xx = np.mgrid[0:h, 0:w]
    disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    if not disk.any():
        raise ConfigError("patch mask has zero area")
    return np.broadcast_to(disk, (c, h, w)).astype(np.uint8)


# ---------------------------------------------------------------------------
# crafting


def _check_split(victim, split, spec):
    if tuple(split.sources) != tuple(spec.sources):
        raise ConfigError(f"split built for sources {split.sources}, spec has {spec.sources}")
    if not 0 <= spec.sink < victim.num_classes:
        raise ConfigError(f"sink {spec.sink} outside [0, {victim.num_classes})")
    if split.dataset.image_shape != victim.input_shape:
        raise ShapeError("craft", f"dataset images {split.dataset.image_shape} vs model input {victim.input_shape}")


def _run(victim, split, spec, mask=None, callback=None):
    _check_split(victim, split, spec)
    shape = victim.input_shape
    delta = np.zeros(shape, np.float32)
    opt = Adam(shape, lr=spec.lr, beta1=spec.beta1, beta2=spec.beta2, eps=spec.adam_eps)
    sampler = BatchSampler(split, spec.batch_size, spec.seed)
    maskf = None if mask is None else mask.astype(np.float32)
    log = []
    with victim.frozen():
        for it in range(spec.iterations):
            batch = sampler(it)
            d = Tensor(delta, requires_grad=True)
            loss, comps = loss_total(victim, batch, d, spec)
            if not math.isfinite(comps["L"]):
                raise NumericError(f"non-finite loss {comps['L']} at iteration {it}")
            ag.backward(loss)
            delta = opt.step(delta, d.grad)
            if maskf is None:
                delta = project(delta, spec.norm, spec.eps, spec.projection)
            else:
                delta = np.clip(delta * maskf, -1.0, 1.0).astype(np.float32)
            comps["iteration"] = it
            log.append(comps)
            if callback is not None:
                callback(it, delta, comps)
    return delta, log, sampler.warnings


def craft(victim, split, spec, callback=None):
    """Craft an additive perturbation with ``spec.iterations`` Adam steps.

    ``callback(iteration, delta, components)`` is invoked after each
    projection, which is how tests observe the per-iteration budget.
    """
    delta, log, warnings = _run(victim, split, spec, callback=callback)
    return Perturbation(delta, spec.norm, spec.eps, spec, log=log,
                        meta={"seed": spec.seed, "sampling_warnings": warnings})


def craft_multi2one(victim, split, spec, callback=None):
    """Several source classes into one sink; targeted draws are pooled over all sources."""
    for c in spec.sources:
        pool = split.source_pools.get(c)
        if pool is None or len(pool) == 0:
            raise DataError(f"source class {c} has no correctly classified samples")
    return craft(victim, split, spec, callback=callback)


def craft_patch(victim, split, spec, center, radius, callback=None):
    """Perturbation confined to a disc; bounded only by the pixel range."""
    mask = circle_mask(victim.input_shape, center, radius)
    delta, log, warnings = _run(victim, split, spec, mask=mask, callback=callback)
    desc = {"kind": "circle", "center": [float(v) for v in center], "radius": float(radius)}
    return Perturbation(delta, "patch", 1.0, spec, mask=mask, mask_desc=desc, log=log,
                        meta={"seed": spec.seed, "sampling_warnings": warnings})


# ---------------------------------------------------------------------------
# DTAP files


def save_perturbation(pert, path, extra=None):
    header = {
        "spec": pert.spec.to_dict(),
        "norm": pert.norm,
        "eps": pert.eps,
        "shape": list(pert.delta.shape),
        "mask": pert.mask_desc,
        "seed": pert.spec.seed,
    }
    for key in ("dataset", "model", "kappa_t", "kappa_nt"):
        if key in pert.meta:
            header[key] = pert.meta[key]
    if extra:
        header.update(extra)
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(PERTURBATION_MAGIC)
        f.write(struct.pack("<I", PERTURBATION_VERSION))
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        f.write(np.ascontiguousarray(pert.delta, dtype="<f4").tobytes())
        if pert.mask is not None:
            f.write(np.ascontiguousarray(pert.mask, dtype=np.uint8).tobytes())


def read_perturbation_header(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != PERTURBATION_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}, not a DTAP file")
        raw = f.read(4)
        if len(raw) < 4:
            raise DataError(f"{path}: truncated header")
        (version,) = struct.unpack("<I", raw)
        if version != PERTURBATION_VERSION:
            raise DataError(f"{path}: unsupported DTAP version {version}")
        raw = f.read(4)
        if len(raw) < 4:
            raise DataError(f"{path}: truncated header")
        (hlen,) = struct.unpack("<I", raw)
        body = f.read(hlen)
        if len(body) < hlen:
            raise DataError(f"{path}: truncated header")
        return json.loads(body.decode("utf-8")), f.read()


def load_perturbation(path):
    header, payload = read_perturbation_header(path)
    shape = tuple(header["shape"])
    count = int(np.prod(shape))
    has_mask = header.get("mask") is not None
    expected = 4 * count + (count if has_mask else 0)
    if len(payload) != expected:
        raise DataError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    delta = np.frombuffer(payload[:4 * count], dtype="<f4").astype(np.float32).reshape(shape)
    mask = np.frombuffer(payload[4 * count:], dtype=np.uint8).reshape(shape).copy() if has_mask else None
    spec = AttackSpec(**header["spec"])
    meta = {k: header[k] for k in ("dataset", "model", "kappa_t", "kappa_nt") if k in header}
    return Perturbation(delta, header["norm"], header["eps"], spec, mask=mask, mask_desc=header.get("mask"),
                        meta=meta), header
