"""
Several sources into one sink, and a circular patch
===================================================

Multi2One pools the targeted half of each batch over all source classes.
Patch mode confines the perturbation to a disc and drops the norm budget;
pixels inside the disc may change by anything that keeps them in [0, 1].
"""

import logging
import math

import numpy as np

from dtuap.attack import AttackSpec, craft_multi2one, craft_patch
from dtuap.data import blob_fixture, build_split
from dtuap.evaluate import evaluate
from dtuap.models import train_blob_victim

logging.basicConfig(level=logging.WARNING)

train, val = blob_fixture()
victim, _ = train_blob_victim(train, val)

# Three sources, one sink.
spec = AttackSpec(sources=(1, 4, 7), sink=2, eps=0.3, iterations=200)
pert = craft_multi2one(victim, build_split(train, victim, spec.sources), spec)
rep = evaluate(victim, val, pert, spec.sources, spec.sink)
print(f"Multi2One 1,4,7 -> 2: pooled kappa_t {rep.kappa_t:.3f}, kappa_nt {rep.kappa_nt:.3f}")
for c, k in rep.kappa_t_per_class.items():
    print(f"  source {c}: {k:.3f}")

# A centred disc covering about a quarter of the image.
h, w = train.image_shape[1:]
radius = math.sqrt(0.25 * h * w / math.pi)
spec = AttackSpec(sources=(3,), sink=8, iterations=200)
patch = craft_patch(victim, build_split(train, victim, spec.sources), spec, ((h - 1) / 2, (w - 1) / 2), radius)
rep = evaluate(victim, val, patch, spec.sources, spec.sink)
print(f"patch r={radius:.2f} ({patch.mask.mean():.1%} of pixels): "
      f"kappa_t {rep.kappa_t:.3f}, kappa_nt {rep.kappa_nt:.3f}")
print("nonzero outside the disc:", int(np.count_nonzero(patch.delta[patch.mask == 0])))
