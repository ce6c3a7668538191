"""
Ten random scenarios on MNIST
=============================

Usage: python 04_mnist_scenarios.py DIR [EPS]

DIR holds the four standard MNIST IDX files (optionally gzipped). Trains
cnn-small for two epochs (a few minutes on one core), then crafts one
perturbation per random source -> sink pair. With the default budget of
15/255 the network barely moves; try EPS=0.3 to see the attack separate
targeted from non-targeted classes.
"""

import logging
import sys

from dtuap.attack import AttackSpec
from dtuap.data import load_idx_dir
from dtuap.evaluate import random_scenarios, run_scenarios
from dtuap.models import build, train

logging.basicConfig(level=logging.INFO, format="%(message)s")

directory = sys.argv[1] if len(sys.argv) > 1 else "data/mnist"
eps = float(sys.argv[2]) if len(sys.argv) > 2 else 15 / 255

train_set, val = load_idx_dir(directory)
victim = build("cnn-small", train_set.image_shape, 10, seed=0, mean=[0.1307], std=[0.3081])
victim, log = train(victim, train_set, epochs=2, lr=0.01, val=val)
print(f"clean validation accuracy {log[-1]['val_acc']:.4f}")

# sources/sink in the base spec are placeholders; each scenario replaces them
base = AttackSpec(sources=(0,), sink=1, eps=eps, iterations=500)
table = run_scenarios(victim, train_set, val, random_scenarios(10, 10, seed=0), base)
print(table.format())
