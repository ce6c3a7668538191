"""
Command-line entry point: ``dtuap {train,attack,sweep,dump}``.

Every option may also come from a JSON ``--config`` file whose keys are the
option names with dashes replaced by underscores. Flags given on the command
line win over the config file, which wins over the built-in defaults. Each
run writes its fully resolved configuration to ``<out>/config.json``; feeding
that file back through ``--config`` repeats the run.

Exit codes: 0 success, 2 usage/config error (including missing paths),
3 data error, 4 numeric failure.
"""

import argparse
import json
import logging
import math
import os
import sys

import numpy as np

from . import __version__
from .attack import AttackSpec, craft, craft_multi2one, craft_patch, load_perturbation, save_perturbation
from .data import blob_fixture, build_split, load_cifar_dir, load_idx_dir
from .errors import ConfigError, DataError, NumericError, ShapeError
from .evaluate import (canonical_axis, evaluate, format_table, random_scenarios, run_scenarios, sweep,
                       write_log_csv, write_report_csv, write_scenarios_csv, write_sweep_csv)
from .models import build, load_checkpoint, save_checkpoint, train

logger = logging.getLogger("dtuap")

FORMATS = ("idx", "cifar", "blobs")

ATTACK_DEFAULTS = {
    "norm": "linf", "eps": 15 / 255, "alpha": 1.0, "dominance": 5.0, "iters": 500, "batch": 64,
    "lr": 0.01, "seed": 0, "cap": None, "loss": "dta", "projection": "clip", "include_sink": False,
    "patch": False, "center": None, "radius": None, "count": 0,
}

# per-format training recipes
TRAIN_DEFAULTS = {
    "blobs": {"model": "mlp-2", "epochs": 20, "lr": 0.05, "weight_decay": 0.0, "lr_step": 10,
              "batch": 128, "normalize": False, "hflip": False},
    "idx": {"model": "cnn-small", "epochs": 2, "lr": 0.01, "weight_decay": 5e-4, "lr_step": 2,
            "batch": 128, "normalize": True, "hflip": False},
    "cifar": {"model": "cnn-resnetish", "epochs": 10, "lr": 0.01, "weight_decay": 5e-4, "lr_step": 5,
              "batch": 128, "normalize": True, "hflip": True},
}


class UsageError(ConfigError):
    pass


# ---------------------------------------------------------------------------
# parsing helpers


def _int_list(text):
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    if isinstance(text, int):
        return [text]
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}")


def _float_pair(text):
    if isinstance(text, (list, tuple)):
        vals = [float(v) for v in text]
    else:
        try:
            vals = [float(v) for v in str(text).split(",")]
        except ValueError:
            raise UsageError(f"expected 'row,col', got {text!r}")
    if len(vals) != 2:
        raise UsageError(f"expected 'row,col', got {text!r}")
    return vals


def _value_list(text):
    if isinstance(text, (list, tuple)):
        return list(text)
    return [v.strip() for v in str(text).split(",") if v.strip()]


def resolve(args, defaults):
    """Merge defaults <- config file <- explicit flags into one dict."""
    conf = dict(defaults)
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise FileNotFoundError(args.config)
        with open(args.config) as f:
            loaded = json.load(f)
        if not isinstance(loaded, dict):
            raise UsageError(f"{args.config}: config must be a JSON object")
        loaded.pop("command", None)
        conf.update(loaded)
    for key, value in vars(args).items():
        if key in ("config", "func", "command", "verbose") or value is None:
            continue
        conf[key] = value
    return conf


def _write_config(conf, command):
    os.makedirs(conf["out"], exist_ok=True)
    path = os.path.join(conf["out"], "config.json")
    with open(path, "w") as f:
        json.dump({"command": command, **conf}, f, indent=2, sort_keys=True)
    return path


def load_dataset(conf):
    fmt = conf.get("format")
    if fmt not in FORMATS:
        raise UsageError(f"--format must be one of {FORMATS}, got {fmt!r}")
    if fmt == "blobs":
        return blob_fixture()
    path = conf.get("dataset")
    if not path:
        raise UsageError("--dataset is required for --format " + fmt)
    if not os.path.isdir(path):
        raise FileNotFoundError(path)
    return load_idx_dir(path) if fmt == "idx" else load_cifar_dir(path)


def _spec(conf, sources, sink):
    return AttackSpec(sources=tuple(sources), sink=sink, norm=conf["norm"], eps=float(conf["eps"]),
                      alpha=float(conf["alpha"]), dominance=float(conf["dominance"]),
                      iterations=int(conf["iters"]), batch_size=int(conf["batch"]), lr=float(conf["lr"]),
                      seed=int(conf["seed"]), loss=conf["loss"], projection=conf["projection"])


def _load_victim(conf):
    path = conf.get("checkpoint")
    if not path:
        raise UsageError("--checkpoint is required")
    model, _ = load_checkpoint(path)
    return model


def _check_classes(sources, sink, num_classes):
    if sink is None:
        raise UsageError("--sink is required")
    if sink in sources:
        raise UsageError(f"sink class {sink} is also listed as a source")
    for c in list(sources) + [sink]:
        if not 0 <= c < num_classes:
            raise UsageError(f"class {c} outside [0, {num_classes})")


# ---------------------------------------------------------------------------
# commands


def cmd_train(args):
    fmt = args.format or "idx"
    if args.config and args.format is None:
        with open(args.config) as f:
            fmt = json.load(f).get("format", fmt)
    conf = resolve(args, {"format": fmt, "seed": 0, "out": "runs/train", "dataset": None,
                          "checkpoint": None, **TRAIN_DEFAULTS.get(fmt, TRAIN_DEFAULTS["idx"])})
    train_set, val = load_dataset(conf)
    if conf.get("checkpoint") is None:
        conf["checkpoint"] = os.path.join(conf["out"], "model.dtac")
    mean = std = None
    if conf["normalize"]:
        mean = train_set.images.mean(axis=(0, 2, 3)).tolist()
        std = train_set.images.std(axis=(0, 2, 3)).tolist()
    _write_config(conf, "train")
    model = build(conf["model"], train_set.image_shape, train_set.num_classes, seed=int(conf["seed"]),
                  mean=mean, std=std)
    model, log = train(model, train_set, epochs=int(conf["epochs"]), lr=float(conf["lr"]),
                       weight_decay=float(conf["weight_decay"]), batch_size=int(conf["batch"]),
                       lr_step=int(conf["lr_step"]), seed=int(conf["seed"]), val=val, hflip=bool(conf["hflip"]))
    os.makedirs(os.path.dirname(os.path.abspath(conf["checkpoint"])), exist_ok=True)
    save_checkpoint(model, conf["checkpoint"], log)
    log_path = os.path.join(conf["out"], "train_log.csv")
    with open(log_path, "w") as f:
        f.write("epoch,loss,lr,val_acc\n")
        for e in log:
            f.write(f"{e['epoch']},{e['loss']!r},{e['lr']!r},{e['val_acc']!r}\n")
    acc = log[-1]["val_acc"] if log else None
    print(f"checkpoint {conf['checkpoint']}  val_acc {acc}")
    return 0


def _attack_conf(args, command):
    return resolve(args, {"format": "idx", "dataset": None, "checkpoint": None, "out": f"runs/{command}",
                          "source": None, "sink": None, **ATTACK_DEFAULTS})


def cmd_attack(args):
    conf = _attack_conf(args, "attack")
    victim = _load_victim(conf)
    count = int(conf.get("count") or 0)
    if count:
        return _attack_scenarios(conf, victim, count)
    sources = _int_list(conf["source"]) if conf["source"] is not None else []
    if not sources:
        raise UsageError("--source is required")
    sink = None if conf["sink"] is None else int(conf["sink"])
    _check_classes(sources, sink, victim.num_classes)
    spec = _spec(conf, sources, sink)
    train_set, val = load_dataset(conf)
    _write_config(conf, "attack")
    split = build_split(train_set, victim, spec.sources, cap=conf["cap"])
    if conf["patch"]:
        _, h, w = victim.input_shape
        center = _float_pair(conf["center"]) if conf["center"] is not None else [(h - 1) / 2, (w - 1) / 2]
        radius = float(conf["radius"]) if conf["radius"] is not None else math.sqrt(0.25 * h * w / math.pi)
        pert = craft_patch(victim, split, spec, center, radius)
    elif len(spec.sources) > 1:
        pert = craft_multi2one(victim, split, spec)
    else:
        pert = craft(victim, split, spec)
    report = evaluate(victim, val, pert, spec.sources, spec.sink, include_sink=bool(conf["include_sink"]))
    pert.meta.update({"dataset": train_set.name, "model": victim.arch,
                      "kappa_t": report.kappa_t, "kappa_nt": report.kappa_nt})
    out = conf["out"]
    save_perturbation(pert, os.path.join(out, "perturbation.dtap"))
    write_log_csv(pert.log, os.path.join(out, "craft_log.csv"))
    write_report_csv(report, os.path.join(out, "eval.csv"), spec.seed)
    src = ",".join(str(s) for s in spec.sources)
    print(f"{src} -> {spec.sink}  kappa_t {report.kappa_t:.4f}  kappa_nt {report.kappa_nt:.4f}")
    if len(spec.sources) > 1:
        for c, k in report.kappa_t_per_class.items():
            print(f"  source {c}: kappa_t {k:.4f}")
    return 0


def _attack_scenarios(conf, victim, count):
    train_set, val = load_dataset(conf)
    _write_config(conf, "attack")
    base = _spec(conf, (0,), 1)
    scenarios = random_scenarios(victim.num_classes, count, seed=int(conf["seed"]))
    table = run_scenarios(victim, train_set, val, scenarios, base, cap=conf["cap"],
                          include_sink=bool(conf["include_sink"]))
    write_scenarios_csv(table, os.path.join(conf["out"], "scenarios.csv"))
    print(table.format())
    return 0


def cmd_sweep(args):
    conf = _attack_conf(args, "sweep")
    if not conf.get("axis") or conf.get("values") is None:
        raise UsageError("--axis and --values are required")
    values = _value_list(conf["values"])
    sources = _int_list(conf["source"]) if conf["source"] is not None else []
    if not sources:
        raise UsageError("--source is required")
    victim = _load_victim(conf)
    sink = None if conf["sink"] is None else int(conf["sink"])
    _check_classes(sources, sink, victim.num_classes)
    spec = _spec(conf, sources, sink)
    axis = canonical_axis(conf["axis"])
    train_set, val = load_dataset(conf)
    _write_config(conf, "sweep")
    result = sweep(axis, values, spec, victim, train_set, val, cap=conf["cap"],
                   include_sink=bool(conf["include_sink"]))
    write_sweep_csv(result, os.path.join(conf["out"], f"sweep_{axis}.csv"))
    print(format_table([axis, "kappa_t", "kappa_nt"],
                       [[v, f"{100 * a:.1f}", f"{100 * b:.1f}"]
                        for v, a, b in zip(result.values, result.kappa_t, result.kappa_nt)]))
    return 0


def write_pnm(path, image):
    """Write a [C, H, W] uint8 image as binary PGM (C=1) or PPM (C=3)."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ValueError("raster must be uint8")
    c, h, w = image.shape
    if c == 1:
        head, body = b"P5", image[0]
    elif c == 3:
        head, body = b"P6", np.transpose(image, (1, 2, 0))
    else:
        raise ConfigError(f"cannot write {c}-channel raster")
    with open(path, "wb") as f:
        f.write(head + f"\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(body).tobytes())


def read_pnm(path):
    with open(path, "rb") as f:
        raw = f.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    pos += 1
    magic, w, h = fields[0], int(fields[1]), int(fields[2])
    c = 1 if magic == b"P5" else 3
    data = np.frombuffer(raw[pos:pos + w * h * c], np.uint8)
    return data.reshape(h, w)[None] if c == 1 else np.transpose(data.reshape(h, w, 3), (2, 0, 1))


def amplify(delta):
    """Min-max normalize delta to the full 8-bit range."""
    lo, hi = float(delta.min()), float(delta.max())
    if hi == lo:
        return np.zeros(delta.shape, np.uint8)
    return np.rint((delta - lo) / (hi - lo) * 255).astype(np.uint8)


def cmd_dump(args):
    conf = resolve(args, {"format": None, "dataset": None, "out": None, "count": 4})
    pert, header = load_perturbation(conf["perturbation"])
    print(json.dumps(header, indent=2, sort_keys=True))
    if conf.get("out"):
        out = conf["out"]
        os.makedirs(out, exist_ok=True)
        write_pnm(os.path.join(out, "delta.pnm"), amplify(pert.delta))
        if conf.get("format"):
            _, val = load_dataset(conf)
            n = min(int(conf["count"]), len(val))
            adv = pert.apply(val.images[:n])
            for i in range(n):
                write_pnm(os.path.join(out, f"adv_{i:03d}.pnm"), np.rint(adv[i] * 255).astype(np.uint8))
    return 0


# ---------------------------------------------------------------------------
# argparse


def _add_data(p):
    p.add_argument("--dataset", help="dataset directory (idx/cifar)")
    p.add_argument("--format", choices=FORMATS)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="JSON config file")


def _add_attack(p):
    _add_data(p)
    p.add_argument("--checkpoint")
    p.add_argument("--source", help="comma list of source classes")
    p.add_argument("--sink", type=int)
    p.add_argument("--norm", choices=("linf", "l2"))
    p.add_argument("--eps", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--dominance", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--cap", type=int, help="samples per class")
    p.add_argument("--loss", help="loss configuration (dta, ce, t_only, t1, t2)")
    p.add_argument("--projection", choices=("clip", "rescale"))
    p.add_argument("--include-sink", action="store_true", default=None,
                   help="count sink-labelled samples in kappa_nt")


def build_parser():
    parser = argparse.ArgumentParser(prog="dtuap", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a victim classifier")
    _add_data(p)
    p.add_argument("--model", help="architecture (mlp-2, cnn-small, cnn-resnetish)")
    p.add_argument("--checkpoint", help="where to write the checkpoint")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="SGD learning rate")
    p.add_argument("--batch", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="craft and evaluate a perturbation")
    _add_attack(p)
    p.add_argument("--patch", action="store_true", default=None)
    p.add_argument("--center", help="patch centre 'row,col'")
    p.add_argument("--radius", type=float)
    p.add_argument("--count", type=int, help="run this many random scenarios instead of one")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("sweep", help="ablation sweep over one axis")
    _add_attack(p)
    p.add_argument("--axis")
    p.add_argument("--values", help="comma list of axis values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("dump", help="print a perturbation header and write rasters")
    p.add_argument("perturbation")
    p.add_argument("--dataset")
    p.add_argument("--format", choices=FORMATS)
    p.add_argument("--count", type=int, help="adversarial examples to write")
    p.add_argument("--out")
    p.set_defaults(func=cmd_dump)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: no such file or directory: {e.filename or e}", file=sys.stderr)
        return 2
    except (ConfigError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
