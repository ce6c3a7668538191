"""
Targeted fooling ratios, scenario tables and ablation sweeps.

``kappa_t`` is the fraction of validation samples from the source class(es)
that the victim assigns to the sink under the perturbation; ``kappa_nt`` is
the same fraction over the remaining classes, by default without the sink
class itself.
"""

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attack import AttackSpec, canonical_loss, craft, craft_multi2one
from .data import build_split
from .errors import ConfigError, ShapeError
from .models import predict

logger = logging.getLogger(__name__)

SWEEP_AXES = ("alpha", "dominance", "eps", "samples_per_class", "loss")
_AXIS_ALIASES = {"α": "alpha", "D": "dominance", "d": "dominance", "ε": "eps", "epsilon": "eps",
                 "samples-per-class": "samples_per_class", "cap": "samples_per_class",
                 "loss-config": "loss", "loss_config": "loss"}


@dataclass
class EvalReport:
    kappa_t: float
    kappa_nt: float
    confusion: np.ndarray  # [C, C] counts, rows = true label, cols = adversarial prediction
    clean_accuracy: float
    sources: tuple
    sink: int
    n_targeted: int
    n_nontargeted: int
    kappa_t_per_class: dict = field(default_factory=dict)
    include_sink: bool = False
    meta: dict = field(default_factory=dict)


def evaluate(victim, dataset, perturbation, sources, sink, include_sink=False, clean_pred=None):
    """Fooling ratios over every validation sample (no correctness filtering).

    ``perturbation`` is a ``Perturbation`` or a raw delta array; ``None``
    evaluates the clean inputs.
    """
    sources = tuple(sorted({int(s) for s in np.atleast_1d(sources)}))
    sink = int(sink)
    if sink in sources:
        raise ConfigError(f"sink class {sink} is also a source class")
    delta = getattr(perturbation, "delta", perturbation)
    images = dataset.images
    if delta is not None:
        delta = np.asarray(delta, np.float32)
        if delta.shape != dataset.image_shape:
            raise ShapeError("evaluate", f"perturbation {delta.shape} vs images {dataset.image_shape}")
        images = np.clip(images + delta, 0.0, 1.0).astype(np.float32)
    _, adv = predict(victim, images)
    if clean_pred is None:
        _, clean_pred = predict(victim, dataset.images)
    labels = dataset.labels
    c = dataset.num_classes
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (labels, adv), 1)

    is_src = np.isin(labels, sources)
    non = ~is_src if include_sink else ~is_src & (labels != sink)
    fooled = adv == sink
    per_class = {s: float(fooled[labels == s].mean()) if np.any(labels == s) else float("nan") for s in sources}
    return EvalReport(
        kappa_t=float(fooled[is_src].mean()) if is_src.any() else float("nan"),
        kappa_nt=float(fooled[non].mean()) if non.any() else float("nan"),
        confusion=confusion,
        clean_accuracy=float(np.mean(clean_pred == labels)),
        sources=sources, sink=sink,
        n_targeted=int(is_src.sum()), n_nontargeted=int(non.sum()),
        kappa_t_per_class=per_class, include_sink=include_sink,
    )


# ---------------------------------------------------------------------------
# scenarios


@dataclass
class ScenarioRow:
    scenario_id: str
    sources: tuple
    sink: int
    kappa_t: float
    kappa_nt: float
    clean_acc: float
    seed: int
    report: EvalReport = None
    perturbation: object = None


@dataclass
class ScenarioTable:
    rows: list
    avg_kappa_t: float
    avg_kappa_nt: float

    def format(self):
        return format_table(
            ["scenario", "source", "sink", "kappa_t", "kappa_nt"],
            [[r.scenario_id, _fmt_sources(r.sources), r.sink, f"{100 * r.kappa_t:.1f}", f"{100 * r.kappa_nt:.1f}"]
             for r in self.rows]
            + [["Avg", "", "", f"{100 * self.avg_kappa_t:.1f}", f"{100 * self.avg_kappa_nt:.1f}"]],
        )


def _fmt_sources(sources):
    return ";".join(str(s) for s in sources)


def _workers():
    try:
        return max(1, int(os.environ.get("DTUAP_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn, items):
    workers = min(_workers(), len(items)) or 1
    if workers == 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def run_scenarios(victim, train, val, scenarios, spec, cap=None, include_sink=False):
    """Craft and evaluate one perturbation per ``(sources, sink)`` scenario.

    ``spec`` supplies every setting except sources and sink. Scenarios run
    on up to ``$DTUAP_THREADS`` worker threads; each is deterministic.
    """
    _, train_pred = predict(victim, train.images)
    _, val_pred = predict(victim, val.images)

    def one(item):
        k, (sources, sink) = item
        s = spec.replace(sources=sources, sink=sink)
        split = build_split(train, victim, s.sources, cap=cap, clean_pred=train_pred)
        pert = (craft_multi2one if len(s.sources) > 1 else craft)(victim, split, s)
        rep = evaluate(victim, val, pert, s.sources, s.sink, include_sink=include_sink, clean_pred=val_pred)
        logger.info("S%d %s->%d kappa_t=%.3f kappa_nt=%.3f", k, s.sources, s.sink, rep.kappa_t, rep.kappa_nt)
        return ScenarioRow(f"S{k}", s.sources, s.sink, rep.kappa_t, rep.kappa_nt, rep.clean_accuracy, s.seed,
                           rep, pert)

    rows = _map(one, list(enumerate(scenarios)))
    return ScenarioTable(rows, float(np.mean([r.kappa_t for r in rows])),
                         float(np.mean([r.kappa_nt for r in rows])))


def random_scenarios(num_classes, count, seed=0):
    """``count`` distinct (source, sink) pairs with source != sink."""
    rng = np.random.default_rng(seed)
    pairs = [(s, t) for s in range(num_classes) for t in range(num_classes) if s != t]
    chosen = rng.choice(len(pairs), size=count, replace=False)
    return [((pairs[i][0],), pairs[i][1]) for i in chosen]


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepResult:
    axis: str
    values: list
    kappa_t: list
    kappa_nt: list
    spec: dict
    seed: int

    def rows(self):
        return [{"axis": self.axis, "value": v, "kappa_t": kt, "kappa_nt": knt, "seed": self.seed}
                for v, kt, knt in zip(self.values, self.kappa_t, self.kappa_nt)]


def canonical_axis(axis):
    axis = _AXIS_ALIASES.get(axis, axis)
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    return axis


def sweep(axis, values, spec, victim, train, val, cap=None, include_sink=False):
    """Re-craft and re-evaluate for each value of one axis, all else fixed."""
    axis = canonical_axis(axis)
    if axis == "loss":
        values = [canonical_loss(v) for v in values]
    elif axis == "samples_per_class":
        values = [None if v in (None, "full", "inf", float("inf")) else int(v) for v in values]
    else:
        values = [float(v) for v in values]
    _, train_pred = predict(victim, train.images)
    _, val_pred = predict(victim, val.images)

    def one(value):
        s, c = spec, cap
        if axis == "samples_per_class":
            c = value
        else:
            s = spec.replace(**{axis: value})
        split = build_split(train, victim, s.sources, cap=c, clean_pred=train_pred)
        pert = craft(victim, split, s)
        rep = evaluate(victim, val, pert, s.sources, s.sink, include_sink=include_sink, clean_pred=val_pred)
        logger.info("%s=%s kappa_t=%.3f kappa_nt=%.3f", axis, value, rep.kappa_t, rep.kappa_nt)
        return rep.kappa_t, rep.kappa_nt

    results = _map(one, values)
    return SweepResult(axis, list(values), [r[0] for r in results], [r[1] for r in results],
                       spec.to_dict(), spec.seed)


# ---------------------------------------------------------------------------
# output


SCENARIO_COLUMNS = ["scenario_id", "source", "sink", "kappa_t", "kappa_nt", "clean_acc", "seed"]


def write_scenarios_csv(table, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SCENARIO_COLUMNS)
        for r in table.rows:
            w.writerow([r.scenario_id, _fmt_sources(r.sources), r.sink, repr(r.kappa_t), repr(r.kappa_nt),
                        repr(r.clean_acc), r.seed])
        w.writerow(["avg", "", "", repr(table.avg_kappa_t), repr(table.avg_kappa_nt), "", ""])


def write_report_csv(report, path, seed, scenario_id="S0"):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SCENARIO_COLUMNS)
        w.writerow([scenario_id, _fmt_sources(report.sources), report.sink, repr(report.kappa_t),
                    repr(report.kappa_nt), repr(report.clean_accuracy), seed])


def write_sweep_csv(result, path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["axis", "value", "kappa_t", "kappa_nt", "seed"])
        w.writeheader()
        for row in result.rows():
            w.writerow(row)


def write_log_csv(log, path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["iteration", "L", "L_t1", "L_t2", "L_nt"])
        w.writeheader()
        for row in log:
            w.writerow({k: row[k] for k in w.fieldnames})


def format_table(header, rows):
    cells = [[str(c) for c in header]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(wd) for c, wd in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * wd for wd in widths))
    return "\n".join(lines)
