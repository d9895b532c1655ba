"""Confusion matrices and precision / recall / F1 reports in the layout of
a classification table (per-class rows, then accuracy, macro and weighted
averages)."""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InputError

log = logging.getLogger(__name__)


def confusion(truths, predictions, num_classes):
    """Counts with rows = true class, columns = predicted class."""
    t = np.asarray(truths, dtype=np.int64).ravel()
    p = np.asarray(predictions, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise InputError(f"got {t.size} truths but {p.size} predictions")
    for name, v in (("truth", t), ("prediction", p)):
        if v.size and (v.min() < 0 or v.max() >= num_classes):
            raise InputError(f"{name} label outside [0, {num_classes})")
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (t, p), 1)
    return m


@dataclass
class ClassMetrics:
    label: int
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class EvaluationReport:
    classes: list
    accuracy: float
    macro: dict
    weighted: dict
    total: int
    loss: float | None = None
    names: list | None = None
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["classes"] = [ClassMetrics(**c) for c in d["classes"]]
        return cls(**d)


def _ratio(num, den):
    return num / den if den else 0.0


def weighted_mean(values, supports):
    """Support-weighted mean of per-class values."""
    v = np.asarray(values, dtype=np.float64)
    w = np.asarray(supports, dtype=np.float64)
    if v.shape != w.shape or w.sum() <= 0:
        raise InputError("need one positive-total support per value")
    return float(v @ w / w.sum())


def report(matrix, loss=None, names=None):
    m = np.asarray(matrix, dtype=np.int64)
    total = int(m.sum())
    if total == 0:
        raise InputError("confusion matrix is empty")
    k = m.shape[0]
    rows, cols = m.sum(axis=1), m.sum(axis=0)
    flags = []
    classes = []
    for c in range(k):
        if cols[c] == 0:
            flags.append(f"class {c}: never predicted, precision set to 0")
        if rows[c] == 0:
            flags.append(f"class {c}: no support, recall set to 0")
        prec = _ratio(m[c, c], cols[c])
        rec = _ratio(m[c, c], rows[c])
        f1 = _ratio(2 * prec * rec, prec + rec)
        classes.append(ClassMetrics(c, float(prec), float(rec), float(f1), int(rows[c])))
    for msg in flags:
        log.info(msg)
    support = np.array([c.support for c in classes], dtype=np.float64)
    agg = {}
    for key in ("precision", "recall", "f1"):
        vals = np.array([getattr(c, key) for c in classes])
        agg[key] = (float(vals.mean()), weighted_mean(vals, support))
    if isinstance(loss, (list, tuple, np.ndarray)):
        loss = float(np.mean(loss)) if len(loss) else None
    return EvaluationReport(
        classes=classes,
        accuracy=float(np.trace(m) / total),
        macro={k_: v[0] for k_, v in agg.items()},
        weighted={k_: v[1] for k_, v in agg.items()},
        total=total,
        loss=None if loss is None else float(loss),
        names=list(names) if names is not None else None,
        warnings=flags,
    )


def emit(rep, matrix, directory):
    """Write report.json, metrics.csv and confusion.csv; returns their paths."""
    try:
        os.makedirs(directory, exist_ok=True)
        paths = {name: os.path.join(directory, name) for name in ("report.json", "metrics.csv", "confusion.csv")}
        with open(paths["report.json"], "w") as fh:
            json.dump(rep.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(paths["metrics.csv"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "precision", "recall", "f1-score", "support"])
            for c in rep.classes:
                name = rep.names[c.label] if rep.names else str(c.label)
                w.writerow([name, f"{c.precision:.2f}", f"{c.recall:.2f}", f"{c.f1:.2f}", c.support])
            w.writerow(["accuracy", "", "", f"{rep.accuracy:.2f}", rep.total])
            w.writerow(["macro avg"] + [f"{rep.macro[k]:.2f}" for k in ("precision", "recall", "f1")] + [rep.total])
            w.writerow(["weighted avg"] + [f"{rep.weighted[k]:.2f}" for k in ("precision", "recall", "f1")] + [rep.total])
        with open(paths["confusion.csv"], "w", newline="") as fh:
            csv.writer(fh).writerows(np.asarray(matrix).tolist())
    except OSError as exc:
        raise OSError(f"could not write evaluation files under {directory}: {exc}") from exc
    return paths


def load_report(directory):
    with open(os.path.join(directory, "report.json")) as fh:
        rep = EvaluationReport.from_dict(json.load(fh))
    with open(os.path.join(directory, "confusion.csv"), newline="") as fh:
        matrix = np.array([[int(v) for v in row] for row in csv.reader(fh)], dtype=np.int64)
    return rep, matrix


def format_table(rep):
    """Plain-text table with 2-decimal rounding."""
    lines = [f"{'':>14}{'precision':>11}{'recall':>9}{'f1-score':>10}{'support':>9}"]
    for c in rep.classes:
        name = rep.names[c.label] if rep.names else str(c.label)
        lines.append(f"{name:>14}{c.precision:>11.2f}{c.recall:>9.2f}{c.f1:>10.2f}{c.support:>9d}")
    lines.append(f"{'accuracy':>14}{'':>11}{'':>9}{rep.accuracy:>10.2f}{rep.total:>9d}")
    for label, agg in (("macro avg", rep.macro), ("weighted avg", rep.weighted)):
        lines.append(f"{label:>14}{agg['precision']:>11.2f}{agg['recall']:>9.2f}{agg['f1']:>10.2f}{rep.total:>9d}")
    return "\n".join(lines)
