"""Round-based pseudo-labeling.

Each round trains a model on the labeled set, predicts the remaining
unlabeled pool, and absorbs predictions whose top probability is strictly
above the threshold. Absorbed labels are frozen: they are never
re-predicted in later rounds.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import metrics, network
from .dataset import CLASS_NAMES, PatchSet, evaluation_truth
from .errors import InputError, ParameterError

log = logging.getLogger(__name__)


@dataclass
class EngineConfig:
    threshold: float = 0.5
    max_rounds: int = 4
    retrain: str = "fresh"
    stop_when_no_additions: bool = True

    def validate(self):
        if not 0 < self.threshold < 1:
            raise ParameterError("threshold must lie in (0, 1)")
        if self.max_rounds < 1:
            raise ParameterError("max_rounds must be at least 1")
        if self.retrain not in ("fresh", "continue"):
            raise ParameterError(f"retrain must be 'fresh' or 'continue', got {self.retrain!r}")
        return self


@dataclass(frozen=True)
class PseudoLabel:
    index: int
    patch_id: str
    assigned_class: int
    confidence: float
    round: int


@dataclass
class RoundReport:
    round: int
    train_size_before: int
    train_size_after: int
    additions: list
    pool_size_before: int
    pool_size_after: int
    test_accuracy: float | None = None
    test_loss: float | None = None
    train_history: list = field(default_factory=list)
    pseudo_precision: float | None = None
    class_weights: list | None = None
    classes: list | None = None

    def to_dict(self):
        return asdict(self)


def select_confident(distributions, threshold, round_index=1, patch_ids=None, classes=None):
    """Keep rows whose top probability is strictly greater than ``threshold``.

    ``classes`` maps column indices to label ids (identity by default).
    """
    probs = np.asarray(distributions, dtype=np.float64)
    if probs.ndim != 2:
        raise InputError("predictions must be an (N, K) array of distributions")
    if len(probs) == 0:
        return []
    top = np.argmax(probs, axis=1)
    conf = probs[np.arange(len(probs)), top]
    out = []
    for i in np.flatnonzero(conf > threshold):
        label = int(top[i]) if classes is None else int(classes[top[i]])
        pid = str(i) if patch_ids is None else patch_ids[i]
        out.append(PseudoLabel(int(i), pid, label, float(conf[i]), round_index))
    return out


class CNNLearner:
    """Trains the convolutional classifier; the default learner of :func:`run`."""

    def __init__(self, train_cfg, spec=None, retrain="fresh"):
        self.train_cfg = train_cfg
        self.spec = spec or network.default_spec()
        self.retrain = retrain
        self.classes = list(range(self.spec.num_classes))

    def fit(self, labeled, previous=None):
        if previous is not None and self.retrain == "continue":
            params = previous
        else:
            params = network.build(self.spec, self.train_cfg.seed)
        params, history = network.train(params, labeled, self.train_cfg)
        x, y = labeled.arrays()
        weights = network.resolve_class_weights(self.train_cfg.class_weights, y, len(self.classes))
        return params, {"history": history, "class_weights": weights.tolist()}

    def predict(self, model, patches):
        return network.predict(model, patches)[2]

    def evaluate(self, model, test):
        """(truths, predictions, loss) with labels as indices into ``classes``."""
        return network.evaluate(model, test)


@dataclass
class RunResult:
    model: object
    reports: list
    labeled: PatchSet
    evaluation: metrics.EvaluationReport | None = None
    confusion: np.ndarray | None = None
    pseudo_labels: list = field(default_factory=list)


def _test_scores(learner, model, test):
    if test is None or len(test) == 0:
        return None, None, None, None
    y, pred, loss = learner.evaluate(model, test)
    m = metrics.confusion(y, pred, len(learner.classes))
    rep = metrics.report(m, loss, names=[CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c) for c in learner.classes])
    return float(np.mean(y == pred)), loss, rep, m


def run(labeled, pool, test, train_cfg=None, eng_cfg=None, spec=None, learner=None):
    """Iterate train / predict / absorb for at most ``max_rounds`` rounds.

    When the final round absorbed new labels, one more model is fitted on
    the enlarged set so that the returned model has seen every label.
    """
    eng_cfg = (eng_cfg or EngineConfig()).validate()
    if labeled is None or len(labeled) == 0:
        raise InputError("the labeled set is empty")
    if any(p.label is None for p in labeled):
        raise InputError("the labeled set contains unlabeled patches")
    if learner is None:
        learner = CNNLearner(train_cfg or network.TrainConfig(), spec, eng_cfg.retrain)
    pool = pool if pool is not None else PatchSet([], "unlabeled-pool")
    k = len(learner.classes)

    current = list(labeled.patches)
    remaining = list(range(len(pool)))
    try:
        hidden = evaluation_truth(pool)
    except InputError:
        hidden = None

    reports, absorbed = [], []
    model, dirty = None, True
    for r in range(1, eng_cfg.max_rounds + 1):
        train_set = PatchSet(current, "train")
        model, info = learner.fit(train_set, model)
        dirty = False
        acc, loss, _, _ = _test_scores(learner, model, test)

        chosen = []
        if remaining:
            probs = learner.predict(model, PatchSet([pool[i] for i in remaining], "unlabeled-pool"))
            ids = [pool[i].patch_id for i in remaining]
            chosen = select_confident(probs, eng_cfg.threshold, r, ids, learner.classes)
        picked = set()
        adds = [0] * k
        for pl in chosen:
            src = remaining[pl.index]
            picked.add(src)
            current.append(replace(pool[src], label=pl.assigned_class, provenance="pseudo",
                                   confidence=pl.confidence, round=r))
            absorbed.append(replace(pl, index=src))
            adds[learner.classes.index(pl.assigned_class)] += 1
        precision = None
        if hidden is not None and chosen:
            precision = float(np.mean([hidden[remaining[pl.index]] == pl.assigned_class for pl in chosen]))
        pool_before = len(remaining)
        remaining = [i for i in remaining if i not in picked]
        dirty = bool(chosen)
        reports.append(RoundReport(
            round=r,
            train_size_before=len(train_set),
            train_size_after=len(current),
            additions=adds,
            pool_size_before=pool_before,
            pool_size_after=len(remaining),
            test_accuracy=acc,
            test_loss=loss,
            train_history=info.get("history", []),
            pseudo_precision=precision,
            class_weights=info.get("class_weights"),
            classes=list(learner.classes),
        ))
        log.info("round %d: +%d pseudo-labels, pool %d -> %d, test accuracy %s",
                 r, len(chosen), pool_before, len(remaining), acc)
        if not chosen and eng_cfg.stop_when_no_additions:
            break

    final_set = PatchSet(current, "train")
    if dirty:
        model, _ = learner.fit(final_set, model)
    _, _, rep, m = _test_scores(learner, model, test)
    return RunResult(model, reports, final_set, rep, m, absorbed)


def write_reports(reports, directory, class_names=None):
    """Per-round JSON files plus a cumulative ``rounds.csv``.

    ``train_size`` is the size of the set the round's model was trained on
    (the one its ``test_accuracy`` refers to); ``pool_size`` is what is
    left after absorption.
    """
    os.makedirs(directory, exist_ok=True)
    names = class_names or CLASS_NAMES
    classes = reports[0].classes if reports and reports[0].classes else list(range(len(names)))
    for rep in reports:
        with open(os.path.join(directory, f"round_{rep.round:02d}.json"), "w") as fh:
            json.dump(rep.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    with open(os.path.join(directory, "rounds.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "train_size"] + [f"additions_{names[c]}" for c in classes]
                   + ["pool_size", "test_accuracy"])
        for rep in reports:
            acc = "" if rep.test_accuracy is None else repr(rep.test_accuracy)
            w.writerow([rep.round, rep.train_size_before] + rep.additions + [rep.pool_size_after, acc])
