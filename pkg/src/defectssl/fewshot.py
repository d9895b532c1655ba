"""Few-shot transfer: embeddings from a pretrained network, imprinted
cosine-classifier heads, fine-tuning, and the combined TransMatch run
(imprint -> pseudo-label the unlabeled pool -> fine-tune)."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import metrics, network, pseudolabel
from .dataset import CLASS_NAMES, PatchSet, split
from .errors import (
    DegenerateClassError,
    DegenerateEmbeddingError,
    InputError,
    LabelError,
    ParameterError,
)

log = logging.getLogger(__name__)

FREEZE_MODES = ("all-but-head", "last-block+head", "none")


def to_tensor(images):
    """uint8 rasters (N, S, S) or (S, S) -> network input (N, S, S, 1) in [-1, 1]."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    return (x / 127.5 - 1.0)[..., None]


def _inputs(data):
    if isinstance(data, PatchSet):
        return data.arrays()[0]
    return np.asarray(data, dtype=np.float64)


def _embedding_index(params):
    e = params.spec.embedding_layer
    if e is None:
        raise InputError("network has no designated embedding layer")
    return e


def raw_embeddings(params, x):
    """Un-normalized activations of the embedding layer for an input batch."""
    e = _embedding_index(params)
    out = np.zeros((len(x), params.spec.shapes()[e][0]))
    for start in range(0, len(x), 128):
        out[start:start + 128] = network.forward_layers(params, network._check_batch(params, x[start:start + 128]),
                                                        0, e + 1)[0]
    return out


def normalize(z):
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(norms < 1e-12):
        raise DegenerateEmbeddingError("embedding has (near) zero norm")
    return z / norms


def extract_embeddings(params, data):
    """L2-normalized embeddings, one row per patch."""
    return normalize(raw_embeddings(params, _inputs(data)))


def extract_embedding(params, patch):
    """Embedding of a single patch (a uint8 raster or a LabeledPatch)."""
    img = getattr(patch, "patch", patch)
    return extract_embeddings(params, to_tensor(img))[0]


@dataclass
class ImprintedHead:
    """Cosine classifier: logits = scale * (w_c . e) over unit rows w_c."""

    weights: np.ndarray
    classes: list
    scale: float = 10.0

    def copy(self):
        return ImprintedHead(self.weights.copy(), list(self.classes), self.scale)

    def renormalize(self):
        norms = np.linalg.norm(self.weights, axis=1, keepdims=True)
        if np.any(norms < 1e-12):
            raise DegenerateClassError("a head row collapsed to zero")
        self.weights = self.weights / norms
        return self


def imprint(embeddings_by_class, scale=10.0):
    """w_c = normalize(mean of the class's unit embeddings), classes in sorted order."""
    if not embeddings_by_class:
        raise InputError("no classes to imprint")
    classes = sorted(embeddings_by_class)
    rows = []
    for c in classes:
        e = np.atleast_2d(np.asarray(embeddings_by_class[c], dtype=np.float64))
        if e.shape[0] == 0:
            raise DegenerateClassError(f"class {c} has no embeddings")
        mean = e.mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm < 1e-9:
            raise DegenerateClassError(f"embeddings of class {c} cancel out (mean norm {norm:.3g})")
        rows.append(mean / norm)
    return ImprintedHead(np.array(rows), [int(c) for c in classes], float(scale))


def head_logits(head, e):
    e = np.asarray(e, dtype=np.float64)
    if e.shape[-1] != head.weights.shape[1]:
        raise InputError(f"embedding dimension {e.shape[-1]} does not match head dimension {head.weights.shape[1]}")
    return head.scale * (e @ head.weights.T)


def head_predict(head, e):
    """Softmax over the head's classes; 1-D input gives a 1-D distribution."""
    logits = head_logits(head, e)
    if logits.ndim == 1:
        return network.softmax(logits[None])[0]
    return network.softmax(logits)


# -- fine-tuning -------------------------------------------------------------------

@dataclass
class TransMatchConfig:
    mode: str = "paper"
    freeze: str = "last-block+head"
    engine: pseudolabel.EngineConfig = field(default_factory=pseudolabel.EngineConfig)
    fine_tune: network.TrainConfig = field(default_factory=lambda: network.TrainConfig(epochs=20))
    scale: float = 10.0

    def validate(self):
        if self.mode not in ("paper", "split"):
            raise ParameterError(f"mode must be 'paper' or 'split', got {self.mode!r}")
        if self.freeze not in FREEZE_MODES:
            raise ParameterError(f"freeze must be one of {FREEZE_MODES}, got {self.freeze!r}")
        if self.scale <= 0:
            raise ParameterError("scale must be positive")
        self.engine.validate()
        self.fine_tune.validate()
        return self


def trainable_layers(spec, freeze):
    """Indices of network layers (up to the embedding) updated under ``freeze``.

    The "last block" is every parameterized layer after the final pooling
    layer that precedes the embedding.
    """
    e = spec.embedding_layer
    params_at = [i for i, l in enumerate(spec.layers[:e + 1]) if isinstance(l, (network.Conv2D, network.Dense))]
    if freeze == "all-but-head":
        return set()
    if freeze == "none":
        return set(params_at)
    pools = [i for i, l in enumerate(spec.layers[:e]) if isinstance(l, network.MaxPool)]
    start = pools[-1] if pools else -1
    return {i for i in params_at if i > start}


def fine_tune(params, head, data, cfg=None):
    """Train the cosine head (and the unfrozen layers) on labeled ``data``.

    Returns new (params, head); inputs are not modified. Head rows are
    re-normalized after every epoch.
    """
    cfg = (cfg or TransMatchConfig()).validate()
    tc = cfg.fine_tune
    x, y = data.arrays() if isinstance(data, PatchSet) else data
    if len(y) == 0:
        raise InputError("fine-tuning data is empty")
    if any(int(v) not in head.classes for v in y):
        raise InputError(f"fine-tuning labels must belong to the head classes {head.classes}")
    params, head = params.copy(), head.copy()
    head.scale = cfg.scale if head.scale is None else head.scale
    local = np.array([head.classes.index(int(v)) for v in y])
    k = len(head.classes)
    weights = network.resolve_class_weights(tc.class_weights, local, k)
    e_idx = _embedding_index(params)
    trainable = trainable_layers(params.spec, cfg.freeze)
    first = min(trainable) if trainable else e_idx + 1
    # frozen prefix is evaluated once
    feats = network.forward_layers(params, network._check_batch(params, x), 0, first)[0]

    rng = np.random.default_rng(tc.seed)
    opt_state = {}
    n = len(local)
    for epoch in range(tc.epochs):
        order = rng.permutation(n) if tc.shuffle else np.arange(n)
        for start in range(0, n, tc.batch_size):
            idx = order[start:start + tc.batch_size]
            z, inputs, caches = network.forward_layers(params, feats[idx], first, e_idx + 1)
            norms = np.linalg.norm(z, axis=1, keepdims=True)
            if np.any(norms < 1e-12):
                raise DegenerateEmbeddingError("embedding collapsed to zero during fine-tuning")
            emb = z / norms
            probs = network.softmax(head.scale * emb @ head.weights.T)
            lab = local[idx]
            m = len(idx)
            dlogits = probs.copy()
            dlogits[np.arange(m), lab] -= 1.0
            dlogits *= (weights[lab] / m)[:, None]
            g_head = head.scale * dlogits.T @ emb
            opt_state["t"] = opt_state.get("t", 0) + 1
            if trainable:
                d_emb = head.scale * dlogits @ head.weights
                dz = (d_emb - emb * np.sum(emb * d_emb, axis=1, keepdims=True)) / norms
                grads, _ = network.backward_layers(params, inputs, caches, dz, start=first)
                for k_, i in enumerate(range(first, e_idx + 1)):
                    if i in trainable:
                        for name, g in grads[k_].items():
                            network.update_array(params.layers[i][name], g, opt_state, (i, name), tc.optimizer)
            network.update_array(head.weights, g_head, opt_state, ("head", "W"), tc.optimizer)
        head.renormalize()
    return params, head


def predict_head(params, head, data):
    """(global class ids, confidences, distributions) from the cosine head."""
    probs = head_predict(head, extract_embeddings(params, data))
    local = np.argmax(probs, axis=1)
    return np.array(head.classes)[local], probs[np.arange(len(probs)), local], probs


class ImprintLearner:
    """Pseudo-label engine learner: imprints a head from the current labeled
    set with the pretrained extractor, then (if ``tune_cfg`` is given)
    fine-tunes from the pretrained weights. Models are (params, head) pairs."""

    def __init__(self, params, classes, scale=10.0, tune_cfg=None):
        self.params = params
        self.classes = [int(c) for c in classes]
        self.scale = scale
        self.tune_cfg = tune_cfg

    def imprint(self, labeled):
        x, y = labeled.arrays()
        emb = extract_embeddings(self.params, x)
        return imprint({c: emb[y == c] for c in self.classes}, self.scale)

    def fit(self, labeled, previous=None):
        head = self.imprint(labeled)
        if self.tune_cfg is None:
            return (self.params, head), {"history": [], "class_weights": None}
        params, head = fine_tune(self.params, head, labeled, self.tune_cfg)
        return (params, head), {"history": [], "class_weights": None}

    def predict(self, model, patches):
        params, head = model
        if len(patches) == 0:
            return np.zeros((0, len(self.classes)))
        return head_predict(head, extract_embeddings(params, patches))

    def evaluate(self, model, test):
        x, y = test.arrays()
        probs = self.predict(model, test)
        local_true = np.array([self.classes.index(int(v)) for v in y])
        loss = float(np.mean(-np.log(np.maximum(probs[np.arange(len(y)), local_true], network.PROB_FLOOR))))
        return local_true, np.argmax(probs, axis=1), loss


# -- episodes --------------------------------------------------------------------

@dataclass
class FewShotEpisode:
    base_classes: list
    novel_classes: list
    shots: int
    support: PatchSet
    pool: PatchSet
    query: PatchSet
    mode: str = "split"
    seed: int = 0

    def validate(self):
        base, novel = set(self.base_classes), set(self.novel_classes)
        if not novel:
            raise InputError("episode has no novel classes")
        if self.mode == "split" and base & novel:
            raise InputError(f"base and novel classes overlap: {sorted(base & novel)}")
        counts = self.support.class_counts
        if self.mode == "split" and any(counts.get(c, 0) != self.shots for c in novel):
            raise InputError(f"support must hold exactly {self.shots} patches per novel class, got {counts}")
        if set(counts) - novel:
            raise InputError(f"support holds classes outside the novel set: {sorted(set(counts) - novel)}")
        return self

    def description(self):
        return {"mode": self.mode, "base_classes": list(self.base_classes),
                "novel_classes": list(self.novel_classes), "shots": self.shots, "seed": self.seed,
                "support_size": len(self.support), "pool_size": len(self.pool), "query_size": len(self.query)}


def make_split_episode(train, query, base_classes, novel_classes, shots, seed=0):
    """Pick ``shots`` labeled patches per novel class; the rest of the novel
    training patches become the unlabeled pool (truth kept hidden)."""
    novel = [int(c) for c in novel_classes]
    rng = np.random.default_rng(seed)
    support, pool, hidden = [], [], []
    for c in novel:
        members = [p for p in train if p.label == c]
        if len(members) < shots:
            raise InputError(f"class {c} has only {len(members)} patches, {shots} shots requested")
        order = rng.permutation(len(members))
        support.extend(members[i] for i in order[:shots])
        for i in order[shots:]:
            pool.append(_unlabel(members[i]))
            hidden.append(c)
    return FewShotEpisode(
        base_classes=[int(c) for c in base_classes], novel_classes=novel, shots=shots,
        support=PatchSet(support, "train"),
        pool=PatchSet(pool, "unlabeled-pool", hidden),
        query=PatchSet([p for p in query if p.label in novel], "test"),
        mode="split", seed=seed,
    )


def make_paper_episode(train, query, labeled_fraction=0.05, seed=0):
    """All classes are 'novel': a small labeled share of ``train`` is the
    support, the remainder is the unlabeled pool."""
    labeled, rest = split(train, (labeled_fraction, 1 - labeled_fraction), seed)
    classes = sorted(labeled.class_counts)
    return FewShotEpisode(
        base_classes=classes, novel_classes=classes, shots=min(labeled.class_counts.values()),
        support=labeled,
        pool=PatchSet([_unlabel(p) for p in rest], "unlabeled-pool", [p.label for p in rest]),
        query=PatchSet(list(query), "test"),
        mode="paper", seed=seed,
    )


def _unlabel(p):
    from dataclasses import replace
    return replace(p, label=None)


def pretrain_base(train, base_classes, train_cfg, spec=None, seed=None):
    """Train a network on ``base_classes`` only (labels remapped to 0..B-1)."""
    base = [int(c) for c in base_classes]
    x, y = train.arrays()
    keep = np.isin(y, base)
    local = np.searchsorted(np.array(sorted(base)), y[keep])
    spec = spec or network.default_spec(num_classes=len(base), side=x.shape[1])
    params = network.build(spec, train_cfg.seed if seed is None else seed)
    params, history = network.train(params, (x[keep], local), train_cfg)
    return params, history


@dataclass
class TransMatchResult:
    params: network.NetworkParams
    head: ImprintedHead
    reports: list
    labeled: PatchSet
    evaluation: metrics.EvaluationReport | None
    confusion: np.ndarray | None
    imprint_evaluation: metrics.EvaluationReport | None = None


def evaluate_head(params, head, query):
    if query is None or len(query) == 0:
        return None, None
    x, y = query.arrays()
    unknown = sorted(set(int(v) for v in y) - set(head.classes))
    if unknown:
        raise LabelError(f"query holds classes {unknown} the head does not know (head classes {head.classes})")
    probs = head_predict(head, extract_embeddings(params, x))
    local_true = np.array([head.classes.index(int(v)) for v in y])
    pred = np.argmax(probs, axis=1)
    loss = float(np.mean(-np.log(np.maximum(probs[np.arange(len(y)), local_true], network.PROB_FLOOR))))
    m = metrics.confusion(local_true, pred, len(head.classes))
    names = [CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c) for c in head.classes]
    return metrics.report(m, loss, names), m


def transmatch_run(episode, base_params, cfg=None):
    """Imprint a head from the support shots, pseudo-label the pool with
    head confidences, and fine-tune on support plus absorbed patches.

    Every engine round re-imprints from the pretrained extractor on the
    current labeled set and fine-tunes from the pretrained weights, so the
    returned model is imprint + fine-tune on the final labeled set.
    """
    cfg = (cfg or TransMatchConfig()).validate()
    episode.validate()
    learner = ImprintLearner(base_params, episode.novel_classes, cfg.scale, tune_cfg=cfg)
    imprint_eval, _ = evaluate_head(base_params, learner.imprint(episode.support), episode.query)

    result = pseudolabel.run(episode.support, episode.pool, episode.query, eng_cfg=cfg.engine, learner=learner)
    params, head = result.model
    rep, m = evaluate_head(params, head, episode.query)
    if rep is not None:
        log.info("transmatch: imprint-only accuracy %.4f, final accuracy %.4f",
                 imprint_eval.accuracy, rep.accuracy)
    return TransMatchResult(params, head, result.reports, result.labeled, rep, m, imprint_eval)


# -- persistence -------------------------------------------------------------------

def attach_head(params, head):
    """Copy of ``params`` with the head stored as the ``head`` parameter group."""
    out = params.copy()
    out.groups["head"] = {
        "W": head.weights.copy(),
        "classes": np.array(head.classes, dtype=np.float64),
        "scale": np.array([head.scale]),
    }
    return out


def detach_head(params):
    g = params.groups.get("head")
    if g is None:
        return None
    return ImprintedHead(g["W"].copy(), [int(c) for c in g["classes"]], float(g["scale"][0]))


def save_model(params, head, path):
    network.save_weights(attach_head(params, head), path)


def load_model(path, spec=None):
    params = network.load_weights(path, spec)
    return params, detach_head(params)


def load_episode_description(path):
    """Read an episode JSON: mode, base/novel classes, shots, seed, data paths."""
    with open(path) as fh:
        desc = json.load(fh)
    for key in ("mode", "novel_classes", "shots"):
        if key not in desc:
            raise InputError(f"episode description {path} lacks {key!r}")
    return desc
