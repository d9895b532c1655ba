"""Annotations, labeled patches, class balancing, splits and the
procedural defect generator used as a stand-in for microscope imagery."""
from __future__ import annotations

import enum
import json
import logging
import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass, replace

import numpy as np

from . import imaging
from .errors import (
    AnnotationParseError,
    DegenerateClassError,
    FormatError,
    InputError,
    LabelError,
    ParameterError,
)

log = logging.getLogger(__name__)

SPLITS = ("train", "test", "unlabeled-pool")
PROVENANCES = ("human", "pseudo", "synthetic")


class DefectClass(enum.IntEnum):
    CRACK = 0
    PINHOLE = 1
    HOLE = 2
    SPATTER = 3


CLASS_NAMES = [c.name.lower() for c in DefectClass]
DEFAULT_LABEL_MAP = {name: int(c) for name, c in zip(CLASS_NAMES, DefectClass)}


@dataclass(frozen=True)
class BoundingBox:
    xmin: int
    ymin: int
    xmax: int
    ymax: int

    def clamp(self, width, height):
        """Intersect with the image; returns None when nothing is left."""
        x0, y0 = max(self.xmin, 0), max(self.ymin, 0)
        x1, y1 = min(self.xmax, width), min(self.ymax, height)
        if x0 >= x1 or y0 >= y1:
            return None
        return BoundingBox(x0, y0, x1, y1)


@dataclass(frozen=True)
class Annotation:
    image_id: str
    box: BoundingBox
    label: int


@dataclass
class LabeledPatch:
    """A fixed-size classifier input.

    ``provenance`` is ``"human"``, ``"synthetic"`` or ``"pseudo"``; pseudo
    labels also carry the round in which they were absorbed.
    """

    patch: np.ndarray
    label: int | None
    provenance: str = "human"
    confidence: float = 1.0
    round: int | None = None
    patch_id: str = ""

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ParameterError(f"unknown provenance {self.provenance!r}")
        if self.provenance == "pseudo" and self.round is None:
            raise ParameterError("pseudo-labeled patches need a round index")


class PatchSet:
    """An ordered collection of patches belonging to one split.

    Pool sets may hold hidden ground-truth labels for evaluation; they are
    kept out of the patches themselves and only reachable through
    :func:`evaluation_truth`.
    """

    def __init__(self, patches=(), split="train", hidden_labels=None):
        if split not in SPLITS:
            raise ParameterError(f"unknown split {split!r}")
        self.patches = list(patches)
        self.split = split
        if split == "unlabeled-pool" and any(p.label is not None for p in self.patches):
            raise InputError("unlabeled-pool entries must have label None")
        if hidden_labels is not None and len(hidden_labels) != len(self.patches):
            raise InputError("hidden labels must align with patches")
        self._hidden = None if hidden_labels is None else list(hidden_labels)

    def __len__(self):
        return len(self.patches)

    def __iter__(self):
        return iter(self.patches)

    def __getitem__(self, i):
        return self.patches[i]

    @property
    def class_counts(self):
        counts = {}
        for p in self.patches:
            if p.label is not None:
                counts[p.label] = counts.get(p.label, 0) + 1
        return dict(sorted(counts.items()))

    def counts_vector(self, num_classes):
        out = np.zeros(num_classes, dtype=np.int64)
        for label, n in self.class_counts.items():
            out[label] = n
        return out

    def arrays(self):
        """Return (X, y): X is (N, S, S, 1) float64 scaled to [-1, 1]; y is int (-1 if unlabeled)."""
        if not self.patches:
            return np.zeros((0, 0, 0, 1)), np.zeros(0, dtype=np.int64)
        x = np.stack([p.patch for p in self.patches]).astype(np.float64) / 127.5 - 1.0
        y = np.array([-1 if p.label is None else p.label for p in self.patches], dtype=np.int64)
        return x[..., None], y

    def subset(self, indices, split=None):
        hidden = None if self._hidden is None else [self._hidden[i] for i in indices]
        return PatchSet([self.patches[i] for i in indices], split or self.split, hidden)


def evaluation_truth(pool):
    """Hidden ground-truth labels of a pool set. Evaluation use only."""
    if pool._hidden is None:
        raise InputError("this patch set carries no hidden ground truth")
    return list(pool._hidden)


# -- annotations ---------------------------------------------------------------

def parse_voc_xml(xml_text, label_map=None, image_id=None):
    """Parse a LabelImg / Pascal-VOC annotation into Annotations."""
    label_map = {k.lower(): v for k, v in (label_map or DEFAULT_LABEL_MAP).items()}
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        line, col = exc.position
        raise AnnotationParseError(f"malformed annotation XML at line {line}, column {col}: {exc}") from exc
    if root.tag != "annotation":
        raise AnnotationParseError(f"root element is <{root.tag}>, expected <annotation>")
    if image_id is None:
        image_id = (root.findtext("filename") or "").strip()

    anns = []
    for obj in root.iter("object"):
        name = (obj.findtext("name") or "").strip()
        if name.lower() not in label_map:
            raise LabelError(f"unknown class name {name!r} in annotation for {image_id!r}")
        bnd = obj.find("bndbox")
        if bnd is None:
            raise AnnotationParseError(f"<object> {name!r} has no <bndbox>")
        try:
            coords = [int(round(float(bnd.findtext(k)))) for k in ("xmin", "ymin", "xmax", "ymax")]
        except (TypeError, ValueError) as exc:
            raise AnnotationParseError(f"bad <bndbox> coordinates for {name!r}") from exc
        anns.append(Annotation(image_id, BoundingBox(*coords), label_map[name.lower()]))
    return anns


def resize_bilinear(img, side):
    """Bilinear resize with aligned corners (unit scale is the identity)."""
    src = np.asarray(img, dtype=np.float64)
    h, w = src.shape

    def coords(n_in):
        if n_in == 1:
            return np.zeros(side), np.zeros(side, dtype=int), np.zeros(side, dtype=int)
        pos = np.arange(side) * ((n_in - 1) / (side - 1))
        lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
        return pos - lo, lo, lo + 1

    fy, y0, y1 = coords(h)
    fx, x0, x1 = coords(w)
    if h == 1:
        y1 = y0
    if w == 1:
        x1 = x0
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    return imaging.quantize(top * (1 - fy[:, None]) + bot * fy[:, None])


def extract_patches(img, anns, side=64):
    img = imaging.as_gray(img)
    if side < 8:
        raise ParameterError("patch side must be at least 8")
    h, w = img.shape
    out = []
    for k, ann in enumerate(anns):
        box = ann.box.clamp(w, h)
        if box is None:
            log.warning("skipping box %s of %s: no overlap with the %dx%d image", ann.box, ann.image_id, w, h)
            continue
        crop = img[box.ymin:box.ymax, box.xmin:box.xmax]
        out.append(LabeledPatch(resize_bilinear(crop, side), ann.label, "human", 1.0, None, f"{ann.image_id}#{k}"))
    return out


# -- balancing and splits ------------------------------------------------------

def balanced_weights(counts):
    """weight_c = N / (K * n_c), the usual 'balanced' class weighting."""
    counts = np.asarray(counts, dtype=np.int64)
    if counts.ndim != 1 or counts.size == 0:
        raise InputError("counts must be a non-empty 1-D sequence")
    if np.any(counts <= 0):
        bad = [int(i) for i in np.flatnonzero(counts <= 0)]
        raise DegenerateClassError(f"classes {bad} have no samples")
    return counts.sum() / (counts.size * counts.astype(np.float64))


def _allocate(sizes, fraction):
    """Largest-remainder split of per-stratum sizes hitting round(fraction * total)."""
    sizes = np.asarray(sizes)
    ideal = sizes * fraction
    take = np.floor(ideal).astype(int)
    short = int(np.floor(sizes.sum() * fraction + 0.5)) - take.sum()
    order = sorted(range(len(sizes)), key=lambda i: (-(ideal[i] - take[i]), i))
    for i in order[:max(short, 0)]:
        take[i] += 1
    return take


def split(patches, fractions=(0.9, 0.1), seed=0):
    """Stratified, seeded train/test split."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 2 or any(not 0 < f < 1 for f in fractions):
        raise ParameterError(f"fractions must be two values in (0, 1), got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ParameterError("fractions must sum to 1")
    items = list(patches)
    strata = {}
    for i, p in enumerate(items):
        strata.setdefault(-1 if p.label is None else p.label, []).append(i)
    keys = sorted(strata)
    take = _allocate([len(strata[k]) for k in keys], fractions[0])
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for k, n_train in zip(keys, take):
        idx = np.array(strata[k])[rng.permutation(len(strata[k]))]
        train_idx.extend(idx[:n_train].tolist())
        test_idx.extend(idx[n_train:].tolist())
    train_idx.sort()
    test_idx.sort()
    return (PatchSet([items[i] for i in train_idx], "train"),
            PatchSet([items[i] for i in test_idx], "test"))


# -- synthetic defects -----------------------------------------------------------

@dataclass
class SynthConfig:
    seed: int = 42
    image_side: int = 64
    noise_sigma: float = 8.0
    background: float = 150.0
    pinhole_radius_max: int = 5
    hole_radius_min: int = 6
    crack_steps: int = 40
    spatter_blobs: tuple = (5, 15)
    jitter: float = 4.0
    train_per_class: int = 200
    test_per_class: int = 50
    pool_size: int = 800
    classes: tuple = (0, 1, 2, 3)

    def validate(self):
        if self.pinhole_radius_max >= self.hole_radius_min:
            raise ParameterError("pinhole_radius_max must be below hole_radius_min")
        if self.pinhole_radius_max < 1:
            raise ParameterError("pinhole_radius_max must be at least 1")
        if self.hole_radius_min > self.image_side // 3:
            raise ParameterError("hole_radius_min exceeds a third of the image side")
        lo, hi = self.spatter_blobs
        if not 1 <= lo <= hi:
            raise ParameterError("spatter_blobs must be an increasing positive range")
        if self.image_side < 16:
            raise ParameterError("image_side must be at least 16")
        if min(self.train_per_class, self.test_per_class, self.pool_size) < 0:
            raise ParameterError("sample counts must be non-negative")
        if not self.classes or any(c not in DEFAULT_LABEL_MAP.values() for c in self.classes):
            raise ParameterError(f"classes must be a subset of {sorted(DEFAULT_LABEL_MAP.values())}")
        return self


_SPLIT_CODES = {"train": 0, "test": 1, "unlabeled-pool": 2}


def _disk(canvas, cy, cx, r, value):
    yy, xx = np.ogrid[:canvas.shape[0], :canvas.shape[1]]
    canvas[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = value


def render_defect(label, rng, cfg):
    """Draw one defect image; returns (uint8 raster, dict of drawing parameters).

    Defects are centred (up to ``cfg.jitter`` pixels off) as they would be
    in a crop taken from an annotation box.
    """
    s = cfg.image_side
    canvas = np.full((s, s), cfg.background)
    info = {"label": int(label)}
    if label == DefectClass.CRACK:
        width = int(rng.integers(1, 3))
        step = (s * 0.8) / cfg.crack_steps
        theta = rng.uniform(0, np.pi)
        y = s / 2 - np.sin(theta) * step * cfg.crack_steps / 2 + rng.uniform(-cfg.jitter, cfg.jitter)
        x = s / 2 - np.cos(theta) * step * cfg.crack_steps / 2 + rng.uniform(-cfg.jitter, cfg.jitter)
        pts = [(y, x)]
        for _ in range(cfg.crack_steps):
            theta += rng.normal(0, 0.15)
            y += np.sin(theta) * step
            x += np.cos(theta) * step
            pts.append((y, x))
        yy, xx = np.mgrid[:s, :s]
        mask = np.zeros((s, s), dtype=bool)
        half = width / 2.0
        for (ya, xa), (yb, xb) in zip(pts[:-1], pts[1:]):
            # distance from every pixel to the segment
            dy, dx = yb - ya, xb - xa
            t = np.clip(((yy - ya) * dy + (xx - xa) * dx) / (dy * dy + dx * dx), 0, 1)
            d2 = (yy - ya - t * dy) ** 2 + (xx - xa - t * dx) ** 2
            mask |= d2 <= half * half
        canvas[mask] = 40.0
        info.update(width=width, points=len(pts))
    elif label in (DefectClass.PINHOLE, DefectClass.HOLE):
        if label == DefectClass.PINHOLE:
            r = int(rng.integers(1, cfg.pinhole_radius_max + 1))
        else:
            r = int(rng.integers(cfg.hole_radius_min, s // 3 + 1))
        lo, hi = max(r + 1, s / 2 - cfg.jitter), min(s - r - 1, s / 2 + cfg.jitter)
        cy, cx = rng.uniform(lo, hi, size=2)
        _disk(canvas, int(round(cy)), int(round(cx)), r, 35.0)
        info.update(radius=r)
    elif label == DefectClass.SPATTER:
        lo, hi = cfg.spatter_blobs
        n = int(rng.integers(lo, hi + 1))
        theta = rng.uniform(0, np.pi)
        length = rng.uniform(0.4, 0.8) * s
        cy, cx = s / 2 + rng.uniform(-cfg.jitter, cfg.jitter, size=2)
        yy, xx = np.mgrid[:s, :s]
        for _ in range(n):
            t = rng.uniform(-0.5, 0.5) * length
            by = cy + t * np.sin(theta) + rng.normal(0, 1.5)
            bx = cx + t * np.cos(theta) + rng.normal(0, 1.5)
            ay, ax = rng.uniform(1.0, 3.0, size=2)
            canvas[((yy - by) / ay) ** 2 + ((xx - bx) / ax) ** 2 <= 1.0] = 235.0
        info.update(blobs=n)
    else:
        raise ParameterError(f"no renderer for class {label}")
    canvas += rng.normal(0, cfg.noise_sigma, size=canvas.shape)
    return imaging.quantize(canvas), info


def _image_rng(seed, split_name, index):
    return np.random.default_rng([int(seed), _SPLIT_CODES[split_name], int(index)])


def synthesize(cfg=None):
    """Generate (train, test, pool) sets. Deterministic in ``cfg.seed``.

    Each image has its own generator keyed on (seed, split, index), so
    images can be produced independently and in any order.
    """
    cfg = (cfg or SynthConfig()).validate()
    classes = list(cfg.classes)

    def make(split_name, labels, provenance):
        patches = []
        for i, label in enumerate(labels):
            img, _ = render_defect(label, _image_rng(cfg.seed, split_name, i), cfg)
            patches.append(LabeledPatch(img, int(label), provenance, 1.0, None, f"{split_name}-{i:06d}"))
        return patches

    train_labels = [c for c in classes for _ in range(cfg.train_per_class)]
    test_labels = [c for c in classes for _ in range(cfg.test_per_class)]
    # pool classes cycle through the class list, then get a seeded shuffle
    pool_labels = np.array([classes[i % len(classes)] for i in range(cfg.pool_size)], dtype=int)
    pool_labels = pool_labels[np.random.default_rng([int(cfg.seed), 99]).permutation(cfg.pool_size)]

    train = PatchSet(make("train", train_labels, "synthetic"), "train")
    test = PatchSet(make("test", test_labels, "synthetic"), "test")
    pool_patches = [replace(p, label=None) for p in make("unlabeled-pool", pool_labels, "synthetic")]
    pool = PatchSet(pool_patches, "unlabeled-pool", hidden_labels=[int(v) for v in pool_labels])
    return train, test, pool


# -- persistence ---------------------------------------------------------------

def save_patchset(ps, directory, include_truth=True):
    """Write patches as PGM files plus a JSON-lines ``index.jsonl``.

    Hidden pool truth goes to a separate ``truth.jsonl``.
    """
    os.makedirs(directory, exist_ok=True)
    lines = []
    for i, p in enumerate(ps.patches):
        name = f"{i:06d}.pgm"
        imaging.write_pgm(os.path.join(directory, name), p.patch)
        lines.append(json.dumps({
            "path": name, "id": p.patch_id, "label": p.label, "provenance": p.provenance,
            "round": p.round, "confidence": p.confidence, "split": ps.split,
        }, sort_keys=True))
    with open(os.path.join(directory, "index.jsonl"), "w") as fh:
        fh.write("".join(line + "\n" for line in lines))
    if include_truth and ps._hidden is not None:
        with open(os.path.join(directory, "truth.jsonl"), "w") as fh:
            for p, t in zip(ps.patches, ps._hidden):
                fh.write(json.dumps({"id": p.patch_id, "label": t}, sort_keys=True) + "\n")


def load_patchset(directory):
    index = os.path.join(directory, "index.jsonl")
    patches, split_name = [], None
    with open(index) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                img = imaging.read_pnm(os.path.join(directory, row["path"]))
                patches.append(LabeledPatch(img, row["label"], row["provenance"], float(row["confidence"]),
                                            row.get("round"), row.get("id", "")))
            except (KeyError, ValueError, TypeError) as exc:
                raise FormatError(f"{index}:{lineno}: bad index row ({exc})") from exc
            split_name = split_name or row["split"]
    hidden = None
    truth_path = os.path.join(directory, "truth.jsonl")
    if os.path.exists(truth_path):
        with open(truth_path) as fh:
            hidden = [json.loads(line)["label"] for line in fh if line.strip()]
    return PatchSet(patches, split_name or "train", hidden)
