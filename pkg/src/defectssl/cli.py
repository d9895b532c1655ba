"""Command-line entry point.

    defectssl {synth,preprocess,train,pseudolabel,transmatch,eval}
              [--config PATH] [--set key=value ...] [--out DIR]

Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
4 domain-input error. A run's ``manifest.json`` can be passed back as
``--config`` to repeat it.
"""
from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import datetime as _dt
import glob
import hashlib
import json
import logging
import os
import platform
import sys

import numpy as np

from . import __version__, dataset, fewshot, imaging, metrics, network, pseudolabel
from .errors import ConfigError, DefectSSLError, FormatError, InputError

log = logging.getLogger("defectssl")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DOMAIN = 0, 2, 3, 4

DEFAULT_CONFIG = {
    "seed": 42,
    "imaging": dict(dataclasses.asdict(imaging.PipelineConfig()), apply=False),
    "synth": {k: (list(v) if isinstance(v, tuple) else v)
              for k, v in dataclasses.asdict(dataset.SynthConfig()).items() if k != "seed"},
    "data": {"dir": None, "input": None, "labeled_fraction": 0.05, "split": [0.9, 0.1], "side": 64},
    "network": {"embedding": 128},
    "train": {"epochs": 20, "batch_size": 32, "class_weights": "balanced", "shuffle": True,
              "optimizer": dataclasses.asdict(network.OptimizerConfig())},
    "engine": dataclasses.asdict(pseudolabel.EngineConfig()),
    "transmatch": {"mode": "paper", "freeze": "last-block+head", "scale": 10.0,
                   "base_classes": [0, 1], "novel_classes": [2, 3], "shots": 5, "episode": None,
                   "fine_tune": {"epochs": 20, "batch_size": 32, "class_weights": "balanced", "shuffle": True,
                                 "optimizer": dataclasses.asdict(network.OptimizerConfig())}},
    "eval": {"weights": None, "dataset": None},
}


# -- configuration ---------------------------------------------------------------

def _merge(base, override, path=""):
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown configuration key {path + key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, path + key + ".")
        else:
            base[key] = value
    return base


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path=None, overrides=()):
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"configuration file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"configuration file {path} is not valid JSON: {exc}") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read configuration file {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"configuration file {path} must hold a JSON object")
        if "run_id" in raw and "config" in raw:  # a run manifest
            raw = raw["config"]
        _merge(cfg, raw)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        parts = key.split(".")
        node = cfg
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown configuration key {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown configuration key {key!r}")
        node[parts[-1]] = _parse_value(value)
    return cfg


def _make(cls, values, section):
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"bad [{section}] section: {exc}") from exc


def _train_config(section, seed, name):
    d = dict(section)
    opt = _make(network.OptimizerConfig, d.pop("optimizer", {}), name + ".optimizer")
    tc = _make(network.TrainConfig, dict(d, optimizer=opt, seed=seed), name)
    return _validated(tc, name)


def _validated(obj, section):
    try:
        return obj.validate()
    except DefectSSLError as exc:
        raise ConfigError(f"invalid [{section}] settings: {exc}") from exc


def pipeline_config(cfg):
    d = {k: v for k, v in cfg["imaging"].items() if k != "apply"}
    return _validated(_make(imaging.PipelineConfig, d, "imaging"), "imaging")


def synth_config(cfg):
    d = dict(cfg["synth"], seed=cfg["seed"])
    d["spatter_blobs"] = tuple(d["spatter_blobs"])
    d["classes"] = tuple(d["classes"])
    return _validated(_make(dataset.SynthConfig, d, "synth"), "synth")


def engine_config(cfg):
    return _validated(_make(pseudolabel.EngineConfig, cfg["engine"], "engine"), "engine")


def transmatch_config(cfg):
    t = cfg["transmatch"]
    return _validated(fewshot.TransMatchConfig(
        mode=t["mode"], freeze=t["freeze"], scale=float(t["scale"]), engine=engine_config(cfg),
        fine_tune=_train_config(t["fine_tune"], cfg["seed"], "transmatch.fine_tune")), "transmatch")


def validate_config(cfg):
    """Check every section up front so a bad value fails before any work starts."""
    pipeline_config(cfg)
    synth_config(cfg)
    transmatch_config(cfg)
    _train_config(cfg["train"], cfg["seed"], "train")
    d = cfg["data"]
    if not 0 < d["labeled_fraction"] <= 1:
        raise ConfigError("data.labeled_fraction must lie in (0, 1]")
    try:
        network_spec(cfg).shapes()
    except DefectSSLError as exc:
        raise ConfigError(f"invalid [data]/[network] settings: {exc}") from exc
    return cfg


def network_spec(cfg, num_classes=4):
    return network.default_spec(num_classes, cfg["data"]["side"], cfg["network"]["embedding"])


# -- run directories ----------------------------------------------------------------

def _digest_bytes(data):
    return hashlib.sha256(data).hexdigest()


def file_digest(path):
    with open(path, "rb") as fh:
        return _digest_bytes(fh.read())


def tree_digests(root):
    """sha256 of every file under ``root`` (relative paths), manifest/status excluded."""
    out = {}
    for path in sorted(glob.glob(os.path.join(root, "**", "*"), recursive=True)):
        rel = os.path.relpath(path, root)
        if os.path.isfile(path) and rel not in ("manifest.json", "status.json"):
            out[rel] = file_digest(path)
    return out


class Run:
    """A run directory ``<out>/<timestamp>-<config digest>`` with its manifest."""

    def __init__(self, command, cfg, out_root, inputs=()):
        blob = json.dumps({"command": command, "config": cfg}, sort_keys=True).encode()
        short = _digest_bytes(blob)[:8]
        stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
        self.run_id = f"{stamp}-{short}"
        self.dir = os.path.join(out_root, self.run_id)
        os.makedirs(self.dir, exist_ok=False)
        self.command = command
        self.cfg = cfg
        self.artifacts = {}
        self.inputs = {p: file_digest(p) for p in inputs if p and os.path.isfile(p)}

    def path(self, *parts):
        return os.path.join(self.dir, *parts)

    def write_manifest(self, seeds):
        manifest = {
            "run_id": self.run_id,
            "timestamp": self.run_id.split("-")[0],
            "command": self.command,
            "config": self.cfg,
            "seeds": seeds,
            "inputs": self.inputs,
            "artifacts": self.artifacts,
            "versions": {"defectssl": __version__, "numpy": np.__version__, "python": platform.python_version()},
        }
        with open(self.path("manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def finish(self, **extra):
        status = {"state": "complete", "outputs": tree_digests(self.dir)}
        status.update(extra)
        with open(self.path("status.json"), "w") as fh:
            json.dump(status, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return status


# -- data loading -------------------------------------------------------------------

def _dataset_inputs(cfg):
    d = cfg["data"]["dir"]
    if not d:
        return []
    return sorted(glob.glob(os.path.join(d, "*", "index.jsonl")) + glob.glob(os.path.join(d, "*", "truth.jsonl")))


def load_sets(cfg):
    """(train, test, pool) from ``data.dir`` or freshly synthesized."""
    d = cfg["data"]["dir"]
    if d:
        if not os.path.isdir(d):
            raise FileNotFoundError(f"data directory not found: {d}")
        sets = []
        for name in ("train", "test", "pool"):
            sub = os.path.join(d, name)
            sets.append(dataset.load_patchset(sub) if os.path.isdir(sub) else None)
        train, test, pool = sets
        if train is None:
            raise FileNotFoundError(f"{d} has no train/ patch set")
    else:
        train, test, pool = dataset.synthesize(synth_config(cfg))
    if cfg["imaging"]["apply"]:
        pcfg = pipeline_config(cfg)
        train, test, pool = (None if s is None else _preprocessed(s, pcfg) for s in (train, test, pool))
    return train, test, pool


def _preprocessed(ps, pcfg):
    patches = [dataclasses.replace(p, patch=imaging.preprocess(p.patch, pcfg)) for p in ps]
    return dataset.PatchSet(patches, ps.split, ps._hidden)


def _labeled_and_pool(cfg, train, pool):
    """Keep ``labeled_fraction`` of train labeled; the rest joins the pool unlabeled."""
    frac = cfg["data"]["labeled_fraction"]
    extra, hidden = [], []
    if frac < 1:
        labeled, rest = dataset.split(train, (frac, 1 - frac), cfg["seed"])
        extra = [dataclasses.replace(p, label=None) for p in rest]
        hidden = [p.label for p in rest]
    else:
        labeled = train
    if pool is not None:
        extra += list(pool.patches)
        try:
            hidden += dataset.evaluation_truth(pool)
        except DefectSSLError:
            hidden = None
    return labeled, dataset.PatchSet(extra, "unlabeled-pool", hidden if hidden is not None and extra else None)


def _names(classes):
    return [dataset.CLASS_NAMES[c] if c < len(dataset.CLASS_NAMES) else str(c) for c in classes]


def _write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "accuracy"])
        for row in history:
            w.writerow([row["epoch"], repr(row["loss"]), repr(row["accuracy"])])


def _evaluate_network(params, test, directory, names):
    y, pred, loss = network.evaluate(params, test)
    m = metrics.confusion(y, pred, params.spec.num_classes)
    rep = metrics.report(m, loss, names)
    metrics.emit(rep, m, directory)
    return rep


# -- commands ----------------------------------------------------------------------

def cmd_synth(cfg, out, args):
    scfg = synth_config(cfg)
    run = Run("synth", cfg, out)
    run.artifacts = {"data": "data"}
    run.write_manifest({"synth": cfg["seed"]})
    train, test, pool = dataset.synthesize(scfg)
    for name, ps in (("train", train), ("test", test), ("pool", pool)):
        dataset.save_patchset(ps, run.path("data", name))
    log.info("synthesized %d train / %d test / %d pool patches into %s", len(train), len(test), len(pool), run.dir)
    return run.finish(rows=len(train) + len(test) + len(pool))


def _find_image(directory, stem, filename):
    for cand in ([os.path.join(directory, filename)] if filename else []) + [
            os.path.join(directory, stem + ext) for ext in (".pgm", ".ppm", ".pnm")]:
        if os.path.isfile(cand) and cand.lower().endswith((".pgm", ".ppm", ".pnm")):
            return cand
    return None


def cmd_preprocess(cfg, out, args):
    src = args.input or cfg["data"]["input"]
    if not src:
        raise ConfigError("preprocess needs an input directory (--input or data.input)")
    if not os.path.isdir(src):
        raise FileNotFoundError(f"input directory not found: {src}")
    pcfg = pipeline_config(cfg)
    manifest_path = os.path.join(src, "manifest.json")
    if os.path.isfile(manifest_path):
        with open(manifest_path) as fh:
            entries = json.load(fh)
        pairs = [(iid, os.path.join(src, e["image"]), os.path.join(src, e["annotation"]))
                 for iid, e in sorted(entries.items())]
    else:
        pairs = []
        for xml_path in sorted(glob.glob(os.path.join(src, "*.xml"))):
            stem = os.path.splitext(os.path.basename(xml_path))[0]
            pairs.append((stem, None, xml_path))
    inputs = [manifest_path] + [p for pair in pairs for p in pair[1:] if p]
    run = Run("preprocess", cfg, out, inputs)
    run.artifacts = {"train": "data/train", "test": "data/test"}
    run.write_manifest({"split": cfg["seed"]})
    if not pairs:
        log.warning("no annotations found under %s", src)
    patches = []
    for image_id, img_path, xml_path in pairs:
        with open(xml_path) as fh:
            text = fh.read()
        anns = dataset.parse_voc_xml(text, image_id=image_id)
        if img_path is None:
            img_path = _find_image(src, image_id, _xml_filename(text))
        if img_path is None:
            raise FileNotFoundError(f"no PGM/PPM image found for annotation {xml_path}")
        img = imaging.preprocess(imaging.read_pnm(img_path), pcfg)
        patches.extend(dataset.extract_patches(img, anns, cfg["data"]["side"]))
    if patches:
        train, test = dataset.split(patches, cfg["data"]["split"], cfg["seed"])
    else:
        train, test = dataset.PatchSet([], "train"), dataset.PatchSet([], "test")
    dataset.save_patchset(train, run.path("data", "train"))
    dataset.save_patchset(test, run.path("data", "test"))
    log.info("extracted %d patches from %d annotation files", len(patches), len(pairs))
    return run.finish(patches=len(patches))


def _xml_filename(text):
    import xml.etree.ElementTree as ET
    try:
        return (ET.fromstring(text).findtext("filename") or "").strip() or None
    except ET.ParseError:
        return None


def cmd_train(cfg, out, args):
    tc = _train_config(cfg["train"], cfg["seed"], "train")
    run = Run("train", cfg, out, _dataset_inputs(cfg))
    run.artifacts = {"weights": "weights.tmw", "metrics": "eval", "history": "history.csv"}
    run.write_manifest({"train": cfg["seed"], "synth": cfg["seed"], "init": cfg["seed"]})
    train, test, _ = load_sets(cfg)
    spec = network_spec(cfg)
    params = network.build(spec, cfg["seed"])
    params, history = network.train(params, train, tc)
    network.save_weights(params, run.path("weights.tmw"))
    _write_history(run.path("history.csv"), history)
    extra = {}
    if test is not None and len(test):
        rep = _evaluate_network(params, test, run.path("eval"), _names(range(spec.num_classes)))
        log.info("test accuracy %.4f\n%s", rep.accuracy, metrics.format_table(rep))
        extra["test_accuracy"] = rep.accuracy
    return run.finish(**extra)


def cmd_pseudolabel(cfg, out, args):
    tc = _train_config(cfg["train"], cfg["seed"], "train")
    ecfg = engine_config(cfg)
    run = Run("pseudolabel", cfg, out, _dataset_inputs(cfg))
    run.artifacts = {"rounds": "rounds", "weights": "weights.tmw", "metrics": "eval"}
    run.write_manifest({"train": cfg["seed"], "split": cfg["seed"], "threshold": ecfg.threshold})
    train, test, pool = load_sets(cfg)
    labeled, pool = _labeled_and_pool(cfg, train, pool)
    res = pseudolabel.run(labeled, pool, test, tc, ecfg, network_spec(cfg))
    pseudolabel.write_reports(res.reports, run.path("rounds"))
    network.save_weights(res.model, run.path("weights.tmw"))
    extra = {"rounds": len(res.reports), "final_train_size": len(res.labeled)}
    if res.evaluation is not None:
        metrics.emit(res.evaluation, res.confusion, run.path("eval"))
        extra["test_accuracy"] = res.evaluation.accuracy
    return run.finish(**extra)


def cmd_transmatch(cfg, out, args):
    t = dict(cfg["transmatch"])
    if t.get("episode"):
        desc = fewshot.load_episode_description(t["episode"])
        for key in ("mode", "base_classes", "novel_classes", "shots"):
            if key in desc:
                t[key] = desc[key]
        cfg = dict(cfg, transmatch=t)
        if desc.get("data"):
            cfg = dict(cfg, data=dict(cfg["data"], dir=desc["data"]))
        if "seed" in desc:
            cfg = dict(cfg, seed=desc["seed"])
    tmc = transmatch_config(cfg)
    tc = _train_config(cfg["train"], cfg["seed"], "train")
    run = Run("transmatch", cfg, out, _dataset_inputs(cfg) + ([t["episode"]] if t.get("episode") else []))
    run.artifacts = {"rounds": "rounds", "weights": "model.tmw", "metrics": "eval", "episode": "episode.json"}
    seeds = {"train": cfg["seed"], "episode": cfg["seed"]}
    if tmc.mode == "split":
        seeds["partition"] = {"base": list(t["base_classes"]), "novel": list(t["novel_classes"])}
    run.write_manifest(seeds)

    train, test, pool = load_sets(cfg)
    if tmc.mode == "split":
        base_params, _ = fewshot.pretrain_base(train, t["base_classes"], tc, network_spec(cfg, len(t["base_classes"])))
        episode = fewshot.make_split_episode(train, test if test is not None else [], t["base_classes"],
                                             t["novel_classes"], int(t["shots"]), cfg["seed"])
    else:
        labeled, pool = _labeled_and_pool(cfg, train, pool)
        base_params, _ = network.train(network.build(network_spec(cfg), cfg["seed"]), labeled, tc)
        episode = fewshot.FewShotEpisode(sorted(labeled.class_counts), sorted(labeled.class_counts),
                                         min(labeled.class_counts.values()), labeled, pool,
                                         test if test is not None else dataset.PatchSet([], "test"),
                                         mode="paper", seed=cfg["seed"])
    with open(run.path("episode.json"), "w") as fh:
        json.dump(episode.description(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    res = fewshot.transmatch_run(episode, base_params, tmc)
    if res.reports:
        pseudolabel.write_reports(res.reports, run.path("rounds"))
    fewshot.save_model(res.params, res.head, run.path("model.tmw"))
    extra = {"rounds": len(res.reports)}
    if res.evaluation is not None:
        metrics.emit(res.evaluation, res.confusion, run.path("eval"))
        extra["test_accuracy"] = res.evaluation.accuracy
        extra["imprint_only_accuracy"] = res.imprint_evaluation.accuracy
    return run.finish(**extra)


def cmd_eval(cfg, out, args):
    weights = args.weights or cfg["eval"]["weights"]
    data_dir = args.dataset or cfg["eval"]["dataset"]
    if not weights or not data_dir:
        raise ConfigError("eval needs --weights and --dataset (or eval.weights / eval.dataset)")
    index = os.path.join(data_dir, "index.jsonl")
    run = Run("eval", cfg, out, [weights, index])
    run.artifacts = {"metrics": "eval"}
    run.write_manifest({})
    params = network.load_weights(weights)
    head = fewshot.detach_head(params)
    test = dataset.load_patchset(data_dir)
    if cfg["imaging"]["apply"]:
        test = _preprocessed(test, pipeline_config(cfg))
    if head is None:
        expected = network_spec(cfg, params.spec.num_classes)
        if expected.to_dict() != params.spec.to_dict():
            raise FormatError(f"{weights}: network does not match the configured network")
        rep = _evaluate_network(params, test, run.path("eval"), _names(range(params.spec.num_classes)))
    else:
        keep = [i for i, p in enumerate(test) if p.label in head.classes]
        if not keep:
            raise InputError(f"{data_dir} holds no patches of the head classes {head.classes}")
        if len(keep) < len(test):
            log.warning("evaluating %d of %d patches (head classes %s)", len(keep), len(test), head.classes)
        rep, m = fewshot.evaluate_head(params, head, test.subset(keep))
        metrics.emit(rep, m, run.path("eval"))
    log.info("accuracy %.4f\n%s", rep.accuracy, metrics.format_table(rep))
    return run.finish(test_accuracy=rep.accuracy)


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "pseudolabel": cmd_pseudolabel,
    "transmatch": cmd_transmatch,
    "eval": cmd_eval,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="defectssl", description="Semi-supervised few-shot defect classification.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON configuration file (or a previous run's manifest.json)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a configuration value, e.g. --set train.epochs=5")
        p.add_argument("--out", default="runs", help="parent directory for run directories")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "preprocess":
            p.add_argument("--input", help="directory of images and VOC XML annotations")
        if name == "eval":
            p.add_argument("--weights", help="weight file to evaluate")
            p.add_argument("--dataset", help="patch-set directory (with index.jsonl)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = validate_config(load_config(args.config, args.overrides))
        status = COMMANDS[args.command](cfg, args.out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DefectSSLError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    print(json.dumps({k: v for k, v in status.items() if k != "outputs"}, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
