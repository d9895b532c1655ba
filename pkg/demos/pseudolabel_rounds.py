"""Self-training from a handful of labels.

Only a small share of the synthetic training set keeps its labels; the rest
is treated as an unlabeled pool. Each round the current model labels the
pool, confident predictions are absorbed, and a new model is trained on the
enlarged set. The script prints what each round absorbed, how precise those
pseudo-labels were (the pool's hidden truth is used for reporting only) and
compares against the labeled-only model.
"""
import argparse
from dataclasses import replace

import numpy as np

from defectssl import dataset, network, pseudolabel


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--fraction", type=float, default=0.05)
    ap.add_argument("--threshold", type=float, default=0.5)
    ap.add_argument("--rounds", type=int, default=4)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    train, test, _ = dataset.synthesize(dataset.SynthConfig(seed=args.seed, pool_size=0))
    labeled, rest = dataset.split(train, (args.fraction, 1 - args.fraction), args.seed)
    pool = dataset.PatchSet([replace(p, label=None) for p in rest], "unlabeled-pool", [p.label for p in rest])
    print(f"{len(labeled)} labeled, {len(pool)} unlabeled, {len(test)} test")

    tc = network.TrainConfig(epochs=args.epochs, seed=args.seed)
    base, _ = network.train(network.build(network.default_spec(), args.seed), labeled, tc)
    y, pred, _ = network.evaluate(base, test)
    print(f"labeled-only baseline accuracy: {np.mean(y == pred):.3f}")

    res = pseudolabel.run(labeled, pool, test, tc,
                          pseudolabel.EngineConfig(threshold=args.threshold, max_rounds=args.rounds))
    for r in res.reports:
        prec = "n/a" if r.pseudo_precision is None else f"{r.pseudo_precision:.3f}"
        acc = "n/a" if r.test_accuracy is None else f"{r.test_accuracy:.3f}"
        print(f"round {r.round}: train {r.train_size_before} -> {r.train_size_after}, "
              f"pool {r.pool_size_after}, pseudo precision {prec}, test accuracy {acc}")
    print(f"final accuracy: {res.evaluation.accuracy:.3f}")


if __name__ == "__main__":
    main()
