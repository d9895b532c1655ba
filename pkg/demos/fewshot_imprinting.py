"""Few-shot classes by weight imprinting.

A network is pretrained on two "base" defect classes. The two other classes
get only a few labeled shots each: their classifier rows are imprinted as
the normalized mean embedding of those shots, and the unlabeled remainder
is pseudo-labeled with the imprinted head before fine-tuning.
"""
import argparse

from defectssl import dataset, fewshot, metrics, network


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--shots", type=int, default=5)
    ap.add_argument("--base", type=int, nargs=2, default=[0, 1])
    ap.add_argument("--novel", type=int, nargs=2, default=[2, 3])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    train, _, _ = dataset.synthesize(dataset.SynthConfig(seed=args.seed, test_per_class=0, pool_size=0))
    query = dataset.synthesize(dataset.SynthConfig(seed=args.seed + 1000, train_per_class=0,
                                                   test_per_class=100, pool_size=0))[1]
    names = dataset.CLASS_NAMES
    print("base:", [names[c] for c in args.base], " novel:", [names[c] for c in args.novel])

    base, _ = fewshot.pretrain_base(train, args.base, network.TrainConfig(epochs=10, seed=args.seed))
    episode = fewshot.make_split_episode(train, query, args.base, args.novel, args.shots, args.seed)
    print(f"{len(episode.support)} shots, {len(episode.pool)} unlabeled, {len(episode.query)} queries")

    res = fewshot.transmatch_run(episode, base, fewshot.TransMatchConfig(mode="split"))
    print(f"imprint only: {res.imprint_evaluation.accuracy:.3f}")
    print(f"after pseudo-labeling and fine-tuning: {res.evaluation.accuracy:.3f}")
    print(metrics.format_table(res.evaluation))


if __name__ == "__main__":
    main()
