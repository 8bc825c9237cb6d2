"""Quick check of the installed extension: cluster, fit, embed, evaluate."""

import random

import rpml


def blobs(centres, per, rng):
    points, labels = [], []
    for c, centre in enumerate(centres):
        for _ in range(per):
            points.append([x + rng.gauss(0.0, 1.0) for x in centre])
            labels.append(c)
    return points, labels


def main():
    rng = random.Random(0)
    centres = [[0.0] * 6, [12.0] + [0.0] * 5, [0.0, 12.0] + [0.0] * 4]
    train, _ = blobs(centres, 40, rng)
    test, test_labels = blobs(centres, 40, rng)

    pseudo = rpml.cluster(train, k=20, epsilon=0.3)
    print(f"clusters: {len(set(pseudo))}")

    model = rpml.fit(train, pseudo, l=2, seed=1)
    print(model, f"final cost {model.costs[-1]:.4f}")

    metrics = rpml.evaluate(model.embed(test), test_labels, ks=[1, 2, 4], seed=1)
    print({k: round(v, 4) if isinstance(v, float) else v for k, v in metrics.items()})
    assert metrics["recall_at_k"][1] > 90.0, metrics


if __name__ == "__main__":
    main()
