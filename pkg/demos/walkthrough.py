"""End-to-end walkthrough at toy scale, through the Python API.

1. make a synthetic few-shot dataset and split its classes
2. warm up a small supernet on random genomes
3. run a short meta continuous evolution
4. transfer the meta population to an unseen 5-way task
5. compare the meta-trained weights with a fresh supernet on held-out episodes

Runs in two to three minutes on one core:

    python demos/walkthrough.py
"""

import numpy as np

from atnas.archspace import serialize
from atnas.evolution import GenerationLog, Population, SearchSettings, search
from atnas.metaopt import MetaHyper, adapt_and_score
from atnas.supernet import SuperNet, select, warmup
from atnas.tasks import TaskPool, gen_synth, sample_episode
from atnas.transfer import TransferConfig, transfer


def main(seed=0):
    rng = np.random.default_rng(seed)

    # 24 classes: 16 for meta-training, 8 never seen during search
    ds = gen_synth(24, 30, 16, 16, 0.1, rng)
    meta_classes, new_classes = ds.subset(range(16)), ds.subset(range(16, 24))
    train_pool = TaskPool(meta_classes, 5, 1, 10, 10_000, seed=seed + 1)
    val_pool = TaskPool(meta_classes, 5, 1, 10, 6, seed=seed + 2)

    hyper = MetaHyper(lambda_task=0.1, M=3, B_arch=2, B_task=2)
    net = SuperNet(2, 8, 5, rng=rng)
    steps = warmup(net, train_pool, 1, rng, hyper, steps_per_epoch=30)
    print(f"warm-up: {steps} meta-steps on uniformly sampled genomes")

    pop = Population.random(8, 2, rng=rng)
    settings = SearchSettings(E_evo=1, steps_per_epoch=60, cadence=20)
    log = GenerationLog()
    net, pop, log = search(net, pop, train_pool, val_pool, hyper, settings, rng, log=log)
    print("search log:")
    print(log.to_csv(), end="")
    best, rec = pop.best()
    print(f"best meta genome (fitness {rec.mean_acc:.3f}): {serialize(best)}")

    # one unseen task: 5 shots per class to train, 15 to validate
    task = sample_episode(new_classes, 5, 5, 15, rng)
    res = transfer(net, pop, task.support, task.query, TransferConfig(P=8), rng)
    print(f"transfer: sizes {res.sizes}, validation accuracy {res.fitness:.3f}")
    print(f"transferred genome: {serialize(res.code)}")

    # meta-trained vs fresh weights, same genome, same held-out episodes
    test_pool = TaskPool(new_classes, 5, 1, 15, 50, seed=seed + 3)
    fresh = SuperNet(2, 8, 5, rng=np.random.default_rng(seed + 4))
    meta_acc = [adapt_and_score(select(net, best), test_pool.episode(i), hyper) for i in range(50)]
    fresh_acc = [adapt_and_score(select(fresh, best), test_pool.episode(i), hyper) for i in range(50)]
    print(f"held-out 5-way 1-shot accuracy: meta {np.mean(meta_acc):.3f} vs fresh {np.mean(fresh_acc):.3f}")


if __name__ == "__main__":
    main()
