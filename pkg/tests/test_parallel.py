import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from atnas.archspace import random_code
from atnas.evolution import EpisodeList, Population, evaluate
from atnas.metaopt import MetaHyper
from atnas.parallel import (
    ParallelError,
    parallel_evaluate,
    parallel_meta_step,
    pooled_mean,
    resolve_workers,
    shard,
)
from atnas.supernet import SuperNet, checkpoint_bytes
from atnas.tasks import TaskPool, gen_synth


@pytest.fixture(scope="module")
def pool():
    return TaskPool(gen_synth(8, 6, 8, 8, 0.1, np.random.default_rng(0)), 5, 1, 3, 8, seed=3)


def test_shard_examples():
    assert shard(5, 1).shards == ((0, 1, 2, 3, 4),)
    assert shard(8, 4).shards == ((0, 4), (1, 5), (2, 6), (3, 7))
    with pytest.raises(ParallelError):
        shard(3, 4)
    with pytest.raises(ParallelError):
        shard(3, 0)


@settings(max_examples=100, deadline=None)
@given(tasks=st.lists(st.integers(0, 10_000), min_size=1, max_size=60, unique=True), k=st.integers(1, 8))
def test_shards_partition_the_pool(tasks, k):
    if k > len(tasks):
        return
    plan = shard(tasks, k)
    flat = [t for s in plan.shards for t in s]
    assert sorted(flat) == sorted(tasks) and len(flat) == len(set(flat))
    sizes = [len(s) for s in plan.shards]
    assert max(sizes) - min(sizes) <= 1


def test_pooled_mean_examples():
    assert pooled_mean([0.5, 0.7], [4, 4]) == pytest.approx(0.6)
    per_task = np.array([0.2, 0.4, 0.9, 0.6, 1.0])
    plan = shard(5, 2)  # shards (0, 2, 4) and (1, 3)
    means = [per_task[list(s)].mean() for s in plan.shards]
    assert pooled_mean(means, [3, 2]) == pytest.approx(per_task.mean(), abs=1e-15)


def test_parallel_evaluate_matches_serial(pool):
    net = SuperNet(2, 4, 5, rng=np.random.default_rng(1))
    pop = Population.random(4, 2, rng=np.random.default_rng(2))
    hyper = MetaHyper(lambda_task=0.1, M=2)
    serial = np.array([f.mean_acc for f in evaluate(pop, net, pool, hyper)])
    for k in (1, 2, 4):
        np.testing.assert_array_equal(parallel_evaluate(net, pop.members, shard(8, k), hyper, pool), serial)


def test_meta_step_normaliser_counts_all_pairs(pool):
    # with SGD the update is eta * sum / (K * B_arch * B_task); compare K=2 against manual scaling
    hyper = MetaHyper(lambda_task=0.1, eta_meta=1.0, M=1, B_arch=2, B_task=2, optimizer="sgd")
    codes = [random_code(2, rng=np.random.default_rng(4)) for _ in range(2)]
    a = SuperNet(2, 4, 5, rng=np.random.default_rng(5))
    b = SuperNet(2, 4, 5, rng=np.random.default_rng(5))
    parallel_meta_step(a, codes, shard([0, 1, 2, 3], 2), hyper, pool)
    from atnas.metaopt import averaged_meta_grad
    avg = averaged_meta_grad(b, [(c, pool.episode(t)) for t in range(4) for c in codes], hyper)
    for key, block in b.blocks.items():
        for name, t in block.tensors.items():
            np.testing.assert_allclose(a.blocks[key].tensors[name], t - avg[key][name], atol=1e-14)


class _FailingPool:
    def __init__(self, pool, bad):
        self.pool, self.bad = pool, bad

    def __len__(self):
        return len(self.pool)

    def episode(self, i):
        if i == self.bad:
            raise RuntimeError("worker lost")
        return self.pool.episode(i)


def test_worker_failure_leaves_weights_unchanged(pool):
    net = SuperNet(2, 4, 5, rng=np.random.default_rng(6))
    before, version = checkpoint_bytes(net), net.version
    codes = [random_code(2, rng=np.random.default_rng(7))]
    with pytest.raises(ParallelError, match="worker"):
        parallel_meta_step(net, codes, shard(8, 4), MetaHyper(lambda_task=0.1), _FailingPool(pool, 5))
    assert checkpoint_bytes(net) == before and net.version == version


def test_resolve_workers_env(monkeypatch):
    monkeypatch.delenv("ATNAS_WORKERS", raising=False)
    assert resolve_workers(3) == 3
    monkeypatch.setenv("ATNAS_WORKERS", "2")
    assert resolve_workers(3) == 2
    monkeypatch.setenv("ATNAS_WORKERS", "zero")
    with pytest.raises(ParallelError):
        resolve_workers(1)


def test_episode_list_adapter(pool):
    eps = EpisodeList([pool.episode(0), pool.episode(1)])
    assert len(eps) == 2 and eps.episode(1) is pool.episode(1)
