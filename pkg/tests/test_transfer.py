import numpy as np
import pytest

from atnas.evolution import FitnessRecord, Population, sepconv3_fraction
from atnas.supernet import SuperNet, checkpoint_bytes
from atnas.tasks import gen_synth
from atnas.transfer import TransferConfig, TransferError, initial_population, shrink_sizes, transfer


@pytest.fixture(scope="module")
def splits():
    d = gen_synth(5, 8, 8, 8, 0.1, np.random.default_rng(0))
    x = d.images[:, :, None]
    y = np.repeat(np.arange(5), 8).reshape(5, 8)
    tr = (x[:, :3].reshape(-1, 1, 8, 8), y[:, :3].ravel())
    va = (x[:, 3:].reshape(-1, 1, 8, 8), y[:, 3:].ravel())
    return tr, va


def _meta(P, seed=1):
    rng = np.random.default_rng(seed)
    pop = Population.random(P, 2, rng=rng)
    pop.fitness = [FitnessRecord(float(s), 1) for s in rng.random(P)]
    return SuperNet(2, 4, 5, rng=rng), pop


@pytest.mark.parametrize("S, expected", [(16, (4, 2, 2)), (8, (2, 1, 1)), (4, (1, 1, 0)), (2, (1, 0, 0))])
def test_shrink_sizes(S, expected):
    assert shrink_sizes(S) == expected
    assert sum(shrink_sizes(S)) == S // 2


def test_config_requires_power_of_two():
    with pytest.raises(TransferError):
        TransferConfig(P=6)
    TransferConfig(P=1)


def test_initial_population_is_top_p():
    _, pop = _meta(8)
    top = initial_population(pop, 4, 0.1, np.random.default_rng(2))
    order = np.argsort(-pop.scores(), kind="stable")[:4]
    assert top == [pop.members[i] for i in order]
    assert len(initial_population(pop, 16, 0.1, np.random.default_rng(2))) == 16
    with pytest.raises(TransferError):
        initial_population(Population([], 4), 4, 0.1, np.random.default_rng(2))


def test_halving_schedule_and_untouched_meta_net(splits):
    net, pop = _meta(8)
    before = checkpoint_bytes(net)
    res = transfer(net, pop, *splits, TransferConfig(P=8), np.random.default_rng(3))
    assert res.sizes == [8, 4, 2, 1] and len(res.log.rows) == 3
    assert checkpoint_bytes(net) == before
    assert checkpoint_bytes(res.net) != before
    assert 0.0 <= res.fitness <= 1.0


def test_single_member_runs_no_rounds(splits):
    net, pop = _meta(4)
    res = transfer(net, pop, *splits, TransferConfig(P=1), np.random.default_rng(4))
    assert res.sizes == [1] and res.log.rows == [] and res.code == pop.best()[0]


def test_generation_cap(splits):
    net, pop = _meta(8)
    res = transfer(net, pop, *splits, TransferConfig(P=8, generations=1), np.random.default_rng(5),
                   fitness_fn=sepconv3_fraction)
    assert res.sizes == [8, 4]


def test_best_evaluated_is_first_maximum(splits):
    net, pop = _meta(8)
    res = transfer(net, pop, *splits, TransferConfig(P=8), np.random.default_rng(6), fitness_fn=sepconv3_fraction)
    code, score = res.best_evaluated
    assert score == max(s for _, s in res.evaluated)
    assert next(c for c, s in res.evaluated if s == score) == code


def test_empty_split_rejected(splits):
    net, pop = _meta(4)
    (x, y), va = splits
    with pytest.raises(TransferError):
        transfer(net, pop, (x[:0], y[:0]), va, TransferConfig(P=4), np.random.default_rng(7))


def test_sixteen_halves_in_four_rounds(splits):
    net, pop = _meta(16)
    res = transfer(net, pop, *splits, TransferConfig(P=16), np.random.default_rng(8), fitness_fn=sepconv3_fraction)
    assert res.sizes == [16, 8, 4, 2, 1]


def test_returns_global_argmax_on_rigged_fitness(splits):
    for seed in range(5):
        net, pop = _meta(8, seed=10 + seed)
        res = transfer(net, pop, *splits, TransferConfig(P=8), np.random.default_rng(seed),
                       fitness_fn=sepconv3_fraction)
        assert res.fitness == max(s for _, s in res.evaluated)
        assert sepconv3_fraction(res.code) == res.fitness
