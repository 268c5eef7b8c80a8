"""Fast transfer of a meta-trained population to one new task.

Each generation trains the shared weights on the task's training split with
the averaged gradient of all current members, scores every member on the
validation split, and halves the population: the top quarter survives and
crossover and mutation children of those survivors fill it to half size.
No fresh random genomes are injected, so the population shrinks to a single
architecture in ``ceil(log2 P)`` generations.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .archspace import ArchCode, crossover, mutate, validate
from .evolution import GenerationLog
from .metaopt import MetaOptimizer
from .supernet import SuperNet, Subnet, scatter_grads, select


class TransferError(ValueError):
    pass


@dataclass
class TransferConfig:
    P: int = 16
    E_param: int = 1
    batch_size: int = 25
    lr: float = 0.01
    p_c: float = 0.5
    p_m: float = 0.1
    generations: int | None = None  # optional cap on halving rounds
    predictor: bool = False
    predictor_trees: int = 100

    def __post_init__(self):
        if self.P < 1 or self.P & (self.P - 1):
            raise TransferError(f"P must be a power of two, got {self.P}")
        if self.E_param < 1:
            raise TransferError("E_param must be >= 1")
        if self.batch_size < 1 or self.lr <= 0:
            raise TransferError("batch_size and lr must be positive")


@dataclass
class TransferResult:
    code: ArchCode
    net: SuperNet
    fitness: float
    sizes: list[int]
    log: GenerationLog
    evaluated: list[tuple[ArchCode, float]] = field(default_factory=list)

    @property
    def best_evaluated(self) -> tuple[ArchCode, float]:
        """First genome to reach the highest fitness seen during the run."""
        best = self.evaluated[0]
        for item in self.evaluated[1:]:
            if item[1] > best[1]:
                best = item
        return best


def shrink_sizes(S: int) -> tuple[int, int, int]:
    """``(elites, crossover, mutants)`` for halving a population of ``S``."""
    target = math.ceil(S / 2)
    elites = math.ceil(S / 4)
    cross = min(math.ceil(S / 8), target - elites)
    return elites, cross, target - elites - cross


def initial_population(meta_pop, P: int, p_m: float, rng) -> list[ArchCode]:
    """The ``P`` fittest meta members (stable order). If the meta population
    is smaller than ``P``, mutants of its members cyclically fill the gap."""
    members = list(meta_pop.members)
    if not members:
        raise TransferError("meta population is empty")
    if all(f is not None for f in meta_pop.fitness):
        order = np.argsort(-meta_pop.scores(), kind="stable")
        members = [members[i] for i in order]
    chosen = members[:P]
    i = 0
    while len(chosen) < P:
        chosen.append(mutate(members[i % len(members)], p_m, rng))
        i += 1
    return chosen


def train_epoch(net: SuperNet, members, x, y, cfg: TransferConfig, rng, opt: MetaOptimizer):
    """One pass over the training split in shuffled minibatches. Each update
    applies the mean over members of their subnet gradients."""
    order = rng.permutation(len(y))
    for start in range(0, len(y), cfg.batch_size):
        rows = order[start:start + cfg.batch_size]
        xb, yb = x[rows], y[rows]
        grads = []
        for code in members:
            view = select(net, code)
            shared = Subnet(code, net.geometry, dict(view.blocks))
            grads.append(shared.loss_and_grad(xb, yb)[1])
        net.zero_grad()
        touched = set()
        for code, g in zip(members, grads):
            scatter_grads(net, code, g)
            touched.update(g)
        opt.step(net, [k for k in net.blocks if k in touched], 1.0 / len(members))
        net.zero_grad()
        net.bump()


def val_accuracy(net: SuperNet, code: ArchCode, x, y) -> float:
    view = select(net, code)
    return Subnet(code, net.geometry, dict(view.blocks)).accuracy(x, y)


def transfer(meta_net: SuperNet, meta_pop, train_split, val_split, cfg: TransferConfig, rng=None, *,
             fitness_fn=None, log: GenerationLog | None = None) -> TransferResult:
    """Population-halving adaptation to a new task.

    ``train_split`` and ``val_split`` are ``(x, y)`` pairs. ``meta_net`` is
    deep-copied and left untouched. ``fitness_fn(code)`` replaces validation
    accuracy. Returns the last surviving genome and the trained weights.
    """
    rng = np.random.default_rng() if rng is None else rng
    log = GenerationLog() if log is None else log
    x_tr, y_tr = (np.asarray(a) for a in train_split)
    x_va, y_va = (np.asarray(a) for a in val_split)
    if len(y_tr) == 0 or len(y_va) == 0:
        raise TransferError("train and validation splits must be non-empty")
    net = copy.deepcopy(meta_net)
    net.optimizer_state = None
    opt = MetaOptimizer("sgd", cfg.lr)
    members = initial_population(meta_pop, cfg.P, cfg.p_m, rng)
    sizes = [len(members)]
    evaluated: list[tuple[ArchCode, float]] = []

    def score(code):
        return float(fitness_fn(code)) if fitness_fn is not None else val_accuracy(net, code, x_va, y_va)

    generation = 0
    while True:
        for _ in range(cfg.E_param):
            train_epoch(net, members, x_tr, y_tr, cfg, rng, opt)
        if len(members) == 1 or (cfg.generations is not None and generation >= cfg.generations):
            break
        scores = np.array([score(c) for c in members])
        evaluated += list(zip(members, scores.tolist()))
        members = _halve(members, scores, cfg, rng, evaluated)
        sizes.append(len(members))
        log.record(generation, scores, len(members), len(scores))
        generation += 1
    final = members[0] if len(members) == 1 else max(members, key=score)
    assert validate(final)
    return TransferResult(final, net, score(final), sizes, log, evaluated)


def _halve(members, scores, cfg: TransferConfig, rng, evaluated):
    n_elite, n_cross, n_mut = shrink_sizes(len(members))
    order = np.argsort(-scores, kind="stable")
    elites = [members[i] for i in order[:n_elite]]

    def cross():
        i, j = rng.choice(n_elite, size=2, replace=False) if n_elite >= 2 else (0, 0)
        return crossover(elites[i], elites[j], cfg.p_c, rng)

    def mut():
        return mutate(elites[rng.integers(n_elite)], cfg.p_m, rng)

    surrogate = None
    if cfg.predictor and len({s for _, s in evaluated}) >= 2:
        from .predictor import fit

        surrogate = fit(evaluated, n_trees=cfg.predictor_trees, seed=int(rng.integers(2**31)))

    def batch(make, n):
        if surrogate is None or n == 0:
            return [make() for _ in range(n)]
        from .predictor import screen

        return screen(surrogate, [make() for _ in range(4 * n)], n)

    return elites + batch(cross, n_cross) + batch(mut, n_mut)
