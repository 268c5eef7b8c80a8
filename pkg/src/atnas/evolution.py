"""Population fitness evaluation and the meta continuous evolution loop.

Search alternates ``cadence`` meta-weight updates with one round of
evaluate-then-evolve. Evolution keeps the top quarter of the population,
adds crossover children and mutants of those elites, and refills the rest
with fresh random genomes, so the population size never changes.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .archspace import ArchCode, crossover, from_dict, mutate, random_code, validate
from .metaopt import MetaHyper
from .numkernel import OpKind
from .parallel import accuracy_matrix, parallel_meta_step, shard

LOG_COLUMNS = ("generation", "best_fitness", "mean_fitness", "population_size", "evals", "elapsed_s")


class EvolutionError(ValueError):
    pass


@dataclass
class FitnessRecord:
    mean_acc: float
    tasks_evaluated: int
    predicted: bool = False
    generation: int = 0


@dataclass
class Population:
    members: list[ArchCode]
    K: int
    fitness: list[FitnessRecord | None] = field(default_factory=list)
    generation: int = 0

    def __post_init__(self):
        self.members = list(self.members)
        if not self.fitness:
            self.fitness = [None] * len(self.members)
        if len(self.fitness) != len(self.members):
            raise EvolutionError("one fitness slot per member required")

    def __len__(self):
        return len(self.members)

    @classmethod
    def random(cls, K: int, cells: int, reduce_positions=None, rng=None) -> Population:
        rng = np.random.default_rng() if rng is None else rng
        return cls([random_code(cells, reduce_positions, rng) for _ in range(K)], K)

    def scores(self) -> np.ndarray:
        if any(f is None for f in self.fitness):
            raise EvolutionError("population has unevaluated members")
        return np.array([f.mean_acc for f in self.fitness])

    def best(self) -> tuple[ArchCode, FitnessRecord]:
        i = int(np.argmax(self.scores()))  # first maximum: ties go to the lower index
        return self.members[i], self.fitness[i]

    def to_json(self) -> str:
        rows = []
        for code, fit in zip(self.members, self.fitness):
            rows.append({"cells": code.cells, "reduce": list(code.reduce_positions),
                         "genes": [int(g) for g in code.genes],
                         "fitness": None if fit is None else fit.mean_acc})
        return json.dumps({"K": self.K, "generation": self.generation, "members": rows}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> Population:
        doc = json.loads(text)
        members = [from_dict({k: m[k] for k in ("cells", "reduce", "genes")}) for m in doc["members"]]
        fitness = [None if m.get("fitness") is None else FitnessRecord(m["fitness"], 0, generation=doc["generation"])
                   for m in doc["members"]]
        return cls(members, doc["K"], fitness, doc["generation"])


class EpisodeList:
    """Adapts a plain list of episodes to the indexed pool interface."""

    def __init__(self, episodes):
        self.episodes = list(episodes)

    def __len__(self):
        return len(self.episodes)

    def episode(self, i):
        return self.episodes[i]


def _as_pool(tasks):
    return tasks if hasattr(tasks, "episode") else EpisodeList(tasks)


# Synthetic deterministic fitness functions, used to test the search machinery
# without any weight training.

def op_fraction(code: ArchCode, kind: OpKind) -> float:
    """Fraction of the genome's selected operations that are ``kind``."""
    chosen = code.genes[code.genes > 0]
    return float(np.mean(chosen == int(kind)))


def identity_fraction(code: ArchCode) -> float:
    return op_fraction(code, OpKind.IDENTITY)


def sepconv3_fraction(code: ArchCode) -> float:
    return op_fraction(code, OpKind.SEP_CONV_3)


def evaluate(pop: Population, net, val_tasks, hyper: MetaHyper, *, workers: int = 1,
             fitness_fn=None, only=None) -> list[FitnessRecord]:
    """Score members by mean query accuracy after ``M`` inner steps per task.

    The supernet is only read. ``fitness_fn(code)`` replaces the task-based
    score. ``only`` restricts evaluation to those member indices; the other
    records are returned unchanged. Records are also stored on ``pop``.
    """
    idx = list(range(len(pop))) if only is None else list(only)
    if fitness_fn is not None:
        scores, n_tasks = np.array([float(fitness_fn(pop.members[i])) for i in idx]), 1
    else:
        pool = _as_pool(val_tasks)
        if len(pool) == 0:
            raise EvolutionError("evaluation needs at least one task")
        acc = accuracy_matrix(net, [pop.members[i] for i in idx], shard(len(pool), workers), hyper, pool)
        scores, n_tasks = acc.mean(axis=1), acc.shape[1]
    for i, s in zip(idx, scores):
        pop.fitness[i] = FitnessRecord(float(s), n_tasks, False, pop.generation)
    return list(pop.fitness)


def evolve(pop: Population, fitness, p_c: float = 0.5, p_m: float = 0.5, rng=None, *,
           elite_frac: float = 0.25, surrogate=None, oversample: int = 4) -> Population:
    """Next generation: ``ceil(K*elite_frac)`` elites, ``ceil(K/4)`` crossover
    children of distinct elite pairs, ``ceil(K/4)`` mutants of random elites
    and random genomes for the remainder, clamped to exactly ``K`` members.

    With a ``surrogate``, each offspring slot draws ``oversample`` candidates
    and keeps the one the surrogate ranks highest. Elites are never screened.
    """
    K = pop.K
    if K < 4:
        raise EvolutionError(f"population size K={K} is below 4")
    rng = np.random.default_rng() if rng is None else rng
    scores = np.array([f.mean_acc if isinstance(f, FitnessRecord) else float(f) for f in fitness])
    if len(scores) != len(pop):
        raise EvolutionError("fitness length does not match population")
    order = np.argsort(-scores, kind="stable")
    n_elite = min(math.ceil(K * elite_frac), len(pop), K)
    elites = [pop.members[i] for i in order[:n_elite]]
    records = [pop.fitness[i] for i in order[:n_elite]]
    n_cross = min(math.ceil(K / 4), K - n_elite)
    n_mut = min(math.ceil(K / 4), K - n_elite - n_cross)
    n_rand = K - n_elite - n_cross - n_mut
    cells, reduce = elites[0].cells, elites[0].reduce_positions

    def child_cross():
        if n_elite >= 2:
            i, j = rng.choice(n_elite, size=2, replace=False)
        else:
            i = j = 0
        return crossover(elites[i], elites[j], p_c, rng)

    def child_mut():
        return mutate(elites[rng.integers(n_elite)], p_m, rng)

    def child_rand():
        return random_code(cells, reduce, rng)

    def batch(make, n):
        if surrogate is None or n == 0:
            return [make() for _ in range(n)]
        from .predictor import screen

        pool = [make() for _ in range(n * oversample)]
        return screen(surrogate, pool, n)

    offspring = batch(child_cross, n_cross) + batch(child_mut, n_mut) + batch(child_rand, n_rand)
    members = elites + offspring
    assert len(members) == K and all(validate(m) for m in members)
    return Population(members, K, records + [None] * len(offspring), pop.generation + 1)


@dataclass
class GenerationLog:
    """One row per evolve round. With ``wallclock=False`` elapsed time is
    logged as 0 so that reruns write byte-identical files."""

    wallclock: bool = True
    rows: list[tuple] = field(default_factory=list)
    _t0: float = field(default_factory=time.perf_counter, repr=False)

    def record(self, generation, fitness, population_size, evals):
        f = np.asarray(fitness, dtype=np.float64)
        elapsed = time.perf_counter() - self._t0 if self.wallclock else 0.0
        self.rows.append((int(generation), float(f.max()), float(f.mean()), int(population_size),
                          int(evals), round(elapsed, 3)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.rows:
            w.writerow([r[0], repr(r[1]), repr(r[2]), r[3], r[4], r[5]])
        return buf.getvalue()

    def write(self, path):
        Path(path).write_text(self.to_csv())


@dataclass
class SearchSettings:
    E_evo: int = 1
    cadence: int = 4
    steps_per_epoch: int = 8
    p_c: float = 0.5
    p_m: float = 0.5
    elite_frac: float = 0.25
    reevaluate: bool = True
    train_weights: bool = True
    workers: int = 1
    val_tasks_per_eval: int | None = None  # None: the whole validation pool
    predictor_trees: int | None = None  # screen offspring with a forest fit on evaluated genomes


def meta_train_step(net, pop: Population, train_pool, hyper: MetaHyper, rng, workers: int = 1):
    """Sample ``B_arch`` members and ``B_task`` tasks per worker, then take one
    data-parallel meta step. Returns ``(query_loss, query_acc)``."""
    b_arch = min(hyper.B_arch, len(pop))
    codes = [pop.members[i] for i in rng.choice(len(pop), size=b_arch, replace=False)]
    n_tasks = hyper.B_task * workers
    if n_tasks > len(train_pool):
        raise EvolutionError(f"task pool of {len(train_pool)} cannot supply {n_tasks} tasks per step")
    tasks = sorted(int(t) for t in rng.choice(len(train_pool), size=n_tasks, replace=False))
    return parallel_meta_step(net, codes, shard(tasks, workers), hyper, train_pool)


def search(net, pop: Population, train_tasks, val_tasks, hyper: MetaHyper, settings: SearchSettings,
           rng=None, *, fitness_fn=None, surrogate=None, log: GenerationLog | None = None, on_round=None):
    """Meta continuous evolution. Every global meta step counts towards the
    cadence; after each ``cadence`` steps the population is evaluated and
    evolved. The returned population carries fresh fitness records.

    Returns ``(net, pop, log)``.
    """
    rng = np.random.default_rng() if rng is None else rng
    log = GenerationLog() if log is None else log
    train_pool, val_pool = _as_pool(train_tasks), _as_pool(val_tasks)
    if settings.cadence < 1:
        raise EvolutionError("cadence must be >= 1")

    def score(population, only=None):
        tasks = val_pool
        if fitness_fn is None and settings.val_tasks_per_eval is not None:
            n = min(settings.val_tasks_per_eval, len(val_pool))
            picks = sorted(int(t) for t in rng.choice(len(val_pool), size=n, replace=False))
            tasks = EpisodeList([val_pool.episode(t) for t in picks])
        evaluate(population, net, tasks, hyper, workers=min(settings.workers, len(tasks)),
                 fitness_fn=fitness_fn, only=only)

    history: list[tuple[ArchCode, float]] = []
    step = 0
    for _ in range(settings.E_evo):
        for _ in range(settings.steps_per_epoch):
            if settings.train_weights:
                meta_train_step(net, pop, train_pool, hyper, rng, settings.workers)
            step += 1
            if step % settings.cadence:
                continue
            stale = None if settings.reevaluate else [i for i, f in enumerate(pop.fitness) if f is None]
            score(pop, stale)
            evals = len(pop) if stale is None else len(stale)
            scores = pop.scores()
            history += list(zip(pop.members, scores.tolist()))
            if settings.predictor_trees and len(set(s for _, s in history)) >= 2:
                from .predictor import fit

                surrogate = fit(history, n_trees=settings.predictor_trees, seed=int(rng.integers(2**31)))
            pop = evolve(pop, scores, settings.p_c, settings.p_m, rng,
                         elite_frac=settings.elite_frac, surrogate=surrogate)
            log.record(pop.generation - 1, scores, len(pop), evals)
            if on_round is not None:
                on_round(pop, scores)
    score(pop)
    return net, pop, log
