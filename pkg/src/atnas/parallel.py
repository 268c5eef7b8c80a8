"""Deterministic data-parallel meta-search.

The task pool is split round-robin into one shard per worker. Each phase
follows one contract: every worker reads the same supernet snapshot and
computes independently, all workers join a barrier, then a single reducer
applies the update. Contributions are reduced in ascending task index
(then genome index) order, which does not depend on how tasks were sharded,
so any worker count produces bit-identical weights.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .metaopt import MetaHyper, accumulate, adapt_and_score, apply_update, inner_adapt, meta_grad
from .supernet import SuperNet, select

ENV_WORKERS = "ATNAS_WORKERS"


class ParallelError(RuntimeError):
    pass


@dataclass(frozen=True)
class WorkerPlan:
    workers: int
    shards: tuple[tuple[int, ...], ...]

    @property
    def tasks(self) -> list[int]:
        return sorted(t for s in self.shards for t in s)


def shard(task_pool, workers: int) -> WorkerPlan:
    """Round-robin assignment of task indices to ``workers`` shards.

    ``task_pool`` may be a sized pool or a sequence of task indices.
    """
    if workers < 1:
        raise ParallelError("need at least one worker")
    indices = list(range(task_pool)) if isinstance(task_pool, int) else (
        list(task_pool) if not hasattr(task_pool, "episode") else list(range(len(task_pool))))
    if workers > len(indices):
        raise ParallelError(f"{workers} workers for a pool of {len(indices)} tasks")
    return WorkerPlan(workers, tuple(tuple(indices[w::workers]) for w in range(workers)))


def resolve_workers(configured: int = 1) -> int:
    env = os.environ.get(ENV_WORKERS)
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ParallelError(f"{ENV_WORKERS} must be an integer, got {env!r}") from None
        if value < 1:
            raise ParallelError(f"{ENV_WORKERS} must be >= 1")
        return value
    return configured


def _run(plan: WorkerPlan, fn):
    # fn(shard) -> list; results returned in worker order
    if plan.workers == 1:
        return [fn(plan.shards[0])]
    with ThreadPoolExecutor(max_workers=plan.workers) as pool:
        futures = [pool.submit(fn, s) for s in plan.shards]
        out, errors = [], []
        for f in futures:
            try:
                out.append(f.result())
            except Exception as exc:  # noqa: BLE001 - re-raised below as a group
                errors.append(exc)
        if errors:
            raise ParallelError(f"{len(errors)} worker(s) failed: {errors[0]!r}") from errors[0]
        return out


def parallel_meta_step(net: SuperNet, codes, plan: WorkerPlan, hyper: MetaHyper, pool):
    """One meta update where every worker adapts all ``codes`` on its shard.

    The gradient sum is scaled by ``1 / (workers * B_arch * B_task)``, i.e.
    one over the total number of (genome, task) pairs. A failing worker
    aborts the step before any weight is written.
    """
    version = net.version

    def work(task_ids):
        items = []
        for t in task_ids:
            ep = pool.episode(t)
            for ci, code in enumerate(codes):
                result = inner_adapt(select(net, code), ep.support, hyper)
                grads = meta_grad(result, ep.query)
                items.append(((t, ci), code, grads, result.query_loss, result.query_acc))
        return items

    gathered = [item for part in _run(plan, work) for item in part]
    if net.version != version:
        raise ParallelError("supernet changed during the compute phase")
    gathered.sort(key=lambda item: item[0])
    net.zero_grad()
    touched = accumulate(net, ((code, grads) for _, code, grads, _, _ in gathered))
    apply_update(net, touched, len(gathered), hyper)
    return float(np.mean([it[3] for it in gathered])), float(np.mean([it[4] for it in gathered]))


def accuracy_matrix(net: SuperNet, codes, plan: WorkerPlan, hyper: MetaHyper, pool) -> np.ndarray:
    """``acc[member, j]`` = query accuracy of member on the j-th task of the
    plan in ascending task order."""
    version = net.version

    def work(task_ids):
        views = [select(net, c) for c in codes]
        return [(t, [adapt_and_score(v, pool.episode(t), hyper) for v in views]) for t in task_ids]

    rows = sorted((row for part in _run(plan, work) for row in part), key=lambda r: r[0])
    if net.version != version:
        raise ParallelError("supernet changed during evaluation")
    return np.ascontiguousarray(np.array([accs for _, accs in rows], dtype=np.float64).T)


def parallel_evaluate(net: SuperNet, codes, plan: WorkerPlan, hyper: MetaHyper, pool) -> np.ndarray:
    """Pooled mean query accuracy of every genome over all tasks in ``plan``.

    Equal to weighting each worker's mean by its shard size, but computed
    from the per-task values so the result does not depend on the sharding.
    """
    return accuracy_matrix(net, codes, plan, hyper, pool).mean(axis=1)


def pooled_mean(worker_means, shard_sizes) -> float:
    """Shard-size-weighted mean of per-worker mean fitness values."""
    means = np.asarray(worker_means, dtype=np.float64)
    sizes = np.asarray(shard_sizes, dtype=np.float64)
    return float((means * sizes).sum() / sizes.sum())
