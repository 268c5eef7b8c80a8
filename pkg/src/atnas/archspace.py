"""Integer-string architecture genomes and their genetic operators.

A genome holds 14 genes per cell. Genes of one cell split into four node
groups of sizes 2, 3, 4 and 5; every group has exactly two nonzero genes,
one per incoming edge that the intermediate node keeps. Gene ``0`` means the
edge is absent, ``1..7`` name the operation (see :class:`OpKind`).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .numkernel import CANDIDATE_OPS, GENES_PER_CELL, NODE_GROUPS, OpKind, block_size

N_OPS = len(CANDIDATE_OPS)
_GROUP_STARTS = [off for off, _ in NODE_GROUPS]


class GenomeError(ValueError):
    pass


def default_reduce_positions(cells: int) -> tuple[int, ...]:
    if cells < 1:
        raise GenomeError("need at least one cell")
    if cells == 1:
        return ()
    if cells == 2:
        return (1,)
    return tuple(sorted({cells // 3, 2 * cells // 3}))


@dataclass(frozen=True, eq=False)
class ArchCode:
    genes: np.ndarray
    cells: int
    reduce_positions: tuple[int, ...]

    def __post_init__(self):
        g = np.asarray(self.genes, dtype=np.int64).copy()
        g.setflags(write=False)
        object.__setattr__(self, "genes", g)
        object.__setattr__(self, "reduce_positions", tuple(sorted(int(r) for r in self.reduce_positions)))

    def __eq__(self, other):
        if not isinstance(other, ArchCode):
            return NotImplemented
        return (self.cells == other.cells and self.reduce_positions == other.reduce_positions
                and np.array_equal(self.genes, other.genes))

    def __hash__(self):
        return hash((self.cells, self.reduce_positions, self.genes.tobytes()))

    def __repr__(self):
        cells = " | ".join("".join(str(v) for v in self.cell(i)) for i in range(self.cells))
        return f"ArchCode({cells}; reduce={list(self.reduce_positions)})"

    def cell(self, i: int) -> np.ndarray:
        return self.genes[i * GENES_PER_CELL:(i + 1) * GENES_PER_CELL]

    def group(self, cell: int, node: int) -> np.ndarray:
        off, size = NODE_GROUPS[node]
        start = cell * GENES_PER_CELL + off
        return self.genes[start:start + size]

    def is_reduce(self, cell: int) -> bool:
        return cell in self.reduce_positions

    def selected(self):
        """Yield ``(cell, edge, OpKind)`` for every nonzero gene."""
        for i in np.flatnonzero(self.genes):
            yield int(i // GENES_PER_CELL), int(i % GENES_PER_CELL), OpKind(int(self.genes[i]))

    def same_shape(self, other: ArchCode) -> bool:
        return self.cells == other.cells and self.reduce_positions == other.reduce_positions


def validate(code) -> bool:
    """True iff ``code`` is a well-formed, constraint-satisfying genome."""
    try:
        genes = np.asarray(code.genes)
        cells = int(code.cells)
        reduce = tuple(code.reduce_positions)
    except (AttributeError, TypeError, ValueError):
        return False
    if cells < 1 or genes.ndim != 1 or genes.size != GENES_PER_CELL * cells:
        return False
    if any(r < 0 or r >= cells for r in reduce):
        return False
    if genes.min() < 0 or genes.max() > N_OPS:
        return False
    counts = np.add.reduceat(genes.reshape(cells, GENES_PER_CELL) != 0, _GROUP_STARTS, axis=1)
    return bool(np.all(counts == 2))


def _sample_genes(cells, rng):
    # per node group: two distinct edges (smallest of i.i.d. uniform keys), ops uniform over 1..7
    keys = rng.random((cells, GENES_PER_CELL))
    ops = rng.integers(1, N_OPS + 1, size=(cells, 2 * len(NODE_GROUPS)))
    genes = np.zeros((cells, GENES_PER_CELL), dtype=np.int64)
    rows = np.arange(cells)[:, None]
    for j, (off, size) in enumerate(NODE_GROUPS):
        edges = off + np.argsort(keys[:, off:off + size], axis=1)[:, :2]
        genes[rows, edges] = ops[:, 2 * j:2 * j + 2]
    return genes.ravel()


def random_code(cells: int, reduce_positions=None, rng: np.random.Generator | None = None) -> ArchCode:
    """Uniform sample: two distinct edges per node group, ops uniform over 1..7."""
    if cells < 1:
        raise GenomeError("need at least one cell")
    rng = np.random.default_rng() if rng is None else rng
    if reduce_positions is None:
        reduce_positions = default_reduce_positions(cells)
    return ArchCode(_sample_genes(cells, rng), cells, tuple(reduce_positions))


def _group_slices(cells):
    for c in range(cells):
        for off, size in NODE_GROUPS:
            start = c * GENES_PER_CELL + off
            yield slice(start, start + size), size


def crossover(a: ArchCode, b: ArchCode, p_c: float = 0.5, rng: np.random.Generator | None = None) -> ArchCode:
    """Child whose node groups are each copied wholesale from ``b`` with
    probability ``p_c``, otherwise from ``a``."""
    if not a.same_shape(b):
        raise GenomeError(f"parent shapes differ: {a.cells} vs {b.cells} cells")
    rng = np.random.default_rng() if rng is None else rng
    genes = a.genes.copy()
    for sl, _ in _group_slices(a.cells):
        if rng.random() < p_c:
            genes[sl] = b.genes[sl]
    return ArchCode(genes, a.cells, a.reduce_positions)


def mutate(a: ArchCode, p_m: float = 0.5, rng: np.random.Generator | None = None) -> ArchCode:
    """Resample each node group independently with probability ``p_m``."""
    rng = np.random.default_rng() if rng is None else rng
    hit = rng.random(a.cells * len(NODE_GROUPS)) < p_m
    fresh = _sample_genes(a.cells, rng)
    mask = np.repeat(hit, [size for _ in range(a.cells) for _, size in NODE_GROUPS])
    return ArchCode(np.where(mask, fresh, a.genes), a.cells, a.reduce_positions)


def channel_plan(cells: int, channels: int, reduce_positions) -> list[int]:
    """Per-node channel count of each cell; doubles at every reduction cell."""
    plan, c = [], channels
    for i in range(cells):
        if i in reduce_positions:
            c *= 2
        plan.append(c)
    return plan


def fixed_param_count(cells: int, channels: int, n_classes: int, reduce_positions, in_channels: int = 1) -> int:
    """Weights every subnet carries regardless of genome: stem, per-cell
    input preprocessing and the head."""
    plan = channel_plan(cells, channels, reduce_positions)
    total = block_size(OpKind.STEM_CONV, channels, in_channels=in_channels)
    prev_prev, prev = channels, channels
    for c in plan:
        total += block_size(OpKind.PREPROCESS, c, in_channels=prev_prev)
        total += block_size(OpKind.PREPROCESS, c, in_channels=prev)
        prev_prev, prev = prev, 4 * c
    total += block_size(OpKind.LINEAR_HEAD, 4 * plan[-1], n_classes=n_classes)
    return total


def param_count(code: ArchCode, channels: int, n_classes: int, in_channels: int = 1) -> int:
    """Exact weight count of the subnet ``code`` materialises."""
    plan = channel_plan(code.cells, channels, code.reduce_positions)
    total = fixed_param_count(code.cells, channels, n_classes, code.reduce_positions, in_channels)
    for cell, _, kind in code.selected():
        total += block_size(kind, plan[cell])
    return total


def serialize(code: ArchCode) -> str:
    return json.dumps({"cells": code.cells, "reduce": list(code.reduce_positions),
                       "genes": [int(g) for g in code.genes]})


def from_dict(doc) -> ArchCode:
    if not isinstance(doc, dict):
        raise GenomeError("genome document must be a JSON object")
    missing = {"cells", "reduce", "genes"} - doc.keys()
    if missing:
        raise GenomeError(f"genome document lacks {sorted(missing)}")
    cells, reduce, genes = doc["cells"], doc["reduce"], doc["genes"]
    if not isinstance(cells, int) or cells < 1:
        raise GenomeError(f"bad cell count {cells!r}")
    if not isinstance(genes, list) or not all(isinstance(g, int) for g in genes):
        raise GenomeError("genes must be a list of integers")
    if len(genes) != GENES_PER_CELL * cells:
        raise GenomeError(f"expected {GENES_PER_CELL * cells} genes for {cells} cells, got {len(genes)}")
    if not isinstance(reduce, list) or not all(isinstance(r, int) for r in reduce):
        raise GenomeError("reduce must be a list of integers")
    code = ArchCode(np.array(genes), cells, tuple(reduce))
    if not validate(code):
        raise GenomeError("genome violates the node-group constraint")
    return code


def deserialize(text: str) -> ArchCode:
    if not text or not text.strip():
        raise GenomeError("empty genome document")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GenomeError(f"malformed genome JSON: {exc}") from exc
    return from_dict(doc)


def one_hot(code: ArchCode) -> np.ndarray:
    """Categorical encoding: 8 indicator features per gene position."""
    out = np.zeros((code.genes.size, N_OPS + 1))
    out[np.arange(code.genes.size), code.genes] = 1.0
    return out.ravel()
