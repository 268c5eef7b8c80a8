"""Weight-sharing supernet, subnet selection and the ATSN checkpoint format.

Every ``(cell, edge, op)`` triple owns one :class:`ParamBlock`. A genome
selects eight of them per cell; the stem, the two 1x1 input preprocessing
blocks of every cell and the classifier head are shared by all subnets.

Block keys::

    ("stem",)
    ("pre", cell, 0 | 1)
    ("op", cell, edge, OpKind)
    ("head",)
"""

from __future__ import annotations

import struct
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType

import numpy as np

from .archspace import ArchCode, channel_plan, default_reduce_positions, validate
from .numkernel import (
    CANDIDATE_OPS,
    GENES_PER_CELL,
    OpKind,
    ParamBlock,
    cell_backward,
    cell_forward,
    head_forward,
    make_block,
    op_backward,
    op_forward,
    softmax_cross_entropy,
)

CHECKPOINT_MAGIC = b"ATSN"
CHECKPOINT_VERSION = 1

STEM = ("stem",)
HEAD = ("head",)


class SelectionError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Geometry:
    cells: int
    channels: int
    n_classes: int
    reduce_positions: tuple[int, ...]
    in_channels: int = 1

    @property
    def plan(self) -> list[int]:
        return channel_plan(self.cells, self.channels, self.reduce_positions)

    def input_widths(self, cell: int) -> tuple[int, int]:
        """Channel counts of the two raw inputs of ``cell``."""
        widths = [self.channels] + [4 * c for c in self.plan]
        return widths[max(cell - 1, 0)], widths[cell]


def fixed_keys(geom: Geometry) -> list[tuple]:
    keys = [STEM]
    for i in range(geom.cells):
        keys += [("pre", i, 0), ("pre", i, 1)]
    return keys + [HEAD]


def canonical_keys(geom: Geometry) -> list[tuple]:
    """Checkpoint order: stem, then per cell its preprocessing blocks and
    every (edge, op) block, then the head."""
    keys = [STEM]
    for i in range(geom.cells):
        keys += [("pre", i, 0), ("pre", i, 1)]
        keys += [("op", i, e, k) for e in range(GENES_PER_CELL) for k in CANDIDATE_OPS]
    return keys + [HEAD]


def selected_keys(code: ArchCode) -> list[tuple]:
    return [("op", c, e, k) for c, e, k in code.selected()]


def _build_block(key, geom: Geometry, rng):
    plan = geom.plan
    if key == STEM:
        return make_block(OpKind.STEM_CONV, geom.channels, rng, in_channels=geom.in_channels)
    if key == HEAD:
        return make_block(OpKind.LINEAR_HEAD, 4 * plan[-1], rng, n_classes=geom.n_classes)
    if key[0] == "pre":
        _, cell, which = key
        return make_block(OpKind.PREPROCESS, plan[cell], rng, in_channels=geom.input_widths(cell)[which])
    _, cell, _, kind = key
    return make_block(kind, plan[cell], rng)


class SuperNet:
    """Shared parameter store over the whole search space.

    ``version`` increments on every write through this class so callers can
    assert that a phase left the shared weights alone.
    """

    def __init__(self, cells: int = 2, channels: int = 8, n_classes: int = 5, *,
                 reduce_positions=None, in_channels: int = 1, rng: np.random.Generator | None = None):
        if reduce_positions is None:
            reduce_positions = default_reduce_positions(cells)
        self.geometry = Geometry(cells, channels, n_classes, tuple(sorted(reduce_positions)), in_channels)
        rng = np.random.default_rng(0) if rng is None else rng
        self.blocks: dict[tuple, ParamBlock] = {k: _build_block(k, self.geometry, rng)
                                                for k in canonical_keys(self.geometry)}
        self.version = 0
        self.optimizer_state = None

    @property
    def cells(self):
        return self.geometry.cells

    @property
    def channels(self):
        return self.geometry.channels

    @property
    def n_classes(self):
        return self.geometry.n_classes

    def candidate_block_count(self) -> int:
        return sum(1 for k in self.blocks if k[0] == "op")

    def zero_grad(self):
        for b in self.blocks.values():
            b.zero_grad()

    def weights_snapshot(self) -> dict:
        return {k: {n: t.copy() for n, t in b.tensors.items()} for k, b in self.blocks.items()}

    def matches(self, code: ArchCode) -> bool:
        g = self.geometry
        return code.cells == g.cells and code.reduce_positions == g.reduce_positions

    def bump(self):
        self.version += 1


class SubnetView:
    """Read-through window on the blocks one genome selects. No weights are
    copied; writes through :attr:`blocks` land in the shared store."""

    __slots__ = ("net", "code", "_blocks")

    def __init__(self, net: SuperNet, code: ArchCode):
        self.net = net
        self.code = code
        keys = fixed_keys(net.geometry) + selected_keys(code)
        self._blocks = MappingProxyType({k: net.blocks[k] for k in keys})

    @property
    def blocks(self) -> Mapping:
        return self._blocks

    @property
    def geometry(self) -> Geometry:
        return self.net.geometry

    def candidate_blocks(self) -> dict:
        return {k: b for k, b in self._blocks.items() if k[0] == "op"}

    def clone_weights(self) -> Subnet:
        return clone_subnet_weights(self)


def select(net: SuperNet, code: ArchCode) -> SubnetView:
    if not validate(code):
        raise SelectionError(f"invalid genome {code!r}")
    if not net.matches(code):
        raise SelectionError(
            f"genome shape (cells={code.cells}, reduce={list(code.reduce_positions)}) does not match "
            f"supernet (cells={net.cells}, reduce={list(net.geometry.reduce_positions)})")
    return SubnetView(net, code)


class _CellParams(Mapping):
    # (edge, kind) -> block view over one cell of a block dict
    def __init__(self, blocks, cell):
        self._blocks, self._cell = blocks, cell

    def __getitem__(self, key):
        edge, kind = key
        return self._blocks[("op", self._cell, edge, kind)]

    def __iter__(self):
        return ((k[2], k[3]) for k in self._blocks if k[0] == "op" and k[1] == self._cell)

    def __len__(self):
        return sum(1 for _ in self)


@dataclass
class Subnet:
    """Detached copy of one subnet's weights, trainable without touching the
    supernet."""

    code: ArchCode
    geometry: Geometry
    blocks: dict[tuple, ParamBlock]
    _trace: list = field(default_factory=list, repr=False)

    def clone(self) -> Subnet:
        return Subnet(self.code, self.geometry, {k: b.copy() for k, b in self.blocks.items()})

    def clone_weights(self) -> Subnet:
        return self.clone()

    def weight_count(self) -> int:
        return sum(b.size for b in self.blocks.values())

    def zero_grad(self):
        for b in self.blocks.values():
            b.zero_grad()

    def forward(self, x: np.ndarray) -> np.ndarray:
        geom, blocks = self.geometry, self.blocks
        states = [op_forward(OpKind.STEM_CONV, blocks[STEM], x, 1)]
        trace = []
        for i in range(geom.cells):
            s0 = states[max(i - 1, 0)]
            s1 = states[i]
            stride0 = 2 if (i - 1) in geom.reduce_positions else 1
            p0 = op_forward(OpKind.PREPROCESS, blocks[("pre", i, 0)], s0, stride0)
            p1 = op_forward(OpKind.PREPROCESS, blocks[("pre", i, 1)], s1, 1)
            states.append(cell_forward(_CellParams(blocks, i), self.code.cell(i), (p0, p1), i in geom.reduce_positions))
            trace.append((p0.shape, p1.shape))
        self._trace = trace
        logits, _ = head_forward(blocks[HEAD], states[-1])
        return logits

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        """Accumulate parameter grads for the last forward; returns d/d input."""
        geom, blocks = self.geometry, self.blocks
        gstates = [None] * (geom.cells + 1)
        gstates[-1] = op_backward(OpKind.LINEAR_HEAD, blocks[HEAD], grad_logits)
        for i in reversed(range(geom.cells)):
            gp0, gp1 = cell_backward(_CellParams(blocks, i), self.code.cell(i), gstates[i + 1], self._trace[i])
            g0 = op_backward(OpKind.PREPROCESS, blocks[("pre", i, 0)], gp0)
            g1 = op_backward(OpKind.PREPROCESS, blocks[("pre", i, 1)], gp1)
            j = max(i - 1, 0)
            gstates[j] = g0 if gstates[j] is None else gstates[j] + g0
            gstates[i] = g1 if gstates[i] is None else gstates[i] + g1
        return op_backward(OpKind.STEM_CONV, blocks[STEM], gstates[0])

    def loss_and_grad(self, x, y):
        """Mean cross-entropy on ``(x, y)``; returns ``(loss, grads, logits)``
        with ``grads`` keyed like :attr:`blocks`."""
        self.zero_grad()
        logits = self.forward(x)
        loss, dlogits = softmax_cross_entropy(logits, y)
        self.backward(dlogits)
        grads = {k: {n: g.copy() for n, g in b.grads.items()} for k, b in self.blocks.items() if b.grads}
        return loss, grads, logits

    def loss(self, x, y) -> float:
        return softmax_cross_entropy(self.forward(x), y)[0]

    def accuracy(self, x, y) -> float:
        return float(np.mean(self.forward(x).argmax(axis=1) == np.asarray(y)))

    def sgd_step(self, grads, lr: float):
        for k, named in grads.items():
            tensors = self.blocks[k].tensors
            for n, g in named.items():
                tensors[n] -= lr * g


def clone_subnet_weights(view) -> Subnet:
    """Deep copy of the selected blocks; training the copy leaves the
    supernet untouched."""
    if isinstance(view, Subnet):
        return view.clone()
    return Subnet(view.code, view.geometry, {k: b.copy() for k, b in view.blocks.items()})


def scatter_grads(net: SuperNet, code: ArchCode, grads: Mapping):
    """Add detached grads into the supernet accumulators of ``code``'s blocks."""
    allowed = set(fixed_keys(net.geometry)) | set(selected_keys(code))
    for key in grads:
        if key not in allowed:
            raise SelectionError(f"block {key} is not selected by {code!r}")
    for key, named in grads.items():
        acc = net.blocks[key].grads
        for name, g in named.items():
            if name not in acc or acc[name].shape != np.shape(g):
                raise SelectionError(f"grad shape mismatch at {key}/{name}: {np.shape(g)} vs "
                                     f"{acc[name].shape if name in acc else None}")
    for key, named in grads.items():
        acc = net.blocks[key].grads
        for name, g in named.items():
            acc[name] += g
    net.bump()


def warmup(net: SuperNet, tasks, epochs: int, rng: np.random.Generator, hyper=None, steps_per_epoch: int = 10):
    """Meta-train on uniformly sampled genomes before a population exists.

    ``tasks`` is a task pool (anything with ``episode(i)`` and ``len``).
    Returns the number of meta-steps taken.
    """
    from .archspace import random_code
    from .metaopt import MetaHyper, meta_step

    hyper = MetaHyper() if hyper is None else hyper
    steps = 0
    for _ in range(epochs):
        for _ in range(steps_per_epoch):
            codes = [random_code(net.cells, net.geometry.reduce_positions, rng) for _ in range(hyper.B_arch)]
            idx = rng.choice(len(tasks), size=hyper.B_task, replace=len(tasks) < hyper.B_task)
            batch = [(code, tasks.episode(int(t))) for t in idx for code in codes]
            meta_step(net, batch, hyper)
            steps += 1
    return steps


# ---------------------------------------------------------------- checkpoints

def checkpoint_bytes(net: SuperNet) -> bytes:
    g = net.geometry
    parts = [CHECKPOINT_MAGIC, struct.pack("<IIII", CHECKPOINT_VERSION, g.cells, g.channels, g.n_classes)]
    for key in canonical_keys(g):
        flat = net.blocks[key].flat().astype("<f8")
        parts.append(struct.pack("<I", flat.size))
        parts.append(flat.tobytes())
    return b"".join(parts)


def save_checkpoint(net: SuperNet, path):
    Path(path).write_bytes(checkpoint_bytes(net))


def checkpoint_from_bytes(data: bytes, reduce_positions=None) -> SuperNet:
    if len(data) < 20 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not an ATSN checkpoint (bad magic)")
    version, cells, channels, n_classes = struct.unpack_from("<IIII", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 20
    if len(data) < pos + 4:
        raise CheckpointError("truncated checkpoint")
    (stem_len,) = struct.unpack_from("<I", data, pos)
    # stem = channels * in_channels * 9 conv weights + 2 * channels norm params
    in_channels, rem = divmod(stem_len - 2 * channels, 9 * channels)
    if rem or in_channels < 1:
        raise CheckpointError(f"stem block length {stem_len} inconsistent with {channels} channels")
    net = SuperNet(cells, channels, n_classes, reduce_positions=reduce_positions, in_channels=in_channels,
                   rng=np.random.default_rng(0))
    for key in canonical_keys(net.geometry):
        if len(data) < pos + 4:
            raise CheckpointError(f"truncated checkpoint at block {key}")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        block = net.blocks[key]
        if n != block.size:
            raise CheckpointError(f"block {key} has {n} values, expected {block.size}")
        if len(data) < pos + 8 * n:
            raise CheckpointError(f"truncated checkpoint at block {key}")
        block.load_flat(np.frombuffer(data, dtype="<f8", count=n, offset=pos).astype(np.float64))
        pos += 8 * n
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after the last block")
    return net


def load_checkpoint(path, reduce_positions=None) -> SuperNet:
    return checkpoint_from_bytes(Path(path).read_bytes(), reduce_positions)
