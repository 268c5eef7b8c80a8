"""Dense float64 kernels with hand-written backward passes.

Only the operations a DARTS-style cell needs are covered: separable and
dilated convolutions, 3x3 pooling, identity, the stem convolution, the 1x1
input preprocessing of each cell, and the linear classifier head.

Tensors are plain ``numpy`` arrays laid out ``(batch, channels, height,
width)``. Every forward call stashes what its backward needs on the
:class:`ParamBlock` it ran with, so a block must never be forwarded from two
threads at once. Inner loops always run on detached copies, which keeps that
rule easy to honour.
"""

from __future__ import annotations

import enum
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import _fastconv

NORM_EPS = 1e-8

# node groups of one cell: (offset, size); node i reads from states 0..i+1
NODE_GROUPS = ((0, 2), (2, 3), (5, 4), (9, 5))
GENES_PER_CELL = 14


class OpKind(enum.IntEnum):
    """Operation kinds. Values 1..7 double as the gene alphabet."""

    MAX_POOL_3 = 1
    AVG_POOL_3 = 2
    IDENTITY = 3
    SEP_CONV_3 = 4
    SEP_CONV_5 = 5
    DIL_CONV_3 = 6
    DIL_CONV_5 = 7
    # never selected by a genome
    STEM_CONV = 8
    PREPROCESS = 9
    LINEAR_HEAD = 10


CANDIDATE_OPS = tuple(OpKind(v) for v in range(1, 8))
WEIGHTLESS = frozenset({OpKind.MAX_POOL_3, OpKind.AVG_POOL_3, OpKind.IDENTITY})
_KERNEL = {
    OpKind.SEP_CONV_3: 3,
    OpKind.SEP_CONV_5: 5,
    OpKind.DIL_CONV_3: 3,
    OpKind.DIL_CONV_5: 5,
}


class KernelError(ValueError):
    """Raised for invalid inputs to a kernel operation."""

    def __init__(self, op, message, dims=None):
        self.op = op
        self.dims = dims
        name = op.name if isinstance(op, OpKind) else str(op)
        detail = f" (dims: {dims})" if dims is not None else ""
        super().__init__(f"{name}: {message}{detail}")


@dataclass
class ParamBlock:
    """Weights of one operation instance plus same-shaped grad accumulators."""

    kind: OpKind
    tensors: dict[str, np.ndarray]
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    uses: int = 0
    _saved: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for name, t in self.tensors.items():
            if name not in self.grads:
                self.grads[name] = np.zeros_like(t)

    @property
    def size(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> ParamBlock:
        """Deep copy of the weights; grads start at zero, counters reset."""
        return ParamBlock(self.kind, {k: v.copy() for k, v in self.tensors.items()})

    def flat(self) -> np.ndarray:
        if not self.tensors:
            return np.zeros(0)
        return np.concatenate([t.ravel() for t in self.tensors.values()])

    def load_flat(self, data: np.ndarray):
        if data.size != self.size:
            raise KernelError(self.kind, "flat parameter length mismatch", (data.size, self.size))
        pos = 0
        for t in self.tensors.values():
            t[...] = data[pos:pos + t.size].reshape(t.shape)
            pos += t.size


def _kaiming(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _conv_unit(rng, c, k, suffix=""):
    return {
        f"dw{suffix}": _kaiming(rng, (c, k, k), k * k),
        f"pw{suffix}": _kaiming(rng, (c, c), c),
        f"gamma{suffix}": np.ones(c),
        f"beta{suffix}": np.zeros(c),
    }


def make_block(kind: OpKind, channels: int, rng: np.random.Generator, *,
               in_channels: int | None = None, n_classes: int | None = None) -> ParamBlock:
    """Freshly initialised block for ``kind`` operating on ``channels`` channels.

    ``in_channels`` is needed for the stem and preprocessing convolutions,
    ``n_classes`` for the head (whose ``channels`` is the feature width).
    """
    kind = OpKind(kind)
    c = channels
    if kind in WEIGHTLESS:
        tensors = {}
    elif kind in (OpKind.SEP_CONV_3, OpKind.SEP_CONV_5):
        k = _KERNEL[kind]
        tensors = {**_conv_unit(rng, c, k, "1"), **_conv_unit(rng, c, k, "2")}
    elif kind in (OpKind.DIL_CONV_3, OpKind.DIL_CONV_5):
        tensors = _conv_unit(rng, c, _KERNEL[kind])
    elif kind == OpKind.STEM_CONV:
        tensors = {
            "w": _kaiming(rng, (c, in_channels, 3, 3), in_channels * 9),
            "gamma": np.ones(c),
            "beta": np.zeros(c),
        }
    elif kind == OpKind.PREPROCESS:
        tensors = {
            "w": _kaiming(rng, (c, in_channels), in_channels),
            "gamma": np.ones(c),
            "beta": np.zeros(c),
        }
    elif kind == OpKind.LINEAR_HEAD:
        bound = 1.0 / np.sqrt(c)
        tensors = {"w": rng.uniform(-bound, bound, size=(n_classes, c)), "b": np.zeros(n_classes)}
    else:  # pragma: no cover
        raise KernelError(kind, "unknown kind")
    return ParamBlock(kind, tensors)


def block_size(kind: OpKind, channels: int, *, in_channels: int = 0, n_classes: int = 0) -> int:
    """Closed-form weight count of a block, without building it."""
    kind = OpKind(kind)
    c = channels
    if kind in WEIGHTLESS:
        return 0
    if kind in _KERNEL:
        k = _KERNEL[kind]
        unit = c * k * k + c * c + 2 * c
        return 2 * unit if kind in (OpKind.SEP_CONV_3, OpKind.SEP_CONV_5) else unit
    if kind == OpKind.STEM_CONV:
        return c * in_channels * 9 + 2 * c
    if kind == OpKind.PREPROCESS:
        return c * in_channels + 2 * c
    if kind == OpKind.LINEAR_HEAD:
        return n_classes * c + n_classes
    raise KernelError(kind, "unknown kind")


# ---------------------------------------------------------------- primitives

def _out_len(n, stride):
    return (n - 1) // stride + 1


def _window(xp, a, b, stride, ho, wo):
    return xp[:, :, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride]


def _relu(x):
    return np.maximum(x, 0.0)


def _depthwise(x, w, stride, dil):
    n, c, h, wd = x.shape
    k = w.shape[-1]
    p = dil * (k - 1) // 2
    ho, wo = _out_len(h, stride), _out_len(wd, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    if _fastconv.AVAILABLE:
        return _fastconv.depthwise_fwd(xp, np.ascontiguousarray(w), stride, dil, ho, wo), xp
    out = np.zeros((n, c, ho, wo))
    for a in range(k):
        for b in range(k):
            out += w[None, :, a, b, None, None] * _window(xp, a * dil, b * dil, stride, ho, wo)
    return out, xp


def _depthwise_back(g, xp, w, stride, dil, in_shape):
    k = w.shape[-1]
    p = dil * (k - 1) // 2
    ho, wo = g.shape[2], g.shape[3]
    h, wd = in_shape[2], in_shape[3]
    if _fastconv.AVAILABLE:
        gxp, gw = _fastconv.depthwise_bwd(np.ascontiguousarray(g), xp, np.ascontiguousarray(w), stride, dil)
        return gxp[:, :, p:p + h, p:p + wd], gw
    gw = np.empty_like(w)
    gxp = np.zeros_like(xp)
    for a in range(k):
        for b in range(k):
            sl = _window(xp, a * dil, b * dil, stride, ho, wo)
            gw[:, a, b] = np.einsum("nchw,nchw->c", g, sl)
            _window(gxp, a * dil, b * dil, stride, ho, wo)[...] += w[None, :, a, b, None, None] * g
    return gxp[:, :, p:p + h, p:p + wd], gw


def _pointwise(x, w):
    # (N,C,H,W) x (O,C) -> (N,O,H,W)
    return np.ascontiguousarray(np.moveaxis(np.tensordot(w, x, axes=([1], [1])), 0, 1))


def _pointwise_back(g, x, w):
    gw = np.tensordot(g, x, axes=([0, 2, 3], [0, 2, 3]))
    gx = np.ascontiguousarray(np.moveaxis(np.tensordot(w, g, axes=([0], [1])), 0, 1))
    return gx, gw


def _norm(x, gamma, beta):
    mean = x.mean(axis=(0, 2, 3), keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = centered * inv
    return xhat * gamma[None, :, None, None] + beta[None, :, None, None], (xhat, inv)


def _norm_back(g, cache, gamma):
    xhat, inv = cache
    m = g.shape[0] * g.shape[2] * g.shape[3]
    ggamma = np.einsum("nchw,nchw->c", g, xhat)
    gbeta = g.sum(axis=(0, 2, 3))
    gxhat = g * gamma[None, :, None, None]
    s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
    s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    gx = inv / m * (m * gxhat - s1 - xhat * s2)
    return gx, ggamma, gbeta


def batch_norm(x: np.ndarray, gamma: np.ndarray | None = None, beta: np.ndarray | None = None) -> np.ndarray:
    """Normalise per channel with the current batch's statistics."""
    c = x.shape[1]
    gamma = np.ones(c) if gamma is None else gamma
    beta = np.zeros(c) if beta is None else beta
    return _norm(x, gamma, beta)[0]


def batch_norm_grad(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, grad_out: np.ndarray):
    """Gradients ``(d_x, d_gamma, d_beta)`` of :func:`batch_norm`."""
    _, cache = _norm(x, gamma, beta)
    return _norm_back(grad_out, cache, gamma)


def _conv_unit_fwd(x, t, suffix, stride, dil):
    r = _relu(x)
    d, xp = _depthwise(r, t[f"dw{suffix}"], stride, dil)
    p = _pointwise(d, t[f"pw{suffix}"])
    y, ncache = _norm(p, t[f"gamma{suffix}"], t[f"beta{suffix}"])
    return y, (x, xp, d, ncache, stride, dil)


def _conv_unit_back(g, cache, t, grads, suffix):
    x, xp, d, ncache, stride, dil = cache
    gp, ggamma, gbeta = _norm_back(g, ncache, t[f"gamma{suffix}"])
    gd, gpw = _pointwise_back(gp, d, t[f"pw{suffix}"])
    gr, gdw = _depthwise_back(gd, xp, t[f"dw{suffix}"], stride, dil, x.shape)
    grads[f"gamma{suffix}"] += ggamma
    grads[f"beta{suffix}"] += gbeta
    grads[f"pw{suffix}"] += gpw
    grads[f"dw{suffix}"] += gdw
    return gr * (x > 0)


def _pool_windows(x, stride, fill):
    h, w = x.shape[2], x.shape[3]
    ho, wo = _out_len(h, stride), _out_len(w, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=fill)
    return xp, ho, wo


def _max_pool(x, stride):
    xp, ho, wo = _pool_windows(x, stride, -np.inf)
    stack = np.stack([_window(xp, a, b, stride, ho, wo) for a in range(3) for b in range(3)])
    idx = stack.argmax(axis=0)
    out = np.take_along_axis(stack, idx[None], axis=0)[0]
    return out, (x.shape, xp.shape, idx, stride)


def _max_pool_back(g, cache):
    shape, pshape, idx, stride = cache
    gxp = np.zeros(pshape)
    ho, wo = g.shape[2], g.shape[3]
    for a in range(3):
        for b in range(3):
            _window(gxp, a, b, stride, ho, wo)[...] += g * (idx == a * 3 + b)
    return gxp[:, :, 1:1 + shape[2], 1:1 + shape[3]]


def _avg_counts(h, w, stride):
    # number of in-bounds pixels under each window (padding excluded)
    ones = np.pad(np.ones((1, 1, h, w)), ((0, 0), (0, 0), (1, 1), (1, 1)))
    ho, wo = _out_len(h, stride), _out_len(w, stride)
    return sum(_window(ones, a, b, stride, ho, wo) for a in range(3) for b in range(3))


def _avg_pool(x, stride):
    xp, ho, wo = _pool_windows(x, stride, 0.0)
    total = sum(_window(xp, a, b, stride, ho, wo) for a in range(3) for b in range(3))
    counts = _avg_counts(x.shape[2], x.shape[3], stride)
    return total / counts, (x.shape, xp.shape, counts, stride)


def _avg_pool_back(g, cache):
    shape, pshape, counts, stride = cache
    gs = g / counts
    gxp = np.zeros(pshape)
    ho, wo = g.shape[2], g.shape[3]
    for a in range(3):
        for b in range(3):
            _window(gxp, a, b, stride, ho, wo)[...] += gs
    return gxp[:, :, 1:1 + shape[2], 1:1 + shape[3]]


# ---------------------------------------------------------------- op surface

def _check_input(kind, params, x, stride):
    if params.kind != kind:
        raise KernelError(kind, f"parameter block is of kind {params.kind.name}")
    if x.ndim != 4:
        raise KernelError(kind, "expected a 4-d (batch, channels, height, width) input", x.shape)
    if stride not in (1, 2):
        raise KernelError(kind, f"stride must be 1 or 2, got {stride}")
    if not np.all(np.isfinite(x)):
        raise KernelError(kind, "non-finite input")
    t = params.tensors
    if kind in _KERNEL:
        key = "dw1" if "dw1" in t else "dw"
        if t[key].shape[0] != x.shape[1]:
            raise KernelError(kind, "channel mismatch", {"input": x.shape[1], "weights": t[key].shape[0]})
    elif kind in (OpKind.STEM_CONV, OpKind.PREPROCESS):
        if t["w"].shape[1] != x.shape[1]:
            raise KernelError(kind, "channel mismatch", {"input": x.shape[1], "weights": t["w"].shape[1]})


def op_forward(kind: OpKind, params: ParamBlock, x: np.ndarray, stride: int = 1) -> np.ndarray:
    """Run one operation; output spatial size is ``ceil(size / stride)``."""
    kind = OpKind(kind)
    if kind == OpKind.LINEAR_HEAD:
        raise KernelError(kind, "use head_forward for the classifier head")
    _check_input(kind, params, x, stride)
    t = params.tensors
    params.uses += 1
    if kind == OpKind.IDENTITY:
        out = x if stride == 1 else x[:, :, ::2, ::2]
        saved = (x.shape, stride)
    elif kind == OpKind.MAX_POOL_3:
        out, saved = _max_pool(x, stride)
    elif kind == OpKind.AVG_POOL_3:
        out, saved = _avg_pool(x, stride)
    elif kind in (OpKind.SEP_CONV_3, OpKind.SEP_CONV_5):
        y, c1 = _conv_unit_fwd(x, t, "1", stride, 1)
        out, c2 = _conv_unit_fwd(y, t, "2", 1, 1)
        saved = (c1, c2)
    elif kind in (OpKind.DIL_CONV_3, OpKind.DIL_CONV_5):
        out, saved = _conv_unit_fwd(x, t, "", stride, 2)
    elif kind == OpKind.STEM_CONV:
        w = t["w"]
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ho, wo = _out_len(x.shape[2], stride), _out_len(x.shape[3], stride)
        conv = np.zeros((x.shape[0], w.shape[0], ho, wo))
        for a in range(3):
            for b in range(3):
                conv += _pointwise(_window(xp, a, b, stride, ho, wo), w[:, :, a, b])
        out, ncache = _norm(conv, t["gamma"], t["beta"])
        saved = (x.shape, xp, ncache, stride)
    elif kind == OpKind.PREPROCESS:
        r = _relu(x)
        rs = r if stride == 1 else r[:, :, ::2, ::2]
        p = _pointwise(rs, t["w"])
        out, ncache = _norm(p, t["gamma"], t["beta"])
        saved = (x, rs, ncache, stride)
    else:  # pragma: no cover
        raise KernelError(kind, "unsupported kind")
    params._saved = saved
    return out


def _take_saved(kind, params):
    saved = params._saved
    if saved is None:
        raise KernelError(kind, "backward called without a matching forward")
    params._saved = None
    return saved


def op_backward(kind: OpKind, params: ParamBlock, grad_out: np.ndarray) -> np.ndarray:
    """Backprop through the last forward of ``params``.

    Parameter gradients are added into ``params.grads``; the gradient with
    respect to the op input is returned.
    """
    kind = OpKind(kind)
    saved = _take_saved(kind, params)
    t, grads = params.tensors, params.grads
    if kind == OpKind.LINEAR_HEAD:
        feats, spatial = saved
        grads["w"] += grad_out.T @ feats
        grads["b"] += grad_out.sum(axis=0)
        gf = grad_out @ t["w"]
        n, c, h, w = spatial
        return np.broadcast_to(gf[:, :, None, None] / (h * w), spatial).copy()
    if kind == OpKind.IDENTITY:
        shape, stride = saved
        if stride == 1:
            return grad_out
        gx = np.zeros(shape)
        gx[:, :, ::2, ::2] = grad_out
        return gx
    if kind == OpKind.MAX_POOL_3:
        return _max_pool_back(grad_out, saved)
    if kind == OpKind.AVG_POOL_3:
        return _avg_pool_back(grad_out, saved)
    if kind in (OpKind.SEP_CONV_3, OpKind.SEP_CONV_5):
        c1, c2 = saved
        g = _conv_unit_back(grad_out, c2, t, grads, "2")
        return _conv_unit_back(g, c1, t, grads, "1")
    if kind in (OpKind.DIL_CONV_3, OpKind.DIL_CONV_5):
        return _conv_unit_back(grad_out, saved, t, grads, "")
    if kind == OpKind.STEM_CONV:
        shape, xp, ncache, stride = saved
        gconv, ggamma, gbeta = _norm_back(grad_out, ncache, t["gamma"])
        grads["gamma"] += ggamma
        grads["beta"] += gbeta
        w = t["w"]
        gxp = np.zeros_like(xp)
        ho, wo = gconv.shape[2], gconv.shape[3]
        for a in range(3):
            for b in range(3):
                gx_ab, gw_ab = _pointwise_back(gconv, _window(xp, a, b, stride, ho, wo), w[:, :, a, b])
                grads["w"][:, :, a, b] += gw_ab
                _window(gxp, a, b, stride, ho, wo)[...] += gx_ab
        return gxp[:, :, 1:1 + shape[2], 1:1 + shape[3]]
    if kind == OpKind.PREPROCESS:
        x, rs, ncache, stride = saved
        gp, ggamma, gbeta = _norm_back(grad_out, ncache, t["gamma"])
        grads["gamma"] += ggamma
        grads["beta"] += gbeta
        grs, gw = _pointwise_back(gp, rs, t["w"])
        grads["w"] += gw
        if stride == 1:
            gr = grs
        else:
            gr = np.zeros(x.shape)
            gr[:, :, ::2, ::2] = grs
        return gr * (x > 0)
    raise KernelError(kind, "unsupported kind")  # pragma: no cover


# ---------------------------------------------------------------- head + loss

def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise KernelError("cross_entropy", "label count mismatch", (labels.shape, n))
    if labels.min() < 0 or labels.max() >= k:
        raise KernelError("cross_entropy", f"labels must lie in [0, {k})", (int(labels.min()), int(labels.max())))
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def head_forward(head: ParamBlock, features: np.ndarray, labels: np.ndarray | None = None):
    """Global average pooling, then a linear layer.

    Returns ``(logits, loss)``; ``loss`` is ``None`` when no labels are given.
    Call ``op_backward(OpKind.LINEAR_HEAD, head, grad_logits)`` to backprop.
    """
    if head.kind != OpKind.LINEAR_HEAD:
        raise KernelError(OpKind.LINEAR_HEAD, f"parameter block is of kind {head.kind.name}")
    w = head.tensors["w"]
    if w.shape[0] < 2:
        raise KernelError(OpKind.LINEAR_HEAD, "need at least two classes", w.shape)
    if features.ndim != 4 or features.shape[1] != w.shape[1]:
        raise KernelError(OpKind.LINEAR_HEAD, "feature width mismatch", {"input": features.shape, "weights": w.shape})
    if not np.all(np.isfinite(features)):
        raise KernelError(OpKind.LINEAR_HEAD, "non-finite input")
    head.uses += 1
    pooled = features.mean(axis=(2, 3))
    logits = pooled @ w.T + head.tensors["b"]
    head._saved = (pooled, features.shape)
    loss = None if labels is None else softmax_cross_entropy(logits, labels)[0]
    return logits, loss


# ---------------------------------------------------------------- cells

def _group_edges(code_slice):
    for node, (off, size) in enumerate(NODE_GROUPS):
        for j in range(size):
            gene = int(code_slice[off + j])
            if gene:
                yield node, off + j, j, OpKind(gene)


def _check_slice(code_slice):
    genes = np.asarray(code_slice)
    ok = genes.shape == (GENES_PER_CELL,) and genes.min() >= 0 and genes.max() <= 7
    if ok:
        ok = all(np.count_nonzero(genes[o:o + s]) == 2 for o, s in NODE_GROUPS)
    if not ok:
        raise KernelError("cell", "invalid cell code; each node group needs exactly two nonzero genes",
                          list(np.asarray(code_slice).ravel()))


def cell_forward(cell_params: Mapping, code_slice: Sequence[int], inputs, reduce: bool) -> np.ndarray:
    """Evaluate one cell on preprocessed inputs ``(s0, s1)``.

    ``cell_params`` maps ``(edge, OpKind)`` to a block; only the entries the
    code selects are looked up. Intermediate nodes sum their incoming edges
    and the output concatenates the four nodes along channels.
    """
    _check_slice(code_slice)
    states = list(inputs)
    for off, size in NODE_GROUPS:
        acc = None
        for src in range(size):
            gene = int(code_slice[off + src])
            if not gene:
                continue
            kind = OpKind(gene)
            stride = 2 if reduce and src < 2 else 1
            y = op_forward(kind, cell_params[(off + src, kind)], states[src], stride)
            acc = y if acc is None else acc + y
        states.append(acc)
    return np.concatenate(states[2:], axis=1)


def cell_backward(cell_params: Mapping, code_slice: Sequence[int], grad_out: np.ndarray,
                  input_shapes) -> tuple[np.ndarray, np.ndarray]:
    """Backprop through the last :func:`cell_forward` with the same code."""
    gnodes = list(np.split(grad_out, 4, axis=1))
    gin = [None, None]
    edges = list(_group_edges(code_slice))
    for node, edge, src, kind in reversed(edges):
        g = op_backward(kind, cell_params[(edge, kind)], gnodes[node])
        if src < 2:
            gin[src] = g if gin[src] is None else gin[src] + g
        else:
            gnodes[src - 2] = gnodes[src - 2] + g
    return tuple(np.zeros(s) if g is None else g for g, s in zip(gin, input_shapes))
