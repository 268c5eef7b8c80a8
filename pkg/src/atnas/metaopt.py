"""Inner-loop task adaptation and first-order meta updates of the supernet.

The inner loop runs plain SGD on a detached copy of a subnet's weights. The
meta-gradient is the query-set gradient at the adapted weights, scattered back
onto the shared blocks the genome selects (first-order MAML). A meta step
averages these over a batch of ``(genome, episode)`` pairs and applies Adam,
or plain SGD for exact-arithmetic checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .supernet import SuperNet, scatter_grads, select


class MetaError(RuntimeError):
    def __init__(self, message, step=None):
        self.step = step
        super().__init__(message if step is None else f"{message} (inner step {step})")


@dataclass
class MetaHyper:
    lambda_task: float = 0.01
    eta_meta: float = 0.001
    M: int = 5
    B_arch: int = 4
    B_task: int = 4
    optimizer: str = "adam"  # or "sgd"

    def __post_init__(self):
        if self.lambda_task <= 0 or self.eta_meta <= 0:
            raise ValueError("learning rates must be positive")
        if self.M < 0 or self.B_arch < 1 or self.B_task < 1:
            raise ValueError("M must be >= 0 and batch sizes >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown meta optimizer {self.optimizer!r}")


@dataclass
class InnerResult:
    weights: object
    support_losses: list[float] = field(default_factory=list)
    query_loss: float | None = None
    query_acc: float | None = None
    meta_grads: dict | None = None


def inner_adapt(view, support, hyper: MetaHyper) -> InnerResult:
    """``M`` SGD steps on the support set, starting from a copy of ``view``'s
    weights. ``support`` is an ``(x, y)`` pair."""
    x, y = support
    if len(y) == 0:
        raise MetaError("empty support set")
    weights = view.clone_weights()
    losses = []
    for m in range(hyper.M):
        loss, grads, _ = weights.loss_and_grad(x, y)
        if not np.isfinite(loss):
            raise MetaError("non-finite support loss", step=m)
        losses.append(loss)
        weights.sgd_step(grads, hyper.lambda_task)
    return InnerResult(weights, losses)


def meta_grad(result: InnerResult, query) -> dict:
    """Query-set gradient at the adapted weights (first-order meta-gradient)."""
    x, y = query
    loss, grads, logits = result.weights.loss_and_grad(x, y)
    if not np.isfinite(loss):
        raise MetaError("non-finite query loss")
    result.query_loss = loss
    result.query_acc = float(np.mean(np.argmax(logits, axis=1) == np.asarray(y)))
    result.meta_grads = grads
    return grads


def adapt_and_score(view, episode, hyper: MetaHyper) -> float:
    """Query accuracy after ``M`` inner steps: the unit of fitness."""
    result = inner_adapt(view, episode.support, hyper)
    return result.weights.accuracy(*episode.query)


class MetaOptimizer:
    """Adam (or SGD) over supernet blocks. Only blocks that received a
    gradient in a step are touched, so their moment estimates and step counts
    advance independently."""

    def __init__(self, kind: str = "adam", lr: float = 0.001, betas=(0.9, 0.999), eps: float = 1e-8):
        self.kind, self.lr, self.betas, self.eps = kind, lr, betas, eps
        self.state: dict = {}

    def step(self, net: SuperNet, keys, scale: float):
        b1, b2 = self.betas
        for key in keys:
            block = net.blocks[key]
            if not block.tensors:
                continue
            if self.kind == "sgd":
                for name, t in block.tensors.items():
                    t -= self.lr * (scale * block.grads[name])
                continue
            st = self.state.get(key)
            if st is None:
                st = self.state[key] = {"t": 0, "m": {n: np.zeros_like(t) for n, t in block.tensors.items()},
                                        "v": {n: np.zeros_like(t) for n, t in block.tensors.items()}}
            st["t"] += 1
            c1 = 1.0 - b1 ** st["t"]
            c2 = 1.0 - b2 ** st["t"]
            for name, t in block.tensors.items():
                g = scale * block.grads[name]
                m, v = st["m"][name], st["v"][name]
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                t -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _optimizer(net: SuperNet, hyper: MetaHyper) -> MetaOptimizer:
    opt = net.optimizer_state
    if opt is None or opt.kind != hyper.optimizer or opt.lr != hyper.eta_meta:
        state = opt.state if opt is not None and opt.kind == hyper.optimizer else {}
        opt = MetaOptimizer(hyper.optimizer, hyper.eta_meta)
        opt.state = state
        net.optimizer_state = opt
    return opt


def accumulate(net: SuperNet, items) -> set:
    """Scatter ``(code, grads)`` pairs into the supernet accumulators in the
    given order; returns the set of touched block keys."""
    touched = set()
    for code, grads in items:
        scatter_grads(net, code, grads)
        touched.update(grads)
    return touched


def apply_update(net: SuperNet, touched, count: int, hyper: MetaHyper):
    """``W <- W - eta * opt(sum / count)`` on touched blocks, then clear grads."""
    keys = [k for k in net.blocks if k in touched]
    _optimizer(net, hyper).step(net, keys, 1.0 / count)
    net.zero_grad()
    net.bump()


def compute_meta_grads(net: SuperNet, batch, hyper: MetaHyper):
    """Adapt and differentiate every ``(code, episode)`` pair without touching
    the supernet. Returns ``(code, grads, InnerResult)`` triples in order."""
    out = []
    for code, episode in batch:
        result = inner_adapt(select(net, code), episode.support, hyper)
        grads = meta_grad(result, episode.query)
        out.append((code, grads, result))
    return out


def averaged_meta_grad(net: SuperNet, batch, hyper: MetaHyper) -> dict:
    """Mean first-order meta-gradient over ``batch``, keyed by block, with
    zeros for blocks no genome in the batch selects."""
    if not batch:
        raise MetaError("empty meta batch")
    net.zero_grad()
    accumulate(net, ((c, g) for c, g, _ in compute_meta_grads(net, batch, hyper)))
    scale = 1.0 / len(batch)
    avg = {k: {n: g * scale for n, g in b.grads.items()} for k, b in net.blocks.items()}
    net.zero_grad()
    return avg


@dataclass
class StepStats:
    query_loss: float
    query_acc: float
    pairs: int


def meta_step(net: SuperNet, batch, hyper: MetaHyper, *, check_size: bool = True) -> StepStats:
    """One outer update from ``B_arch * B_task`` ``(code, episode)`` pairs."""
    if not batch:
        raise MetaError("empty meta batch")
    if check_size and len(batch) != hyper.B_arch * hyper.B_task:
        raise MetaError(f"meta batch has {len(batch)} pairs, expected B_arch*B_task = {hyper.B_arch * hyper.B_task}")
    results = compute_meta_grads(net, batch, hyper)
    net.zero_grad()
    touched = accumulate(net, ((c, g) for c, g, _ in results))
    apply_update(net, touched, len(batch), hyper)
    return StepStats(float(np.mean([r.query_loss for _, _, r in results])),
                     float(np.mean([r.query_acc for _, _, r in results])), len(batch))
