"""Finite-difference gradient checks and small fixtures shared by the tests."""

import numpy as np

from atnas.numkernel import (
    OpKind,
    batch_norm,
    batch_norm_grad,
    head_forward,
    make_block,
    op_backward,
    op_forward,
    softmax_cross_entropy,
)


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    den = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


def numeric_grad(f, arr, h=1e-5):
    """Central differences of the scalar ``f()`` with respect to ``arr`` (in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def op_gradcheck(kind, seed, stride=1, channels=3, size=6, batch=2, h=1e-5):
    """Worst relative error over the input and every parameter tensor."""
    rng = np.random.default_rng(seed)
    kind = OpKind(kind)
    in_ch = 2 if kind in (OpKind.STEM_CONV, OpKind.PREPROCESS) else channels
    block = make_block(kind, channels, rng, in_channels=in_ch)
    for t in block.tensors.values():
        t += 0.1 * rng.normal(size=t.shape)  # move gamma/beta off their init values
    x = rng.normal(size=(batch, in_ch, size, size))
    out = op_forward(kind, block, x, stride)
    R = rng.normal(size=out.shape)
    block.zero_grad()
    gx = op_backward(kind, block, R)

    def f():
        return float(np.sum(op_forward(kind, block, x, stride) * R))

    errs = [rel_err(gx, numeric_grad(f, x, h))]
    for name, t in block.tensors.items():
        errs.append(rel_err(block.grads[name], numeric_grad(f, t, h)))
    return max(errs)


def head_gradcheck(seed, channels=6, n_classes=5, batch=4, h=1e-5):
    rng = np.random.default_rng(seed)
    head = make_block(OpKind.LINEAR_HEAD, channels, rng, n_classes=n_classes)
    head.tensors["b"] += rng.normal(size=n_classes)
    feats = rng.normal(size=(batch, channels, 3, 3))
    labels = rng.integers(0, n_classes, size=batch)
    logits, _ = head_forward(head, feats, labels)
    _, dlogits = softmax_cross_entropy(logits, labels)
    head.zero_grad()
    gfeat = op_backward(OpKind.LINEAR_HEAD, head, dlogits)

    def f():
        return head_forward(head, feats, labels)[1]

    errs = [rel_err(gfeat, numeric_grad(f, feats, h))]
    for name, t in head.tensors.items():
        errs.append(rel_err(head.grads[name], numeric_grad(f, t, h)))
    return max(errs)


def norm_gradcheck(seed, channels=3, h=1e-5):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, channels, 5, 5))
    gamma = 1.0 + 0.2 * rng.normal(size=channels)
    beta = rng.normal(size=channels)
    R = rng.normal(size=x.shape)
    gx, gg, gb = batch_norm_grad(x, gamma, beta, R)

    def f():
        return float(np.sum(batch_norm(x, gamma, beta) * R))

    return max(rel_err(gx, numeric_grad(f, x, h)), rel_err(gg, numeric_grad(f, gamma, h)),
               rel_err(gb, numeric_grad(f, beta, h)))


ACCEPTANCE = {}


def record(criterion, ok, detail):
    """Store and print one acceptance outcome line."""
    ACCEPTANCE[str(criterion)] = (bool(ok), detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok
