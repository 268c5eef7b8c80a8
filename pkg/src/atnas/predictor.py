"""Surrogate fitness predictors over genomes.

A random forest of regression trees on one-hot gene features ranks candidate
genomes without running them. An RBF network (k-means centres plus a ridge
readout) is available as a lighter alternative. ``predictor_bench`` measures
rank agreement with true fitness as the number of training samples grows.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.stats import rankdata

from .archspace import ArchCode, one_hot, validate

ATRF_MAGIC = b"ATRF"
_NODE = struct.Struct("<IdBd")
SWEEP = (50, 100, 200, 300)


class PredictorError(ValueError):
    pass


@dataclass
class Tree:
    """Flat binary tree; ``left[i] == -1`` marks a leaf."""

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)

    def add(self, feature=0, threshold=0.0, value=0.0) -> int:
        self.feature.append(feature)
        self.threshold.append(threshold)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        return len(self.value) - 1

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(len(X))
        for r, x in enumerate(X):
            i = 0
            while self.left[i] >= 0:
                i = self.left[i] if x[self.feature[i]] <= self.threshold[i] else self.right[i]
            out[r] = self.value[i]
        return out

    @property
    def depth(self) -> int:
        def d(i):
            return 0 if self.left[i] < 0 else 1 + max(d(self.left[i]), d(self.right[i]))
        return d(0)


def _best_split(X, y, rows, features, min_leaf):
    """Lowest-SSE threshold over ``features``; ``None`` if none is valid."""
    best = None
    ys = y[rows]
    total = ys.sum()
    n = len(rows)
    for f in features:
        x = X[rows, f]
        order = np.argsort(x, kind="stable")
        xs, yo = x[order], ys[order]
        cum = np.cumsum(yo)[:-1]
        n_left = np.arange(1, n)
        ok = (xs[:-1] != xs[1:]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not ok.any():
            continue
        # SSE = sum y^2 - S_l^2/n_l - S_r^2/n_r; the first term is constant
        gain = cum ** 2 / n_left + (total - cum) ** 2 / (n - n_left)
        gain[~ok] = -np.inf
        j = int(np.argmax(gain))
        if best is None or gain[j] > best[0]:
            best = (gain[j], f, 0.5 * (xs[j] + xs[j + 1]))
    return best


def _grow(X, y, rows, tree, rng, min_leaf, n_sub):
    node = tree.add(value=float(y[rows].mean()))
    if len(rows) < 2 * min_leaf or np.all(y[rows] == y[rows[0]]):
        return node
    sub = X[rows]
    varying = np.flatnonzero(sub.max(axis=0) != sub.min(axis=0))
    candidates = rng.permutation(varying)
    # try random feature subsets until one admits a valid split
    for start in range(0, len(candidates), n_sub):
        found = _best_split(X, y, rows, candidates[start:start + n_sub], min_leaf)
        if found is not None:
            break
    else:
        return node
    _, f, thr = found
    mask = X[rows, f] <= thr
    tree.feature[node], tree.threshold[node] = int(f), float(thr)
    tree.left[node] = _grow(X, y, rows[mask], tree, rng, min_leaf, n_sub)
    tree.right[node] = _grow(X, y, rows[~mask], tree, rng, min_leaf, n_sub)
    return node


@dataclass
class SurrogateModel:
    kind: str
    n_features: int | None
    trees: list[Tree] = field(default_factory=list)
    rbf: dict | None = None

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def _features(self, codes) -> np.ndarray:
        X = np.array([one_hot(c) for c in codes])
        if self.n_features is not None and X.shape[1] != self.n_features:
            raise PredictorError(f"genome has {X.shape[1]} features, model was fit on {self.n_features}")
        return X

    def predict_many(self, codes) -> np.ndarray:
        codes = list(codes)
        if not codes:
            return np.empty(0)
        for c in codes:
            if not validate(c):
                raise PredictorError("cannot predict an invalid genome")
        X = self._features(codes)
        if self.kind == "forest":
            return np.mean([t.predict(X) for t in self.trees], axis=0)
        centres, gamma, coef = self.rbf["centres"], self.rbf["gamma"], self.rbf["coef"]
        return _rbf_design(X, centres, gamma) @ coef

    def predict(self, code: ArchCode) -> float:
        return float(self.predict_many([code])[0])


def _canonical(samples):
    # sorting makes the fit independent of the order samples were supplied in
    return sorted(samples, key=lambda s: (s[0].cells, s[0].reduce_positions, tuple(s[0].genes.tolist()), s[1]))


def _check_samples(samples):
    if len(samples) < 2:
        raise PredictorError(f"need at least 2 training samples, got {len(samples)}")
    shapes = {(c.cells, c.reduce_positions) for c, _ in samples}
    if len(shapes) != 1:
        raise PredictorError("training genomes have mixed geometry")
    y = np.array([float(t) for _, t in samples])
    if not np.all(np.isfinite(y)):
        raise PredictorError("training targets must be finite")


def fit(samples, *, n_trees: int = 100, min_leaf: int = 2, max_features: int | None = None,
        bootstrap: bool = True, seed: int = 0) -> SurrogateModel:
    """Random forest on ``(genome, fitness)`` pairs. ``max_features`` defaults
    to ``ceil(sqrt(d))``. Trees have no depth cap."""
    samples = list(samples)
    _check_samples(samples)
    samples = _canonical(samples)
    X = np.array([one_hot(c) for c, _ in samples])
    y = np.array([float(t) for _, t in samples])
    n, d = X.shape
    n_sub = max_features or math.ceil(math.sqrt(d))
    rng = np.random.default_rng(seed)
    trees = []
    for _ in range(n_trees):
        rows = np.sort(rng.integers(0, n, size=n)) if bootstrap else np.arange(n)
        tree = Tree()
        _grow(X, y, rows, tree, rng, min_leaf, n_sub)
        trees.append(tree)
    return SurrogateModel("forest", d, trees)


def _rbf_design(X, centres, gamma):
    d2 = ((X[:, None, :] - centres[None, :, :]) ** 2).sum(axis=2)
    return np.hstack([np.exp(-gamma * d2), np.ones((len(X), 1))])


def fit_rbf(samples, *, centres: int = 16, ridge: float = 1e-3, seed: int = 0) -> SurrogateModel:
    """RBF network: k-means centres, Gaussian width from the median squared
    centre distance, ridge-regularised linear readout with a bias."""
    samples = list(samples)
    _check_samples(samples)
    samples = _canonical(samples)
    X = np.array([one_hot(c) for c, _ in samples])
    y = np.array([float(t) for _, t in samples])
    k = min(centres, len(X))
    cent, _ = kmeans2(X, k, minit="++", seed=np.random.default_rng(seed))
    d2 = ((cent[:, None] - cent[None]) ** 2).sum(axis=2)
    med = np.median(d2[np.triu_indices(k, 1)]) if k > 1 else 1.0
    gamma = 1.0 / med if med > 0 else 1.0
    Phi = _rbf_design(X, cent, gamma)
    coef = np.linalg.solve(Phi.T @ Phi + ridge * np.eye(Phi.shape[1]), Phi.T @ y)
    return SurrogateModel("rbf", X.shape[1], rbf={"centres": cent, "gamma": gamma, "coef": coef})


def spearman(pred, truth) -> float:
    """Spearman rank correlation with average ranks for ties. Returns 0.0
    when either side is constant (no ranking information)."""
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise PredictorError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if len(pred) < 2:
        raise PredictorError("spearman needs at least 2 points")
    a, b = rankdata(pred), rankdata(truth)
    a, b = a - a.mean(), b - b.mean()
    denom = math.sqrt((a @ a) * (b @ b))
    if denom == 0:
        return 0.0
    return float(np.clip((a @ b) / denom, -1.0, 1.0))


def screen(model, candidates, keep: int) -> list[ArchCode]:
    """The ``keep`` candidates with the highest predicted fitness, returned
    in their input order. Ties favour earlier candidates."""
    candidates = list(candidates)
    if keep > len(candidates):
        raise PredictorError(f"cannot keep {keep} of {len(candidates)} candidates")
    if keep <= 0:
        return []
    scores = model.predict_many(candidates)
    chosen = np.sort(np.argsort(-scores, kind="stable")[:keep])
    return [candidates[i] for i in chosen]


def forest_bytes(model: SurrogateModel) -> bytes:
    if model.kind != "forest":
        raise PredictorError("only forests have a binary checkpoint")
    out = [ATRF_MAGIC, struct.pack("<I", model.n_trees)]
    for tree in model.trees:
        stack = [0]
        while stack:
            i = stack.pop()
            leaf = tree.left[i] < 0
            out.append(_NODE.pack(0 if leaf else tree.feature[i], 0.0 if leaf else tree.threshold[i],
                                  int(leaf), tree.value[i]))
            if not leaf:
                stack += [tree.right[i], tree.left[i]]
    return b"".join(out)


def save_forest(model: SurrogateModel, path):
    Path(path).write_bytes(forest_bytes(model))


def forest_from_bytes(data: bytes, n_features: int | None = None) -> SurrogateModel:
    if data[:4] != ATRF_MAGIC:
        raise PredictorError(f"bad ATRF magic {data[:4]!r}")
    if len(data) < 8:
        raise PredictorError("truncated ATRF header")
    (count,) = struct.unpack_from("<I", data, 4)
    pos = 8

    def node(tree):
        nonlocal pos
        if pos + _NODE.size > len(data):
            raise PredictorError("truncated ATRF tree data")
        feature, threshold, leaf, value = _NODE.unpack_from(data, pos)
        pos += _NODE.size
        i = tree.add(feature, threshold, value)
        if not leaf:
            left = node(tree)
            right = node(tree)
            tree.left[i], tree.right[i] = left, right
        return i

    trees = []
    for _ in range(count):
        tree = Tree()
        node(tree)
        trees.append(tree)
    if pos != len(data):
        raise PredictorError(f"{len(data) - pos} trailing bytes after {count} trees")
    return SurrogateModel("forest", n_features, trees)


def load_forest(path, n_features: int | None = None) -> SurrogateModel:
    return forest_from_bytes(Path(path).read_bytes(), n_features)


@dataclass
class PredictorReport:
    rows: list[tuple[int, float, float]]  # (training samples, spearman mean, spearman std)
    trees: int
    holdout: int
    repeats: int

    def to_json(self) -> str:
        return json.dumps({
            "trees": self.trees, "holdout": self.holdout, "repeats": self.repeats,
            "sweep": [{"train_samples": n, "spearman_mean": m, "spearman_std": s} for n, m, s in self.rows],
        }, indent=1)

    def inversions(self) -> int:
        means = [m for _, m, _ in self.rows]
        return sum(b < a for a, b in zip(means, means[1:]))


def predictor_bench(scored, *, holdout: int = 200, sweep=SWEEP, repeats: int = 5, n_trees: int = 100,
                    seed: int = 0, fit_fn=None) -> PredictorReport:
    """Rank agreement of a surrogate with true fitness as training grows.

    The last ``holdout`` scored genomes are held out. For every sweep size
    ``n`` and each repeat, ``n`` training pairs are drawn from the rest, a
    model is fit and scored by Spearman correlation on the holdout.
    ``fit_fn(samples, seed)`` replaces the random forest.
    """
    scored = list(scored)
    need = max(sweep) + holdout
    if len(scored) < need:
        raise PredictorError(f"need {need} scored genomes ({max(sweep)} train + {holdout} holdout), got {len(scored)}")
    train, test = scored[:-holdout], scored[-holdout:]
    truth = [t for _, t in test]
    fit_fn = fit_fn or (lambda s, sd: fit(s, n_trees=n_trees, seed=sd))
    rng = np.random.default_rng(seed)
    rows = []
    for n in sweep:
        rhos = []
        for _ in range(repeats):
            pick = rng.choice(len(train), size=n, replace=False)
            model = fit_fn([train[i] for i in pick], int(rng.integers(2**31)))
            rhos.append(spearman(model.predict_many([c for c, _ in test]), truth))
        rows.append((n, float(np.mean(rhos)), float(np.std(rhos))))
    return PredictorReport(rows, n_trees, holdout, repeats)
