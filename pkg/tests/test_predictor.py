import numpy as np
import pytest
from scipy.stats import spearmanr

from atnas.archspace import random_code
from atnas.evolution import sepconv3_fraction
from atnas.predictor import (
    PredictorError,
    fit,
    fit_rbf,
    forest_bytes,
    forest_from_bytes,
    load_forest,
    predictor_bench,
    save_forest,
    screen,
    spearman,
)


def _scored(n, seed=0, cells=1):
    rng = np.random.default_rng(seed)
    codes = [random_code(cells, rng=rng) for _ in range(n)]
    return [(c, sepconv3_fraction(c) + 0.01 * i / n) for i, c in enumerate(codes)]


def test_constant_targets_predict_the_constant():
    data = [(c, 0.4) for c, _ in _scored(20)]
    model = fit(data, n_trees=5)
    np.testing.assert_allclose(model.predict_many([c for c, _ in _scored(10, 1)]), 0.4)


def test_single_unbagged_tree_memorises():
    data = _scored(40)
    model = fit(data, n_trees=1, min_leaf=1, bootstrap=False)
    np.testing.assert_allclose(model.predict_many([c for c, _ in data]), [t for _, t in data])


def test_fit_ignores_sample_order():
    data = _scored(50)
    shuffled = [data[i] for i in np.random.default_rng(3).permutation(50)]
    assert forest_bytes(fit(data, n_trees=5, seed=4)) == forest_bytes(fit(shuffled, n_trees=5, seed=4))


def test_fit_errors():
    data = _scored(4)
    with pytest.raises(PredictorError, match="at least 2"):
        fit(data[:1])
    with pytest.raises(PredictorError, match="mixed"):
        fit(data + _scored(2, cells=2))
    with pytest.raises(PredictorError, match="finite"):
        fit(data + [(data[0][0], float("nan"))])


def test_geometry_mismatch_on_predict():
    model = fit(_scored(10), n_trees=2)
    with pytest.raises(PredictorError, match="features"):
        model.predict(random_code(2, rng=np.random.default_rng(0)))


def test_forest_learns_signal():
    data = _scored(300)
    model = fit(data[:200], n_trees=30)
    rho = spearman(model.predict_many([c for c, _ in data[200:]]), [t for _, t in data[200:]])
    assert rho > 0.5


def test_rbf_fits_and_predicts():
    data = _scored(60)
    model = fit_rbf(data, centres=8)
    pred = model.predict_many([c for c, _ in data])
    assert pred.shape == (60,) and np.all(np.isfinite(pred))


@pytest.mark.parametrize("seed", range(5))
def test_spearman_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 5, 30).astype(float), rng.random(30)
    assert spearman(a, b) == pytest.approx(spearmanr(a, b).statistic, abs=1e-12)


def test_spearman_edge_cases():
    assert spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert spearman([1, 1, 1], [1, 2, 3]) == 0.0
    with pytest.raises(PredictorError):
        spearman([1, 2], [1, 2, 3])
    with pytest.raises(PredictorError):
        spearman([1], [1])


class _Oracle:
    def predict_many(self, codes):
        return np.array([sepconv3_fraction(c) for c in codes])


def test_screen_keeps_top_in_input_order():
    cands = [c for c, _ in _scored(30, 5)]
    kept = screen(_Oracle(), cands, 5)
    scores = [sepconv3_fraction(c) for c in cands]
    threshold = sorted(scores, reverse=True)[4]
    assert len(kept) == 5 and all(sepconv3_fraction(c) >= threshold for c in kept)
    positions = [cands.index(c) for c in kept]
    assert positions == sorted(positions)
    assert screen(_Oracle(), cands, 0) == []
    with pytest.raises(PredictorError):
        screen(_Oracle(), cands, 31)


def test_atrf_roundtrip(tmp_path):
    data = _scored(40)
    model = fit(data, n_trees=4)
    path = tmp_path / "f.atrf"
    save_forest(model, path)
    back = load_forest(path, model.n_features)
    codes = [c for c, _ in _scored(10, 7)]
    np.testing.assert_array_equal(back.predict_many(codes), model.predict_many(codes))
    assert forest_bytes(back) == path.read_bytes()


def test_atrf_errors():
    data = forest_bytes(fit(_scored(20), n_trees=2))
    with pytest.raises(PredictorError, match="magic"):
        forest_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(PredictorError, match="truncated"):
        forest_from_bytes(data[:-3])
    with pytest.raises(PredictorError, match="trailing"):
        forest_from_bytes(data + b"\0")
    with pytest.raises(PredictorError, match="binary"):
        forest_bytes(fit_rbf(_scored(20), centres=4))


def test_bench_with_perfect_predictor():
    data = [(c, sepconv3_fraction(c)) for c, _ in _scored(260, 8)]
    report = predictor_bench(data, holdout=60, sweep=(50, 100, 150, 200), repeats=2,
                             fit_fn=lambda samples, seed: _Oracle())
    assert [r[0] for r in report.rows] == [50, 100, 150, 200]
    assert all(r[1] == pytest.approx(1.0) for r in report.rows)
    assert report.inversions() == 0 and report.trees == 100


def test_bench_needs_enough_genomes():
    with pytest.raises(PredictorError, match="need"):
        predictor_bench(_scored(50), holdout=20, sweep=(50,))


def test_training_error_below_target_variance():
    data = _scored(80, 9)
    model = fit(data, n_trees=20)
    y = np.array([t for _, t in data])
    assert np.mean((model.predict_many([c for c, _ in data]) - y) ** 2) <= y.var()


def test_constant_model_on_random_codes():
    model = fit([(c, 0.7) for c, _ in _scored(10)], n_trees=10)
    preds = model.predict_many([c for c, _ in _scored(100, 10)])
    assert np.all(preds == preds[0]) and preds[0] == pytest.approx(0.7)


def test_screen_edge_cases():
    data = _scored(30, 11)
    memo = fit(data, n_trees=1, min_leaf=1, bootstrap=False)
    cands = [c for c, _ in data]
    assert screen(memo, cands, len(cands)) == cands
    best = max(data, key=lambda s: s[1])[0]
    assert screen(memo, cands, 1) == [best]
    dup = cands[:5] + cands[:5]
    kept = screen(memo, dup, 6)
    assert all(kept.count(c) <= dup.count(c) for c in kept)
