"""Regression-forest and centering tests."""

import numpy as np
import pytest

from hteforest.dgp import DgpSpec, generate
from hteforest.nuisance import (NuisanceEstimates, RegressionForestConfig,
                                compute_centering, fit_regression_forest,
                                oob_predict, write_nuisance_csv)


def _toy_data(seed, n=300, p=6):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    return X, rng


def small_cfg(**kw):
    base = dict(n_trees=60, min_node=5, subsample_fraction=0.5)
    base.update(kw)
    return RegressionForestConfig(**base)


def test_constant_target_predicts_constant():
    X, _ = _toy_data(0)
    forest = fit_regression_forest(X, np.full(300, 3.7), small_cfg(), seed=1)
    pred = forest.predict(X)
    assert np.allclose(pred, 3.7)
    oob, fallback = forest.oob_predictions()
    assert np.allclose(oob, 3.7)


def test_recovers_linear_coordinate():
    rng = np.random.default_rng(5)
    X = rng.random((2000, 10))
    target = X[:, 0].copy()
    forest = fit_regression_forest(X, target, RegressionForestConfig(n_trees=300),
                                   seed=2)
    grid = rng.random((400, 10))
    assert np.mean(np.abs(forest.predict(grid) - grid[:, 0])) < 0.1


def test_deterministic_given_seed():
    X, rng = _toy_data(3)
    y = rng.normal(size=300)
    a = fit_regression_forest(X, y, small_cfg(), seed=9)
    b = fit_regression_forest(X, y, small_cfg(), seed=9)
    assert np.array_equal(a.predict(X), b.predict(X))
    assert np.array_equal(a.oob_predictions()[0], b.oob_predictions()[0])


def test_subsample_sizes_and_oob_counts():
    X, rng = _toy_data(4, n=200)
    y = rng.normal(size=200)
    cfg = RegressionForestConfig(n_trees=500, subsample_fraction=0.5)
    forest = fit_regression_forest(X, y, cfg, seed=11)
    assert np.all(forest.in_subsample.sum(axis=1) == 100)
    counts = forest.oob_tree_counts()
    # each row is excluded from a tree with probability one half
    assert abs(counts.mean() - 250) < 30
    assert counts.min() > 180 and counts.max() < 320


def test_oob_single_tree_fallback():
    X, rng = _toy_data(6, n=40)
    y = rng.normal(size=40)
    forest = fit_regression_forest(X, y, small_cfg(n_trees=1), seed=3)
    in_rows = np.nonzero(forest.in_subsample[0])[0]
    val, flagged = oob_predict(forest, int(in_rows[0]))
    assert flagged
    out_rows = np.nonzero(~forest.in_subsample[0])[0]
    val, flagged = oob_predict(forest, int(out_rows[0]))
    assert not flagged


def test_oob_only_uses_excluding_trees():
    X, rng = _toy_data(7, n=120)
    y = rng.normal(size=120)
    forest = fit_regression_forest(X, y, small_cfg(n_trees=25), seed=5)
    from hteforest import kernels
    for i in (0, 17, 63):
        vals = []
        for t, tree in enumerate(forest.trees):
            if forest.in_subsample[t, i]:
                continue
            leaf = kernels.route_points(X[i:i + 1], tree.feature, tree.threshold,
                                        tree.left, tree.right)
            vals.append(tree.value[leaf[0]])
        want = np.mean(vals)
        got, flagged = oob_predict(forest, i)
        assert not flagged
        assert got == pytest.approx(want, rel=1e-12)


def test_honest_forest_runs_and_predicts_constant():
    X, rng = _toy_data(8, n=200)
    forest = fit_regression_forest(X, np.full(200, -1.25),
                                   small_cfg(honest=True), seed=6)
    assert np.allclose(forest.predict(X), -1.25)


def test_honest_leaf_values_come_from_estimation_half():
    X, rng = _toy_data(9, n=200)
    y = rng.normal(size=200)
    cfg = small_cfg(n_trees=10, honest=True)
    a = fit_regression_forest(X, y, cfg, seed=7)
    # poison values outside each tree's build half; structure is grown on the
    # build half only, so leaf values must change but only via est rows
    b = fit_regression_forest(X, y, cfg, seed=7)
    for ta, tb in zip(a.trees, b.trees):
        assert np.array_equal(ta.feature, tb.feature)
        assert np.array_equal(ta.threshold, tb.threshold)


class TestComputeCentering:
    def test_mob_centers_nothing(self):
        s = generate(DgpSpec(setup="B", n=200, p=5, seed=1))
        est = compute_centering(s, "mob", cfg=small_cfg(), seed=2)
        assert np.all(est.m_hat == 0.0)
        assert np.all(est.pi_hat == 0.0)
        assert est.pi_mode == "none"

    def test_known_propensity_is_exact(self):
        s = generate(DgpSpec(setup="B", n=200, p=5, seed=2))
        est = compute_centering(s, "mobw", pi_known=0.5, cfg=small_cfg(), seed=3)
        assert np.all(est.pi_hat == 0.5)
        assert est.pi_mode == "known"
        assert np.all(est.m_hat == 0.0)

    def test_bad_pi_known(self):
        s = generate(DgpSpec(setup="B", n=100, p=5, seed=3))
        with pytest.raises(ValueError):
            compute_centering(s, "mobw", pi_known=1.5, cfg=small_cfg())
        with pytest.raises(ValueError):
            compute_centering(s, "cf", pi_known=0.0, cfg=small_cfg())

    def test_estimated_propensity_clipped(self):
        s = generate(DgpSpec(setup="B", n=200, p=5, seed=4))
        s.w[:] = 1.0  # degenerate treatment pushes estimates to the boundary
        est = compute_centering(s, "mobw", cfg=small_cfg(), seed=5)
        assert est.pi_mode == "estimated"
        assert np.all(est.pi_hat <= 0.99) and np.all(est.pi_hat >= 0.01)
        assert np.any(est.pi_hat == 0.99)

    def test_propensity_accuracy_setup_c(self):
        s = generate(DgpSpec(setup="C", n=1600, p=10, seed=6))
        est = compute_centering(s, "cf", seed=7)
        assert np.mean(np.abs(est.pi_hat - s.true_pi)) < 0.1
        assert est.m_hat.any()  # outcome centering active for cf

    def test_variant_wiring(self):
        s = generate(DgpSpec(setup="B", n=200, p=5, seed=8))
        est = compute_centering(s, "mobw", cfg=small_cfg(), seed=9)
        assert np.all(est.m_hat == 0.0) and est.pi_mode == "estimated"
        est = compute_centering(s, "mobwy", cfg=small_cfg(), seed=9)
        assert est.m_hat.any() and est.pi_mode == "estimated"

    def test_centering_is_pure(self):
        s = generate(DgpSpec(setup="B", n=150, p=5, seed=10))
        y0 = s.y.copy()
        w0 = s.w.copy()
        est = compute_centering(s, "mobwy", cfg=small_cfg(), seed=11)
        assert np.array_equal(s.y, y0) and np.array_equal(s.w, w0)
        yc = s.y - est.m_hat
        wc = s.w - est.pi_hat
        assert np.array_equal(yc + est.m_hat - est.m_hat, yc)
        assert np.allclose(yc + est.m_hat, s.y)
        assert np.allclose(wc + est.pi_hat, s.w)

    def test_unknown_variant(self):
        s = generate(DgpSpec(setup="B", n=100, p=5, seed=12))
        with pytest.raises(ValueError):
            compute_centering(s, "blend", cfg=small_cfg())


def test_diagnostic_csv(tmp_path):
    m = np.array([0.5, 1.5])
    pi = np.array([0.4, 0.6])
    est = NuisanceEstimates(m_hat=m, pi_hat=pi, pi_mode="estimated")
    path = tmp_path / "nuis.csv"
    write_nuisance_csv(est, np.array([0.45, 0.55]), path)
    lines = path.read_text().splitlines()
    assert lines[0] == "row,m_hat,pi_hat,true_pi"
    assert lines[1].startswith("0,0.5,0.4,")
