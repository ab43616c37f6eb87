import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import ancestor_matrix, gamma_objective, prox_grad_gamma, random_full_tree
from treeagg.admm import (FitConfig, Problem, alpha_grid, fit, fit_path, kkt_residual,
                          lambda_max, make_grid, objective)
from treeagg.baselines import lasso_cd, ols
from treeagg.tree import aggregation_matrix, build_from_parent_list, star_tree

TIGHT = dict(eps_abs=1e-9, eps_rel=1e-9, max_iter=200000)


def tree_from_parent(parent):
    return build_from_parent_list([(u + 1, int(parent[u]) + 1 if parent[u] >= 0 else None)
                                   for u in range(len(parent))])


def instance(seed, n=30, p=10, rate=0.5):
    rng = np.random.default_rng(seed)
    parent = random_full_tree(rng, p)
    X = rng.poisson(rate, (n, p)).astype(float)
    A = ancestor_matrix(parent, p)
    g = np.where(rng.random(len(parent)) < 0.3, rng.normal(0, 2, len(parent)), 0.0)
    y = X @ A @ g + rng.normal(size=n)
    return X, y, parent, tree_from_parent(parent)


def test_fit_config_validation():
    for bad in (dict(lam=-1, alpha=0.5), dict(lam=1, alpha=1.5), dict(lam=1, alpha=0.5, rho=0),
                dict(lam=1, alpha=0.5, eps_abs=0), dict(lam=1, alpha=0.5, max_iter=0),
                dict(lam=np.inf, alpha=0.5)):
        with pytest.raises(ValueError):
            FitConfig(**bad)


def test_dimension_and_finiteness_errors():
    X, y, _, t = instance(0)
    cfg = FitConfig(0.1, 0.5)
    with pytest.raises(ValueError):
        fit(X, y[:-1], t, cfg)
    with pytest.raises(ValueError):
        fit(X[:, :-1], y, t, cfg)
    y2 = y.copy()
    y2[0] = np.nan
    with pytest.raises(ValueError):
        fit(X, y2, t, cfg)


@pytest.mark.parametrize("lam", [0.0, 0.1, 10.0])
def test_zero_response_gives_zero(lam):
    X, _, _, t = instance(1)
    res = fit(X, np.zeros(30), t, FitConfig(lam, 0.4))
    assert np.all(res.beta == 0) and np.all(res.gamma == 0) and res.converged


def test_unpenalized_star_tree_is_ols():
    rng = np.random.default_rng(2)
    X = rng.poisson(2.0, (40, 5)).astype(float)
    y = X @ rng.normal(size=5) + rng.normal(size=40)
    res = fit(X, y, star_tree(5), FitConfig(0.0, 0.5, **TIGHT))
    assert np.max(np.abs(res.beta - ols(X, y))) <= 1e-4


def test_returned_beta_is_feasible():
    X, y, parent, t = instance(3)
    res = fit(X, y, t, FitConfig(0.1, 0.5))
    assert np.allclose(res.beta, ancestor_matrix(parent, 10) @ res.gamma, rtol=0, atol=1e-12)
    assert res.consensus_gap <= 1e-2
    assert np.isfinite(res.objective)


def test_matches_independent_oracle():
    X, y, parent, t = instance(4)
    A = ancestor_matrix(parent, 10)
    cfg = FitConfig(0.1, 0.5, **TIGHT)
    res = fit(X, y, t, cfg)
    g_ref, obj_ref = prox_grad_gamma(X, y, A, t.root_index, 0.1, 0.5)
    assert abs(res.objective - obj_ref) <= 1e-5 * abs(obj_ref)
    assert kkt_residual(X, y, res.beta, res.gamma, cfg, t) <= 1e-4


def test_objective_examples():
    X, y, parent, t = instance(5)
    A = ancestor_matrix(parent, 10)
    T = len(parent)
    cfg = FitConfig(0.7, 0.3)
    assert objective(X, y, np.zeros(10), np.zeros(T), cfg) == pytest.approx(y @ y / 60)
    g = np.random.default_rng(0).normal(size=T)
    b = A @ g
    r = y - X @ b
    assert objective(X, y, b, g, FitConfig(0.0, 0.3)) == pytest.approx(r @ r / 60)
    assert objective(X, y, b, g, cfg) == pytest.approx(
        gamma_objective(X, y, A, t.root_index, 0.7, 0.3, g), rel=1e-12)
    with pytest.warns(RuntimeWarning):
        objective(X, y, b + 1, g, cfg, A=A)


def test_kkt_on_hand_solved_single_feature():
    # one leaf: gamma is the unpenalized root, beta = gamma carries the l1 term
    x = np.array([[1.0], [2.0], [0.0], [3.0]])
    y = np.array([2.0, 3.0, -1.0, 5.0])
    t = build_from_parent_list([(1, None)])
    n, lam, alpha = 4, 0.5, 0.25
    sxy, sxx = (x[:, 0] @ y) / n, (x[:, 0] @ x[:, 0]) / n
    b = np.sign(sxy) * max(abs(sxy) - lam * (1 - alpha), 0) / sxx
    cfg = FitConfig(lam, alpha)
    assert kkt_residual(x, y, [b], [b], cfg, t) <= 1e-8
    res = fit(x, y, t, FitConfig(lam, alpha, **TIGHT))
    assert res.beta[0] == pytest.approx(b, abs=1e-6)
    # lam large enough that zero is optimal
    assert kkt_residual(x, y, [0.0], [0.0], FitConfig(100.0, alpha), t) <= 1e-12


def test_kkt_zero_for_huge_lambda_on_tree():
    X, y, _, t = instance(6)
    lam = 1e3 * np.abs(X.T @ y).max()
    assert kkt_residual(X, y, np.zeros(10), np.zeros(t.node_count), FitConfig(lam, 0.0), t) <= 1e-10


def test_kkt_grows_with_perturbation():
    X, y, parent, t = instance(7)
    A = ancestor_matrix(parent, 10)
    cfg = FitConfig(0.1, 0.5)
    g, _ = prox_grad_gamma(X, y, A, t.root_index, 0.1, 0.5)
    d = np.random.default_rng(0).normal(size=g.shape)
    vals = [kkt_residual(X, y, A @ (g + e * d), g + e * d, cfg, t, zero_tol=1e-9)
            for e in (0.0, 1e-3, 1e-2, 1e-1, 1.0)]
    assert vals[0] <= 1e-6
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_objective_not_worse_than_zero():
    X, y, _, t = instance(8)
    for lam in (0.01, 0.3, 3.0):
        cfg = FitConfig(lam, 0.6)
        res = fit(X, y, t, cfg)
        assert res.objective <= objective(X, y, np.zeros(10), np.zeros(t.node_count), cfg) + 1e-12


def test_alpha_zero_is_lasso_in_beta():
    X, y, _, t = instance(9)
    cfg = FitConfig(0.2, 0.0, **TIGHT)
    res = fit(X, y, t, cfg)
    b = lasso_cd(X, y, 0.2)
    ref = objective(X, y, b, np.zeros(t.node_count), FitConfig(0.2, 0.0))
    assert res.objective == pytest.approx(ref, abs=1e-4)


def test_alpha_one_is_lasso_in_gamma():
    X, y, parent, t = instance(10)
    A = ancestor_matrix(parent, 10)
    cfg = FitConfig(0.2, 1.0, **TIGHT)
    res = fit(X, y, t, cfg)
    w = np.ones(t.node_count)
    w[t.root_index] = 0.0
    g = lasso_cd(X @ A, y, 0.2, weights=w)
    ref = gamma_objective(X, y, A, t.root_index, 0.2, 1.0, g)
    assert res.objective == pytest.approx(ref, abs=1e-4)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.2, 5.0), st.sampled_from([0.0, 0.4, 1.0]))
def test_homogeneity(seed, c, alpha):
    X, y, _, t = instance(seed, n=25, p=6)
    a = fit(X, y, t, FitConfig(0.1, alpha, **TIGHT))
    b = fit(X, c * y, t, FitConfig(0.1 * c, alpha, **TIGHT))
    assert np.allclose(b.beta, c * a.beta, atol=1e-5 * max(1.0, c))


def test_intercept_residual_mean():
    X, y, _, t = instance(11)
    cfg = FitConfig(0.05, 0.5, intercept=True)
    res = fit(X, y + 7.0, t, cfg)
    assert abs(np.mean(y + 7.0 - res.intercept - X @ res.beta)) <= 1e-8
    with pytest.raises(ValueError):
        fit(X, y, t, FitConfig(0.05, 0.5), problem=Problem(X, y, t, intercept=True))


def test_averaged_duals_stay_zero_in_debug_mode():
    X, y, _, t = instance(12)
    res = fit(X, y, t, FitConfig(0.1, 0.5, max_iter=300), debug=True)
    st_ = res.state
    assert np.abs(st_["v1"] + st_["v2"] + st_["v3"]).max() <= 1e-8
    assert np.abs(st_["u1"] + st_["u2"]).max() <= 1e-8


def test_reported_residuals_match_iterates():
    X, y, _, t = instance(13)
    res = fit(X, y, t, FitConfig(0.1, 0.5))
    s = res.state
    r = np.sqrt(sum(np.sum((s[k] - s["beta"]) ** 2) for k in ("b1", "b2", "b3"))
                + sum(np.sum((s[k] - s["gamma"]) ** 2) for k in ("g1", "g2")))
    assert r == pytest.approx(res.primal_residual, rel=1e-9, abs=1e-15)


def test_nonconvergence_is_reported_not_raised():
    X, y, _, t = instance(14)
    res = fit(X, y, t, FitConfig(0.01, 0.5, max_iter=2))
    assert not res.converged and res.iterations == 2


def test_fit_path_single_and_warm_start():
    X, y, _, t = instance(15)
    base = FitConfig(0.0, 0.0)
    one = fit_path(X, y, t, [(0.1, 0.5)], base)[0]
    ref = fit(X, y, t, FitConfig(0.1, 0.5))
    assert np.array_equal(one.beta, ref.beta) and one.iterations == ref.iterations
    pair = fit_path(X, y, t, [(0.12, 0.5), (0.1, 0.5)], base)
    assert pair[1].iterations <= ref.iterations


def test_fit_path_threads_deterministic():
    X, y, _, t = instance(16)
    grid = make_grid(X, y, n_lambda=5, n_alpha=3, tree=t)
    a = fit_path(X, y, t, grid, FitConfig(0.0, 0.0), threads=1)
    b = fit_path(X, y, t, grid, FitConfig(0.0, 0.0), threads=3)
    assert all(np.array_equal(r.beta, s.beta) for r, s in zip(a, b))
    assert [(r.config.lam, r.config.alpha) for r in a] == grid
    with pytest.raises(ValueError):
        fit_path(X, y, t, [], FitConfig(0.0, 0.0))


def test_fit_path_alpha_zero_endpoint_matches_lasso():
    X, y, _, t = instance(17)
    grid = make_grid(X, y, n_lambda=6, n_alpha=2, tree=t)
    res = fit_path(X, y, t, grid, FitConfig(0.0, 0.0, **TIGHT))
    lam, a = grid[3]
    assert a == 0.0
    ref = objective(X, y, lasso_cd(X, y, lam), np.zeros(t.node_count), FitConfig(lam, 0.0))
    assert res[3].objective == pytest.approx(ref, abs=1e-4)


def test_alpha_grid_and_make_grid():
    g = alpha_grid(9, 8)
    assert g[0] == 0 and g[-1] == pytest.approx(0.9) and len(g) == 8
    X, y, _, _ = instance(18)
    grid = make_grid(X, y, n_lambda=4, n_alpha=2, ratio=1e-2)
    lams = [l for l, a in grid if a == 0.0]
    assert lams[0] == pytest.approx(np.abs(X.T @ y).max() / 30)
    assert lams[-1] == pytest.approx(lams[0] * 1e-2)


def test_lambda_max_without_tree_zeroes_lasso():
    X, y, _, t = instance(19)
    lm = lambda_max(X, y, 0.0)
    assert np.abs(fit(X, y, t, FitConfig(lm * 1.0001, 0.0, **TIGHT)).beta).max() <= 1e-7
    assert np.abs(fit(X, y, t, FitConfig(lm * 0.97, 0.0, **TIGHT)).beta).max() > 1e-4


@pytest.mark.parametrize("alpha", [0.2, 0.5, 0.8, 1.0])
def test_lambda_max_with_tree_is_exact_fusion_point(alpha):
    X, y, _, t = instance(20)
    lm = lambda_max(X, y, alpha, tree=t)
    above = fit(X, y, t, FitConfig(lm * 1.001, alpha, **TIGHT))
    below = fit(X, y, t, FitConfig(lm * 0.97, alpha, **TIGHT))
    assert np.ptp(above.beta) <= 1e-6
    assert np.ptp(below.beta) > 1e-6
