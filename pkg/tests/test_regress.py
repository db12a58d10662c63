import itertools

import numpy as np
import pytest

from hivmob import _pykernels, kernels
from hivmob import regress as rg

from oracles import ridge_normal_equations


def make_data(rng, n=20, p=4, noise=0.3):
    X = rng.normal(size=(n, p)) + 2.0
    w = rng.normal(size=p)
    return X, X @ w + 1.5 + noise * rng.normal(size=n), w


def svr_primal_oracle(X, y, C, eps):
    cp = pytest.importorskip("cvxpy")
    w = cp.Variable(X.shape[1])
    b = cp.Variable()
    loss = cp.sum(cp.pos(cp.abs(y - X @ w - b) - eps))
    prob = cp.Problem(cp.Minimize(0.5 * cp.sum_squares(w) + C * loss))
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
    return np.asarray(w.value), prob.value


@pytest.fixture
def pure_backend(monkeypatch):
    monkeypatch.setattr(kernels, "_impl", _pykernels)
    monkeypatch.setattr(kernels, "optimal_bias", _pykernels.optimal_bias)


def test_ridge_matches_normal_equations(rng):
    X, y, _ = make_data(rng, 15, 6)
    for lam in (1e-4, 0.1, 1.0, 100.0):
        m = rg.fit_ridge(X, y, lam)
        w, b = ridge_normal_equations(X, y, lam)
        assert np.allclose(m.coef, w, rtol=1e-9, atol=1e-12)
        assert m.intercept == pytest.approx(b, rel=1e-9)


def test_ridge_without_penalty(rng):
    X, y, _ = make_data(rng, 12, 3)
    sol = np.linalg.lstsq(np.column_stack([np.ones(12), X]), y, rcond=None)[0]
    assert np.allclose(rg.fit_ridge(X, y, 0.0).coef, sol[1:], rtol=1e-9)
    with pytest.raises(np.linalg.LinAlgError):
        rg.fit_ridge(np.column_stack([X, X[:, 0]]), y, 0.0)


def test_ridge_loo_matches_refits(rng):
    X, y, _ = make_data(rng, 14, 5)
    grid = [1e-3, 0.5, 20.0]
    brute = []
    for lam in grid:
        err = []
        for i in range(len(y)):
            keep = np.arange(len(y)) != i
            m = rg.fit_ridge(X[keep], y[keep], lam)
            err.append((m.predict(X[i])[0] - y[i]) ** 2)
        brute.append(np.mean(err))
    assert np.allclose(rg.ridge_loo_mse(X, y, grid), brute, rtol=1e-9)


def test_selection_ties_pick_smallest():
    X = np.arange(12.0).reshape(6, 2) ** 1.5
    y = np.full(6, 3.0)
    assert rg.loo_select("ridge", X, y, [10.0, 0.1, 1.0]) == 0.1
    assert rg.loo_select("svr", X, y, [5.0]) == 5.0


@pytest.mark.parametrize("C,eps", [(0.05, 0.1), (1.0, 0.1), (30.0, 0.5), (1000.0, 0.0)])
def test_svr_matches_qp_oracle(rng, C, eps):
    X, y, _ = make_data(rng, 18, 3, noise=1.0)
    m = rg.fit_svr(X, y, C, eps)
    w, obj = svr_primal_oracle(X, y, C, eps)
    assert m.diagnostics["gap"] <= rg.GAP_TOL
    assert m.diagnostics["primal"] == pytest.approx(obj, rel=1e-6, abs=1e-6)
    assert np.allclose(m.coef, w, rtol=1e-4, atol=1e-4 * max(1.0, np.abs(w).max()))


def test_svr_recovers_least_squares_slope(rng):
    X = rng.uniform(0, 1000, size=(25, 3))
    y = X @ np.array([2.0, -1.5, 0.8]) + 3.0
    ls = np.linalg.lstsq(np.column_stack([np.ones(25), X]), y, rcond=None)[0]
    for C in (1e3, 1e5):
        m = rg.fit_svr(X, y, C, 0.1)
        assert m.diagnostics["gap"] <= rg.GAP_TOL
        assert np.abs(m.coef - ls[1:]).max() <= 1e-3


def test_svr_wide_tube_gives_constant(rng):
    X, y, _ = make_data(rng, 10, 2)
    eps = (y.max() - y.min()) / 2 + 1.0
    m = rg.fit_svr(X, y, 10.0, eps)
    assert np.all(m.coef == 0)
    assert abs(m.intercept - (y.max() + y.min()) / 2) <= 1.0 + 1e-12


def test_svr_rejects_bad_input(rng):
    X, y, _ = make_data(rng, 6, 2)
    with pytest.raises(ValueError):
        rg.fit_svr(X, y, 0.0)
    with pytest.raises(ValueError):
        rg.fit_svr(X[:1], y[:1], 1.0)
    bad = X.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        rg.fit_ridge(bad, y, 1.0)


def test_svr_iteration_cap_raises(rng):
    X, y, _ = make_data(rng, 30, 5, noise=2.0)
    with pytest.raises(rg.SolverError):
        rg.fit_svr(X, y, 100.0, 0.1, max_iter=3)


def test_warm_start_agrees(rng):
    X, y, _ = make_data(rng, 20, 4, noise=1.0)
    warm = np.zeros(40)
    a = rg.fit_svr(X, y, 10.0, 0.1, warm=warm)
    b = rg.fit_svr(X, y, 10.0, 0.1, warm=warm)
    assert np.allclose(a.coef, b.coef, rtol=1e-6, atol=1e-8)
    assert b.diagnostics["iterations"] <= a.diagnostics["iterations"]


def test_pure_backend_fit(rng, pure_backend):
    X, y, _ = make_data(rng, 16, 3, noise=1.0)
    m = rg.fit_svr(X, y, 5.0, 0.2)
    w, obj = svr_primal_oracle(X, y, 5.0, 0.2)
    assert m.diagnostics["gap"] <= rg.GAP_TOL
    assert np.allclose(m.coef, w, rtol=1e-4, atol=1e-4)


@pytest.mark.parametrize("backend", ["compiled", "pure"])
def test_svr_loo_matches_refits(rng, request, backend):
    if backend == "pure":
        request.getfixturevalue("pure_backend")
    X, y, _ = make_data(rng, 12, 3, noise=1.0)
    grid = (0.1, 3.0, 200.0)
    spec = rg.ModelSpec("svr", grid, select_tol=1e-9)
    brute = []
    for C in grid:
        err = []
        for i in range(len(y)):
            keep = np.arange(len(y)) != i
            m = rg.fit_svr(X[keep], y[keep], C, spec.epsilon)
            err.append((m.predict(X[i])[0] - y[i]) ** 2)
        brute.append(np.mean(err))
    assert np.allclose(rg.loo_scores("svr", X, y, grid, spec), brute, rtol=1e-5)


def brute_rfe(X, y, lam, k):
    active = list(range(X.shape[1]))
    order = []
    while len(active) > k:
        coef = np.abs(rg.fit_ridge(X[:, active], y, lam).coef)
        cand = [j for j, c in zip(active, coef) if c == coef.min()]
        order.append(max(cand))
        active.remove(max(cand))
    return order, active


def test_rfe_matches_manual_elimination(rng):
    X, y, _ = make_data(rng, 20, 6)
    spec = rg.ModelSpec("ridge", (1.0,))
    res = rg.rfe(spec, X, y, 2)
    order, active = brute_rfe(X, y, 1.0, 2)
    assert res.eliminated == order
    assert np.flatnonzero(res.mask).tolist() == active
    assert res.order() == order + active
    assert len(res.hypers) == 5


def test_rfe_tie_drops_higher_index(rng, monkeypatch):
    def flat(method, X, y, hyper, spec, mask=None, warm=None):
        return rg.FittedModel(method, -np.ones(int(mask.sum())), 0.0, hyper, mask.copy())

    monkeypatch.setattr(rg, "_fit", flat)
    X, y, _ = make_data(rng, 8, 5)
    res = rg.rfe(rg.ModelSpec("ridge", (1.0,)), X, y, 2)
    assert res.eliminated == [4, 3, 2]


def test_rfe_reselect_modes(rng):
    X, y, _ = make_data(rng, 15, 5)
    grid = (0.01, 1.0, 100.0)
    once = rg.rfe(rg.ModelSpec("ridge", grid, reselect="once"), X, y, 2)
    assert len(set(once.hypers)) == 1
    rnd = rg.rfe(rg.ModelSpec("ridge", grid), X, y, 2)
    want = [rg.loo_select("ridge", X[:, m], y, grid) for m in _masks(rnd)]
    assert rnd.hypers == want
    with pytest.raises(ValueError):
        rg.rfe(rg.ModelSpec("ridge", grid), X, y, 6)


def _masks(res):
    p = res.mask.size
    active = np.ones(p, dtype=bool)
    out = [active.copy()]
    for j in res.eliminated:
        active[j] = False
        out.append(active.copy())
    return out


def test_nested_loo_pipeline_by_hand(rng):
    X, y, _ = make_data(rng, 12, 4)
    X = np.abs(X)
    spec = rg.ModelSpec("ridge", (0.01, 1.0, 10.0))
    rep = rg.loo_evaluate(spec, X, y)
    pred = []
    for i in range(12):
        keep = np.arange(12) != i
        s = X[keep].mean(0)
        lam = rg.loo_select("ridge", X[keep] / s, y[keep], spec.grid)
        pred.append(rg.fit_ridge(X[keep] / s, y[keep], lam).predict(X[i] / s)[0])
    assert np.allclose(rep.predictions, pred, rtol=1e-12)
    assert rep.rho == pytest.approx(np.corrcoef(pred, y)[0, 1], rel=1e-12)
    assert rep.rrmse == pytest.approx(np.sqrt(np.mean((np.array(pred) - y) ** 2)) / y.mean(), rel=1e-12)
    threaded = rg.loo_evaluate(spec, X, y, threads=3)
    assert np.array_equal(threaded.predictions, rep.predictions)


def test_non_nested_selection_is_fixed(rng):
    X, y, _ = make_data(rng, 12, 5)
    rep = rg.loo_evaluate(rg.ModelSpec("ridge", (0.01, 1.0, 10.0), target_count=2, nested=False), X, y)
    assert len({tuple(s) for s in rep.selected}) == 1 and len(set(rep.hypers)) == 1
    with pytest.raises(ValueError):
        rg.loo_evaluate(rg.ModelSpec("ridge"), X[:2], y[:2])


def test_permutation_streams(rng):
    X = rng.normal(size=(9, 4))
    a = rg.permute_columns(X, 3)
    assert np.array_equal(a, rg.permute_columns(X, 3))
    assert not np.array_equal(a, rg.permute_columns(X, 4))
    for j in range(4):
        assert sorted(a[:, j]) == sorted(X[:, j])
    reps = rg.permutation_baseline(rg.ModelSpec("ridge", (1.0,)), X, X @ [1, 2, 3, 4] + 10, [5, 1])
    assert [r.seed for r in reps] == [5, 1] and all(r.permuted for r in reps)
    assert rg.best_random(reps).rho == max(r.rho for r in reps)
    with pytest.raises(ValueError):
        rg.permutation_baseline(rg.ModelSpec("ridge"), X, X[:, 0], [])


def test_pearson_and_rrmse():
    assert rg.pearson([1, 2, 3], [5, 5, 5]) == (0.0, True)
    assert rg.pearson([1, 2, 3], [2, 4, 6.5])[0] == pytest.approx(np.corrcoef([1, 2, 3], [2, 4, 6.5])[0, 1])
    assert rg.rrmse([1, 3], [2, 2]) == 0.5


def nnls_enumerate(P, y):
    """Best non-negative fit by trying every support set."""
    best, best_w = np.inf, None
    k = P.shape[1]
    for r in range(k + 1):
        for S in itertools.combinations(range(k), r):
            w = np.zeros(k)
            if S:
                sol = np.linalg.lstsq(P[:, S], y, rcond=None)[0]
                if (sol < 0).any():
                    continue
                w[list(S)] = sol
            err = np.sum((P @ w - y) ** 2)
            if err < best - 1e-12:
                best, best_w = err, w
    return best_w


def test_stack_ensemble(rng):
    y = rng.uniform(1, 5, 15)
    P = np.column_stack([y + rng.normal(0, 0.3, 15), -y, 0.5 * y + rng.normal(0, 0.2, 15)])
    res = rg.stack_ensemble(list(P.T), y)
    assert np.allclose(res.weights, nnls_enumerate(P, y), atol=1e-10)
    assert res.weights[1] == 0 and res.degenerate is None
    same = rg.stack_ensemble([y, y.copy()], y)
    assert same.degenerate == "identical" and same.weights.tolist() == [0.5, 0.5]
    zero = rg.stack_ensemble([np.zeros(15)] * 2, y)
    assert zero.degenerate == "all-zero" and not zero.weights.any()
    with pytest.raises(ValueError):
        rg.stack_ensemble([y[:3]], y)


def test_model_spec():
    s = rg.ModelSpec("svr", (10.0, 0.1), target_count=3)
    assert s.grid == (0.1, 10.0)
    assert rg.ModelSpec.from_json(s.to_json()) == s
    assert rg.ModelSpec("ridge").grid == rg.RIDGE_GRID
    for bad in (dict(method="lasso"), dict(grid=(0.0,)), dict(epsilon=-1.0), dict(reselect="never"),
                dict(target_count=0)):
        with pytest.raises(ValueError):
            rg.ModelSpec(**bad)


def test_predictions_table(rng):
    X, y, _ = make_data(rng, 5, 2)
    rep = rg.loo_evaluate(rg.ModelSpec("ridge", (1.0,)), X, y, labels=(7, 8, 9, 10, 11))
    lines = rg.predictions_tsv(rep).splitlines()
    assert lines[0] == "department\tpredicted\tactual" and lines[1].startswith("7\t")
    doc = rep.to_json()
    assert doc["rrmse_definition"] == "rmse / mean(actual)" and len(doc["predictions"]) == 5


def test_ridge_hand_example_and_limit(rng):
    m = rg.fit_ridge(np.array([[0.0], [1.0], [2.0]]), np.array([0.0, 1.0, 2.0]), 1.0)
    assert m.coef[0] == pytest.approx(2 / 3, rel=1e-14)
    X, y, _ = make_data(rng, 20, 5)
    big = rg.fit_ridge(X, y, 1e9)
    assert np.allclose(big.predict(X), y.mean(), rtol=1e-3)


def test_ridge_wide_design(rng):
    X = rng.normal(size=(50, 224))
    y = rng.normal(size=50)
    for lam in (1e-2, 3.0):
        w, b = ridge_normal_equations(X, y, lam)
        m = rg.fit_ridge(X, y, lam)
        assert np.allclose(m.coef, w, rtol=1e-8, atol=1e-10 * np.abs(w).max())


def test_rfe_sets_are_nested(rng):
    X, y, _ = make_data(rng, 15, 7)
    spec = rg.ModelSpec("ridge", (0.1, 10.0))
    prev = None
    for k in range(7, 0, -1):
        mask = rg.rfe(spec, X, y, k).mask
        if prev is not None:
            assert not (mask & ~prev).any()
        prev = mask


@pytest.mark.parametrize("method,grid", [("ridge", (0.1, 10.0)), ("svr", (0.1, 10.0))])
def test_pipeline_scale_invariance(rng, method, grid):
    X, y, _ = make_data(rng, 10, 3)
    X = np.abs(X)
    spec = rg.ModelSpec(method, grid, target_count=2)
    a = rg.loo_evaluate(spec, X, y).predictions
    b = rg.loo_evaluate(spec, 7.5 * X, y).predictions
    assert np.allclose(a, b, rtol=1e-6)


def test_rho_symmetry(rng):
    a, b = rng.normal(size=9), rng.normal(size=9)
    assert rg.pearson(a, b) == rg.pearson(b, a)
    assert rg.rrmse(b + 3, b + 3) == 0.0
