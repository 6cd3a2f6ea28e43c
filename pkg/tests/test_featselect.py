import numpy as np
import pytest
from sklearn.linear_model import Lasso

from rnvit import featselect as fs
from rnvit.radiomics import FeatureTable


def _table(cols: dict, n=None):
    names = list(cols)
    X = np.column_stack([np.asarray(cols[c], dtype=float) for c in names])
    return FeatureTable([f"r{i}" for i in range(len(X))], names, X, ["radiomic"] * len(names))


def _with_variance(rng, target, n=200):
    z = rng.normal(size=n)
    z = (z - z.mean()) / z.std()
    return z * np.sqrt(target)


# -- filters -------------------------------------------------------------

def test_variance_threshold_boundary(rng):
    t = _table({"low": _with_variance(rng, 0.0099), "high": _with_variance(rng, 0.0101),
                "flat": np.ones(200)})
    kept, dropped = fs.variance_filter(t, 0.01)
    assert kept.columns == ["high"]
    assert [d[0] for d in dropped] == ["low", "flat"]
    assert dropped[0][1] == pytest.approx(0.0099) and dropped[1][1] == 0.0


def test_duplicate_and_negated_columns(rng):
    a = rng.normal(size=50)
    t = _table({"a": a, "b": rng.normal(size=50), "a_copy": a, "neg_a": -a})
    kept, dropped = fs.correlation_filter(t, 0.9)
    assert kept.columns == ["a", "b"]
    assert dropped[0][:2] == ("a_copy", "a") and dropped[0][2] == pytest.approx(1.0)
    assert dropped[1][:2] == ("neg_a", "a") and dropped[1][2] == pytest.approx(-1.0)


def _greedy_oracle(R, thr):
    kept = []
    for j in range(R.shape[0]):
        if all(abs(R[k, j]) <= thr for k in kept):
            kept.append(j)
    return kept


def test_three_correlated_columns(rng):
    base = rng.normal(size=100)
    cols = {f"c{i}": base + 0.05 * rng.normal(size=100) for i in range(3)}
    t = _table(cols)
    kept, dropped = fs.correlation_filter(t, 0.9)
    assert kept.columns == ["c0"]
    assert [d[1] for d in dropped] == ["c0", "c0"]
    R = np.corrcoef(t.values, rowvar=False)
    assert [t.columns[j] for j in _greedy_oracle(R, 0.9)] == kept.columns


@pytest.mark.parametrize("seed", range(5))
def test_greedy_filter_matches_oracle(seed):
    r = np.random.default_rng(seed)
    base = r.normal(size=(60, 3))
    X = np.column_stack([base[:, i % 3] + r.uniform(0.0, 0.6) * r.normal(size=60) for i in range(9)])
    t = _table({f"f{i}": X[:, i] for i in range(9)})
    kept, _ = fs.correlation_filter(t, 0.9)
    R = np.corrcoef(X, rowvar=False)
    assert kept.columns == [f"f{j}" for j in _greedy_oracle(R, 0.9)]


def test_correlation_filter_errors(rng):
    with pytest.raises(fs.SelectionError):
        fs.correlation_filter(_table({"a": rng.normal(size=5), "flat": np.ones(5)}))
    with pytest.raises(fs.SelectionError):
        fs.correlation_filter(_table({"a": [1.0]}))


def test_standardize_uses_given_rows(rng):
    t = _table({"a": rng.normal(3, 2, size=30), "b": rng.normal(-1, 5, size=30)})
    train = t.ids[:20]
    s = fs.standardize(t, train)
    z = s.apply(t.rows(train)).values
    np.testing.assert_allclose(z.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=0), 1, atol=1e-12)
    assert not np.allclose(s.apply(t).values.mean(axis=0), 0, atol=1e-3)
    with pytest.raises(fs.SelectionError):
        fs.standardize(_table({"flat": np.ones(4)}))


# -- LASSO ---------------------------------------------------------------

def test_soft_threshold():
    assert fs.soft_threshold(3.0, 1.0) == 2.0
    assert fs.soft_threshold(-3.0, 1.0) == -2.0
    assert fs.soft_threshold(0.5, 1.0) == 0.0
    with pytest.raises(ValueError):
        fs.soft_threshold(1.0, -1.0)


def test_above_lambda_max_all_zero(rng):
    X = rng.normal(size=(40, 6))
    y = rng.normal(size=40)
    lm = fs.lambda_max(X, y)
    betas, _ = fs.lasso_path(X, y, [lm, 2 * lm])
    assert np.all(betas == 0.0)
    betas, _ = fs.lasso_path(X, y, [0.99 * lm])
    assert np.count_nonzero(betas) >= 1


def test_orthonormal_design_closed_form(rng):
    n, p = 50, 5
    Q, _ = np.linalg.qr(rng.normal(size=(n, p)))
    X = Q * np.sqrt(n)  # X^T X / n = I
    y = X @ np.array([2.0, -1.0, 0.3, 0.0, 0.05]) + 0.1 * rng.normal(size=n)
    for lam in (0.01, 0.2, 0.5, 1.5):
        betas, _ = fs.lasso_path(X, y, [lam], fit_intercept=False)
        ols = X.T @ y / n
        np.testing.assert_allclose(betas[0], fs.soft_threshold(ols, lam), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_kkt_along_path(seed):
    r = np.random.default_rng(seed)
    X = r.normal(size=(60, 12))
    X[:, 3] = X[:, 2] + 0.1 * r.normal(size=60)
    y = X[:, 0] - 2 * X[:, 2] + r.normal(size=60)
    lams = fs.lambda_grid(fs.lambda_max(X, y), 30)
    betas, b0 = fs.lasso_path(X, y, lams)
    for lam, beta, c in zip(lams, betas, b0):
        assert fs.kkt_residual(X, y, beta, lam, c) < 1e-6


def test_matches_sklearn(rng):
    X = rng.normal(size=(80, 10))
    y = X @ rng.normal(size=10) + rng.normal(size=80)
    lams = fs.lambda_grid(fs.lambda_max(X, y), 10)
    betas, b0 = fs.lasso_path(X, y, lams)
    for lam, beta, c in zip(lams, betas, b0):
        ref = Lasso(alpha=lam, tol=1e-14, max_iter=100000).fit(X, y)
        np.testing.assert_allclose(beta, ref.coef_, atol=1e-8)
        assert c == pytest.approx(ref.intercept_, abs=1e-8)


def test_solution_independent_of_path_order(rng):
    X = rng.normal(size=(50, 8))
    y = X[:, 0] + 0.5 * X[:, 1] + rng.normal(size=50)
    lams = fs.lambda_grid(fs.lambda_max(X, y), 15)
    down, _ = fs.lasso_path(X, y, lams)
    up, _ = fs.lasso_path(X, y, lams[::-1])
    np.testing.assert_allclose(up[::-1], down, atol=1e-9)
    assert [tuple(b != 0) for b in up[::-1]] == [tuple(b != 0) for b in down]


def test_cd_kernels_agree(rng):
    X = rng.normal(size=(40, 7))
    y = rng.normal(size=40)
    Xc, yc = X - X.mean(axis=0), y - y.mean()
    G, c = Xc.T @ Xc / 40, Xc.T @ yc / 40
    lams = fs.lambda_grid(np.max(np.abs(c)), 12)
    a = fs._cd_path_jit(G.copy(), c.copy(), lams, np.zeros(7), 1e-12, 100000)
    b = fs._cd_path_numpy(G.copy(), c.copy(), lams, np.zeros(7), 1e-12, 100000)
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_two_feature_toy_brute_force():
    r = np.random.default_rng(2024)
    n = 40
    y = np.array([0, 1] * (n // 2), dtype=float)
    X = np.column_stack([y + 0.4 * r.normal(size=n), r.normal(size=n)])
    X = (X - X.mean(axis=0)) / X.std(axis=0)
    fit = fs.lasso_cv(X, y, k=5, n_lambdas=50, seed=3)
    assert fit.beta[0] != 0 and fit.beta[1] == 0
    # independent CV over the same grid and folds with sklearn as the solver
    fold = fs.stratified_folds(y, 5, 3)
    errs = np.zeros((5, len(fit.lambdas)))
    for f in range(5):
        tr, va = fold != f, fold == f
        for j, lam in enumerate(fit.lambdas):
            m = Lasso(alpha=lam, tol=1e-14, max_iter=100000).fit(X[tr], y[tr])
            errs[f, j] = np.mean((y[va] - m.predict(X[va])) ** 2)
    np.testing.assert_allclose(errs.mean(axis=0), fit.cv_mean, atol=1e-9)
    assert fit.chosen == fit.lambdas[int(np.argmin(errs.mean(axis=0)))]


def test_one_se_picks_larger_lambda(rng):
    X = rng.normal(size=(60, 10))
    y = (X[:, 0] + 0.5 * rng.normal(size=60) > 0).astype(float)
    a = fs.lasso_cv(X, y, seed=1)
    b = fs.lasso_cv(X, y, seed=1, one_se=True)
    assert b.chosen >= a.chosen
    assert np.count_nonzero(b.beta) <= np.count_nonzero(a.beta)


def test_lasso_cv_errors(rng):
    with pytest.raises(fs.SelectionError):
        fs.lasso_cv(rng.normal(size=(3, 2)), [0, 1, 0], k=5)
    X = rng.normal(size=(10, 2))
    X[0, 0] = np.nan
    with pytest.raises(fs.SelectionError):
        fs.lasso_cv(X, [0, 1] * 5)


def test_stratified_folds(rng):
    y = np.array([1] * 13 + [0] * 27)
    f = fs.stratified_folds(y, 5, 0)
    for k in range(5):
        assert abs(y[f == k].sum() - 13 / 5) <= 1
    assert np.array_equal(f, fs.stratified_folds(y, 5, 0))


# -- cascade -------------------------------------------------------------

def test_cascade_report(rng, tmp_path):
    n = 60
    y = np.array([0, 1] * (n // 2))
    sig = y + 0.5 * rng.normal(size=n)
    t = _table({"signal": sig, "signal_copy": 2 * sig + 1, "flat": np.full(n, 3.0),
                "tiny": 0.01 * rng.normal(size=n),
                **{f"noise{i}": rng.normal(size=n) for i in range(6)}})
    rep = fs.select_features(t, y, seed=0)
    dropped = ([d[0] for d in rep.dropped_variance] + [d[0] for d in rep.dropped_correlation]
               + rep.dropped_lasso)
    assert sorted(dropped + rep.retained_columns) == sorted(t.columns)
    assert "signal" in rep.retained and all(v != 0 for v in rep.retained.values())
    assert {"flat", "tiny"} <= {d[0] for d in rep.dropped_variance}
    assert rep.dropped_correlation[0][:2] == ("signal_copy", "signal")
    assert len(rep.retained) < len(t.columns)
    again = fs.select_features(t, y, seed=0)
    assert again.to_dict() == rep.to_dict()
    p = rep.write(tmp_path / "sel.json")
    assert fs.SelectionReport.read(p).to_dict() == rep.to_dict()
