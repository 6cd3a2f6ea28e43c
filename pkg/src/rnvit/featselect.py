"""Feature selection cascade: variance filter, correlation filter, standardization, LASSO-CV."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._accel import njit, pick
from .radiomics import FeatureTable
from .rng import stream


class SelectionError(ValueError):
    pass


# -- filters -------------------------------------------------------------

def variance_filter(table: FeatureTable, threshold: float = 0.01):
    """Drop columns whose population variance is below ``threshold``.

    Returns the filtered table and ``[(column, variance), ...]`` for the drops.
    """
    var = table.values.var(axis=0)
    keep = [c for c, v in zip(table.columns, var) if v >= threshold]
    dropped = [(c, float(v)) for c, v in zip(table.columns, var) if v < threshold]
    return table.select(keep), dropped


def correlation_filter(table: FeatureTable, threshold: float = 0.9):
    """Greedy scan in column order; a column correlated above ``threshold`` with an
    earlier surviving column is dropped. Returns ``[(dropped, partner, r), ...]``."""
    X = table.values
    if X.shape[0] < 2:
        raise SelectionError("correlation filter needs at least two rows")
    sd = X.std(axis=0)
    flat = [c for c, s in zip(table.columns, sd) if s == 0]
    if flat:
        raise SelectionError(f"zero-variance columns reached the correlation filter: {flat}")
    R = np.corrcoef(X, rowvar=False).reshape(X.shape[1], X.shape[1])
    kept, dropped = [], []
    for j, name in enumerate(table.columns):
        partner = next((k for k in kept if abs(R[k, j]) > threshold), None)
        if partner is None:
            kept.append(j)
        else:
            dropped.append((name, table.columns[partner], float(R[partner, j])))
    return table.select([table.columns[j] for j in kept]), dropped


@dataclass
class Standardizer:
    columns: list
    mean: np.ndarray
    std: np.ndarray

    def apply(self, table: FeatureTable) -> FeatureTable:
        sub = table.select(self.columns)
        return FeatureTable(sub.ids, sub.columns, (sub.values - self.mean) / self.std,
                            sub.provenance, sub.missing, dict(sub.meta))

    def to_dict(self):
        return {"columns": list(self.columns), "mean": self.mean.tolist(), "std": self.std.tolist()}


def standardize(table: FeatureTable, rows=None) -> Standardizer:
    """Population mean/SD per column, fitted on ``rows`` (ids) or all rows."""
    fit = table if rows is None else table.rows(rows)
    mu = fit.values.mean(axis=0)
    sd = fit.values.std(axis=0)
    flat = [c for c, s in zip(fit.columns, sd) if s == 0]
    if flat:
        raise SelectionError(f"cannot standardize constant columns: {flat}")
    return Standardizer(list(fit.columns), mu, sd)


# -- LASSO ---------------------------------------------------------------

def soft_threshold(z, lam):
    if np.any(np.asarray(lam) < 0):
        raise ValueError("lambda must be >= 0")
    return np.sign(z) * np.maximum(np.abs(z) - lam, 0.0)


@njit
def _cd_path_jit(G, c, lambdas, beta, tol, max_iter):
    p = G.shape[0]
    out = np.zeros((lambdas.shape[0], p))
    grad = c - G @ beta  # x_j'(y - X beta)/n for every j
    for li in range(lambdas.shape[0]):
        lam = lambdas[li]
        for _ in range(max_iter):
            delta = 0.0
            for j in range(p):
                z = grad[j] + G[j, j] * beta[j]
                if z > lam:
                    new = (z - lam) / G[j, j]
                elif z < -lam:
                    new = (z + lam) / G[j, j]
                else:
                    new = 0.0
                d = new - beta[j]
                if d != 0.0:
                    for k in range(p):
                        grad[k] -= G[k, j] * d
                    beta[j] = new
                    step = abs(d) * math.sqrt(G[j, j])
                    if step > delta:
                        delta = step
            if delta < tol:
                break
        out[li] = beta
    return out


def _cd_path_numpy(G, c, lambdas, beta, tol, max_iter):
    p = G.shape[0]
    out = np.zeros((len(lambdas), p))
    grad = c - G @ beta
    for li, lam in enumerate(lambdas):
        for _ in range(max_iter):
            delta = 0.0
            for j in range(p):
                z = grad[j] + G[j, j] * beta[j]
                new = math.copysign(max(abs(z) - lam, 0.0), z) / G[j, j]
                d = new - beta[j]
                if d != 0.0:
                    grad -= G[:, j] * d
                    beta[j] = new
                    delta = max(delta, abs(d) * math.sqrt(G[j, j]))
            if delta < tol:
                break
        out[li] = beta
    return out


_cd_path = pick(_cd_path_jit, _cd_path_numpy)


def lasso_path(X, y, lambdas, *, fit_intercept=True, tol=1e-12, max_iter=100000):
    """Coordinate descent on ``(1/2n)||y - b0 - X beta||^2 + lambda ||beta||_1``.

    ``lambdas`` are visited in the given order with warm starts. Returns
    ``(betas (L, p), intercepts (L,))``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    lambdas = np.atleast_1d(np.asarray(lambdas, dtype=np.float64))
    if np.any(lambdas < 0):
        raise ValueError("lambda must be >= 0")
    if fit_intercept:
        xm, ym = X.mean(axis=0), y.mean()
    else:
        xm, ym = np.zeros(p), 0.0
    Xc, yc = X - xm, y - ym
    G = Xc.T @ Xc / n
    c = Xc.T @ yc / n
    active = np.diag(G) > 0
    betas = np.zeros((len(lambdas), p))
    if active.any():
        idx = np.flatnonzero(active)
        betas[:, idx] = _cd_path(G[np.ix_(idx, idx)].copy(), c[idx].copy(), lambdas,
                                 np.zeros(len(idx)), tol, max_iter)
    return betas, ym - betas @ xm


def lambda_max(X, y, fit_intercept=True) -> float:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if fit_intercept:
        X, y = X - X.mean(axis=0), y - y.mean()
    return float(np.max(np.abs(X.T @ y)) / len(y))


def lambda_grid(lmax: float, n: int = 50, ratio: float = 1e-3) -> np.ndarray:
    return np.geomspace(lmax, lmax * ratio, n)


def kkt_residual(X, y, beta, lam, intercept=0.0) -> float:
    """Largest violation of the LASSO optimality conditions at ``beta``."""
    X = np.asarray(X, dtype=np.float64)
    r = np.asarray(y, dtype=np.float64) - intercept - X @ beta
    g = X.T @ r / len(r)
    act = beta != 0
    viol = np.zeros_like(g)
    viol[act] = np.abs(g[act] - lam * np.sign(beta[act]))
    viol[~act] = np.maximum(np.abs(g[~act]) - lam, 0.0)
    return float(viol.max()) if viol.size else 0.0


def stratified_folds(y, k: int, seed: int) -> np.ndarray:
    """Seeded stratified fold id per row (round-robin within shuffled classes)."""
    y = np.asarray(y)
    rng = stream(seed, "lasso-cv-folds")
    fold = np.empty(len(y), dtype=np.int64)
    start = 0
    for cls in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == cls))
        fold[idx] = (start + np.arange(len(idx))) % k
        start += len(idx)
    return fold


@dataclass
class LassoCV:
    lambdas: np.ndarray
    cv_mean: np.ndarray
    cv_se: np.ndarray
    chosen: float
    beta: np.ndarray
    intercept: float


def lasso_cv(X, y, k: int = 5, n_lambdas: int = 50, seed: int = 0, one_se: bool = False) -> LassoCV:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    if n < k:
        raise SelectionError(f"{n} rows cannot be split into {k} folds")
    if np.isnan(X).any():
        raise SelectionError("NaN in design matrix")
    lams = lambda_grid(lambda_max(X, y), n_lambdas)
    fold = stratified_folds(y, k, seed)
    err = np.zeros((k, len(lams)))
    for f in range(k):
        tr, va = fold != f, fold == f
        betas, b0 = lasso_path(X[tr], y[tr], lams)
        pred = b0[:, None] + betas @ X[va].T
        err[f] = np.mean((y[va][None, :] - pred) ** 2, axis=1)
    mean = err.mean(axis=0)
    se = err.std(axis=0, ddof=1) / np.sqrt(k)
    best = int(np.argmin(mean))
    if one_se:
        # largest lambda (earliest on the descending grid) within one SE of the best
        best = int(np.flatnonzero(mean <= mean[best] + se[best])[0])
    betas, b0 = lasso_path(X, y, lams[: best + 1])
    return LassoCV(lams, mean, se, float(lams[best]), betas[-1], float(b0[-1]))


# -- cascade -------------------------------------------------------------

@dataclass
class SelectionReport:
    input_columns: list
    dropped_variance: list
    dropped_correlation: list
    lambdas: list
    cv_loss: list
    chosen_lambda: float
    retained: dict  # column -> coefficient (all nonzero)
    dropped_lasso: list
    standardizer: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def retained_columns(self) -> list:
        return list(self.retained)

    def to_dict(self):
        return asdict(self)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "SelectionReport":
        d = json.loads(Path(path).read_text())
        d["dropped_correlation"] = [tuple(x) for x in d["dropped_correlation"]]
        d["dropped_variance"] = [tuple(x) for x in d["dropped_variance"]]
        return cls(**d)


def select_features(table: FeatureTable, y, *, variance_threshold=0.01, corr_threshold=0.9,
                    k=5, n_lambdas=50, seed=0, one_se=False) -> SelectionReport:
    """Run the full cascade on ``table`` (rows = training pool) against labels ``y``."""
    t1, dv = variance_filter(table, variance_threshold)
    t2, dc = correlation_filter(t1, corr_threshold)
    std = standardize(t2)
    Z = std.apply(t2).values
    fit = lasso_cv(Z, y, k, n_lambdas, seed, one_se)
    retained = {c: float(b) for c, b in zip(t2.columns, fit.beta) if b != 0}
    return SelectionReport(
        input_columns=list(table.columns),
        dropped_variance=dv,
        dropped_correlation=dc,
        lambdas=fit.lambdas.tolist(),
        cv_loss=fit.cv_mean.tolist(),
        chosen_lambda=fit.chosen,
        retained=retained,
        dropped_lasso=[c for c in t2.columns if c not in retained],
        standardizer=std.to_dict(),
        config={"variance_threshold": variance_threshold, "corr_threshold": corr_threshold,
                "k": k, "n_lambdas": n_lambdas, "seed": seed, "one_se": one_se},
    )
