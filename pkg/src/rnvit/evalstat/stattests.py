"""Fisher/Freeman-Halton, Mann-Whitney U, Shapiro-Wilk and paired t tests."""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass
from statistics import NormalDist

import numpy as np

from .._accel import njit, pick
from .special import norm_sf, t_two_sided_p


@dataclass
class TestResult:
    name: str
    statistic: float
    p_value: float
    sided: str = "two-sided"
    method: str = ""
    df: float | None = None

    def to_dict(self):
        return asdict(self)


class DegenerateInputError(ValueError):
    pass


# -- Fisher exact / Freeman-Halton ---------------------------------------

# Tables whose probability is within this relative margin of the observed one
# count as "at least as extreme" (guards against log-factorial round-off).
FISHER_REL_SLACK = 1e-12


def _log_fact_table(n):
    return np.array([math.lgamma(i + 1.0) for i in range(n + 1)])


@njit
def _fh_enumerate_jit(cols, r2, lf, log_p_obs, slack):
    k = cols.shape[0]
    # suffix capacities for pruning
    cap = np.zeros(k + 1, dtype=np.int64)
    for j in range(k - 1, -1, -1):
        cap[j] = cap[j + 1] + cols[j]
    y = np.zeros(k, dtype=np.int64)
    partial = np.zeros(k + 1)
    remaining = np.zeros(k + 1, dtype=np.int64)
    remaining[0] = r2
    less = 0.0
    tied = 0.0
    total = 0.0
    j = 0
    y[0] = -1
    while j >= 0:
        y[j] += 1
        rem = remaining[j] - y[j]
        if y[j] > cols[j] or rem < 0:
            j -= 1
            continue
        if rem > cap[j + 1]:
            continue
        partial[j + 1] = partial[j] - lf[y[j]] - lf[cols[j] - y[j]]
        remaining[j + 1] = rem
        if j == k - 1:
            if rem == 0:
                rel = partial[k] - log_p_obs
                p = math.exp(rel)
                total += p
                if rel < -slack:
                    less += p
                elif rel <= slack:
                    tied += p
            continue
        j += 1
        y[j] = -1
    return less, tied, total


def _fh_enumerate_numpy(cols, r2, lf, log_p_obs, slack):
    rem = np.array([r2], dtype=np.int64)
    acc = np.zeros(1)
    cap_after = np.r_[np.cumsum(cols[::-1])[::-1][1:], 0]
    for j, c in enumerate(cols):
        y = np.arange(c + 1)
        new_rem = (rem[:, None] - y[None, :]).ravel()
        new_acc = (acc[:, None] - lf[y][None, :] - lf[c - y][None, :]).ravel()
        keep = (new_rem >= 0) & (new_rem <= cap_after[j])
        rem, acc = new_rem[keep], new_acc[keep]
    rel = acc - log_p_obs
    p = np.exp(rel)
    less = float(p[rel < -slack].sum())
    tied = float(p[np.abs(rel) <= slack].sum())
    return less, tied, float(p.sum())


_fh_enumerate = pick(_fh_enumerate_jit, _fh_enumerate_numpy)


def fisher_exact(table, two_sided: str = "minlike") -> TestResult:
    """Two-sided exact test for a 2xK count table (Freeman-Halton for K > 2).

    ``two_sided="minlike"`` sums the probabilities of every table with the
    observed margins that is no more probable than the observed one.
    ``"midp"`` is Lancaster's mid-p on the same ordering: tables exactly as
    probable as the observed one count with weight 1/2.
    """
    if two_sided not in ("minlike", "midp"):
        raise ValueError(f"two_sided must be 'minlike' or 'midp', got {two_sided!r}")
    t = np.asarray(table)
    if t.ndim != 2 or t.shape[0] != 2 or t.shape[1] < 2:
        raise ValueError(f"expected a 2xK table, got shape {t.shape}")
    if np.any(t < 0) or np.any(t != np.round(t)):
        raise ValueError("table entries must be nonnegative integers")
    t = t.astype(np.int64)
    rows, cols = t.sum(axis=1), t.sum(axis=0)
    if np.any(rows == 0) or np.any(cols == 0):
        raise ValueError("every row and column margin must be positive")
    n = int(t.sum())
    lf = _log_fact_table(n)
    # log probability up to the shared margin constant; kernels work relative to it
    log_obs = float(-(lf[t[1]] + lf[cols - t[1]]).sum())
    slack = math.log1p(FISHER_REL_SLACK)
    less, tied, total = _fh_enumerate(cols, int(rows[1]), lf, log_obs, slack)
    weight = 1.0 if two_sided == "minlike" else 0.5
    p = min(1.0, (less + weight * tied) / total)
    method = "fisher-exact" if t.shape[1] == 2 else "freeman-halton-exhaustive"
    if two_sided == "midp":
        method += " mid-p"
    stat = 1.0 / total  # probability of the observed table
    return TestResult("fisher_exact", stat, p, "two-sided", method)


# -- Mann-Whitney U ------------------------------------------------------

EXACT_MAX_N = 12


def midranks(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    xs = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def mann_whitney_u(a, b) -> TestResult:
    """Two-sided Mann-Whitney U with midranks; ``statistic`` is U of ``a``.

    Exact permutation distribution when ``len(a) + len(b) <= 12``, otherwise
    the normal approximation with tie-corrected variance and continuity
    correction.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = len(a), len(b)
    if na == 0 or nb == 0:
        raise ValueError("both samples must be nonempty")
    n = na + nb
    r = midranks(np.r_[a, b])
    offset = na * (na + 1) / 2.0
    u = float(r[:na].sum() - offset)
    mu = na * nb / 2.0
    if n <= EXACT_MAX_N:
        dev = abs(u - mu)
        hits = total = 0
        for comb in itertools.combinations(range(n), na):
            ui = r[list(comb)].sum() - offset
            total += 1
            if abs(ui - mu) >= dev - 1e-9:
                hits += 1
        return TestResult("mann_whitney_u", u, min(1.0, hits / total), "two-sided", "exact")
    _, counts = np.unique(r, return_counts=True)
    tie = float(np.sum(counts ** 3 - counts))
    var = na * nb / 12.0 * ((n + 1) - tie / (n * (n - 1)))
    if var <= 0:
        return TestResult("mann_whitney_u", u, 1.0, "two-sided", "normal-approx")
    z = max(abs(u - mu) - 0.5, 0.0) / math.sqrt(var)
    return TestResult("mann_whitney_u", u, min(1.0, 2.0 * norm_sf(z)), "two-sided", "normal-approx")


# -- Shapiro-Wilk (Royston 1995, AS R94) -----------------------------------

_C1 = (0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056)
_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_C3 = (0.5440, -0.39978, 0.025054, -6.714e-4)
_C4 = (1.3822, -0.77857, 0.062767, -0.0020322)
_C5 = (-1.5861, -0.31082, -0.083751, 0.0038915)
_C6 = (-0.4803, -0.082676, 0.0030302)
_G = (-2.273, 0.459)


def _poly(c, x):
    out = 0.0
    for coef in reversed(c):
        out = out * x + coef
    return out


def shapiro_wilk_coefficients(n: int) -> np.ndarray:
    """The antisymmetric weight vector a (ascending order), length n."""
    nn2 = n // 2
    if n == 3:
        half = np.array([math.sqrt(0.5)])
    else:
        inv = NormalDist().inv_cdf
        m = np.array([inv((i - 0.375) / (n + 0.25)) for i in range(1, nn2 + 1)])
        summ2 = 2.0 * float(np.sum(m * m))
        ssumm2 = math.sqrt(summ2)
        rsn = 1.0 / math.sqrt(n)
        a1 = _poly(_C1, rsn) - m[0] / ssumm2
        half = np.empty(nn2)
        half[0] = a1
        if n > 5:
            a2 = -m[1] / ssumm2 + _poly(_C2, rsn)
            fac = math.sqrt((summ2 - 2 * m[0] ** 2 - 2 * m[1] ** 2) / (1 - 2 * a1 ** 2 - 2 * a2 ** 2))
            half[1] = a2
            start = 2
        else:
            fac = math.sqrt((summ2 - 2 * m[0] ** 2) / (1 - 2 * a1 ** 2))
            start = 1
        half[start:] = -m[start:] / fac
    a = np.zeros(n)
    a[:nn2] = -half
    a[n - nn2 :] = half[::-1]
    return a


def shapiro_wilk(x) -> TestResult:
    x = np.sort(np.asarray(x, dtype=np.float64))
    n = len(x)
    if not 3 <= n <= 5000:
        raise ValueError(f"Shapiro-Wilk needs 3 <= n <= 5000, got {n}")
    ss = float(np.sum((x - x.mean()) ** 2))
    if ss == 0:
        raise DegenerateInputError("zero variance sample")
    a = shapiro_wilk_coefficients(n)
    w = float(np.dot(a, x) ** 2 / (ss * np.dot(a, a)))
    w = min(w, 1.0)
    if n == 3:
        p = max(0.0, 6.0 / math.pi * (math.asin(math.sqrt(w)) - math.pi / 3.0))
        return TestResult("shapiro_wilk", w, min(1.0, p), "upper", "AS R94 (n=3 exact)")
    w1 = math.log(1.0 - w) if w < 1.0 else -math.inf
    if n <= 11:
        gamma = _poly(_G, n)
        if w1 >= gamma:
            return TestResult("shapiro_wilk", w, 1e-99, "upper", "AS R94")
        y = -math.log(gamma - w1)
        mu = _poly(_C3, n)
        sigma = math.exp(_poly(_C4, n))
    else:
        xx = math.log(n)
        mu = _poly(_C5, xx)
        sigma = math.exp(_poly(_C6, xx))
        y = w1
    p = 1.0 if y == -math.inf else norm_sf((y - mu) / sigma)
    return TestResult("shapiro_wilk", w, min(1.0, max(0.0, p)), "upper", "AS R94")


# -- paired t ------------------------------------------------------------

def paired_t(a, b) -> TestResult:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("paired_t needs two equal-length samples with n >= 2")
    d = a - b
    sd = float(d.std(ddof=1))
    if sd == 0:
        raise DegenerateInputError("differences have zero variance")
    n = len(d)
    t = float(d.mean() / (sd / math.sqrt(n)))
    return TestResult("paired_t", t, t_two_sided_p(t, n - 1), "two-sided", "student-t", df=n - 1)
