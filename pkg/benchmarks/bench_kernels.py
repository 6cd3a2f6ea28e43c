"""Time the numba kernels against their pure-numpy fallbacks.

Both variants are called directly, so one process covers both paths
regardless of RNVIT_DISABLE_NUMBA. Each jitted kernel is warmed up once
before timing so compilation is excluded.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""
from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from rnvit import featselect, preprocess, radiomics
from rnvit._accel import HAS_NUMBA
from rnvit.evalstat import stattests
from rnvit.radiomics import DIRECTIONS, N_BINS


def _cases(rng):
    vol = rng.normal(size=(64, 64, 64))
    cx = np.linspace(0, 63, 96)
    trilinear = ((vol, cx, cx, cx), preprocess._trilinear_jit, preprocess._trilinear_numpy)

    q = rng.integers(0, N_BINS, size=(48, 48, 48))
    q[rng.random(q.shape) < 0.3] = -1
    glcm = ((q, DIRECTIONS, N_BINS), radiomics._glcm_counts_jit, radiomics._glcm_counts_numpy)

    pts = rng.normal(size=(3000, 3))
    diameter = ((pts,), radiomics._max_sqdist_jit, radiomics._max_sqdist_numpy)

    X = rng.normal(size=(200, 60))
    y = X[:, :5].sum(axis=1) + rng.normal(size=200)
    Xc, yc = X - X.mean(axis=0), y - y.mean()
    G, c = Xc.T @ Xc / 200, Xc.T @ yc / 200
    lams = featselect.lambda_grid(np.abs(c).max(), 50)

    def lasso(kernel):
        return lambda: kernel(G.copy(), c.copy(), lams, np.zeros(60), 1e-12, 100000)

    table = np.array([[54, 36, 8, 7, 2, 2], [3, 5, 15, 0, 0, 5]])
    cols, r2 = table.sum(axis=0), int(table[1].sum())
    lf = stattests._log_fact_table(int(table.sum()))
    log_obs = float(-(lf[table[1]] + lf[cols - table[1]]).sum())
    fisher = ((cols, r2, lf, log_obs, 1e-12), stattests._fh_enumerate_jit,
              stattests._fh_enumerate_numpy)

    out = {}
    for name, (args, jit, plain) in {"trilinear 64^3->96^3": trilinear,
                                     "glcm 48^3 x13": glcm,
                                     "max diameter 3000 pts": diameter,
                                     "freeman-halton 2x6": fisher}.items():
        out[name] = (lambda f=jit, a=args: f(*a), lambda f=plain, a=args: f(*a))
    out["lasso path 60 x 50"] = (lasso(featselect._cd_path_jit), lasso(featselect._cd_path_numpy))
    return out


def run(repeat: int = 5, seed: int = 0) -> dict:
    results = {}
    for name, (jit, plain) in _cases(np.random.default_rng(seed)).items():
        a, b = jit(), plain()  # warm-up and agreement check
        np.testing.assert_allclose(np.asarray(a, float), np.asarray(b, float), rtol=1e-9, atol=1e-12)
        t_jit = min(timeit.repeat(jit, number=1, repeat=repeat))
        t_np = min(timeit.repeat(plain, number=1, repeat=repeat))
        results[name] = {"numba_s": t_jit, "numpy_s": t_np, "speedup": t_np / t_jit}
    return results


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write the timings here")
    args = ap.parse_args(argv)
    if not HAS_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    res = run(args.repeat)
    print(f"{'kernel':<24}{'numba [ms]':>12}{'numpy [ms]':>12}{'speedup':>10}")
    for name, r in res.items():
        print(f"{name:<24}{1e3 * r['numba_s']:>12.2f}{1e3 * r['numpy_s']:>12.2f}{r['speedup']:>9.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(res, fh, indent=1)


if __name__ == "__main__":
    main()
