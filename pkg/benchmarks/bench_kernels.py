"""Time the hot kernels with numba enabled and with SAFEFILTER_NUMBA=0.

Each backend runs in its own interpreter because the flag is read at import.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _best(fn, repeat):
    fn()  # warm-up / JIT compile
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def run_worker(repeat):
    from safefilter import _kernels
    from safefilter._accel import USE_NUMBA
    from safefilter.plant import PlantParams
    from safefilter.poly import eval_terms, mono_basis

    rng = np.random.default_rng(0)
    results = {"numba": USE_NUMBA}

    qs = [(rng.standard_normal(4) * 2, rng.standard_normal((2, 4)), rng.standard_normal(2)) for _ in range(200)]

    def qcqp():
        for un, C, b in qs:
            _kernels.qcqp_solve(un, C, b, 1.2, 1e-9)

    results["qcqp_solve x200"] = _best(qcqp, repeat)

    pp = PlantParams()
    inv_l, r = pp.branch_arrays()
    j0 = np.zeros((3, 2))
    vc = np.array([1.0, 0.05])

    def rk4():
        _kernels.rk4_advance(j0, 0.0, vc, 0.0, pp.omega_n, inv_l, r, pp.omega_n, pp.omega_n * pp.f_g,
                             pp.v_g_mag, 3, pp.plant_step, 5000, 1e3)

    results["rk4_advance 5000 steps"] = _best(rk4, repeat)

    exps = np.array(mono_basis(8, 2), dtype=np.int64)
    coefs = rng.standard_normal(len(exps))
    pts = rng.uniform(-1.3, 1.3, (100_000, 8))
    results["eval_terms 45 terms x 1e5"] = _best(lambda: eval_terms(exps, coefs, pts), repeat)
    print(json.dumps(results))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.worker:
        run_worker(args.repeat)
        return

    rows = {}
    for flag in ("1", "0"):
        env = dict(os.environ, SAFEFILTER_NUMBA=flag)
        out = subprocess.run([sys.executable, __file__, "--worker", "--repeat", str(args.repeat)],
                             env=env, capture_output=True, text=True, check=True)
        rows[flag] = json.loads(out.stdout.strip().splitlines()[-1])

    print(f"{'kernel':<28}{'numba [s]':>12}{'numpy [s]':>12}{'speedup':>10}")
    for name in rows["1"]:
        if name == "numba":
            continue
        a, b = rows["1"][name], rows["0"][name]
        print(f"{name:<28}{a:>12.4g}{b:>12.4g}{b / a:>9.1f}x")


if __name__ == "__main__":
    main()
