"""Projection-method reference for random SDPs, independent of the package solver.

Instances are ``min <C, X>  s.t.  <A_i, X> = b_i,  X PSD`` on a single block.
The reference optimum comes from ADMM alternating between the projection
onto the affine set and the projection onto the PSD cone.

Run as a script to regenerate ``tests/data/sdp_oracle.json``.
"""

import json
import sys
from pathlib import Path

import numpy as np

N_INSTANCES = 50
SEED = 20240601


def make_instance(rng):
    n = int(rng.integers(2, 11))
    m = int(rng.integers(1, min(20, n * (n + 1) // 2) + 1))
    A = []
    for _ in range(m):
        M = rng.standard_normal((n, n))
        A.append(0.5 * (M + M.T))
    L = rng.standard_normal((n, n))
    X0 = L @ L.T / n + 0.5 * np.eye(n)
    b = np.array([np.sum(Ai * X0) for Ai in A])
    K = rng.standard_normal((n, n))
    S0 = K @ K.T / n + 0.5 * np.eye(n)
    y0 = rng.standard_normal(m)
    C = S0 + sum(yi * Ai for yi, Ai in zip(y0, A))
    return {"n": n, "A": [a.tolist() for a in A], "b": b.tolist(), "C": C.tolist()}


def admm(inst, rho=1.0, iters=200000, tol=1e-11):
    n = inst["n"]
    A = np.array([np.asarray(a).ravel() for a in inst["A"]])
    b = np.asarray(inst["b"])
    C = np.asarray(inst["C"])
    AAt = np.linalg.pinv(A @ A.T)

    def proj_affine(V):
        v = V.ravel()
        return (v - A.T @ (AAt @ (A @ v - b))).reshape(n, n)

    def proj_psd(V):
        w, U = np.linalg.eigh(0.5 * (V + V.T))
        return (U * np.maximum(w, 0.0)) @ U.T

    Z = np.eye(n)
    U = np.zeros((n, n))
    for k in range(iters):
        X = proj_affine(Z - U - C / rho)
        Z_old = Z
        Z = proj_psd(X + U)
        U = U + X - Z
        if k % 50 == 0:
            r = np.linalg.norm(X - Z)
            s = rho * np.linalg.norm(Z - Z_old)
            if r < tol * (1 + np.linalg.norm(Z)) and s < tol * (1 + np.linalg.norm(C)):
                break
            # keep primal and dual residuals balanced
            if r > 10 * s:
                rho *= 2.0
                U /= 2.0
            elif s > 10 * r:
                rho /= 2.0
                U *= 2.0
    return float(np.sum(C * Z)), k


def main(path):
    rng = np.random.default_rng(SEED)
    out = []
    for i in range(N_INSTANCES):
        inst = make_instance(rng)
        obj, its = admm(inst)
        inst["objective"] = obj
        out.append(inst)
        print(i, inst["n"], len(inst["b"]), obj, its, file=sys.stderr)
    Path(path).write_text(json.dumps({"seed": SEED, "instances": out}))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parents[1] / "data" / "sdp_oracle.json")
