"""Coarse-to-fine grid search for the 4-variable filter QCQP.

    min ||u - u_n||^2  s.t.  C u + b <= 0,  u_0^2 + u_1^2 <= R^2

The grid runs over the modulation components (u_0, u_1) in polar
coordinates (radius clipped to [0, R], so the disc boundary is a grid line).  For
each grid point the remaining pair (u_2, u_3) is the Euclidean projection of
(u_n2, u_n3) onto a polygon cut out by two half-planes, taken as the nearest
feasible point among the polygon's candidate projections (the point itself,
its projections onto each line, the vertex).  Points whose polygon is empty
are filtered out.  Each level is a randomly rotated grid around the
incumbent with a random sub-cell shift; the grid shrinks after a few
levels without improvement.

Run as a script to regenerate ``tests/data/qcqp_oracle.json``.
"""

import json
import sys
from pathlib import Path

import numpy as np

N_INSTANCES = 1000
SEED = 7
R = 1.2


def make_instance(rng):
    """Random instance with a nonempty feasible set and a variety of active sets."""
    u_n = rng.uniform(-2.0, 2.0, 4)
    C = rng.standard_normal((2, 4))
    kind = rng.integers(0, 4)
    if kind == 0:
        C[1] = 0.0  # one linear constraint
    elif kind == 1:
        C[:, :2] *= 0.01  # constraints mostly on the rate components
    # an interior point of the disc fixes b so the set is nonempty
    r = R * np.sqrt(rng.random()) * 0.95
    a = 2 * np.pi * rng.random()
    u0 = np.array([r * np.cos(a), r * np.sin(a), *rng.uniform(-2.0, 2.0, 2)])
    b = -(C @ u0) - rng.exponential(0.3, 2)
    if kind == 0:
        b[1] = -1.0
    return u_n, C, b


def inner_projection(P, u_n, C, b):
    """Best (u_2, u_3) for each row of P = (u_0, u_1); inf where infeasible."""
    D = C[:, 2:]
    e = -(b[None, :] + P @ C[:, :2].T)  # D w <= e, one right-hand side per point
    w_n = u_n[2:]
    cands = [np.broadcast_to(w_n, P.shape).copy()]
    for i in range(2):
        nn = D[i] @ D[i]
        if nn > 0:
            cands.append(w_n[None, :] - ((D[i] @ w_n - e[:, i]) / nn)[:, None] * D[i][None, :])
    det = D[0, 0] * D[1, 1] - D[0, 1] * D[1, 0]
    if abs(det) > 1e-14:
        inv = np.array([[D[1, 1], -D[0, 1]], [-D[1, 0], D[0, 0]]]) / det
        cands.append(e @ inv.T)
    best = np.full(len(P), np.inf)
    best_w = np.zeros((len(P), 2))
    for w in cands:
        # candidates built to lie on a line satisfy it only up to rounding
        ok = np.all(w @ D.T <= e + 1e-12 * (1.0 + np.abs(e)), axis=1)
        d = np.where(ok, np.sum((w - w_n) ** 2, axis=1), np.inf)
        better = d < best
        best = np.where(better, d, best)
        best_w[better] = w[better]
    return best, best_w


def grid_oracle(u_n, C, b, points=21, shrink=0.5, patience=3, min_half=1e-11, max_levels=5000, seed=0):
    """Objective value of the best feasible grid point after refinement."""
    rng = np.random.default_rng(seed)
    half = np.array([0.5 * R, np.pi])
    center = np.array([0.5 * R, 0.0])
    best_u, best_f = None, np.inf
    lin = np.linspace(-1.0, 1.0, points)
    offsets = np.stack(np.meshgrid(lin, lin, indexing="ij"), -1).reshape(-1, 2)
    stall = 0
    for _ in range(max_levels):
        jitter = (rng.random(2) - 0.5) * (2.0 / (points - 1))
        G = center + (offsets + jitter) * half
        rho = np.clip(G[:, 0], 0.0, R)
        P = np.column_stack([rho * np.cos(G[:, 1]), rho * np.sin(G[:, 1])])
        inner, w = inner_projection(P, u_n, C, b)
        f = np.sum((P - u_n[:2]) ** 2, axis=1) + inner
        improved = False
        if np.isfinite(f).any():
            k = int(np.argmin(f))
            if f[k] < best_f:
                improved = True
                best_f, best_u = float(f[k]), np.concatenate([P[k], w[k]])
                center = np.array([rho[k], G[k, 1]])
        stall = 0 if improved else stall + 1
        if stall >= patience or best_u is None:
            half = half * shrink
            stall = 0
            if half.max() < min_half:
                break
    return best_f, best_u


def main(path):
    rng = np.random.default_rng(SEED)
    out = []
    for i in range(N_INSTANCES):
        u_n, C, b = make_instance(rng)
        f, u = grid_oracle(u_n, C, b)
        out.append({"u_n": u_n.tolist(), "C": C.tolist(), "b": b.tolist(), "R": R, "objective": f})
        if i % 100 == 0:
            print(i, f, file=sys.stderr)
    Path(path).write_text(json.dumps({"seed": SEED, "instances": out}))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parents[1] / "data" / "qcqp_oracle.json")
