"""Slow, independent reference implementations used only by the tests."""
from __future__ import annotations

import itertools
import math

import numpy as np


def jacobi_eigh(a: np.ndarray, sweeps: int = 100, tol: float = 1e-28):
    """Cyclic Jacobi eigen-solver for a symmetric matrix; eigenvalues descending."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(sweeps):
        off = np.sum((a - np.diag(np.diag(a))) ** 2)
        if off <= tol * max(1.0, np.sum(np.diag(a) ** 2)):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q], rot[q, p] = s, -s
                a = rot.T @ a @ rot
                v = v @ rot
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def svd_oracle(m: np.ndarray, p: int):
    """Top-p left singular vectors and values from the Gram matrix M Mᵀ."""
    w, v = jacobi_eigh(m @ m.T)
    return v[:, :p], np.sqrt(np.clip(w[:p], 0.0, None))


def angle_oracle(u: np.ndarray, w: np.ndarray, iters: int = 5000) -> np.ndarray:
    """Principal angles (degrees) by direct maximization of cos between unit vectors.

    For k = 1..p: maximise xᵀ(UᵀW)y over unit x ⟂ previous xs, y ⟂ previous ys
    by alternating updates; the angle is then measured with atan2 on the
    chosen pair of vectors.
    """
    a = u.T @ w
    p = min(a.shape)
    xs, ys, out = [], [], []
    rng = np.random.default_rng(0)
    for _ in range(p):
        def proj(z, basis):
            for b in basis:
                z = z - (b @ z) * b
            return z / np.linalg.norm(z)

        y = proj(rng.standard_normal(a.shape[1]), ys)
        x = proj(a @ y, xs)
        for _ in range(iters):
            y_new = proj(a.T @ x, ys)
            x_new = proj(a @ y_new, xs)
            done = np.linalg.norm(x_new - x) < 1e-15 and np.linalg.norm(y_new - y) < 1e-15
            x, y = x_new, y_new
            if done:
                break
        uu, ww = u @ x, w @ y
        out.append(math.degrees(math.atan2(np.linalg.norm(ww - (uu @ ww) * uu), abs(uu @ ww))))
        xs.append(x)
        ys.append(y)
    return np.array(out)


def transport_vertex_oracle(p: np.ndarray, q: np.ndarray, cost: np.ndarray) -> float:
    """Minimum cost over all basic feasible solutions of the transportation LP."""
    rows, cols = np.flatnonzero(p > 0), np.flatnonzero(q > 0)
    m, n = len(rows), len(cols)
    c = cost[np.ix_(rows, cols)].ravel()
    a = np.zeros((m + n, m * n))
    for i in range(m):
        a[i, i * n:(i + 1) * n] = 1.0
    for j in range(n):
        a[m + j, j::n] = 1.0
    b = np.concatenate([p[rows], q[cols]])
    # one equality is redundant (total mass); drop the last
    a_r, b_r = a[:-1], b[:-1]
    r = m + n - 1
    best = math.inf
    for cells in itertools.combinations(range(m * n), r):
        sub = a_r[:, cells]
        if abs(np.linalg.det(sub)) < 1e-12:
            continue
        xb = np.linalg.solve(sub, b_r)
        if np.any(xb < -1e-12):
            continue
        x = np.zeros(m * n)
        x[list(cells)] = xb
        if np.max(np.abs(a @ x - b)) > 1e-9:
            continue
        best = min(best, float(c @ x))
    return best


def finite_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g
