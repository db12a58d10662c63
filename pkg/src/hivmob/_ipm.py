"""Primal-dual interior point solver for linear epsilon-SVR.

SMO slows to a crawl when C is large and the kernel has low rank; there the
number of pair updates grows roughly like C. An interior point method takes a
few dozen Newton steps regardless of C, so it is used to land next to the
optimum, after which SMO finishes from the snapped point in a handful of
iterations.

The problem is solved in feature space. ``K`` is factored as ``Z Z^T`` with
``Z`` from a pivoted Cholesky with as many columns as the numerical rank,
which keeps each Newton system at ``(rank + 1)`` unknowns. The compiled
backend runs the same iteration.
"""

from __future__ import annotations

import numpy as np

_STEP = 0.995


def pivoted_cholesky(K: np.ndarray, rel_tol: float = 1e-12) -> np.ndarray:
    """``Z`` with ``Z @ Z.T == K`` (to rounding) and as many columns as the
    numerical rank; pivots below ``rel_tol * max(diag K)`` end the sweep."""
    n = K.shape[0]
    diag = np.diag(K).astype(float).copy()
    perm = np.arange(n)
    Z = np.zeros((n, n))
    top = diag.max() if n else 0.0
    k = 0
    while k < n:
        best = k + int(np.argmax(diag[perm[k:]]))
        if diag[perm[best]] <= rel_tol * top:
            break
        perm[[k, best]] = perm[[best, k]]
        pk = perm[k]
        piv = np.sqrt(diag[pk])
        Z[pk, k] = piv
        rest = perm[k + 1:]
        col = (K[rest, pk] - Z[rest, :k] @ Z[pk, :k]) / piv
        Z[rest, k] = col
        diag[rest] -= col * col
        k += 1
    return Z[:, :k]


def _cholesky(A: np.ndarray) -> np.ndarray:
    A = A.copy()
    A[np.diag_indices_from(A)] += 1e-13 * np.trace(A) / A.shape[0]
    return np.linalg.cholesky(A)


def ipm(K, y, C: float, eps: float, tol: float = 1e-10, max_iter: int = 60):
    """Approximate dual variables ``(u, v)`` with ``u - v`` the coefficient
    vector on training rows, or ``None`` if the iteration broke down.

    Mehrotra predictor-corrector on
    ``min 1/2|w|^2 + C sum(xi + xi*)`` s.t. ``|y - Zw - b| <= eps + slack``.
    """
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    Z = pivoted_cholesky(np.asarray(K, dtype=float))
    p = Z.shape[1]
    A1 = np.column_stack([Z, np.ones(n)])
    w = np.zeros(p)
    b = float(y.mean())
    r = y - b
    xi = np.maximum(r - eps, 0.0) + 1.0
    xs = np.maximum(-r - eps, 0.0) + 1.0
    s = eps + xi - r
    t = eps + xs + r
    u = np.full(n, C / 2)
    v = u.copy()
    mu = u.copy()
    nu = u.copy()
    scale = max(1.0, C)
    try:
        for _ in range(max_iter):
            r = y - Z @ w - b
            Rw = w - Z.T @ (u - v)
            Rb = float((u - v).sum())
            R1 = u + mu - C
            R2 = v + nu - C
            Rs = s - (eps + xi - r)
            Rt = t - (eps + xs + r)
            gap = (s @ u + t @ v + xi @ mu + xs @ nu) / (4 * n)
            res = max(np.abs(Rw).max(initial=0.0), abs(Rb), np.abs(R1).max(), np.abs(R2).max(),
                      np.abs(Rs).max(), np.abs(Rt).max())
            if gap < tol * scale and res < tol * scale:
                break
            au, am, av, an = u / s, mu / xi, v / t, nu / xs
            d = au * am / (au + am) + av * an / (av + an)
            M = (A1.T * d) @ A1
            M[np.arange(p), np.arange(p)] += 1.0
            L = _cholesky(M)

            def direction(csu, ctv, cxm, cxn):
                h1 = R1 - csu / s - cxm / xi + au * Rs
                h2 = R2 - ctv / t - cxn / xs + av * Rt
                g = (-csu / s + au * Rs - au * h1 / (au + am)) - (-ctv / t + av * Rt - av * h2 / (av + an))
                rhs = np.concatenate([-Rw + Z.T @ g, [Rb + g.sum()]])
                sol = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
                q = A1 @ sol
                dxi = (h1 - au * q) / (au + am)
                ds = dxi + q - Rs
                du = (-csu - u * ds) / s
                dxs = (h2 + av * q) / (av + an)
                dt = dxs - q - Rt
                dv = (-ctv - v * dt) / t
                return sol, (dxi, dxs, ds, dt, du, dv, -R1 - du, -R2 - dv)

            def max_step(dirs):
                alpha = 1.0
                for x, dx in zip((xi, xs, s, t, u, v, mu, nu), dirs):
                    neg = dx < 0
                    if neg.any():
                        alpha = min(alpha, float((-x[neg] / dx[neg]).min()))
                return alpha

            _, aff = direction(s * u, t * v, xi * mu, xs * nu)
            a0 = max_step(aff)
            dxi, dxs, ds, dt, du, dv, dmu, dnu = aff
            gap_aff = ((s + a0 * ds) @ (u + a0 * du) + (t + a0 * dt) @ (v + a0 * dv)
                       + (xi + a0 * dxi) @ (mu + a0 * dmu) + (xs + a0 * dxs) @ (nu + a0 * dnu)) / (4 * n)
            sm = (gap_aff / gap) ** 3 * gap
            sol, dirs = direction(s * u + ds * du - sm, t * v + dt * dv - sm,
                                  xi * mu + dxi * dmu - sm, xs * nu + dxs * dnu - sm)
            alpha = min(1.0, _STEP * max_step(dirs))
            w += alpha * sol[:p]
            b += alpha * sol[p]
            for x, dx in zip((xi, xs, s, t, u, v, mu, nu), dirs):
                x += alpha * dx
    except np.linalg.LinAlgError:
        return None
    if not (np.isfinite(u).all() and np.isfinite(v).all()):
        return None
    return u, v


def snap(u, v, C: float) -> np.ndarray:
    """Project interior-point duals onto the SMO feasible set.

    Values within a relative 1e-9 of a bound are put on it, at most one of
    ``u_i, v_i`` is kept nonzero, and the equality ``sum(u - v) = 0`` is
    restored by moving free entries first.
    """
    u = np.clip(u, 0.0, C)
    v = np.clip(v, 0.0, C)
    common = np.minimum(u, v)
    u = u - common
    v = v - common
    for z in (u, v):
        z[z < 1e-9 * C] = 0.0
        z[z > C * (1.0 - 1e-9)] = C
    excess = float((u - v).sum())
    free = (u > 0) & (u < C) | (v > 0) & (v < C)
    order = np.concatenate([np.flatnonzero(free), np.flatnonzero(~free)])
    for i in order.tolist():
        if excess == 0.0:
            break
        if excess > 0:
            if u[i] > 0:
                step = min(excess, u[i])
                u[i] -= step
            else:
                step = min(excess, C - v[i])
                v[i] = C if step == C - v[i] else v[i] + step
            excess -= step
        else:
            if v[i] > 0:
                step = min(-excess, v[i])
                v[i] -= step
            else:
                step = min(-excess, C - u[i])
                u[i] = C if step == C - u[i] else u[i] + step
            excess += step
    return np.concatenate([u, v])


def warm_point(K, y, C: float, eps: float) -> np.ndarray | None:
    """Feasible SMO starting point near the optimum, or ``None``."""
    out = ipm(K, y, C, eps)
    if out is None:
        return None
    return snap(out[0], out[1], C)
