"""Pure-Python/numpy fallback for the compiled kernels in ``_ckernels.pyx``.

Same algorithms and the same signatures; used when the extension is not
built or when ``HIVMOB_PURE=1`` is set.
"""

import numpy as np

from . import _ipm

TAU = 1e-12


def _init_grad(K, y, eps, a):
    n = y.shape[0]
    kt = K @ (a[:n] - a[n:])
    return np.concatenate([kt + eps - y, -kt + eps + y])


def _smo(K, n, C, a, G, tol, max_iter):
    z = np.concatenate([np.ones(n), -np.ones(n)])
    diag = np.diag(K)
    QD = np.concatenate([diag, diag])
    it = 0
    while True:
        up_pos = (z > 0) & (a < C)
        up_neg = (z < 0) & (a > 0)
        score = np.where(up_pos, -G, np.where(up_neg, G, -np.inf))
        # ties resolved toward the last index, as in the compiled loop
        i = len(score) - 1 - int(np.argmax(score[::-1]))
        gmax = score[i]
        if gmax == -np.inf:
            return it, -np.inf
        zi = z[i]
        Krow = K[i % n]
        Qi = zi * z * np.concatenate([Krow, Krow])
        low_pos = (z > 0) & (a > 0)
        low_neg = (z < 0) & (a < C)
        cand = np.where(low_pos, G, np.where(low_neg, -G, -np.inf))
        gmax2 = cand.max()
        grad_diff = np.where(low_pos, gmax + G, np.where(low_neg, gmax - G, -np.inf))
        quad = QD[i] + QD - 2.0 * np.concatenate([Krow, Krow])
        quad = np.where(quad <= 0, TAU, quad)
        ok = grad_diff > 0
        kkt = gmax + gmax2
        if not ok.any() or kkt < tol:
            return it, kkt
        obj = np.where(ok, -(grad_diff * grad_diff) / quad, np.inf)
        j = len(obj) - 1 - int(np.argmin(obj[::-1]))
        if it >= max_iter:
            return -1, kkt
        it += 1

        zj = z[j]
        qii, qjj, qij = QD[i], QD[j], Qi[j]
        ai_old, aj_old = a[i], a[j]
        if zi != zj:
            q = qii + qjj + 2.0 * qij
            if q <= 0:
                q = TAU
            delta = (-G[i] - G[j]) / q
            diff = a[i] - a[j]
            a[i] += delta
            a[j] += delta
            if diff > 0:
                if a[j] < 0:
                    a[j] = 0.0
                    a[i] = diff
            else:
                if a[i] < 0:
                    a[i] = 0.0
                    a[j] = -diff
            if diff > 0:
                if a[i] > C:
                    a[i] = C
                    a[j] = C - diff
            else:
                if a[j] > C:
                    a[j] = C
                    a[i] = C + diff
        else:
            q = qii + qjj - 2.0 * qij
            if q <= 0:
                q = TAU
            delta = (G[i] - G[j]) / q
            total = a[i] + a[j]
            a[i] -= delta
            a[j] += delta
            if total > C:
                if a[i] > C:
                    a[i] = C
                    a[j] = total - C
            else:
                if a[j] < 0:
                    a[j] = 0.0
                    a[i] = total
            if total > C:
                if a[j] > C:
                    a[j] = C
                    a[i] = total - C
            else:
                if a[i] < 0:
                    a[i] = 0.0
                    a[j] = total
        dai = a[i] - ai_old
        daj = a[j] - aj_old
        Krow_j = K[j % n]
        Qj = zj * z * np.concatenate([Krow_j, Krow_j])
        G += Qi * dai + Qj * daj


def _solve(K, y, C, eps, a, tol, max_iter, budget):
    n = y.shape[0]
    first = min(budget, max_iter)
    G = _init_grad(K, y, eps, a)
    it, kkt = _smo(K, n, C, a, G, tol, first)
    if it >= 0 or first >= max_iter:
        return it, kkt, G
    start = _ipm.warm_point(K, y, C, eps)
    if start is not None:
        a[:] = start
    G = _init_grad(K, y, eps, a)
    it, kkt = _smo(K, n, C, a, G, tol, max_iter - first)
    return (first + it if it >= 0 else -1), kkt, G


def smo_solve(K, y, C, eps, a, tol, max_iter, budget):
    it, kkt, _ = _solve(K, y, C, eps, a, tol, max_iter, budget)
    return it, kkt


def optimal_bias(r, eps):
    r = np.asarray(r, dtype=float)
    pts = np.concatenate([r - eps, r + eps])
    right = ((r[None, :] + eps) <= pts[:, None]).sum(1) - ((r[None, :] - eps) > pts[:, None]).sum(1)
    lo = pts[right >= 0].min()
    hi_c = pts[right > 0]
    hi = hi_c.min() if hi_c.size else lo
    return 0.5 * (lo + hi)


def svr_loo_mse(K, y, Cs, eps, tol, max_iter, budget, warm=None):
    n = y.shape[0]
    sq = np.zeros((n, len(Cs)))
    iters = np.zeros((n, len(Cs)), dtype=np.int64)
    for i in range(n):
        keep = np.r_[0:i, i + 1:n]
        Ki = np.ascontiguousarray(K[np.ix_(keep, keep)])
        yi = y[keep]
        m = n - 1
        a = np.zeros(2 * m)
        for k, C in enumerate(Cs):
            if warm is not None:
                a = warm[i, k].copy()
            iters[i, k], _, G = _solve(Ki, yi, C, eps, a, tol, max_iter, budget)
            if warm is not None:
                warm[i, k] = a
            b = optimal_bias(eps - G[:m], eps)
            f = b + (a[:m] - a[m:]) @ K[i, keep]
            sq[i, k] = (f - y[i]) ** 2
    return sq, iters


def kernel_sums(gx, gy, cx, cy, h, tested, positive, trunc):
    d2 = (gx[:, None] - cx[None, :]) ** 2 + (gy[:, None] - cy[None, :]) ** 2
    u2 = d2 / (h[None, :] ** 2)
    w = np.exp(-0.5 * u2) / (2.0 * np.pi) / (h[None, :] ** 2)
    w[u2 > trunc * trunc] = 0.0
    return w.sum(1), w @ tested, w @ positive
