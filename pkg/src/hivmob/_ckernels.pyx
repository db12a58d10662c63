# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: epsilon-SVR dual SMO with an interior-point restart,
LOO grid scoring, kernel sums.

Every routine here has a line-for-line counterpart in ``_pykernels``.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, fabs, isfinite, INFINITY
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef double TAU = 1e-12


cdef void _init_grad(const double[:, ::1] K, const Py_ssize_t* idx, Py_ssize_t n,
                     const double* y, double eps, const double* a, double* G) noexcept nogil:
    cdef Py_ssize_t s, t
    cdef double kt
    for s in range(n):
        kt = 0.0
        for t in range(n):
            kt += K[idx[s], idx[t]] * (a[t] - a[n + t])
        G[s] = kt + eps - y[s]
        G[n + s] = -kt + eps + y[s]


cdef inline double _q(const double[:, ::1] K, const Py_ssize_t* idx, Py_ssize_t n,
                      Py_ssize_t s, Py_ssize_t t) noexcept nogil:
    cdef double zs = 1.0 if s < n else -1.0
    cdef double zt = 1.0 if t < n else -1.0
    return zs * zt * K[idx[s % n], idx[t % n]]


cdef long _smo(const double[:, ::1] K, const Py_ssize_t* idx, Py_ssize_t n,
               double C, double* a, double* G, double tol, long max_iter,
               double* kkt) noexcept nogil:
    """Second-order working-set SMO on the 2n-variable SVR dual.

    Returns the iteration count, or -1 when ``max_iter`` is exhausted.
    """
    cdef Py_ssize_t m = 2 * n
    cdef Py_ssize_t t, i, j
    cdef long it = 0
    cdef double gmax, gmax2, grad_diff, quad, obj, obj_min
    cdef double zi, zj, ai_old, aj_old, dai, daj, delta, diff, total
    cdef double qii, qjj, qij
    while True:
        gmax = -INFINITY
        i = -1
        for t in range(m):
            if t < n:
                if a[t] < C and -G[t] >= gmax:
                    gmax = -G[t]
                    i = t
            else:
                if a[t] > 0 and G[t] >= gmax:
                    gmax = G[t]
                    i = t
        gmax2 = -INFINITY
        j = -1
        obj_min = INFINITY
        if i >= 0:
            zi = 1.0 if i < n else -1.0
            qii = K[idx[i % n], idx[i % n]]
            for t in range(m):
                if t < n:
                    if a[t] > 0:
                        grad_diff = gmax + G[t]
                        if G[t] >= gmax2:
                            gmax2 = G[t]
                        if grad_diff > 0:
                            quad = qii + K[idx[t], idx[t]] - 2.0 * zi * _q(K, idx, n, i, t)
                            if quad <= 0:
                                quad = TAU
                            obj = -(grad_diff * grad_diff) / quad
                            if obj <= obj_min:
                                j = t
                                obj_min = obj
                else:
                    if a[t] < C:
                        grad_diff = gmax - G[t]
                        if -G[t] >= gmax2:
                            gmax2 = -G[t]
                        if grad_diff > 0:
                            quad = qii + K[idx[t - n], idx[t - n]] + 2.0 * zi * _q(K, idx, n, i, t)
                            if quad <= 0:
                                quad = TAU
                            obj = -(grad_diff * grad_diff) / quad
                            if obj <= obj_min:
                                j = t
                                obj_min = obj
        kkt[0] = gmax + gmax2
        if i < 0 or j < 0 or gmax + gmax2 < tol:
            return it
        if it >= max_iter:
            return -1
        it += 1

        zi = 1.0 if i < n else -1.0
        zj = 1.0 if j < n else -1.0
        qii = K[idx[i % n], idx[i % n]]
        qjj = K[idx[j % n], idx[j % n]]
        qij = _q(K, idx, n, i, j)
        ai_old = a[i]
        aj_old = a[j]
        if zi != zj:
            quad = qii + qjj + 2.0 * qij
            if quad <= 0:
                quad = TAU
            delta = (-G[i] - G[j]) / quad
            diff = a[i] - a[j]
            a[i] += delta
            a[j] += delta
            if diff > 0:
                if a[j] < 0:
                    a[j] = 0
                    a[i] = diff
            else:
                if a[i] < 0:
                    a[i] = 0
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
            quad = qii + qjj - 2.0 * qij
            if quad <= 0:
                quad = TAU
            delta = (G[i] - G[j]) / quad
            total = a[i] + a[j]
            a[i] -= delta
            a[j] += delta
            if total > C:
                if a[i] > C:
                    a[i] = C
                    a[j] = total - C
            else:
                if a[j] < 0:
                    a[j] = 0
                    a[i] = total
            if total > C:
                if a[j] > C:
                    a[j] = C
                    a[i] = total - C
            else:
                if a[i] < 0:
                    a[i] = 0
                    a[j] = total
        dai = a[i] - ai_old
        daj = a[j] - aj_old
        for t in range(m):
            G[t] += _q(K, idx, n, i, t) * dai + _q(K, idx, n, j, t) * daj


# ---------------------------------------------------------------------------
# Interior-point restart (mirrors ``_ipm``)

cdef double IPM_STEP = 0.995
cdef double IPM_TOL = 1e-10
cdef int IPM_MAX_ITER = 60


cdef Py_ssize_t _pchol(const double[:, ::1] K, const Py_ssize_t* idx, Py_ssize_t n,
                       double* Z, double* diag, Py_ssize_t* perm) noexcept nogil:
    """Pivoted Cholesky into ``Z`` (row stride n); returns the rank."""
    cdef Py_ssize_t i, j, k, l, best, pk, pj
    cdef double top = 0.0, piv, v
    for i in range(n):
        perm[i] = i
        diag[i] = K[idx[i], idx[i]]
        if i == 0 or diag[i] > top:
            top = diag[i]
        for j in range(n):
            Z[i * n + j] = 0.0
    for k in range(n):
        best = k
        for j in range(k + 1, n):
            if diag[perm[j]] > diag[perm[best]]:
                best = j
        if diag[perm[best]] <= 1e-12 * top:
            return k
        pk = perm[best]
        perm[best] = perm[k]
        perm[k] = pk
        piv = sqrt(diag[pk])
        Z[pk * n + k] = piv
        for j in range(k + 1, n):
            pj = perm[j]
            v = 0.0
            for l in range(k):
                v += Z[pj * n + l] * Z[pk * n + l]
            v = (K[idx[pj], idx[pk]] - v) / piv
            Z[pj * n + k] = v
            diag[pj] -= v * v
    return n


cdef int _chol_inplace(double* M, Py_ssize_t k) noexcept nogil:
    """Lower Cholesky of the k x k matrix ``M`` with a relative jitter."""
    cdef Py_ssize_t i, j, l
    cdef double tr = 0.0, v
    for i in range(k):
        tr += M[i * k + i]
    for i in range(k):
        M[i * k + i] += 1e-13 * tr / k
    for j in range(k):
        v = M[j * k + j]
        for l in range(j):
            v -= M[j * k + l] * M[j * k + l]
        if not (v > 0):
            return -1
        v = sqrt(v)
        M[j * k + j] = v
        for i in range(j + 1, k):
            tr = M[i * k + j]
            for l in range(j):
                tr -= M[i * k + l] * M[j * k + l]
            M[i * k + j] = tr / v
    return 0


cdef void _chol_solve(const double* L, Py_ssize_t k, double* x) noexcept nogil:
    cdef Py_ssize_t i, l
    cdef double v
    for i in range(k):
        v = x[i]
        for l in range(i):
            v -= L[i * k + l] * x[l]
        x[i] = v / L[i * k + i]
    for i in range(k - 1, -1, -1):
        v = x[i]
        for l in range(i + 1, k):
            v -= L[l * k + i] * x[l]
        x[i] = v / L[i * k + i]


cdef struct IpmState:
    Py_ssize_t n, p
    double C, eps
    double* Z
    const double* y
    double* w
    double* xi
    double* xs
    double* s
    double* t
    double* u
    double* v
    double* mu
    double* nu
    double* Rw
    double Rb
    double* R1
    double* R2
    double* Rs
    double* Rt
    double* au
    double* am
    double* av
    double* an
    double* L
    double* h1
    double* h2
    double* g
    double* q
    double* sol
    double* csu
    double* ctv
    double* cxm
    double* cxn
    double* dirs


cdef void _ipm_direction(IpmState* S) noexcept nogil:
    cdef Py_ssize_t n = S.n, p = S.p, i, j
    cdef double acc, gsum = 0.0
    cdef double* dxi = S.dirs
    cdef double* dxs = S.dirs + n
    cdef double* ds = S.dirs + 2 * n
    cdef double* dt = S.dirs + 3 * n
    cdef double* du = S.dirs + 4 * n
    cdef double* dv = S.dirs + 5 * n
    cdef double* dmu = S.dirs + 6 * n
    cdef double* dnu = S.dirs + 7 * n
    for i in range(n):
        S.h1[i] = S.R1[i] - S.csu[i] / S.s[i] - S.cxm[i] / S.xi[i] + S.au[i] * S.Rs[i]
        S.h2[i] = S.R2[i] - S.ctv[i] / S.t[i] - S.cxn[i] / S.xs[i] + S.av[i] * S.Rt[i]
        S.g[i] = ((-S.csu[i] / S.s[i] + S.au[i] * S.Rs[i] - S.au[i] * S.h1[i] / (S.au[i] + S.am[i]))
                  - (-S.ctv[i] / S.t[i] + S.av[i] * S.Rt[i] - S.av[i] * S.h2[i] / (S.av[i] + S.an[i])))
        gsum += S.g[i]
    for j in range(p):
        acc = 0.0
        for i in range(n):
            acc += S.Z[i * n + j] * S.g[i]
        S.sol[j] = -S.Rw[j] + acc
    S.sol[p] = S.Rb + gsum
    _chol_solve(S.L, p + 1, S.sol)
    for i in range(n):
        acc = S.sol[p]
        for j in range(p):
            acc += S.Z[i * n + j] * S.sol[j]
        S.q[i] = acc
        dxi[i] = (S.h1[i] - S.au[i] * acc) / (S.au[i] + S.am[i])
        ds[i] = dxi[i] + acc - S.Rs[i]
        du[i] = (-S.csu[i] - S.u[i] * ds[i]) / S.s[i]
        dxs[i] = (S.h2[i] + S.av[i] * acc) / (S.av[i] + S.an[i])
        dt[i] = dxs[i] - acc - S.Rt[i]
        dv[i] = (-S.ctv[i] - S.v[i] * dt[i]) / S.t[i]
        dmu[i] = -S.R1[i] - du[i]
        dnu[i] = -S.R2[i] - dv[i]


cdef double _ipm_max_step(IpmState* S) noexcept nogil:
    cdef Py_ssize_t n = S.n, i, c
    cdef double alpha = 1.0, r
    cdef double* xs_[8]
    xs_[0] = S.xi
    xs_[1] = S.xs
    xs_[2] = S.s
    xs_[3] = S.t
    xs_[4] = S.u
    xs_[5] = S.v
    xs_[6] = S.mu
    xs_[7] = S.nu
    for c in range(8):
        for i in range(n):
            if S.dirs[c * n + i] < 0:
                r = -xs_[c][i] / S.dirs[c * n + i]
                if r < alpha:
                    alpha = r
    return alpha


cdef int _ipm(const double[:, ::1] K, const Py_ssize_t* idx, Py_ssize_t n, const double* y,
              double C, double eps, double* a) noexcept nogil:
    """Interior-point estimate of the dual written into ``a`` (unsnapped);
    returns 0 on success."""
    cdef IpmState S
    cdef Py_ssize_t i, j, l, c, p, k1
    cdef int it, status = 0
    cdef double b, acc, gap, res, dval, gap_aff, a0, sm, alpha
    cdef double scale = C if C > 1.0 else 1.0
    cdef double* block = <double*> malloc((n * n + 40 * n + (n + 1) * (n + 1) + 2 * (n + 1)) * sizeof(double))
    cdef Py_ssize_t* perm = <Py_ssize_t*> malloc(n * sizeof(Py_ssize_t))
    cdef double* pos
    cdef double* xs_[8]
    if block == NULL or perm == NULL:
        free(block)
        free(perm)
        return -1
    S.n = n
    S.C = C
    S.eps = eps
    S.y = y
    S.Z = block
    pos = block + n * n
    S.xi = pos; pos += n
    S.xs = pos; pos += n
    S.s = pos; pos += n
    S.t = pos; pos += n
    S.u = pos; pos += n
    S.v = pos; pos += n
    S.mu = pos; pos += n
    S.nu = pos; pos += n
    S.R1 = pos; pos += n
    S.R2 = pos; pos += n
    S.Rs = pos; pos += n
    S.Rt = pos; pos += n
    S.au = pos; pos += n
    S.am = pos; pos += n
    S.av = pos; pos += n
    S.an = pos; pos += n
    S.h1 = pos; pos += n
    S.h2 = pos; pos += n
    S.g = pos; pos += n
    S.q = pos; pos += n
    S.csu = pos; pos += n
    S.ctv = pos; pos += n
    S.cxm = pos; pos += n
    S.cxn = pos; pos += n
    S.dirs = pos; pos += 8 * n
    S.Rw = pos; pos += n       # also pivot diagonal scratch below
    S.w = pos; pos += n + 1    # w[0:p], b kept separately
    S.sol = pos; pos += n + 1
    S.L = pos
    p = _pchol(K, idx, n, S.Z, S.Rw, perm)
    S.p = p
    k1 = p + 1
    xs_[0] = S.xi
    xs_[1] = S.xs
    xs_[2] = S.s
    xs_[3] = S.t
    xs_[4] = S.u
    xs_[5] = S.v
    xs_[6] = S.mu
    xs_[7] = S.nu

    b = 0.0
    for i in range(n):
        b += y[i]
    b /= n
    for j in range(p):
        S.w[j] = 0.0
    for i in range(n):
        acc = y[i] - b
        S.xi[i] = (acc - eps if acc - eps > 0 else 0.0) + 1.0
        S.xs[i] = (-acc - eps if -acc - eps > 0 else 0.0) + 1.0
        S.s[i] = eps + S.xi[i] - acc
        S.t[i] = eps + S.xs[i] + acc
        S.u[i] = C / 2
        S.v[i] = C / 2
        S.mu[i] = C / 2
        S.nu[i] = C / 2

    for it in range(IPM_MAX_ITER):
        gap = 0.0
        res = 0.0
        S.Rb = 0.0
        for j in range(p):
            acc = 0.0
            for i in range(n):
                acc += S.Z[i * n + j] * (S.u[i] - S.v[i])
            S.Rw[j] = S.w[j] - acc
            if fabs(S.Rw[j]) > res:
                res = fabs(S.Rw[j])
        for i in range(n):
            acc = b
            for j in range(p):
                acc += S.Z[i * n + j] * S.w[j]
            acc = y[i] - acc
            S.Rb += S.u[i] - S.v[i]
            S.R1[i] = S.u[i] + S.mu[i] - C
            S.R2[i] = S.v[i] + S.nu[i] - C
            S.Rs[i] = S.s[i] - (eps + S.xi[i] - acc)
            S.Rt[i] = S.t[i] - (eps + S.xs[i] + acc)
            gap += S.s[i] * S.u[i] + S.t[i] * S.v[i] + S.xi[i] * S.mu[i] + S.xs[i] * S.nu[i]
            res = max(res, max(max(fabs(S.R1[i]), fabs(S.R2[i])), max(fabs(S.Rs[i]), fabs(S.Rt[i]))))
        res = max(res, fabs(S.Rb))
        gap /= 4 * n
        if gap < IPM_TOL * scale and res < IPM_TOL * scale:
            break
        for l in range(k1 * k1):
            S.L[l] = 0.0
        for i in range(n):
            S.au[i] = S.u[i] / S.s[i]
            S.am[i] = S.mu[i] / S.xi[i]
            S.av[i] = S.v[i] / S.t[i]
            S.an[i] = S.nu[i] / S.xs[i]
            dval = (S.au[i] * S.am[i] / (S.au[i] + S.am[i])
                    + S.av[i] * S.an[i] / (S.av[i] + S.an[i]))
            for j in range(p):
                acc = dval * S.Z[i * n + j]
                for l in range(j + 1):
                    S.L[j * k1 + l] += acc * S.Z[i * n + l]
                S.L[p * k1 + j] += acc
            S.L[p * k1 + p] += dval
        for j in range(p):
            S.L[j * k1 + j] += 1.0
        if _chol_inplace(S.L, k1) != 0:
            status = -1
            break
        # predictor
        for i in range(n):
            S.csu[i] = S.s[i] * S.u[i]
            S.ctv[i] = S.t[i] * S.v[i]
            S.cxm[i] = S.xi[i] * S.mu[i]
            S.cxn[i] = S.xs[i] * S.nu[i]
        _ipm_direction(&S)
        a0 = _ipm_max_step(&S)
        gap_aff = 0.0
        for i in range(n):
            gap_aff += ((S.s[i] + a0 * S.dirs[2 * n + i]) * (S.u[i] + a0 * S.dirs[4 * n + i])
                        + (S.t[i] + a0 * S.dirs[3 * n + i]) * (S.v[i] + a0 * S.dirs[5 * n + i])
                        + (S.xi[i] + a0 * S.dirs[i]) * (S.mu[i] + a0 * S.dirs[6 * n + i])
                        + (S.xs[i] + a0 * S.dirs[n + i]) * (S.nu[i] + a0 * S.dirs[7 * n + i]))
        gap_aff /= 4 * n
        sm = (gap_aff / gap) * (gap_aff / gap) * (gap_aff / gap) * gap
        # corrector
        for i in range(n):
            S.csu[i] = S.s[i] * S.u[i] + S.dirs[2 * n + i] * S.dirs[4 * n + i] - sm
            S.ctv[i] = S.t[i] * S.v[i] + S.dirs[3 * n + i] * S.dirs[5 * n + i] - sm
            S.cxm[i] = S.xi[i] * S.mu[i] + S.dirs[i] * S.dirs[6 * n + i] - sm
            S.cxn[i] = S.xs[i] * S.nu[i] + S.dirs[n + i] * S.dirs[7 * n + i] - sm
        _ipm_direction(&S)
        alpha = IPM_STEP * _ipm_max_step(&S)
        if alpha > 1.0:
            alpha = 1.0
        for j in range(p):
            S.w[j] += alpha * S.sol[j]
        b += alpha * S.sol[p]
        for c in range(8):
            for i in range(n):
                xs_[c][i] += alpha * S.dirs[c * n + i]
    for i in range(n):
        if not (isfinite(S.u[i]) and isfinite(S.v[i])):
            status = -1
        a[i] = S.u[i]
        a[n + i] = S.v[i]
    free(block)
    free(perm)
    return status


cdef void _snap(double* a, Py_ssize_t n, double C, char* free_) noexcept nogil:
    """Project interior-point duals onto the SMO feasible set (see ``_ipm.snap``)."""
    cdef Py_ssize_t i, pass_
    cdef double c, excess = 0.0, step
    cdef double* u = a
    cdef double* v = a + n
    for i in range(n):
        u[i] = min(max(u[i], 0.0), C)
        v[i] = min(max(v[i], 0.0), C)
        c = min(u[i], v[i])
        u[i] -= c
        v[i] -= c
    for i in range(n):
        if u[i] < 1e-9 * C:
            u[i] = 0.0
        if u[i] > C * (1.0 - 1e-9):
            u[i] = C
    for i in range(n):
        if v[i] < 1e-9 * C:
            v[i] = 0.0
        if v[i] > C * (1.0 - 1e-9):
            v[i] = C
    for i in range(n):
        excess += u[i] - v[i]
        free_[i] = (u[i] > 0 and u[i] < C) or (v[i] > 0 and v[i] < C)
    for pass_ in range(2):
        for i in range(n):
            if excess == 0.0:
                return
            if free_[i] != (pass_ == 0):
                continue
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


cdef long _solve(const double[:, ::1] K, const Py_ssize_t* idx, Py_ssize_t n, const double* y,
                 double C, double eps, double* a, double* G, double tol, long max_iter,
                 long budget, double* kkt) noexcept nogil:
    """Budgeted SMO; on exhaustion restart from the snapped interior-point
    solution and let SMO finish."""
    cdef long it, first = budget if budget < max_iter else max_iter
    cdef Py_ssize_t s
    cdef double* trial
    _init_grad(K, idx, n, y, eps, a, G)
    it = _smo(K, idx, n, C, a, G, tol, first, kkt)
    if it >= 0 or first >= max_iter:
        return it
    trial = <double*> malloc(2 * n * sizeof(double) + n)
    if trial != NULL:
        if _ipm(K, idx, n, y, C, eps, trial) == 0:
            _snap(trial, n, C, <char*> (trial + 2 * n))
            for s in range(2 * n):
                a[s] = trial[s]
        free(trial)
    _init_grad(K, idx, n, y, eps, a, G)
    it = _smo(K, idx, n, C, a, G, tol, max_iter - first, kkt)
    return first + it if it >= 0 else -1


cdef double _optimal_bias(const double* r, Py_ssize_t n, double eps, double* work) noexcept nogil:
    """Midpoint of the minimiser set of b -> sum max(0, |r_i - b| - eps)."""
    cdef Py_ssize_t s, t, m = 2 * n
    cdef double b, lo = INFINITY, hi = INFINITY
    cdef long right
    for s in range(n):
        work[s] = r[s] - eps
        work[n + s] = r[s] + eps
    for s in range(m):
        b = work[s]
        right = 0
        for t in range(n):
            if r[t] + eps <= b:
                right += 1
            if r[t] - eps > b:
                right -= 1
        if right >= 0 and b < lo:
            lo = b
        if right > 0 and b < hi:
            hi = b
    if hi == INFINITY:
        hi = lo
    return 0.5 * (lo + hi)


def smo_solve(const double[:, ::1] K, const double[::1] y, double C, double eps,
              double[::1] a, double tol, long max_iter, long budget):
    """Solve in place on ``a`` (length 2n, feasible). Returns (n_iter, kkt).

    SMO runs for at most ``budget`` iterations before the interior-point
    restart; ``n_iter`` is -1 when ``max_iter`` is exhausted overall.
    """
    cdef Py_ssize_t n = y.shape[0]
    cdef Py_ssize_t s
    cdef double kkt = 0.0
    cdef long it
    cdef Py_ssize_t* idx = <Py_ssize_t*> malloc(n * sizeof(Py_ssize_t))
    cdef double* G = <double*> malloc(2 * n * sizeof(double))
    try:
        for s in range(n):
            idx[s] = s
        with nogil:
            it = _solve(K, idx, n, &y[0], C, eps, &a[0], G, tol, max_iter, budget, &kkt)
    finally:
        free(idx)
        free(G)
    return it, kkt


def optimal_bias(const double[::1] r, double eps):
    cdef Py_ssize_t n = r.shape[0]
    cdef double* work = <double*> malloc(2 * n * sizeof(double))
    cdef double b
    try:
        b = _optimal_bias(&r[0], n, eps, work)
    finally:
        free(work)
    return b


def svr_loo_mse(const double[:, ::1] K, const double[::1] y, const double[::1] Cs,
                double eps, double tol, long max_iter, long budget, warm=None):
    """Leave-one-out squared errors ``(n, len(Cs))`` of epsilon-SVR and the
    SMO iteration count of each solve (-1 where ``max_iter`` ran out).

    Each held-out row is refit along the ascending C path with warm starts.
    When ``warm`` (shape ``(n, len(Cs), 2(n-1))``) is given, each solve starts
    from ``warm[i, k]`` instead and the solution is written back.
    """
    cdef double[:, :, ::1] W
    cdef bint use_warm = warm is not None
    if use_warm:
        W = warm
    cdef Py_ssize_t n = y.shape[0]
    cdef Py_ssize_t nc = Cs.shape[0]
    cdef Py_ssize_t m = n - 1
    cdef Py_ssize_t i, s, t, k
    cdef double kkt, b, f
    cdef long it
    out = np.zeros((n, nc), dtype=np.float64)
    iters = np.zeros((n, nc), dtype=np.int64)
    cdef double[:, ::1] sq = out
    cdef cnp.int64_t[:, ::1] its = iters
    cdef Py_ssize_t* idx = <Py_ssize_t*> malloc(m * sizeof(Py_ssize_t))
    cdef double* yy = <double*> malloc(m * sizeof(double))
    cdef double* a = <double*> malloc(2 * m * sizeof(double))
    cdef double* G = <double*> malloc(2 * m * sizeof(double))
    cdef double* r = <double*> malloc(m * sizeof(double))
    cdef double* work = <double*> malloc(2 * m * sizeof(double))
    try:
        with nogil:
            for i in range(n):
                s = 0
                for t in range(n):
                    if t != i:
                        idx[s] = t
                        yy[s] = y[t]
                        s += 1
                for s in range(2 * m):
                    a[s] = 0.0
                for k in range(nc):
                    if use_warm:
                        for s in range(2 * m):
                            a[s] = W[i, k, s]
                    it = _solve(K, idx, m, yy, Cs[k], eps, a, G, tol, max_iter, budget, &kkt)
                    its[i, k] = it
                    if use_warm:
                        for s in range(2 * m):
                            W[i, k, s] = a[s]
                    for s in range(m):
                        r[s] = eps - G[s]
                    b = _optimal_bias(r, m, eps, work)
                    f = b
                    for s in range(m):
                        f += (a[s] - a[m + s]) * K[i, idx[s]]
                    sq[i, k] = (f - y[i]) * (f - y[i])
    finally:
        free(idx)
        free(yy)
        free(a)
        free(G)
        free(r)
        free(work)
    return out, iters


def kernel_sums(const double[::1] gx, const double[::1] gy,
                const double[::1] cx, const double[::1] cy, const double[::1] h,
                const double[::1] tested, const double[::1] positive, double trunc):
    """Adaptive Gaussian kernel sums at grid points, truncated at ``trunc * h``."""
    cdef Py_ssize_t ng = gx.shape[0]
    cdef Py_ssize_t nc = cx.shape[0]
    cdef Py_ssize_t g, c
    cdef double dx, dy, d2, u2, w, inv2pi = 1.0 / (2.0 * 3.141592653589793)
    wsum_a = np.zeros(ng)
    wt_a = np.zeros(ng)
    wp_a = np.zeros(ng)
    cdef double[::1] wsum = wsum_a
    cdef double[::1] wt = wt_a
    cdef double[::1] wp = wp_a
    with nogil:
        for g in range(ng):
            for c in range(nc):
                dx = gx[g] - cx[c]
                dy = gy[g] - cy[c]
                d2 = dx * dx + dy * dy
                u2 = d2 / (h[c] * h[c])
                if u2 > trunc * trunc:
                    continue
                w = exp(-0.5 * u2) * inv2pi / (h[c] * h[c])
                wsum[g] += w
                wt[g] += w * tested[c]
                wp[g] += w * positive[c]
    return wsum_a, wt_a, wp_a
