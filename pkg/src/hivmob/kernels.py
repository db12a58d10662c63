"""Backend selection for the hot loops.

The compiled extension is used when importable; ``HIVMOB_PURE=1`` forces the
numpy fallback (useful for benchmarking and for checking the two agree).

SMO solves run under an iteration budget. A solve that exhausts it restarts
from an interior-point estimate of the optimum (``_ipm``) and is finished by
SMO, which keeps large-C fits on low-rank kernels cheap.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("HIVMOB_PURE") != "1":
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels

optimal_bias = _impl.optimal_bias
kernel_sums = _impl.kernel_sums


def smo_budget(n: int) -> int:
    """SMO iterations allowed before the interior-point restart."""
    return max(1_000, 20 * n)


def smo_solve(K, y, C, eps, a, tol, max_iter, budget=None):
    """Solve the epsilon-SVR dual in place on ``a``; returns ``(n_iter, kkt)``
    with ``n_iter = -1`` when ``max_iter`` is exhausted."""
    if budget is None:
        budget = smo_budget(y.shape[0])
    return _impl.smo_solve(K, y, float(C), float(eps), a, float(tol), int(max_iter), int(budget))


def svr_loo_mse(K, y, Cs, eps, tol, max_iter, warm=None, budget=None):
    """Leave-one-out mean squared error for each C, and the number of solves
    that did not converge within ``max_iter``."""
    if budget is None:
        budget = smo_budget(y.shape[0] - 1)
    sq, iters = _impl.svr_loo_mse(K, y, Cs, float(eps), float(tol), int(max_iter), int(budget), warm)
    return sq.mean(axis=0), int((iters < 0).sum())


__all__ = ["BACKEND", "smo_solve", "smo_budget", "optimal_bias", "svr_loo_mse", "kernel_sums"]
