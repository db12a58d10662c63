"""Ridge and linear epsilon-SVR with leave-one-out model selection, recursive
feature elimination, stacked ensembles and permutation controls.

Linear SVR is solved in the dual with SMO over the linear kernel ``X X^T``;
each accepted fit carries a duality gap certificate. Ridge uses an SVD of the
centred design, which also gives exact leave-one-out residuals from the hat
matrix.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import nnls

from . import kernels
from .synthgen import rng_for

RIDGE_GRID = tuple(np.logspace(-4, 4, 9).tolist())
SVR_GRID = tuple(np.logspace(-3, 3, 9).tolist())
GAP_TOL = 1e-6
_STREAM_PERM = 101


class SolverError(RuntimeError):
    """SVR did not reach the required certificate."""

    def __init__(self, message, gap=None, kkt=None):
        super().__init__(message)
        self.gap = gap
        self.kkt = kkt


@dataclass(frozen=True)
class ModelSpec:
    method: str = "svr"
    grid: tuple = ()
    epsilon: float = 0.1
    target_count: int | None = None
    reselect: str = "round"     # "round" | "once"
    nested: bool = True
    select_tol: float = 1e-3    # SMO stopping tolerance while scoring the grid
    max_iter: int = 10_000_000

    def __post_init__(self):
        if self.method not in ("ridge", "svr"):
            raise ValueError(f"unknown method {self.method!r}")
        if not self.grid:
            object.__setattr__(self, "grid", RIDGE_GRID if self.method == "ridge" else SVR_GRID)
        grid = tuple(sorted(float(g) for g in self.grid))
        if any(g <= 0 for g in grid):
            raise ValueError("grid values must be > 0")
        object.__setattr__(self, "grid", grid)
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.reselect not in ("round", "once"):
            raise ValueError("reselect must be 'round' or 'once'")
        if self.target_count is not None and self.target_count < 1:
            raise ValueError("target_count must be >= 1")

    def to_json(self) -> dict:
        return {"method": self.method, "grid": list(self.grid), "epsilon": self.epsilon,
                "target_count": self.target_count, "reselect": self.reselect, "nested": self.nested}

    @classmethod
    def from_json(cls, doc: dict) -> "ModelSpec":
        doc = dict(doc)
        if "grid" in doc:
            doc["grid"] = tuple(doc["grid"])
        return cls(**doc)


@dataclass
class FittedModel:
    method: str
    coef: np.ndarray
    intercept: float
    hyper: float
    mask: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return X[:, self.mask] @ self.coef + self.intercept

    @property
    def selected(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    def full_coef(self) -> np.ndarray:
        out = np.zeros(self.mask.size)
        out[self.mask] = self.coef
        return out


def _as_xy(X, y):
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be (n, p) with n == len(y)")
    if X.shape[0] < 2:
        raise ValueError("need at least 2 rows")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValueError("X and y must be finite")
    return X, y


# ------------------------------------------------------------------------- ridge


def fit_ridge(X, y, lam: float, mask=None) -> FittedModel:
    """Ridge with an unpenalised intercept."""
    X, y = _as_xy(X, y)
    full_mask = np.ones(X.shape[1], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    Xs = X[:, full_mask]
    mx = Xs.mean(0)
    my = y.mean()
    Xc = Xs - mx
    U, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    if lam == 0:
        rank_tol = (s.max() if s.size else 0.0) * max(Xc.shape) * np.finfo(float).eps
        if Xs.shape[1] > 0 and (s.size < Xs.shape[1] or s.min() <= rank_tol):
            raise np.linalg.LinAlgError("design is singular at lambda=0; use lambda > 0")
        shrink = np.where(s > 0, 1.0 / np.where(s > 0, s, 1.0), 0.0)
    else:
        shrink = s / (s * s + lam)
    beta = Vt.T @ (shrink * (U.T @ (y - my)))
    return FittedModel("ridge", beta, float(my - mx @ beta), float(lam), full_mask)


def ridge_loo_mse(X, y, grid) -> np.ndarray:
    """Exact leave-one-out MSE for each lambda via the hat-matrix diagonal."""
    X, y = _as_xy(X, y)
    n = X.shape[0]
    Xc = X - X.mean(0)
    U, s, _ = np.linalg.svd(Xc, full_matrices=False)
    keep = s > s.max() * max(Xc.shape) * np.finfo(float).eps if s.size else s > 0
    U, s = U[:, keep], s[keep]
    yc = y - y.mean()
    uty = U.T @ yc
    out = np.empty(len(grid))
    for k, lam in enumerate(grid):
        d = s * s / (s * s + lam)
        fitted = U @ (d * uty)
        h = 1.0 / n + (U * U) @ d
        resid = yc - fitted
        with np.errstate(divide="ignore", invalid="ignore"):
            loo = resid / (1.0 - h)
        out[k] = np.mean(loo ** 2) if np.all(h < 1.0 - 1e-14) else np.inf
    return out


# --------------------------------------------------------------------------- svr


def svr_objectives(K, y, a, C, eps):
    """Return (primal, dual, bias) for a feasible dual point ``a = [alpha; alpha*]``."""
    n = y.shape[0]
    theta = a[:n] - a[n:]
    Kt = K @ theta
    quad = 0.5 * float(theta @ Kt)
    r = np.ascontiguousarray(y - Kt)
    b = kernels.optimal_bias(r, eps)
    loss = float(np.maximum(0.0, np.abs(r - b) - eps).sum())
    primal = quad + C * loss
    dual = -(quad + eps * float(a.sum()) - float(y @ theta))
    return primal, dual, b


def fit_svr(X, y, C: float, epsilon: float = 0.1, mask=None, warm: np.ndarray | None = None,
            tol: float = 1e-8, max_iter: int = 10_000_000, gap_tol: float = GAP_TOL) -> FittedModel:
    """Linear epsilon-SVR; the SMO tolerance is tightened until the duality
    gap is at most ``gap_tol``.

    ``warm`` (length ``2n``) seeds the dual and receives the final solution.
    """
    X, y = _as_xy(X, y)
    if C <= 0:
        raise ValueError("C must be > 0")
    full_mask = np.ones(X.shape[1], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    Xs = np.ascontiguousarray(X[:, full_mask])
    K = np.ascontiguousarray(Xs @ Xs.T)
    n = y.shape[0]
    a = np.zeros(2 * n) if warm is None else np.clip(np.array(warm, dtype=float), 0.0, C)
    if warm is not None and abs(a[:n].sum() - a[n:].sum()) > 1e-12 * max(1.0, C * n):
        a = np.zeros(2 * n)
    total_iter = 0
    while True:
        it, kkt = kernels.smo_solve(K, y, float(C), float(epsilon), a, float(tol), int(max_iter))
        if it < 0:
            raise SolverError(f"SMO hit the iteration cap (kkt={kkt:.3g})", kkt=kkt)
        total_iter += it
        primal, dual, b = svr_objectives(K, y, a, C, epsilon)
        gap = primal - dual
        if gap <= gap_tol:
            break
        if tol < 1e-15:
            raise SolverError(f"duality gap {gap:.3g} above {gap_tol:g}", gap=gap, kkt=kkt)
        tol *= 1e-2
    if warm is not None:
        warm[:] = a
    theta = a[:n] - a[n:]
    beta = Xs.T @ theta
    diag = {"kkt": float(kkt), "gap": float(gap), "primal": primal, "dual": dual, "iterations": total_iter,
            "n_support": int(np.count_nonzero(theta))}
    return FittedModel("svr", beta, float(b), float(C), full_mask, diag)


# ---------------------------------------------------------------- model selection


class _SvrCache:
    """Dual solutions reused across elimination rounds on one training set."""

    def __init__(self, n, n_grid):
        self.loo = np.zeros((n, n_grid, 2 * (n - 1)))
        self.full = np.zeros((n_grid, 2 * n))


def loo_scores(method: str, X, y, grid, spec: ModelSpec | None = None, cache: _SvrCache | None = None) -> np.ndarray:
    X, y = _as_xy(X, y)
    grid = np.asarray(sorted(grid), dtype=float)
    if method == "ridge":
        return ridge_loo_mse(X, y, grid)
    spec = spec or ModelSpec("svr", tuple(grid))
    K = np.ascontiguousarray(X @ X.T)
    warm = cache.loo if cache is not None else None
    mse, _ = kernels.svr_loo_mse(K, y, np.ascontiguousarray(grid), float(spec.epsilon), float(spec.select_tol),
                                 int(spec.max_iter), warm)
    return np.asarray(mse)


def loo_select(method: str, X, y, grid, spec: ModelSpec | None = None, cache: _SvrCache | None = None) -> float:
    """Grid value with the lowest LOO MSE; exact ties go to the smallest value."""
    grid = sorted(float(g) for g in grid)
    if len(grid) == 1:
        return grid[0]
    scores = loo_scores(method, X, y, grid, spec, cache)
    return grid[int(np.argmin(scores))]


def _fit(method, X, y, hyper, spec, mask=None, warm=None):
    if method == "ridge":
        return fit_ridge(X, y, hyper, mask)
    return fit_svr(X, y, hyper, spec.epsilon, mask, warm=warm, max_iter=spec.max_iter)


@dataclass
class RFEResult:
    mask: np.ndarray
    eliminated: list[int]
    hypers: list[float]
    model: FittedModel

    def order(self) -> list[int]:
        """Feature indices from first eliminated to last survivor."""
        return list(self.eliminated) + sorted(np.flatnonzero(self.mask).tolist())


def rfe(spec: ModelSpec, X, y, target_count: int | None = None) -> RFEResult:
    """Drop the smallest-|coefficient| feature until ``target_count`` remain.

    Equal magnitudes drop the higher column index. With ``reselect='round'``
    the hyperparameter is re-chosen by LOO before every fit.
    """
    X, y = _as_xy(X, y)
    p = X.shape[1]
    k = spec.target_count if target_count is None else target_count
    if k is None:
        k = p
    if not 1 <= k <= p:
        raise ValueError(f"target_count must be in [1, {p}]")
    active = np.ones(p, dtype=bool)
    eliminated, hypers = [], []
    cache = _SvrCache(len(y), len(spec.grid)) if spec.method == "svr" else None
    hyper = None
    while True:
        if hyper is None or spec.reselect == "round":
            hyper = loo_select(spec.method, X[:, active], y, spec.grid, spec, cache)
        hypers.append(hyper)
        warm = cache.full[spec.grid.index(hyper)] if cache is not None else None
        model = _fit(spec.method, X, y, hyper, spec, active, warm)
        if active.sum() <= k:
            return RFEResult(active, eliminated, hypers, model)
        mag = np.abs(model.coef)
        idx = np.flatnonzero(active)
        drop = int(idx[np.flatnonzero(mag == mag.min())].max())
        active[drop] = False
        eliminated.append(drop)


def fit_pipeline(spec: ModelSpec, X, y) -> tuple[FittedModel, RFEResult | None]:
    """Hyperparameter selection (and RFE when a target is set) on one training set."""
    if spec.target_count is not None and spec.target_count < X.shape[1]:
        res = rfe(spec, X, y)
        return res.model, res
    hyper = loo_select(spec.method, X, y, spec.grid, spec)
    return _fit(spec.method, X, y, hyper, spec), None


# -------------------------------------------------------------------- evaluation


def column_scale(X: np.ndarray) -> np.ndarray:
    """Column means used for mean normalisation (1 where the mean is 0)."""
    m = X.mean(0)
    return np.where(m == 0, 1.0, m)


def pearson(a, b) -> tuple[float, bool]:
    """Sample Pearson correlation; returns (0, True) when either side is constant."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(da @ da), np.sqrt(db @ db)
    if sa == 0 or sb == 0:
        return 0.0, True
    return float(np.clip((da @ db) / (sa * sb), -1.0, 1.0)), False


def rrmse(pred, y) -> float:
    y = np.asarray(y, dtype=float)
    return float(np.sqrt(np.mean((np.asarray(pred, dtype=float) - y) ** 2)) / np.mean(y))


@dataclass
class EvaluationReport:
    method: str
    predictions: np.ndarray
    y: np.ndarray
    rho: float
    rrmse: float
    rho_undefined: bool = False
    permuted: bool = False
    seed: int | None = None
    hypers: list = field(default_factory=list)
    selected: list = field(default_factory=list)
    eliminated: list = field(default_factory=list)
    spec: dict = field(default_factory=dict)
    labels: tuple = ()

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "rho": self.rho,
            "rrmse": self.rrmse,
            "rrmse_definition": "rmse / mean(actual)",
            "rho_undefined": self.rho_undefined,
            "permuted": self.permuted,
            "seed": self.seed,
            "hyperparameters": self.hypers,
            "selected": self.selected,
            "elimination_order": self.eliminated,
            "predictions": self.predictions.tolist(),
            "actual": self.y.tolist(),
            "spec": self.spec,
        }


def report_from_predictions(method, pred, y, **kw) -> EvaluationReport:
    pred = np.asarray(pred, dtype=float)
    y = np.asarray(y, dtype=float)
    rho, undefined = pearson(pred, y)
    return EvaluationReport(method, pred, y, rho, rrmse(pred, y), undefined, **kw)


def _fold(spec, X, y, i, fixed=None):
    train = np.r_[0:i, i + 1:len(y)]
    Xt = X[train]
    scale = column_scale(Xt)
    Xt = Xt / scale
    xi = X[i:i + 1] / scale
    if fixed is None:
        model, res = fit_pipeline(spec, Xt, y[train])
    else:
        hyper, mask = fixed
        model, res = _fit(spec.method, Xt, y[train], hyper, spec, mask), None
    return float(model.predict(xi)[0]), model, res


def loo_evaluate(spec: ModelSpec, X, y, threads: int = 1, labels=()) -> EvaluationReport:
    """Leave-one-out predictions with the whole pipeline (mean normalisation,
    selection, RFE) refit inside every training fold.

    With ``spec.nested=False`` selection and RFE run once on all rows and
    only the coefficients are refit per fold.
    """
    X, y = _as_xy(X, y)
    n = len(y)
    if n < 3:
        raise ValueError("need at least 3 rows")
    fixed = None
    if not spec.nested:
        model, _ = fit_pipeline(spec, X / column_scale(X), y)
        fixed = (model.hyper, model.mask)

    def run(i):
        return _fold(spec, X, y, i, fixed)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            out = list(ex.map(run, range(n)))
    else:
        out = [run(i) for i in range(n)]
    pred = np.array([o[0] for o in out])
    return report_from_predictions(
        spec.method, pred, y,
        hypers=[o[1].hyper for o in out],
        selected=[o[1].selected.tolist() for o in out],
        eliminated=[o[2].eliminated if o[2] is not None else [] for o in out],
        spec=spec.to_json(), labels=tuple(labels))


def permute_columns(X, seed: int) -> np.ndarray:
    """Independently shuffle every column; column ``j`` uses stream ``(seed, j)``."""
    X = np.asarray(X, dtype=float)
    out = np.empty_like(X)
    for j in range(X.shape[1]):
        out[:, j] = X[rng_for(seed, _STREAM_PERM, j).permutation(X.shape[0]), j]
    return out


def permutation_baseline(spec: ModelSpec, X, y, seeds, threads: int = 1) -> list[EvaluationReport]:
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    out = []
    for s in seeds:
        r = loo_evaluate(spec, permute_columns(X, s), y, threads)
        out.append(replace(r, permuted=True, seed=int(s)))
    return out


def best_random(reports: list[EvaluationReport]) -> EvaluationReport:
    """Report with the highest rho (first one on ties)."""
    return max(reports, key=lambda r: r.rho)


@dataclass
class StackResult:
    weights: np.ndarray
    predictions: np.ndarray
    report: EvaluationReport
    degenerate: str | None = None

    def to_json(self) -> dict:
        return {"weights": self.weights.tolist(), "degenerate": self.degenerate, "report": self.report.to_json()}


def stack_ensemble(base, y, method: str = "stack") -> StackResult:
    """Non-negative least squares weights (no intercept) over base LOO predictions.

    Identical base vectors get equal weights; all-zero bases get zero weights.
    """
    P = np.column_stack([np.asarray(getattr(b, "predictions", b), dtype=float) for b in base])
    y = np.asarray(y, dtype=float)
    if P.shape[0] != y.shape[0]:
        raise ValueError("base predictions must match len(y)")
    k = P.shape[1]
    degenerate = None
    if not P.any():
        w = np.zeros(k)
        degenerate = "all-zero"
    elif np.all(P == P[:, :1]):
        w1, _ = nnls(P[:, :1], y)
        w = np.full(k, w1[0] / k)
        degenerate = "identical"
    else:
        w, _ = nnls(P, y)
    pred = P @ w
    return StackResult(w, pred, report_from_predictions(method, pred, y), degenerate)


def predictions_tsv(report: EvaluationReport, labels=None) -> str:
    from .model import fmt_num

    labels = list(labels if labels is not None else (report.labels or range(len(report.y))))
    rows = ["department\tpredicted\tactual\n"]
    rows += [f"{d}\t{fmt_num(p)}\t{fmt_num(a)}\n" for d, p, a in zip(labels, report.predictions.tolist(),
                                                                      report.y.tolist())]
    return "".join(rows)


def dumps(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"
