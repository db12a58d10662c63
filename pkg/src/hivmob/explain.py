"""Randomised single-feature contribution curves.

For a probe value ``v`` of feature ``i`` a random baseline instance ``A`` is
drawn from the data, ``B`` is ``A`` with feature ``i`` set to ``v``, and the
contribution sample is ``f(B) - f(A)``. Curves report mean and standard
deviation of these samples over Monte-Carlo iterations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .features import FAMILIES, FeatureMatrix
from .model import fmt_num
from .regress import FittedModel, ModelSpec, column_scale, rfe
from .synthgen import rng_for

_STREAM_EXPLAIN = 201


@dataclass(frozen=True)
class ContributionConfig:
    m: int = 12
    iterations: int = 100
    seed: int = 0
    joint_rows: bool = False

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("m must be >= 2")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class ContributionCurve:
    feature: int
    name: str
    family: str
    probes: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    flags: list[str] = field(default_factory=list)

    @property
    def signs(self) -> list[str]:
        return [sign_class(mu, sd) for mu, sd in zip(self.mean.tolist(), self.std.tolist())]

    def to_rows(self, scale: float = 1.0) -> list[str]:
        return [f"{self.family}\t{self.name}\t{k}\t{fmt_num(v)}\t{fmt_num(v * scale)}\t{fmt_num(mu)}\t{fmt_num(sd)}\t{s}\n"
                for k, (v, mu, sd, s) in enumerate(zip(self.probes.tolist(), self.mean.tolist(),
                                                       self.std.tolist(), self.signs))]


def sign_class(mean: float, std: float) -> str:
    if abs(mean) <= std:
        return "indeterminate"
    return "positive" if mean > 0 else "negative"


def _baseline(X: np.ndarray, cols: np.ndarray, rng: np.random.Generator, joint: bool) -> np.ndarray:
    if joint:
        return X[rng.integers(X.shape[0]), cols]
    return X[rng.integers(0, X.shape[0], cols.size), cols]


def contribution_curve(model: FittedModel, X, feature: int, cfg: ContributionConfig = ContributionConfig(),
                       name: str = "", family: str = "") -> ContributionCurve:
    """Mean and std of ``f(B) - f(A)`` at ``cfg.m`` probes spanning the
    observed range of ``feature``.

    Baselines sample only the model's selected columns, each independently
    from its observed values (or a whole row with ``joint_rows``). The random
    stream for probe ``k``, iteration ``t`` is keyed by
    ``(seed, feature, k, t)``.
    """
    X = np.asarray(X, dtype=float)
    col = X[:, feature]
    lo, hi = float(col.min()), float(col.max())
    flags = []
    if lo == hi:
        probes = np.array([lo])
        flags.append("zero-range")
    else:
        probes = np.linspace(lo, hi, cfg.m)
        probes[-1] = hi
    cols = model.selected
    coef = model.coef
    pos = np.flatnonzero(cols == feature)
    if pos.size == 0:
        flags.append("not-selected")
        z = np.zeros(probes.size)
        return ContributionCurve(feature, name, family, probes, z, z.copy(), flags)
    p = int(pos[0])
    means = np.empty(probes.size)
    stds = np.empty(probes.size)
    for k, v in enumerate(probes.tolist()):
        samples = np.empty(cfg.iterations)
        for t in range(cfg.iterations):
            a = _baseline(X, cols, rng_for(cfg.seed, _STREAM_EXPLAIN, feature, k, t), cfg.joint_rows)
            b = a.copy()
            b[p] = v
            samples[t] = (b @ coef + model.intercept) - (a @ coef + model.intercept)
        means[k] = samples.mean()
        stds[k] = samples.std()
    return ContributionCurve(feature, name, family, probes, means, stds, flags)


@dataclass
class Range:
    label: str
    start: float
    end: float
    first: int
    last: int


def classify_ranges(curve: ContributionCurve) -> list[Range]:
    """Contiguous probe runs sharing a sign class."""
    out: list[Range] = []
    for k, (v, s) in enumerate(zip(curve.probes.tolist(), curve.signs)):
        if out and out[-1].label == s:
            out[-1].end = v
            out[-1].last = k
        else:
            out.append(Range(s, v, v, k, k))
    return out


def top_features(spec: ModelSpec, X, y, k: int = 3) -> list[int]:
    """Survivors of RFE run on all rows (mean-normalised columns)."""
    X = np.asarray(X, dtype=float)
    if k > X.shape[1]:
        raise ValueError(f"k={k} exceeds the {X.shape[1]} available features")
    res = rfe(spec, X / column_scale(X), y, k)
    return np.flatnonzero(res.mask).tolist()


@dataclass
class ExplainReport:
    curves: list[ContributionCurve]
    models: dict[str, FittedModel]
    scales: dict[str, float]
    cfg: ContributionConfig

    def layout(self) -> list[list[str]]:
        """Feature names arranged one row per family."""
        rows = {}
        for c in self.curves:
            rows.setdefault(c.family, []).append(c.name)
        return [rows[f] for f in FAMILIES if f in rows]

    def to_tsv(self) -> str:
        out = ["family\tfeature\tprobe_index\tprobe\tprobe_raw\tmean\tstd\tsign\n"]
        for c in self.curves:
            out += c.to_rows(self.scales[c.name])
        return "".join(out)

    def summary(self) -> dict:
        fams = {}
        for c in self.curves:
            m = self.models[c.family]
            idx = int(np.flatnonzero(m.selected == c.feature)[0])
            fams.setdefault(c.family, []).append({
                "feature": c.name,
                "coefficient": float(m.coef[idx]),
                "at_max": {"mean": float(c.mean[-1]), "std": float(c.std[-1]),
                           "readout": readout(c.mean[-1], c.std[-1])},
                "ranges": [{"label": r.label, "from": r.start, "to": r.end} for r in classify_ranges(c)],
                "flags": c.flags,
            })
        return {"config": {"m": self.cfg.m, "iterations": self.cfg.iterations, "seed": self.cfg.seed,
                           "joint_rows": self.cfg.joint_rows},
                "layout": self.layout(), "families": fams}

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=1) + "\n"


def readout(mean: float, std: float) -> str:
    word = "higher" if mean >= 0 else "lower"
    return f"expected prevalence {word} than average by {abs(mean):.2g} ± {std:.2g}"


def explain_families(fm: FeatureMatrix, y, spec: ModelSpec, cfg: ContributionConfig = ContributionConfig(),
                     k: int = 3) -> ExplainReport:
    """Top-``k`` features per family and their contribution curves (k x 4 grid)."""
    y = np.asarray(y, dtype=float)
    curves, models, scales = [], {}, {}
    for fam in FAMILIES:
        sub = fm.select(fam)
        if not sub.names:
            continue
        X = sub.values
        scale = column_scale(X)
        Xn = X / scale
        kk = min(k, X.shape[1])
        res = rfe(spec, Xn, y, kk)
        models[fam] = res.model
        for j in np.flatnonzero(res.mask).tolist():
            curves.append(contribution_curve(res.model, Xn, j, cfg, sub.names[j], fam))
            scales[sub.names[j]] = float(scale[j])
    return ExplainReport(curves, models, scales, cfg)
