"""Department-level communication and mobility flows, homes, stays and strong ties."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .model import DAY, AntennaTable, SpatialHierarchy, TrajectoryTable, fmt_num, hour_of_day, is_weekend


@dataclass(frozen=True)
class TimeFilter:
    """Half-open hour-of-day window ``[start_hour, end_hour)`` plus optional day type."""

    start_hour: int = 0
    end_hour: int = 24
    day_type: str | None = None  # None, "weekday" or "weekend"

    def __post_init__(self):
        if not 0 <= self.start_hour < self.end_hour <= 24:
            raise ValueError("need 0 <= start_hour < end_hour <= 24")
        if self.day_type not in (None, "weekday", "weekend"):
            raise ValueError(f"unknown day type {self.day_type!r}")

    def mask(self, t) -> np.ndarray:
        hod = hour_of_day(t)
        m = (hod >= self.start_hour) & (hod < self.end_hour)
        if self.day_type is not None:
            wk = is_weekend(t)
            m &= wk if self.day_type == "weekend" else ~wk
        return m


NIGHT = TimeFilter(1, 5)


@dataclass
class FlowMatrix:
    values: np.ndarray
    dept_ids: tuple[int, ...]
    kind: str
    time_filter: TimeFilter | None = None
    min_stay_days: float | None = None
    normalized: bool = False
    excluded: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        D = len(self.dept_ids)
        if self.values.shape != (D, D):
            raise ValueError("flow matrix must be D x D")
        if (self.values < 0).any():
            raise ValueError("flows must be non-negative")

    def replace(self, values, **kw) -> "FlowMatrix":
        attrs = dict(dept_ids=self.dept_ids, kind=self.kind, time_filter=self.time_filter,
                     min_stay_days=self.min_stay_days, normalized=self.normalized, excluded=self.excluded)
        attrs.update(kw)
        return FlowMatrix(values, **attrs)


def comm_flow(records: AntennaTable, hierarchy: SpatialHierarchy, time_filter: TimeFilter | None = None) -> FlowMatrix:
    """Sum of ``n_calls`` per (origin department, destination department)."""
    D = hierarchy.n_departments
    oi = hierarchy.antenna_dept_index(records.origin)
    di = hierarchy.antenna_dept_index(records.dest)
    ok = (oi >= 0) & (di >= 0)
    excluded = int((~ok).sum())
    if time_filter is not None:
        ok &= time_filter.mask(records.hour)
    m = np.bincount(oi[ok] * D + di[ok], weights=records.n_calls[ok], minlength=D * D).reshape(D, D)
    return FlowMatrix(m, hierarchy.dept_ids, "communication", time_filter=time_filter, excluded=excluded)


# ------------------------------------------------------------------------- homes


@dataclass
class HomeAssignment:
    """Home department per user (most frequent department, smallest id on ties)."""

    user_names: tuple[str, ...]
    home_index: np.ndarray  # per user code, -1 when the user has no resolvable record
    dept_ids: tuple[int, ...]
    ties: dict[str, list[int]] = field(default_factory=dict)

    @property
    def homes(self) -> dict[str, int]:
        return {self.user_names[u]: self.dept_ids[h] for u, h in enumerate(self.home_index.tolist()) if h >= 0}

    def population(self) -> np.ndarray:
        """Number of users homed in each department."""
        h = self.home_index[self.home_index >= 0]
        return np.bincount(h, minlength=len(self.dept_ids)).astype(float)

    def to_tsv(self) -> str:
        rows = ["user\thome\ttied\n"]
        for u, h in enumerate(self.home_index.tolist()):
            if h >= 0:
                name = self.user_names[u]
                tied = ",".join(str(d) for d in self.ties.get(name, []))
                rows.append(f"{name}\t{self.dept_ids[h]}\t{tied}\n")
        return "".join(rows)

    @classmethod
    def from_tsv(cls, text: str, user_names, dept_ids) -> "HomeAssignment":
        code = {n: i for i, n in enumerate(user_names)}
        didx = {d: i for i, d in enumerate(dept_ids)}
        home = np.full(len(user_names), -1, dtype=np.int64)
        ties = {}
        for line in text.splitlines()[1:]:
            name, h, tied = line.split("\t")
            home[code[name]] = didx[int(h)]
            if tied:
                ties[name] = [int(x) for x in tied.split(",")]
        return cls(tuple(user_names), home, tuple(dept_ids), ties)


def infer_home(records: TrajectoryTable, hierarchy: SpatialHierarchy) -> HomeAssignment:
    D = hierarchy.n_departments
    U = records.n_users
    di = hierarchy.subpref_dept_index(records.subpref)
    ok = di >= 0
    counts = np.bincount(records.user[ok] * D + di[ok], minlength=U * D).reshape(U, D)
    best = counts.max(1)
    home = np.where(best > 0, counts.argmax(1), -1)
    ties = {}
    for u in np.flatnonzero((counts == best[:, None]).sum(1) > 1).tolist():
        if best[u] > 0:
            ties[records.user_names[u]] = [hierarchy.dept_ids[k] for k in np.flatnonzero(counts[u] == best[u])]
    return HomeAssignment(records.user_names, home, hierarchy.dept_ids, ties)


# ------------------------------------------------------------------- runs, stays


@dataclass
class RunTable:
    """Maximal runs of consecutive records spent outside the home department."""

    user: np.ndarray
    home: np.ndarray
    dept: np.ndarray
    start: np.ndarray
    end: np.ndarray
    user_names: tuple[str, ...]
    dept_ids: tuple[int, ...]

    @property
    def duration_days(self) -> np.ndarray:
        return (self.end - self.start) / DAY

    def __len__(self):
        return len(self.user)

    def to_tsv(self) -> str:
        rows = ["user\thome\tdepartment\tstart\tend\n"]
        for u, h, d, s, e in zip(self.user.tolist(), self.home.tolist(), self.dept.tolist(),
                                 self.start.tolist(), self.end.tolist()):
            rows.append(f"{self.user_names[u]}\t{self.dept_ids[h]}\t{self.dept_ids[d]}\t{s}\t{e}\n")
        return "".join(rows)

    @classmethod
    def from_tsv(cls, text: str, user_names, dept_ids) -> "RunTable":
        code = {n: i for i, n in enumerate(user_names)}
        didx = {d: i for i, d in enumerate(dept_ids)}
        cols = ([], [], [], [], [])
        for line in text.splitlines()[1:]:
            name, h, d, s, e = line.split("\t")
            for c, v in zip(cols, (code[name], didx[int(h)], didx[int(d)], int(s), int(e))):
                c.append(v)
        return cls(*(np.array(c, dtype=np.int64) for c in cols), tuple(user_names), tuple(dept_ids))


@dataclass(frozen=True)
class Stay:
    user_id: str
    department: int
    start: int
    end: int

    @property
    def duration(self) -> float:
        return (self.end - self.start) / DAY


def away_runs(records: TrajectoryTable, homes: HomeAssignment, hierarchy: SpatialHierarchy) -> RunTable:
    di = hierarchy.subpref_dept_index(records.subpref)
    ok = di >= 0
    user, at, di = records.user[ok], records.at[ok], di[ok]
    order = np.lexsort((at, user))
    user, at, di = user[order], at[order], di[order]
    n = len(user)
    if n == 0:
        z = np.zeros(0, dtype=np.int64)
        return RunTable(z, z, z, z, z, records.user_names, hierarchy.dept_ids)
    brk = np.ones(n, dtype=bool)
    brk[1:] = (user[1:] != user[:-1]) | (di[1:] != di[:-1])
    starts = np.flatnonzero(brk)
    ends = np.r_[starts[1:], n] - 1
    ru, rd = user[starts], di[starts]
    rh = homes.home_index[ru]
    away = (rh >= 0) & (rd != rh)
    return RunTable(ru[away], rh[away], rd[away], at[starts][away], at[ends][away],
                    records.user_names, hierarchy.dept_ids)


def stays(records: TrajectoryTable, homes: HomeAssignment, hierarchy: SpatialHierarchy) -> list[Stay]:
    runs = away_runs(records, homes, hierarchy)
    return [Stay(runs.user_names[u], runs.dept_ids[d], s, e)
            for u, d, s, e in zip(runs.user.tolist(), runs.dept.tolist(), runs.start.tolist(), runs.end.tolist())]


def mobility_from_runs(runs: RunTable, min_stay_days: float | None = None) -> FlowMatrix:
    D = len(runs.dept_ids)
    keep = np.ones(len(runs), dtype=bool)
    if min_stay_days is not None:
        # strict: only stays longer than the threshold count
        keep = (runs.end - runs.start) > min_stay_days * DAY
    m = np.bincount(runs.home[keep] * D + runs.dept[keep], minlength=D * D).reshape(D, D)
    return FlowMatrix(m, runs.dept_ids, "mobility", min_stay_days=min_stay_days)


def mobility_flow(records: TrajectoryTable, homes: HomeAssignment, hierarchy: SpatialHierarchy,
                  min_stay_days: float | None = None) -> FlowMatrix:
    """One unit per maximal away-from-home run, added to (home, visited department)."""
    return mobility_from_runs(away_runs(records, homes, hierarchy), min_stay_days)


# ---------------------------------------------------------------- normalisation


def normalize_flows(m: FlowMatrix, pops) -> FlowMatrix:
    """Divide each row by the population of its originating department.

    ``pops`` is a per-department vector in ``m.dept_ids`` order, or a
    PopulationTable whose subscriber-rescaled values are used.
    """
    if hasattr(pops, "rescaled"):
        r = pops.rescaled()
        pops = [r[d] for d in m.dept_ids]
    pops = np.asarray(pops, dtype=float)
    if pops.shape != (len(m.dept_ids),):
        raise ValueError("population vector length must match the matrix")
    if (pops <= 0).any():
        raise ValueError("populations must be positive")
    return m.replace(m.values / pops[:, None], normalized=True)


def pair_strength(m: FlowMatrix) -> FlowMatrix:
    """Symmetric flow ``m(a,b) + m(b,a)`` with the diagonal zeroed."""
    s = m.values + m.values.T
    np.fill_diagonal(s, 0.0)
    return m.replace(s)


# ------------------------------------------------------------------------- ties


@dataclass(frozen=True)
class Tie:
    peer: int
    flow: float
    strength: float
    strong: bool


@dataclass
class TieSet:
    ties: dict[int, list[Tie]]
    n_candidates: dict[int, int]

    def strong_pairs(self, mutual: bool = True) -> list[tuple[int, int, float]]:
        """Undirected strong edges ``(a, b, flow)`` with ``a < b``.

        With ``mutual`` an edge needs both endpoints to rate it strong.
        """
        strong = {(d, t.peer): t.flow for d, lst in self.ties.items() for t in lst if t.strong}
        out = {}
        for (a, b), f in strong.items():
            key = (min(a, b), max(a, b))
            if mutual and (b, a) not in strong:
                continue
            out[key] = f
        return [(a, b, f) for (a, b), f in sorted(out.items())]


def tie_strengths(flows) -> tuple[list[float], list[bool]]:
    """Strength ``c / mean(c)`` and strong flag for nonzero candidate flows.

    The comparison ``c >= mean`` is done in exact rational arithmetic so the
    boundary ``s == 1`` is never lost to rounding.
    """
    fr = [Fraction(float(c)) for c in flows]
    n = len(fr)
    total = sum(fr)
    strengths, strong = [], []
    for c in fr:
        s_exact = c * n / total
        s = float(s_exact)
        is_strong = s_exact >= 1
        if not is_strong and s >= 1.0:
            s = float(np.nextafter(1.0, 0.0))
        strengths.append(s)
        strong.append(is_strong)
    return strengths, strong


def strong_ties(m: FlowMatrix) -> TieSet:
    """Classify each department's nonzero off-diagonal links as strong/weak."""
    v = m.values
    ties, ncand = {}, {}
    for a, da in enumerate(m.dept_ids):
        peers = [b for b in range(len(m.dept_ids)) if b != a and v[a, b] > 0]
        ncand[da] = len(peers)
        if not peers:
            ties[da] = []
            continue
        s, strong = tie_strengths([v[a, b] for b in peers])
        ties[da] = [Tie(m.dept_ids[b], float(v[a, b]), si, st) for b, si, st in zip(peers, s, strong)]
    return TieSet(ties, ncand)


def prevalence_label(p: float) -> str:
    """Percent with one decimal, e.g. 0.051 -> ``"5.1"``."""
    return f"{100.0 * p:.1f}"


def export_tie_graph(ties: TieSet, hierarchy: SpatialHierarchy, prevalence=None,
                     mutual: bool = True, name: str = "ties") -> tuple[str, dict]:
    """DOT and GeoJSON documents of the strong-tie graph.

    Edge weights are relative to the largest flow among exported strong ties;
    nodes are the departments touched by an edge, labelled with their
    prevalence (percent) when estimates are given.
    """
    if prevalence is None:
        prev = {}
    elif isinstance(prevalence, dict):
        prev = prevalence
    else:
        prev = {e.department: e.prevalence for e in prevalence}
    edges = ties.strong_pairs(mutual=mutual)
    top = max((f for _, _, f in edges), default=0.0)
    nodes = sorted({a for a, _, _ in edges} | {b for _, b, _ in edges})

    dot = [f"graph {name} {{"]
    for d in nodes:
        x, y = hierarchy.departments[d].centroid
        attrs = [f'pos="{fmt_num(x)},{fmt_num(y)}!"']
        if d in prev:
            attrs.append(f'label="{prevalence_label(prev[d])}"')
            attrs.append(f"prevalence={fmt_num(prev[d])}")
        dot.append(f"  {d} [{', '.join(attrs)}];")
    for a, b, f in edges:
        dot.append(f"  {a} -- {b} [weight={fmt_num(f / top)}, flow={fmt_num(f)}];")
    dot.append("}")

    features = []
    for d in nodes:
        x, y = hierarchy.departments[d].centroid
        props = {"department": d}
        if d in prev:
            props["prevalence"] = prev[d]
            props["label"] = prevalence_label(prev[d])
        features.append({"type": "Feature", "geometry": {"type": "Point", "coordinates": [x, y]},
                         "properties": props})
    for a, b, f in edges:
        ca, cb = hierarchy.departments[a].centroid, hierarchy.departments[b].centroid
        features.append({"type": "Feature",
                         "geometry": {"type": "LineString", "coordinates": [list(ca), list(cb)]},
                         "properties": {"source": a, "target": b, "flow": f, "weight": f / top}})
    return "\n".join(dot) + "\n", {"type": "FeatureCollection", "features": features}


def matrix_to_tsv(m: FlowMatrix) -> str:
    rows = ["dept\t" + "\t".join(str(d) for d in m.dept_ids) + "\n"]
    for d, row in zip(m.dept_ids, m.values.tolist()):
        rows.append(f"{d}\t" + "\t".join(fmt_num(v) for v in row) + "\n")
    return "".join(rows)


def matrix_from_tsv(text: str, kind: str, **kw) -> FlowMatrix:
    lines = text.splitlines()
    ids = tuple(int(x) for x in lines[0].split("\t")[1:])
    vals = [[float(x) for x in line.split("\t")[1:]] for line in lines[1:]]
    return FlowMatrix(np.array(vals, dtype=float).reshape(len(ids), len(ids)), ids, kind, **kw)


def dump_geojson(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"
