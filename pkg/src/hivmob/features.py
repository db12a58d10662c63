"""Department-level feature extraction: connectivity (120), spatial (25),
migration (22) and activity (57) families.

Slot scheme shared by connectivity and activity: two day types (weekday,
weekend) x (24 one-hour slots + 3 eight-hour slots + whole day).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .flows import HomeAssignment, RunTable, away_runs, infer_home, mobility_from_runs
from .model import AntennaTable, SpatialHierarchy, TrajectoryTable, fmt_num, hour_of_day, is_weekend

FAMILIES = ("connectivity", "spatial", "migration", "activity")
FAMILY_SIZES = {"connectivity": 120, "spatial": 25, "migration": 22, "activity": 57}
DAY_TYPES = ("weekday", "weekend")
EIGHT_HOUR = ((0, 8), (8, 16), (16, 24))
NIGHT = (1, 5)
SPATIAL_METRICS = ("gyration", "hull_area", "hull_perimeter", "diameter")
SPATIAL_SUBSETS = ("all", "night", "weekday", "weekend", "weekday_night", "weekend_night")
STAY_THRESHOLDS = (None,) + tuple(range(1, 11))


def slot_names() -> list[tuple[int, str, tuple[int, int]]]:
    """``(weekend flag, name, (first hour, end hour))`` for the 56 day-type slots."""
    out = []
    for w, dt in enumerate(DAY_TYPES):
        for h in range(24):
            out.append((w, f"{dt}.h{h:02d}", (h, h + 1)))
        for a, b in EIGHT_HOUR:
            out.append((w, f"{dt}.s{a:02d}-{b:02d}", (a, b)))
        out.append((w, f"{dt}.day", (0, 24)))
    return out


def _slot_reduce(tensor: np.ndarray) -> np.ndarray:
    """Collapse a ``[dept, weekend, hour]`` tensor to the 56 slot columns."""
    cols = [tensor[:, w, a:b].sum(1) for w, _, (a, b) in slot_names()]
    return np.stack(cols, axis=1)


@dataclass
class FeatureMatrix:
    values: np.ndarray
    names: list[str]
    families: list[str]
    dept_ids: tuple[int, ...]
    meta: list[dict] = field(default_factory=list)
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(len(self.dept_ids), len(self.names))
        if not self.meta:
            self.meta = [{"name": n, "family": f, "normalization": "none"} for n, f in zip(self.names, self.families)]

    @property
    def shape(self):
        return self.values.shape

    def family_counts(self) -> dict[str, int]:
        return {f: self.families.count(f) for f in FAMILIES}

    def select(self, family: str | None = None, columns=None, rows=None) -> "FeatureMatrix":
        if columns is None:
            columns = [i for i, f in enumerate(self.families) if family is None or f == family]
        rows = np.arange(len(self.dept_ids)) if rows is None else np.asarray(rows)
        return FeatureMatrix(self.values[np.ix_(rows, columns)], [self.names[i] for i in columns],
                             [self.families[i] for i in columns], tuple(self.dept_ids[r] for r in rows.tolist()),
                             [dict(self.meta[i]) for i in columns], dict(self.flags))

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def to_tsv(self) -> str:
        rows = ["dept\t" + "\t".join(self.names) + "\n"]
        for d, row in zip(self.dept_ids, self.values.tolist()):
            rows.append(f"{d}\t" + "\t".join(fmt_num(v) for v in row) + "\n")
        return "".join(rows)

    def meta_json(self) -> str:
        return json.dumps({"columns": self.meta, "flags": self.flags}, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_files(cls, tsv: str, meta_json: str) -> "FeatureMatrix":
        lines = tsv.splitlines()
        names = lines[0].split("\t")[1:]
        ids, vals = [], []
        for line in lines[1:]:
            parts = line.split("\t")
            ids.append(int(parts[0]))
            vals.append([float(x) for x in parts[1:]])
        meta = json.loads(meta_json)
        fams = [m["family"] for m in meta["columns"]]
        return cls(np.array(vals), names, fams, tuple(ids), meta["columns"], meta.get("flags", {}))


def _column_meta(name, family, slot=None, normalization="none", reconstructed=False):
    m = {"name": name, "family": family, "normalization": normalization}
    if slot is not None:
        m["slot"] = slot
    if reconstructed:
        m["reconstructed"] = True
    return m


# ------------------------------------------------------------------ connectivity


def connectivity_counts(records: AntennaTable, hierarchy: SpatialHierarchy):
    """Raw integer call counts and summed durations.

    Returns ``(whole, whole_dur, slot, slot_dur)`` where ``whole`` is
    ``[dept, (inner, orig, term, overall)]`` and ``slot`` is ``[dept, 56]``
    (overall communication only).
    """
    D = hierarchy.n_departments
    oi = hierarchy.antenna_dept_index(records.origin)
    di = hierarchy.antenna_dept_index(records.dest)
    ok = (oi >= 0) & (di >= 0)
    oi, di = oi[ok], di[ok]
    n = records.n_calls[ok]
    dur = records.duration[ok]
    hod = hour_of_day(records.hour[ok])
    wk = is_weekend(records.hour[ok]).astype(np.int64)

    def sums(idx, w):
        return np.bincount(idx, weights=w, minlength=D)

    inner_m = oi == di
    whole = np.stack([sums(oi[inner_m], n[inner_m]), sums(oi, n), sums(di, n), np.zeros(D)], axis=1)
    whole[:, 3] = whole[:, 1] + whole[:, 2] - whole[:, 0]
    whole_dur = np.stack([sums(oi[inner_m], dur[inner_m]), sums(oi, dur), sums(di, dur), np.zeros(D)], axis=1)
    whole_dur[:, 3] = whole_dur[:, 1] + whole_dur[:, 2] - whole_dur[:, 0]

    # overall = touches the department; an inner record is counted once
    other = ~inner_m
    dept = np.concatenate([oi, di[other]])
    cell = (np.concatenate([dept]) * 2 + np.concatenate([wk, wk[other]])) * 24 + np.concatenate([hod, hod[other]])
    ncat = np.concatenate([n, n[other]])
    dcat = np.concatenate([dur, dur[other]])
    tens = np.bincount(cell, weights=ncat, minlength=D * 48).reshape(D, 2, 24)
    tens_dur = np.bincount(cell, weights=dcat, minlength=D * 48).reshape(D, 2, 24)
    return whole, whole_dur, _slot_reduce(tens), _slot_reduce(tens_dur)


def _impute_mean(values: np.ndarray, defined: np.ndarray):
    out = values.copy()
    n_imputed = 0
    for j in range(values.shape[1]):
        ok = defined[:, j]
        fill = out[ok, j].mean() if ok.any() else 0.0
        n_imputed += int((~ok).sum())
        out[~ok, j] = fill
    return out, n_imputed


def connectivity_features(records: AntennaTable, hierarchy: SpatialHierarchy, pops) -> FeatureMatrix:
    """120 columns: 60 call counts per resident and 60 mean call durations (s)."""
    pop = pops.vector(hierarchy) if hasattr(pops, "vector") else np.asarray(pops, dtype=float)
    whole, whole_dur, slot, slot_dur = connectivity_counts(records, hierarchy)
    counts = np.concatenate([whole, slot], axis=1)
    durs = np.concatenate([whole_dur, slot_dur], axis=1)
    defined = counts > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_dur = np.where(defined, durs / np.where(defined, counts, 1.0), 0.0)
    mean_dur, n_imp = _impute_mean(mean_dur, defined)

    suffixes = ["inner", "orig", "term", "overall"] + [s for _, s, _ in slot_names()]
    names, meta = [], []
    for kind, norm in (("calls", "per-resident"), ("dur", "mean-seconds")):
        for s in suffixes:
            nm = f"conn.{kind}.{s}"
            names.append(nm)
            meta.append(_column_meta(nm, "connectivity", s, norm, reconstructed=True))
    vals = np.concatenate([counts / pop[:, None], mean_dur], axis=1)
    fm = FeatureMatrix(vals, names, ["connectivity"] * len(names), hierarchy.dept_ids, meta)
    fm.flags["connectivity_imputed_cells"] = n_imp
    return fm


# ----------------------------------------------------------------------- spatial


@dataclass
class UserTrace:
    user_id: str
    home: int
    t: np.ndarray
    xy: np.ndarray


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; collinear inputs give their two extremes."""
    pts = np.unique(np.asarray(points, dtype=float).reshape(-1, 2), axis=0)
    if len(pts) <= 2:
        return pts
    P = [tuple(p) for p in pts.tolist()]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in P:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(P):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def spatial_metrics(points) -> tuple[float, float, float, float]:
    """(radius of gyration, hull area, hull perimeter, diameter) in km / km^2.

    The hull of collinear points is the doubled segment: area 0, perimeter
    twice its length.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < 2:
        return 0.0, 0.0, 0.0, 0.0
    c = pts.mean(0)
    gyr = math.sqrt(float(np.mean(np.sum((pts - c) ** 2, axis=1))))
    hull = convex_hull(pts)
    if len(hull) < 2:
        return gyr, 0.0, 0.0, 0.0
    nxt = np.roll(hull, -1, axis=0)
    edges = np.hypot(*(nxt - hull).T)
    if len(hull) == 2:
        perim = 2.0 * float(edges[0])
        area = 0.0
    else:
        perim = float(edges.sum())
        area = 0.5 * abs(float(np.sum(hull[:, 0] * nxt[:, 1] - nxt[:, 0] * hull[:, 1])))
    diam = float(np.max(np.hypot(*(hull[:, None, :] - hull[None, :, :]).transpose(2, 0, 1))))
    return gyr, area, perim, diam


def subset_mask(t: np.ndarray, subset: str) -> np.ndarray:
    hod = hour_of_day(t)
    wk = is_weekend(t)
    night = (hod >= NIGHT[0]) & (hod < NIGHT[1])
    return {
        "all": np.ones(len(t), dtype=bool),
        "night": night,
        "weekday": ~wk,
        "weekend": wk,
        "weekday_night": night & ~wk,
        "weekend_night": night & wk,
    }[subset]


def build_traces(records: TrajectoryTable, homes: HomeAssignment, hierarchy: SpatialHierarchy) -> list[UserTrace]:
    """Time-ordered sub-prefecture-centroid traces for users with a home."""
    ok = hierarchy.known_subprefs(records.subpref)
    user, at, sp = records.user[ok], records.at[ok], records.subpref[ok]
    order = np.lexsort((at, user))
    user, at, sp = user[order], at[order], sp[order]
    xy = hierarchy.subpref_xy(sp)
    bounds = np.flatnonzero(np.r_[True, user[1:] != user[:-1], True])
    out = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        u = int(user[a])
        h = int(homes.home_index[u])
        if h < 0:
            continue
        out.append(UserTrace(records.user_names[u], hierarchy.dept_ids[h], at[a:b], xy[a:b]))
    return out


def total_distance(trace: UserTrace) -> float:
    if len(trace.xy) < 2:
        return 0.0
    return float(np.hypot(*np.diff(trace.xy, axis=0).T).sum())


def user_spatial_vector(trace: UserTrace) -> np.ndarray:
    """The 25 per-user spatial values in column order."""
    vals = []
    for subset in SPATIAL_SUBSETS:
        pts = trace.xy[subset_mask(trace.t, subset)]
        vals.extend(spatial_metrics(pts))
    # reorder metric-major: gyration.all, gyration.night, ...
    arr = np.array(vals).reshape(len(SPATIAL_SUBSETS), 4).T.ravel()
    return np.append(arr, total_distance(trace))


def spatial_names() -> list[str]:
    return [f"spatial.{m}.{s}" for m in SPATIAL_METRICS for s in SPATIAL_SUBSETS] + ["spatial.total_distance"]


def spatial_features(traces: list[UserTrace], hierarchy: SpatialHierarchy, q: float = 95.0) -> FeatureMatrix:
    """95th percentile (linear interpolation) over users homed in each department."""
    D = hierarchy.n_departments
    per_dept: list[list[np.ndarray]] = [[] for _ in range(D)]
    for tr in traces:
        per_dept[hierarchy.dept_index[tr.home]].append(user_spatial_vector(tr))
    names = spatial_names()
    vals = np.zeros((D, len(names)))
    empty = []
    for k, rows in enumerate(per_dept):
        if rows:
            vals[k] = np.percentile(np.array(rows), q, axis=0)
        else:
            empty.append(hierarchy.dept_ids[k])
    meta = [_column_meta(n, "spatial", n.split(".", 2)[-1], f"p{q:g}-across-users") for n in names]
    fm = FeatureMatrix(vals, names, ["spatial"] * len(names), hierarchy.dept_ids, meta)
    fm.flags["spatial_departments_without_users"] = empty
    return fm


# --------------------------------------------------------------------- migration


def migration_names() -> list[str]:
    out = []
    for direction in ("out", "in"):
        for k in STAY_THRESHOLDS:
            out.append(f"migr.{direction}.{'any' if k is None else f'gt{k}d'}")
    return out


def migration_features(runs: RunTable, home_pop: np.ndarray) -> FeatureMatrix:
    """Out/in movement counts per home-based resident for 11 stay thresholds."""
    pop = np.asarray(home_pop, dtype=float)
    safe = np.where(pop > 0, pop, 1.0)
    outs, ins = [], []
    for k in STAY_THRESHOLDS:
        m = mobility_from_runs(runs, k).values.copy()
        np.fill_diagonal(m, 0.0)
        outs.append(np.where(pop > 0, m.sum(1) / safe, 0.0))
        ins.append(np.where(pop > 0, m.sum(0) / safe, 0.0))
    vals = np.stack(outs + ins, axis=1)
    names = migration_names()
    meta = [_column_meta(n, "migration", n.split(".", 2)[-1], "per-home-user") for n in names]
    return FeatureMatrix(vals, names, ["migration"] * len(names), runs.dept_ids, meta)


# ---------------------------------------------------------------------- activity


def activity_counts(records: TrajectoryTable, homes: HomeAssignment, D: int) -> np.ndarray:
    """Integer event counts ``[home dept, 56 slots]``."""
    h = homes.home_index[records.user] if len(records) else np.zeros(0, dtype=np.int64)
    ok = h >= 0
    hod = hour_of_day(records.at[ok])
    wk = is_weekend(records.at[ok]).astype(np.int64)
    cell = (h[ok] * 2 + wk) * 24 + hod
    tens = np.bincount(cell, minlength=D * 48).reshape(D, 2, 24)
    return _slot_reduce(tens)


def activity_features(records: TrajectoryTable, homes: HomeAssignment, home_pop=None) -> FeatureMatrix:
    """57 columns: 56 day-type slots plus overall, events per home-based user."""
    D = len(homes.dept_ids)
    pop = homes.population() if home_pop is None else np.asarray(home_pop, dtype=float)
    slots = activity_counts(records, homes, D)
    overall = slots[:, [i for i, (_, s, _) in enumerate(slot_names()) if s.endswith(".day")]].sum(1)
    counts = np.concatenate([slots, overall[:, None]], axis=1).astype(float)
    safe = np.where(pop > 0, pop, 1.0)
    vals = np.where(pop[:, None] > 0, counts / safe[:, None], 0.0)
    names = [f"act.{s}" for _, s, _ in slot_names()] + ["act.overall"]
    meta = [_column_meta(n, "activity", n[4:], "per-home-user", reconstructed=True) for n in names]
    return FeatureMatrix(vals, names, ["activity"] * len(names), homes.dept_ids, meta)


# ------------------------------------------------------------------------ assembly


def extract_features(antenna: AntennaTable, trajectories: TrajectoryTable, hierarchy: SpatialHierarchy, pops,
                     homes: HomeAssignment | None = None, runs: RunTable | None = None) -> FeatureMatrix:
    """All 224 columns, in family order connectivity, spatial, migration, activity."""
    if homes is None:
        homes = infer_home(trajectories, hierarchy)
    if runs is None:
        runs = away_runs(trajectories, homes, hierarchy)
    home_pop = homes.population()
    parts = [
        connectivity_features(antenna, hierarchy, pops),
        spatial_features(build_traces(trajectories, homes, hierarchy), hierarchy),
        migration_features(runs, home_pop),
        activity_features(trajectories, homes, home_pop),
    ]
    fm = concat_features(parts)
    fm.flags["departments_without_home_users"] = [d for d, p in zip(hierarchy.dept_ids, home_pop) if p == 0]
    return fm


def concat_features(parts: list[FeatureMatrix]) -> FeatureMatrix:
    flags = {}
    for p in parts:
        flags.update(p.flags)
    return FeatureMatrix(
        np.concatenate([p.values for p in parts], axis=1),
        [n for p in parts for n in p.names],
        [f for p in parts for f in p.families],
        parts[0].dept_ids,
        [m for p in parts for m in p.meta],
        flags,
    )


def normalize_by_mean(m: FeatureMatrix) -> FeatureMatrix:
    """Divide each column by its mean over rows; zero-mean columns are left as-is."""
    mean = m.values.mean(0)
    zero = mean == 0
    vals = m.values / np.where(zero, 1.0, mean)
    meta = [dict(c, normalization=c["normalization"] + ("" if z else "/column-mean")) for c, z in zip(m.meta, zero)]
    flags = dict(m.flags)
    flags["zero_mean_columns"] = [n for n, z in zip(m.names, zero) if z]
    return FeatureMatrix(vals, list(m.names), list(m.families), m.dept_ids, meta, flags)
