"""Seeded synthetic worlds with planted structure.

Everything random is drawn from counter-based Philox streams keyed by
``(seed, stream tag, entity id)``, so output does not depend on the order in
which entities are generated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import (
    DAY,
    HOUR,
    Antenna,
    AntennaTable,
    Department,
    PopulationTable,
    SpatialHierarchy,
    SubPrefecture,
    SurveyCluster,
    TrajectoryTable,
    Window,
    hour_of_day,
    is_weekend,
)

_STREAM_WORLD = 1
_STREAM_PLAN = 2
_STREAM_CDR = 3
_STREAM_TRAJ = 4
_STREAM_PREV = 5
_STREAM_SURVEY = 6

NIGHT_HOURS = (1, 5)
PREVALENCE_CLIP = (0.001, 0.10)


class ConfigError(ValueError):
    pass


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for the stream ``(seed, *keys)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2**64 - 1), *keys])))


@dataclass(frozen=True)
class WorldSpec:
    n_departments: int = 50
    n_subprefs: int = 255
    n_antennas: int = 1250
    populations: tuple[float, ...] | None = None
    seed: int = 0
    n_regions: int = 10
    cell_km: float = 40.0
    user_scale: float = 5_000_000.0

    def __post_init__(self):
        if self.n_departments < 1:
            raise ConfigError("n_departments must be >= 1")
        if self.n_subprefs < self.n_departments:
            raise ConfigError("n_subprefs must be >= n_departments")
        if self.n_antennas < self.n_subprefs:
            raise ConfigError("n_antennas must be >= n_subprefs")
        if self.populations is not None and len(self.populations) != self.n_departments:
            raise ConfigError("populations must have one entry per department")
        if self.cell_km <= 0 or self.user_scale <= 0:
            raise ConfigError("cell_km and user_scale must be positive")

    @classmethod
    def small(cls, seed: int = 0, **kw) -> "WorldSpec":
        """Test-sized world: 8 departments, 24 sub-prefectures, 48 antennas."""
        params = dict(n_departments=8, n_subprefs=24, n_antennas=48, user_scale=20_000.0)
        params.update(kw)
        return cls(seed=seed, **params)

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["populations"] = list(self.populations) if self.populations is not None else None
        return d


@dataclass
class World:
    spec: WorldSpec
    hierarchy: SpatialHierarchy
    populations: PopulationTable

    def __post_init__(self):
        h = self.hierarchy
        self.subscribers = self.populations.vector(h)
        ant_ids = sorted(h.antennas)
        self.antenna_ids = np.array(ant_ids, dtype=np.int64)
        self.antenna_dept = h.antenna_dept_index(self.antenna_ids)
        sp_ids = sorted(h.subprefs)
        self.subpref_ids = np.array(sp_ids, dtype=np.int64)
        self.subpref_dept = h.subpref_dept_index(self.subpref_ids)
        self.subpref_xy = h.subpref_xy(self.subpref_ids)

    @property
    def n_departments(self):
        return self.hierarchy.n_departments


def _grid_shape(n: int) -> tuple[int, int]:
    cols = next(c for c in range(math.isqrt(n), n + 1) if c * c >= n and n % c == 0) if n > 1 else 1
    return n // cols, cols


def _split(total: int, parts: int, rng: np.random.Generator) -> np.ndarray:
    """Split ``total`` items into ``parts`` groups of near-equal size (all >= 1)."""
    sizes = np.full(parts, total // parts)
    sizes[rng.permutation(parts)[: total % parts]] += 1
    return sizes


def generate_world(spec: WorldSpec) -> World:
    """Departments tile a rectangle of square cells; sub-prefectures are vertical
    strips of their department; antennas are scattered inside their strip."""
    rng = rng_for(spec.seed, _STREAM_WORLD)
    D = spec.n_departments
    rows, cols = _grid_shape(D)
    w = spec.cell_km
    x0, y0 = -cols * w / 2, -rows * w / 2
    n_regions = min(spec.n_regions, D)
    region_of = np.arange(D) * n_regions // D + 1

    departments = {}
    cells = {}
    for k in range(D):
        r, c = divmod(k, cols)
        xa, ya = x0 + c * w, y0 + r * w
        cells[k + 1] = (xa, ya)
        departments[k + 1] = Department(
            int(region_of[k]),
            (xa + w / 2, ya + w / 2),
            ((xa, ya), (xa + w, ya), (xa + w, ya + w), (xa, ya + w)),
        )

    sp_per_dept = _split(spec.n_subprefs, D, rng)
    subprefs = {}
    strips = {}
    sid = 1
    for k in range(D):
        xa, ya = cells[k + 1]
        m = int(sp_per_dept[k])
        for s in range(m):
            sx = xa + s * w / m
            strips[sid] = (sx, ya, w / m)
            subprefs[sid] = SubPrefecture(k + 1, (sx + w / (2 * m), ya + w / 2))
            sid += 1

    ant_per_sp = _split(spec.n_antennas, spec.n_subprefs, rng)
    antennas = {}
    aid = 1
    for s in range(spec.n_subprefs):
        sx, sy, sw = strips[s + 1]
        for _ in range(int(ant_per_sp[s])):
            ux, uy = rng.random(2)
            antennas[aid] = Antenna(float(sx + ux * sw), float(sy + uy * w), s + 1)
            aid += 1

    if spec.populations is not None:
        pops = {d + 1: float(p) for d, p in enumerate(spec.populations)}
    else:
        raw = np.rint(np.exp(rng.normal(12.0, 0.8, D)))
        pops = {d + 1: float(p) for d, p in enumerate(raw)}
    hierarchy = SpatialHierarchy(antennas, subprefs, departments, tuple(range(1, n_regions + 1)))
    return World(spec, hierarchy, PopulationTable(pops, spec.user_scale))


# --------------------------------------------------------------------------- plan


@dataclass
class BehaviorPlan:
    """Per-department behaviour driving the generators.

    Rates are events per person per hour; ``migration[a, b]`` is the expected
    number of trips from home department ``a`` to ``b`` per user over the
    window (diagonal ignored).
    """

    night_rate: np.ndarray
    day_rate: np.ndarray
    weekend_night_rate: np.ndarray
    migration: np.ndarray
    radius_km: np.ndarray
    stay_median_days: float = 2.0
    stay_sigma: float = 0.8
    radius_sigma: float = 0.5
    home_share: float = 0.85
    n_users: int = 240
    trajectory_rate_scale: float = 15.0
    comm_locality: float = 0.6
    duration_median_s: float = 60.0
    duration_sigma: float = 1.0
    max_trip_share: float = 0.2

    def __post_init__(self):
        for name in ("night_rate", "day_rate", "weekend_night_rate", "radius_km"):
            v = np.asarray(getattr(self, name), dtype=float)
            if (v < 0).any() or not np.isfinite(v).all():
                raise ConfigError(f"{name} must be finite and >= 0")
            setattr(self, name, v)
        self.migration = np.asarray(self.migration, dtype=float)
        if not np.isfinite(self.migration).all() or (self.migration < 0).any():
            raise ConfigError("migration propensities must be finite and >= 0")
        if not 0.0 <= self.comm_locality <= 1.0:
            raise ConfigError("comm_locality must lie in [0, 1]")

    @classmethod
    def default(cls, world: World, seed: int | None = None, **kw) -> "BehaviorPlan":
        seed = world.spec.seed if seed is None else seed
        rng = rng_for(seed, _STREAM_PLAN)
        D = world.n_departments
        night = rng.uniform(0.0005, 0.004, D)
        params = dict(
            night_rate=night,
            day_rate=rng.uniform(0.004, 0.012, D),
            weekend_night_rate=night * rng.uniform(0.8, 2.5, D),
            migration=rng.uniform(0.0, 0.6, (D, D)) / max(D - 1, 1) * 3,
            radius_km=rng.uniform(3.0, 20.0, D),
        )
        params.update(kw)
        return cls(**params)

    def rate_profile(self) -> np.ndarray:
        """Array ``[dept, weekend, hour]`` of events/person/hour."""
        D = len(self.day_rate)
        prof = np.repeat(self.day_rate[:, None], 24, axis=1)[:, None, :].repeat(2, axis=1)
        lo, hi = NIGHT_HOURS
        prof[:, 0, lo:hi] = self.night_rate[:, None]
        prof[:, 1, lo:hi] = self.weekend_night_rate[:, None]
        return prof.reshape(D, 2, 24)

    def to_json(self) -> dict:
        out = {}
        for k in self.__dataclass_fields__:
            v = getattr(self, k)
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    @classmethod
    def from_json(cls, doc: dict) -> "BehaviorPlan":
        return cls(**doc)


def comm_affinity(world: World, locality: float) -> np.ndarray:
    """Row-stochastic destination-department law: ``locality`` stays home,
    the rest follows a gravity law (population / distance^2)."""
    D = world.n_departments
    if D == 1:
        return np.ones((1, 1))
    cen = np.array([world.hierarchy.departments[d].centroid for d in world.hierarchy.dept_ids])
    dist = np.hypot(*(cen[:, None, :] - cen[None, :, :]).transpose(2, 0, 1))
    np.fill_diagonal(dist, np.inf)
    g = world.subscribers[None, :] / dist**2
    g = g / g.sum(1, keepdims=True) * (1.0 - locality)
    np.fill_diagonal(g, locality)
    return g


def _hour_split(window: Window):
    hours = window.hours
    return hours, hour_of_day(hours), is_weekend(hours).astype(np.int64)


def generate_cdr(world: World, plan: BehaviorPlan, window: Window, seed: int | None = None) -> AntennaTable:
    """Hourly antenna-to-antenna aggregates with Poisson call counts.

    Calls per (origin department, hour) are Poisson with mean
    ``rate * subscribers``; each call then picks an origin antenna uniformly in
    its department, a destination department from :func:`comm_affinity` and a
    destination antenna uniformly there (equivalent to independent Poisson
    counts per antenna pair). Durations are log-normal per call.
    """
    seed = world.spec.seed if seed is None else seed
    D = world.n_departments
    prof = plan.rate_profile()
    P = comm_affinity(world, plan.comm_locality)
    cumP = np.cumsum(P, axis=1)
    cumP[:, -1] = 1.0
    order = np.argsort(world.antenna_dept, kind="stable")
    ant_sorted = world.antenna_ids[order]
    n_ant = np.bincount(world.antenna_dept, minlength=D)
    offset = np.concatenate([[0], np.cumsum(n_ant)[:-1]])
    A = len(ant_sorted)
    mu = math.log(plan.duration_median_s)

    hours, hod, wkend = _hour_split(window)
    day_of = (hours - window.start) // DAY
    tables = []
    for day in np.unique(day_of).tolist():
        sel = day_of == day
        h_day = hours[sel]
        lam = prof[:, wkend[sel], hod[sel]] * world.subscribers[:, None]  # (D, H)
        rng = rng_for(seed, _STREAM_CDR, day)
        counts = rng.poisson(lam)
        total = int(counts.sum())
        if total == 0:
            continue
        flat = counts.ravel()
        src = np.repeat(np.arange(D), counts.sum(1))
        hidx = np.repeat(np.tile(np.arange(len(h_day)), D), flat)
        oa = offset[src] + (rng.random(total) * n_ant[src]).astype(np.int64)
        u = rng.random(total)
        dst = (u[:, None] >= cumP[src]).sum(1)
        da = offset[dst] + (rng.random(total) * n_ant[dst]).astype(np.int64)
        dur = rng.lognormal(mu, plan.duration_sigma, total)
        key = (hidx * A + oa) * A + da
        uniq, inv, ncalls = np.unique(key, return_inverse=True, return_counts=True)
        tot = np.rint(np.bincount(inv, weights=dur))
        hi, rem = np.divmod(uniq, A * A)
        o, d = np.divmod(rem, A)
        tables.append(AntennaTable(h_day[hi], ant_sorted[o], ant_sorted[d], ncalls, tot))
    return AntennaTable.concat(tables)


# ------------------------------------------------------------------- trajectories


@dataclass(frozen=True)
class PlantedTrip:
    user_id: str
    department: int
    subpref: int
    start: int
    end: int

    @property
    def duration_days(self) -> float:
        return (self.end - self.start) / DAY


@dataclass
class MobilityTruth:
    home_subpref: dict[str, int]
    home_department: dict[str, int]
    trips: list[PlantedTrip] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "home_department": self.home_department,
            "home_subpref": self.home_subpref,
            "trips": [t.__dict__ for t in self.trips],
        }


def users_per_department(world: World, n_users: int) -> np.ndarray:
    """Largest-remainder allocation proportional to subscribers, >= 1 each."""
    D = world.n_departments
    if n_users < D:
        raise ConfigError("need at least one synthetic user per department")
    share = world.subscribers / world.subscribers.sum() * (n_users - D)
    base = np.floor(share).astype(np.int64)
    rem = n_users - D - base.sum()
    base[np.argsort(-(share - base), kind="stable")[:rem]] += 1
    return base + 1


def _place_trips(rng, n_trips, window, median_days, sigma, max_total):
    lo, hi = window.start + 2 * HOUR, window.end - 2 * HOUR
    placed: list[tuple[int, int]] = []
    used = 0
    for _ in range(n_trips):
        dur = int(np.clip(rng.lognormal(math.log(median_days), sigma), 0.05, 14.0) * DAY)
        for _attempt in range(20):
            if hi - lo - dur <= 0 or used + dur > max_total:
                break
            s = int(lo + rng.integers(0, hi - lo - dur))
            e = s + dur
            if all(e + DAY <= ps or s >= pe + DAY for ps, pe in placed):
                placed.append((s, e))
                used += dur
                break
    return sorted(placed)


def generate_trajectories(world: World, plan: BehaviorPlan, window: Window,
                          seed: int | None = None) -> tuple[TrajectoryTable, MobilityTruth]:
    """Per-user SET3-style records plus the planted homes and trips.

    Outside trips a user's events fall at the home sub-prefecture with
    probability ``home_share`` and otherwise at another sub-prefecture of the
    home department within the user's mobility radius. Each trip gets forced
    records at its start and end (at the destination) and one hour either side
    (at home), so stays are observable exactly.
    """
    seed = world.spec.seed if seed is None else seed
    D = world.n_departments
    h = world.hierarchy
    prof = plan.rate_profile() * plan.trajectory_rate_scale
    hours, hod, wkend = _hour_split(window)
    per_dept = users_per_department(world, plan.n_users)
    home_dept_of_user = np.repeat(np.arange(D), per_dept)
    sp_by_dept = [np.flatnonzero(world.subpref_dept == d) for d in range(D)]
    mig = plan.migration.copy()
    np.fill_diagonal(mig, 0.0)
    max_trip = int(plan.max_trip_share * (window.end - window.start))

    names = [str(u + 1) for u in range(plan.n_users)]
    truth = MobilityTruth({}, {})
    cols_u, cols_t, cols_s = [], [], []
    for u in range(plan.n_users):
        rng = rng_for(seed, _STREAM_TRAJ, u)
        d = int(home_dept_of_user[u])
        home_sp_idx = int(rng.choice(sp_by_dept[d]))
        home_xy = world.subpref_xy[home_sp_idx]
        radius = plan.radius_km[d] * math.exp(plan.radius_sigma * rng.standard_normal())
        local = sp_by_dept[d][np.hypot(*(world.subpref_xy[sp_by_dept[d]] - home_xy).T) <= radius]
        local = local[local != home_sp_idx]

        trips = []
        total_rate = mig[d].sum()
        if total_rate > 0:
            n_trips = int(rng.poisson(total_rate))
            spans = _place_trips(rng, n_trips, window, plan.stay_median_days, plan.stay_sigma, max_trip)
            for s, e in spans:
                dest = int(rng.choice(D, p=mig[d] / total_rate))
                dest_sp = int(rng.choice(sp_by_dept[dest]))
                trips.append((s, e, dest_sp))

        counts = rng.poisson(prof[d, wkend, hod])
        n = int(counts.sum())
        t = np.repeat(hours, counts) + rng.integers(0, HOUR, n)
        forced_t = [x for s, e, _ in trips for x in (s - HOUR, s, e, e + HOUR)]
        t = np.concatenate([t, np.array(forced_t, dtype=np.int64)])
        t = t[(t >= window.start) & (t < window.end)]
        t.sort(kind="stable")
        loc = np.full(len(t), home_sp_idx, dtype=np.int64)
        away = rng.random(len(t)) >= plan.home_share
        if len(local):
            loc[away] = local[rng.integers(0, len(local), int(away.sum()))]
        for s, e, dest_sp in trips:
            loc[(t >= s) & (t <= e)] = dest_sp
        for s, e, dest_sp in trips:
            # the bracketing records are pinned home so consecutive trips never merge
            loc[np.isin(t, (s - HOUR, e + HOUR))] = home_sp_idx
        uid = names[u]
        truth.home_subpref[uid] = int(world.subpref_ids[home_sp_idx])
        truth.home_department[uid] = int(h.dept_ids[d])
        for s, e, dest_sp in trips:
            truth.trips.append(PlantedTrip(uid, int(h.dept_ids[world.subpref_dept[dest_sp]]),
                                           int(world.subpref_ids[dest_sp]), s, e))
        cols_u.append(np.full(len(t), u, dtype=np.int64))
        cols_t.append(t)
        cols_s.append(world.subpref_ids[loc])
    if not cols_t:
        return TrajectoryTable.empty(), truth
    table = TrajectoryTable(np.concatenate(cols_u), np.concatenate(cols_t), np.concatenate(cols_s), names)
    return table, truth


# --------------------------------------------------------------------- prevalence


def _slot_hours(slot: str):
    if slot == "day":
        return list(range(24))
    if slot.startswith("h"):
        return [int(slot[1:])]
    if slot.startswith("s"):
        a, b = slot[1:].split("-")
        return list(range(int(a), int(b)))
    raise KeyError(slot)


def expected_feature_values(world: World, plan: BehaviorPlan, window: Window, name: str) -> np.ndarray:
    """Generator-side expectation of an extractable per-department feature.

    Supported: activity features (``act.<daytype>.<slot>``, ``act.overall``)
    and connectivity call counts (``conn.calls.*``), both per resident.
    """
    _, hod, wkend = _hour_split(window)
    # hours of the window per (weekend flag, hour of day)
    nhours = np.zeros((2, 24))
    np.add.at(nhours, (wkend, hod), 1)
    parts = name.split(".")
    if parts[0] == "act":
        prof = plan.rate_profile() * plan.trajectory_rate_scale
        if parts[1:] == ["overall"]:
            return (prof * nhours[None]).sum((1, 2))
        return _slot_expectation(prof, nhours, parts[1:], name)
    if parts[:2] == ["conn", "calls"]:
        prof = plan.rate_profile()
        P = comm_affinity(world, plan.comm_locality)
        subs = world.subscribers
        orig = prof * subs[:, None, None]                            # calls originating
        term = np.einsum("ab,awh->bwh", P, orig)                     # calls terminating
        inner = orig * np.diag(P)[:, None, None]
        overall = orig + term - inner
        rest = parts[2:]
        whole = {"inner": inner, "orig": orig, "term": term, "overall": overall}
        if len(rest) == 1 and rest[0] in whole:
            return (whole[rest[0]] * nhours[None]).sum((1, 2)) / subs
        return _slot_expectation(overall / subs[:, None, None], nhours, rest, name)
    raise KeyError(f"feature {name!r} has no generator-side value")


def _slot_expectation(prof, nhours, rest, name):
    if len(rest) != 2 or rest[0] not in ("weekday", "weekend"):
        raise KeyError(f"feature {name!r} has no generator-side value")
    w = 0 if rest[0] == "weekday" else 1
    try:
        hrs = _slot_hours(rest[1])
    except (KeyError, ValueError):
        raise KeyError(f"feature {name!r} has no generator-side value") from None
    return (prof[:, w, hrs] * nhours[w, hrs][None]).sum(1)


@dataclass
class PlantedTruth:
    prevalence: np.ndarray
    coefficients: dict[str, float]
    intercept: float
    noise_sd: float
    feature_values: dict[str, np.ndarray]
    dept_ids: tuple[int, ...]

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.dept_ids, self.prevalence.tolist()))

    def to_json(self) -> dict:
        return {
            "prevalence": {str(d): p for d, p in zip(self.dept_ids, self.prevalence.tolist())},
            "coefficients": self.coefficients,
            "intercept": self.intercept,
            "noise_sd": self.noise_sd,
            "feature_values": {k: v.tolist() for k, v in self.feature_values.items()},
        }


def plant_prevalence(world: World, plan: BehaviorPlan, window: Window, coefficients: dict[str, float],
                     intercept: float, noise_sd: float = 0.0, seed: int | None = None) -> PlantedTruth:
    """Prevalence = intercept + sum(coef * expected feature) + N(0, noise_sd), clipped."""
    seed = world.spec.seed if seed is None else seed
    values = {}
    for name in coefficients:
        try:
            values[name] = expected_feature_values(world, plan, window, name)
        except KeyError as exc:
            raise ConfigError(str(exc)) from None
    prev = np.full(world.n_departments, float(intercept))
    for name, c in coefficients.items():
        prev += c * values[name]
    if noise_sd > 0:
        prev += rng_for(seed, _STREAM_PREV).normal(0.0, noise_sd, world.n_departments)
    prev = np.clip(prev, *PREVALENCE_CLIP)
    return PlantedTruth(prev, dict(coefficients), float(intercept), float(noise_sd), values,
                        world.hierarchy.dept_ids)


def plant_prevalence_range(world: World, plan: BehaviorPlan, window: Window, feature,
                           low: float, high: float, noise_sd: float = 0.0,
                           seed: int | None = None) -> PlantedTruth:
    """Affine link mapping the min/max of a feature (or of the sum of several,
    equally weighted) onto low/high."""
    names = [feature] if isinstance(feature, str) else list(feature)
    try:
        v = sum(expected_feature_values(world, plan, window, f) for f in names)
    except KeyError as exc:
        raise ConfigError(str(exc)) from None
    span = v.max() - v.min()
    coef = (high - low) / span if span > 0 else 0.0
    return plant_prevalence(world, plan, window, dict.fromkeys(names, coef), low - coef * v.min(), noise_sd, seed)


def generate_survey(world: World, truth: PlantedTruth, clusters_per_dept=None, tested_per_cluster: int = 30,
                    seed: int | None = None) -> list[SurveyCluster]:
    """DHS-like clusters placed uniformly inside department cells with
    binomial positives at the planted prevalence.

    ``clusters_per_dept`` is an int or a per-department sequence. ``None``
    draws 1..8 per department, giving a mix of quality grades.
    """
    seed = world.spec.seed if seed is None else seed
    rng = rng_for(seed, _STREAM_SURVEY)
    D = world.n_departments
    if clusters_per_dept is None:
        counts = rng.integers(1, 9, D)
    else:
        counts = np.broadcast_to(np.asarray(clusters_per_dept, dtype=np.int64), (D,))
    out = []
    for k, did in enumerate(world.hierarchy.dept_ids):
        poly = np.array(world.hierarchy.departments[did].polygon)
        (xa, ya), (xb, yb) = poly.min(0), poly.max(0)
        for _ in range(int(counts[k])):
            x = xa + rng.random() * (xb - xa)
            y = ya + rng.random() * (yb - ya)
            pos = int(rng.binomial(tested_per_cluster, truth.prevalence[k]))
            out.append(SurveyCluster(float(x), float(y), int(tested_per_cluster), pos))
    return out
