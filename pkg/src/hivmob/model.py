"""Domain types, TSV/JSON ingestion and dataset validation.

Record collections are held column-wise (numpy arrays) because the real
datasets run to millions of rows; indexing or iterating a table yields the
scalar record dataclasses.

Timestamps are integer seconds since the Unix epoch, UTC.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Iterator, Sequence

import numpy as np

HOUR = 3600
DAY = 86400

_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


class RecordParseError(ValueError):
    """Raised when a TSV stream has more malformed lines than tolerated."""

    def __init__(self, errors):
        self.errors = list(errors)
        head = "; ".join(f"line {e.lineno}: {e.message}" for e in self.errors[:5])
        more = f" (+{len(self.errors) - 5} more)" if len(self.errors) > 5 else ""
        super().__init__(f"{len(self.errors)} malformed line(s): {head}{more}")


class HierarchyError(ValueError):
    pass


@dataclass(frozen=True)
class LineError:
    lineno: int
    message: str
    text: str


# --------------------------------------------------------------------------- time


def _to_epoch(dt: datetime) -> int:
    return int((dt - _EPOCH).total_seconds())


_DATE_CACHE: dict[str, int] = {}


def _date_seconds(date: str) -> int:
    v = _DATE_CACHE.get(date)
    if v is None:
        dt = datetime.strptime(date, "%Y-%m-%d").replace(tzinfo=timezone.utc)
        v = _DATE_CACHE[date] = _to_epoch(dt)
    return v


def parse_hour(text: str) -> int:
    """``YYYY-MM-DDTHH`` -> epoch seconds of that hour."""
    date, sep, hh = text.partition("T")
    if not sep or len(hh) != 2 or not hh.isdigit():
        raise ValueError(f"bad hour stamp {text!r}")
    h = int(hh)
    if h > 23:
        raise ValueError(f"bad hour stamp {text!r}")
    return _date_seconds(date) + h * HOUR


def parse_timestamp(text: str) -> int:
    """Parse ``YYYY-MM-DD[THH[:MM[:SS]]]``; coarser stamps fill with zeros."""
    date, sep, clock = text.partition("T")
    base = _date_seconds(date)
    if not sep:
        return base
    parts = clock.split(":")
    if len(parts) > 3 or not all(len(p) == 2 and p.isdigit() for p in parts):
        raise ValueError(f"bad timestamp {text!r}")
    vals = [int(p) for p in parts] + [0] * (3 - len(parts))
    if vals[0] > 23 or vals[1] > 59 or vals[2] > 59:
        raise ValueError(f"bad timestamp {text!r}")
    return base + vals[0] * HOUR + vals[1] * 60 + vals[2]


def format_hour(t: int) -> str:
    return datetime.fromtimestamp(int(t), tz=timezone.utc).strftime("%Y-%m-%dT%H")


def format_timestamp(t: int) -> str:
    return datetime.fromtimestamp(int(t), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%S")


def hour_of_day(t):
    return (np.asarray(t) // HOUR) % 24


def day_of_week(t):
    """Monday = 0 ... Sunday = 6 (1970-01-01 was a Thursday)."""
    return (np.asarray(t) // DAY + 3) % 7


def is_weekend(t):
    return day_of_week(t) >= 5


@dataclass(frozen=True)
class Window:
    """Half-open observation window ``[start, end)`` in epoch seconds."""

    start: int
    end: int

    def __post_init__(self):
        if self.end <= self.start:
            raise ValueError("window end must be after start")

    @classmethod
    def from_dates(cls, first_day: str, last_day: str) -> "Window":
        """Window covering ``first_day`` through ``last_day`` inclusive."""
        return cls(_date_seconds(first_day), _date_seconds(last_day) + DAY)

    @property
    def hours(self) -> np.ndarray:
        first = -(-self.start // HOUR) * HOUR
        return np.arange(first, self.end, HOUR, dtype=np.int64)

    def contains(self, t):
        t = np.asarray(t)
        return (t >= self.start) & (t < self.end)

    def to_json(self) -> dict:
        return {"start": format_timestamp(self.start), "end": format_timestamp(self.end)}

    @classmethod
    def from_json(cls, doc) -> "Window":
        return cls(parse_timestamp(doc["start"]), parse_timestamp(doc["end"]))


DEFAULT_WINDOW = Window.from_dates("2011-12-01", "2012-04-28")


def fmt_num(v) -> str:
    """Shortest round-trip decimal; integral ints render without a point."""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isfinite(v) and v.is_integer() and abs(v) < 2**53:
        return str(int(v))
    return repr(v)


def _parse_count(tok: str, name: str) -> int:
    if not tok.isdigit():
        raise ValueError(f"{name} must be a non-negative integer, got {tok!r}")
    return int(tok)


def _parse_nonneg(tok: str, name: str) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise ValueError(f"{name} is not a number: {tok!r}") from None
    if not math.isfinite(v) or v < 0:
        raise ValueError(f"{name} must be a finite non-negative number, got {tok!r}")
    return v


# ------------------------------------------------------------------------ records


@dataclass(frozen=True)
class AntennaRecord:
    hour_start: int
    origin_antenna: int
    dest_antenna: int
    n_calls: int
    total_duration: float

    def __post_init__(self):
        if self.n_calls < 0:
            raise ValueError("n_calls must be >= 0")
        if self.total_duration < 0:
            raise ValueError("total_duration must be >= 0")
        if self.hour_start % HOUR:
            raise ValueError("hour_start must be truncated to the hour")


@dataclass(frozen=True)
class TrajectoryRecord:
    user_id: str
    at: int
    subpref: int


class AntennaTable(Sequence):
    """Column store of :class:`AntennaRecord` values (input order preserved)."""

    def __init__(self, hour, origin, dest, n_calls, duration):
        self.hour = np.asarray(hour, dtype=np.int64)
        self.origin = np.asarray(origin, dtype=np.int64)
        self.dest = np.asarray(dest, dtype=np.int64)
        self.n_calls = np.asarray(n_calls, dtype=np.int64)
        self.duration = np.asarray(duration, dtype=np.float64)
        self.errors: list[LineError] = []
        self.dropped_zero = 0

    @classmethod
    def empty(cls):
        return cls([], [], [], [], [])

    @classmethod
    def from_records(cls, records: Iterable[AntennaRecord]):
        rows = [(r.hour_start, r.origin_antenna, r.dest_antenna, r.n_calls, r.total_duration) for r in records]
        if not rows:
            return cls.empty()
        return cls(*zip(*rows))

    def __len__(self):
        return len(self.hour)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return AntennaRecord(int(self.hour[i]), int(self.origin[i]), int(self.dest[i]),
                                 int(self.n_calls[i]), _num(self.duration[i]))
        return AntennaTable(self.hour[i], self.origin[i], self.dest[i], self.n_calls[i], self.duration[i])

    def __iter__(self) -> Iterator[AntennaRecord]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other):
        if not isinstance(other, AntennaTable):
            return NotImplemented
        return all(np.array_equal(getattr(self, c), getattr(other, c))
                   for c in ("hour", "origin", "dest", "n_calls", "duration"))

    @staticmethod
    def concat(tables: Sequence["AntennaTable"]) -> "AntennaTable":
        if not tables:
            return AntennaTable.empty()
        return AntennaTable(*(np.concatenate([getattr(t, c) for t in tables])
                              for c in ("hour", "origin", "dest", "n_calls", "duration")))


class TrajectoryTable(Sequence):
    """Column store of :class:`TrajectoryRecord` values.

    User ids are kept as integer codes into ``user_names``.
    """

    def __init__(self, user, at, subpref, user_names):
        self.user = np.asarray(user, dtype=np.int64)
        self.at = np.asarray(at, dtype=np.int64)
        self.subpref = np.asarray(subpref, dtype=np.int64)
        self.user_names = tuple(user_names)
        self.errors: list[LineError] = []

    @classmethod
    def empty(cls):
        return cls([], [], [], ())

    @classmethod
    def from_records(cls, records: Iterable[TrajectoryRecord]):
        codes: dict[str, int] = {}
        u, t, s = [], [], []
        for r in records:
            u.append(codes.setdefault(r.user_id, len(codes)))
            t.append(r.at)
            s.append(r.subpref)
        return cls(u, t, s, list(codes))

    @property
    def n_users(self):
        return len(self.user_names)

    def __len__(self):
        return len(self.at)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return TrajectoryRecord(self.user_names[self.user[i]], int(self.at[i]), int(self.subpref[i]))
        return TrajectoryTable(self.user[i], self.at[i], self.subpref[i], self.user_names)

    def __iter__(self) -> Iterator[TrajectoryRecord]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other):
        if not isinstance(other, TrajectoryTable):
            return NotImplemented
        return list(self) == list(other)

    def sorted(self) -> "TrajectoryTable":
        """Stable sort by (user code, time)."""
        order = np.lexsort((self.at, self.user))
        return self[order]


def _num(v: float):
    v = float(v)
    return int(v) if v.is_integer() else v


def _lines(stream):
    if isinstance(stream, str):
        stream = stream.splitlines()
    for lineno, line in enumerate(stream, 1):
        line = line.rstrip("\r\n")
        if line.strip():
            yield lineno, line


def parse_antenna_records(stream, max_errors: int = 0) -> AntennaTable:
    """Parse SET1-style hourly antenna-to-antenna TSV.

    Columns: ``hour_start  origin  dest  n_calls  total_duration``.
    Rows with ``n_calls == 0`` are dropped and counted in ``dropped_zero``.
    Malformed lines are collected in ``errors``; more than ``max_errors`` of
    them raises :class:`RecordParseError`.
    """
    hour_cache: dict[str, int] = {}
    cols = ([], [], [], [], [])
    errors = []
    dropped = 0
    for lineno, line in _lines(stream):
        parts = line.split("\t")
        try:
            if len(parts) != 5:
                raise ValueError(f"expected 5 fields, got {len(parts)}")
            h = hour_cache.get(parts[0])
            if h is None:
                h = hour_cache[parts[0]] = parse_hour(parts[0])
            o = int(parts[1])
            d = int(parts[2])
            n = _parse_count(parts[3], "n_calls")
            dur = _parse_nonneg(parts[4], "total_duration")
        except ValueError as exc:
            errors.append(LineError(lineno, str(exc), line))
            continue
        if n == 0:
            dropped += 1
            continue
        for c, v in zip(cols, (h, o, d, n, dur)):
            c.append(v)
    if len(errors) > max_errors:
        raise RecordParseError(errors)
    table = AntennaTable(*cols)
    table.errors = errors
    table.dropped_zero = dropped
    return table


def parse_trajectory_records(stream, max_errors: int = 0) -> TrajectoryTable:
    """Parse SET3-style ``user_id  timestamp  subpref`` TSV (order preserved)."""
    codes: dict[str, int] = {}
    u, t, s = [], [], []
    errors = []
    for lineno, line in _lines(stream):
        parts = line.split("\t")
        try:
            if len(parts) != 3:
                raise ValueError(f"expected 3 fields, got {len(parts)}")
            if not parts[0]:
                raise ValueError("empty user id")
            at = parse_timestamp(parts[1])
            sp = int(parts[2])
        except ValueError as exc:
            errors.append(LineError(lineno, str(exc), line))
            continue
        u.append(codes.setdefault(parts[0], len(codes)))
        t.append(at)
        s.append(sp)
    if len(errors) > max_errors:
        raise RecordParseError(errors)
    table = TrajectoryTable(u, t, s, list(codes))
    table.errors = errors
    return table


def format_antenna_records(table: AntennaTable) -> str:
    hours = {h: format_hour(h) for h in np.unique(table.hour)}
    return "".join(
        f"{hours[h]}\t{o}\t{d}\t{n}\t{fmt_num(dur)}\n"
        for h, o, d, n, dur in zip(table.hour.tolist(), table.origin.tolist(), table.dest.tolist(),
                                   table.n_calls.tolist(), table.duration.tolist())
    )


def format_trajectory_records(table: TrajectoryTable) -> str:
    days = {}
    out = []
    names = table.user_names
    for u, t, s in zip(table.user.tolist(), table.at.tolist(), table.subpref.tolist()):
        day = t - t % DAY
        ds = days.get(day)
        if ds is None:
            ds = days[day] = format_hour(day)[:10]
        sec = t - day
        out.append(f"{names[u]}\t{ds}T{sec // HOUR:02d}:{sec % HOUR // 60:02d}:{sec % 60:02d}\t{s}\n")
    return "".join(out)


# ---------------------------------------------------------------- spatial metadata


@dataclass(frozen=True)
class Antenna:
    x: float
    y: float
    subpref: int


@dataclass(frozen=True)
class SubPrefecture:
    department: int
    centroid: tuple[float, float]


@dataclass(frozen=True)
class Department:
    region: int
    centroid: tuple[float, float]
    polygon: tuple[tuple[float, float], ...]


@dataclass
class SpatialHierarchy:
    """Antenna -> sub-prefecture -> department -> region, with planar km coords."""

    antennas: dict[int, Antenna]
    subprefs: dict[int, SubPrefecture]
    departments: dict[int, Department]
    regions: tuple[int, ...]
    _lookup: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for aid, a in self.antennas.items():
            if a.subpref not in self.subprefs:
                raise HierarchyError(f"antenna {aid} maps to unknown sub-prefecture {a.subpref}")
        for sid, s in self.subprefs.items():
            if s.department not in self.departments:
                raise HierarchyError(f"sub-prefecture {sid} maps to unknown department {s.department}")
        regions = set(self.regions)
        for did, d in self.departments.items():
            if d.region not in regions:
                raise HierarchyError(f"department {did} maps to unknown region {d.region}")
        self.regions = tuple(sorted(regions))
        self.dept_ids = tuple(sorted(self.departments))
        self.dept_index = {d: i for i, d in enumerate(self.dept_ids)}
        ant_ids = np.array(sorted(self.antennas), dtype=np.int64)
        sp_ids = np.array(sorted(self.subprefs), dtype=np.int64)
        self._lookup = {
            "ant_ids": ant_ids,
            "ant_dept": np.array([self.dept_index[self.subprefs[self.antennas[a].subpref].department]
                                  for a in ant_ids.tolist()], dtype=np.int64),
            "sp_ids": sp_ids,
            "sp_dept": np.array([self.dept_index[self.subprefs[s].department] for s in sp_ids.tolist()],
                                dtype=np.int64),
            "sp_xy": np.array([self.subprefs[s].centroid for s in sp_ids.tolist()], dtype=float).reshape(-1, 2),
        }

    @property
    def n_departments(self) -> int:
        return len(self.dept_ids)

    def department_of_antenna(self, aid: int) -> int:
        return self.subprefs[self.antennas[aid].subpref].department

    def region_of_department(self, did: int) -> int:
        return self.departments[did].region

    @staticmethod
    def _index(ids, query):
        query = np.asarray(query, dtype=np.int64)
        if ids.size == 0:
            return np.full(query.shape, -1, dtype=np.int64)
        pos = np.clip(np.searchsorted(ids, query), 0, len(ids) - 1)
        return np.where(ids[pos] == query, pos, -1)

    def antenna_dept_index(self, antenna_ids) -> np.ndarray:
        """Department index (position in ``dept_ids``) per antenna, -1 if unknown."""
        pos = self._index(self._lookup["ant_ids"], antenna_ids)
        return np.where(pos >= 0, self._lookup["ant_dept"][np.maximum(pos, 0)], -1)

    def subpref_dept_index(self, subpref_ids) -> np.ndarray:
        pos = self._index(self._lookup["sp_ids"], subpref_ids)
        return np.where(pos >= 0, self._lookup["sp_dept"][np.maximum(pos, 0)], -1)

    def subpref_xy(self, subpref_ids) -> np.ndarray:
        pos = self._index(self._lookup["sp_ids"], subpref_ids)
        if (pos < 0).any():
            raise HierarchyError("unknown sub-prefecture id")
        return self._lookup["sp_xy"][pos]

    def known_antennas(self, antenna_ids) -> np.ndarray:
        return self._index(self._lookup["ant_ids"], antenna_ids) >= 0

    def known_subprefs(self, subpref_ids) -> np.ndarray:
        return self._index(self._lookup["sp_ids"], subpref_ids) >= 0

    def bbox(self) -> tuple[float, float, float, float]:
        pts = np.array([p for d in self.departments.values() for p in d.polygon], dtype=float)
        return float(pts[:, 0].min()), float(pts[:, 1].min()), float(pts[:, 0].max()), float(pts[:, 1].max())

    def to_json(self) -> dict:
        return {
            "antennas": {str(k): {"x": v.x, "y": v.y, "subpref": v.subpref} for k, v in sorted(self.antennas.items())},
            "subprefs": {str(k): {"department": v.department, "centroid": list(v.centroid)}
                         for k, v in sorted(self.subprefs.items())},
            "departments": {str(k): {"region": v.region, "centroid": list(v.centroid),
                                     "polygon": [list(p) for p in v.polygon]}
                            for k, v in sorted(self.departments.items())},
            "regions": list(self.regions),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SpatialHierarchy":
        antennas = {int(k): Antenna(float(v["x"]), float(v["y"]), int(v["subpref"])) for k, v in doc["antennas"].items()}
        subprefs = {}
        for k, v in doc["subprefs"].items():
            if isinstance(v, dict):
                dept = int(v["department"])
                cen = v.get("centroid")
            else:
                dept, cen = int(v), None
            if cen is None:
                pts = [(a.x, a.y) for a in antennas.values() if a.subpref == int(k)]
                if not pts:
                    raise HierarchyError(f"sub-prefecture {k} has no centroid and no antennas")
                cen = np.mean(pts, axis=0)
            subprefs[int(k)] = SubPrefecture(dept, (float(cen[0]), float(cen[1])))
        departments = {
            int(k): Department(int(v["region"]), (float(v["centroid"][0]), float(v["centroid"][1])),
                               tuple((float(p[0]), float(p[1])) for p in v["polygon"]))
            for k, v in doc["departments"].items()
        }
        return cls(antennas, subprefs, departments, tuple(int(r) for r in doc["regions"]))


@dataclass(frozen=True)
class PopulationTable:
    """Per-department population, rescaled to the observed subscriber base."""

    dept_pop: dict[int, float]
    user_scale: float

    def __post_init__(self):
        bad = [d for d, p in self.dept_pop.items() if not p > 0]
        if bad:
            raise ValueError(f"non-positive population for departments {bad}")
        if not self.user_scale > 0:
            raise ValueError("user_scale must be positive")

    def rescaled(self) -> dict[int, float]:
        total = math.fsum(self.dept_pop.values())
        return {d: p * self.user_scale / total for d, p in self.dept_pop.items()}

    def vector(self, hierarchy: SpatialHierarchy, rescale: bool = True) -> np.ndarray:
        pops = self.rescaled() if rescale else self.dept_pop
        missing = [d for d in hierarchy.dept_ids if d not in pops]
        if missing:
            raise ValueError(f"no population for departments {missing}")
        return np.array([pops[d] for d in hierarchy.dept_ids], dtype=float)

    def to_json(self) -> dict:
        return {"dept_pop": {str(k): v for k, v in sorted(self.dept_pop.items())}, "user_scale": self.user_scale}

    @classmethod
    def from_json(cls, doc: dict) -> "PopulationTable":
        return cls({int(k): v for k, v in doc["dept_pop"].items()}, doc["user_scale"])


@dataclass(frozen=True)
class SurveyCluster:
    x: float
    y: float
    n_tested: int
    n_positive: int

    def __post_init__(self):
        if self.n_tested <= 0:
            raise ValueError("n_tested must be positive")
        if not 0 <= self.n_positive <= self.n_tested:
            raise ValueError("need 0 <= n_positive <= n_tested")

    @property
    def prevalence(self) -> float:
        return self.n_positive / self.n_tested


QUALITY_GRADES = ("good", "moderate", "uncertain")


@dataclass(frozen=True)
class HivEstimate:
    department: int
    prevalence: float
    quality: str

    def __post_init__(self):
        if not 0.0 <= self.prevalence <= 1.0:
            raise ValueError("prevalence must lie in [0, 1]")
        if self.quality not in QUALITY_GRADES:
            raise ValueError(f"unknown quality grade {self.quality!r}")


def parse_survey_clusters(stream) -> list[SurveyCluster]:
    out = []
    for lineno, line in _lines(stream):
        parts = line.split("\t")
        if lineno == 1 and parts[0] == "x":
            continue
        if len(parts) != 4:
            raise RecordParseError([LineError(lineno, "expected 4 fields", line)])
        try:
            out.append(SurveyCluster(float(parts[0]), float(parts[1]), int(parts[2]), int(parts[3])))
        except ValueError as exc:
            raise RecordParseError([LineError(lineno, str(exc), line)]) from None
    return out


def format_survey_clusters(clusters: Sequence[SurveyCluster]) -> str:
    rows = ["x\ty\tn_tested\tn_positive\n"]
    rows += [f"{fmt_num(c.x)}\t{fmt_num(c.y)}\t{c.n_tested}\t{c.n_positive}\n" for c in clusters]
    return "".join(rows)


def project_equirectangular(lon, lat, lon0: float, lat0: float):
    """Planar km coordinates around (lon0, lat0); adequate at country scale."""
    r = 6371.0088
    x = np.radians(np.asarray(lon) - lon0) * r * math.cos(math.radians(lat0))
    y = np.radians(np.asarray(lat) - lat0) * r
    return x, y


def load_json(path):
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------- validation


@dataclass
class ValidationReport:
    n_records: int
    unknown_ids: list[int]
    n_unknown: int
    n_out_of_window: int
    invalid: np.ndarray = field(repr=False)

    @property
    def n_violations(self) -> int:
        return int(self.invalid.sum())

    def accepted(self, drop_invalid: bool = False) -> bool:
        return drop_invalid or self.n_violations == 0

    def filter(self, records):
        """Records that passed validation (the drop-invalid view)."""
        return records[~self.invalid]

    def to_json(self) -> dict:
        return {
            "n_records": self.n_records,
            "n_violations": self.n_violations,
            "n_unknown_id": self.n_unknown,
            "n_out_of_window": self.n_out_of_window,
            "unknown_ids": self.unknown_ids,
        }


def validate_dataset(records, hierarchy: SpatialHierarchy, window: Window = DEFAULT_WINDOW) -> ValidationReport:
    """Classify every record valid/invalid against ids and the window.

    Works on :class:`AntennaTable` (antenna ids, hour stamps) and
    :class:`TrajectoryTable` (sub-prefecture ids, timestamps).
    """
    if isinstance(records, AntennaTable):
        known = hierarchy.known_antennas(records.origin) & hierarchy.known_antennas(records.dest)
        ids = np.concatenate([records.origin[~hierarchy.known_antennas(records.origin)],
                              records.dest[~hierarchy.known_antennas(records.dest)]])
        times = records.hour
    elif isinstance(records, TrajectoryTable):
        known = hierarchy.known_subprefs(records.subpref)
        ids = records.subpref[~known]
        times = records.at
    else:
        raise TypeError(f"cannot validate {type(records).__name__}")
    in_window = window.contains(times)
    invalid = ~known | ~in_window
    return ValidationReport(
        n_records=len(records),
        unknown_ids=sorted(set(ids.tolist())),
        n_unknown=int((~known).sum()),
        n_out_of_window=int((~in_window).sum()),
        invalid=invalid,
    )
