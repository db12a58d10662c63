"""Command-line entry point.

Every command reads an optional JSON manifest (``--manifest``); command-line
flags override manifest keys, and manifest keys override built-in defaults.
Outputs land under ``--out`` with fixed relative names (see README).

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import explain as ex
from . import features as ft
from . import flows as fl
from . import prevalence as pv
from . import regress as rg
from . import synthgen as sg
from .model import (
    PopulationTable,
    SpatialHierarchy,
    Window,
    format_antenna_records,
    format_survey_clusters,
    format_trajectory_records,
    parse_antenna_records,
    parse_survey_clusters,
    parse_trajectory_records,
    validate_dataset,
)

STAGES = ("flows", "ties", "prev", "features", "fit", "eval", "explain")

DEFAULTS = {
    "seed": 1,
    "data": None,
    "world": {"preset": "small"},
    "plan": {},
    "window": {"first_day": "2011-12-01", "last_day": "2012-04-28"},
    "planted": {"features": [f"act.weekend.h{h:02d}" for h in range(1, 5)], "low": 0.01, "high": 0.06,
                "noise_sd": 0.0025},
    "survey": {"clusters_per_dept": None, "tested_per_cluster": 30},
    "drop_invalid": False,
    "kernel": {"n_min": 500, "grid_step": 5.0, "truncate": 3.0},
    "quality_thresholds": {"good": 200, "moderate": 50},
    "flows": {"long_stay_days": 3},
    "target": "estimated",
    "subsample": "all",
    "model": {"method": "svr", "target_count": 3, "reselect": "round", "nested": True},
    "permutation_seeds": 10,
    "explain": {"m": 12, "iterations": 100, "k": 3, "joint_rows": False},
}

# keys that never change results and are therefore left out of the hash
_UNHASHED = ("out", "threads")


class UsageError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage


# --------------------------------------------------------------------- manifest


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_manifest(args) -> dict:
    m = copy.deepcopy(DEFAULTS)
    if getattr(args, "manifest", None):
        try:
            with open(args.manifest) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read manifest: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError("manifest must be a JSON object")
        unknown = set(doc) - set(DEFAULTS) - set(_UNHASHED)
        if unknown:
            raise UsageError(f"unknown manifest keys: {sorted(unknown)}")
        m = _merge(m, doc)
    for flag, key in (("seed", "seed"), ("data", "data"), ("out", "out"), ("threads", "threads"),
                      ("preset", None), ("quality", None), ("departments", None), ("method", None),
                      ("target", "target"), ("drop_invalid", "drop_invalid"), ("perm_seeds", "permutation_seeds")):
        v = getattr(args, flag, None)
        if v is None or v is False:
            continue
        if flag == "preset":
            m["world"] = {"preset": v}
        elif flag == "quality":
            m["subsample"] = [q.strip() for q in v.split(",") if q.strip()]
        elif flag == "departments":
            if v != "all":
                raise UsageError("--departments accepts only 'all'")
            m["subsample"] = "all"
        elif flag == "method":
            m["model"]["method"] = v
        else:
            m[key] = v
    if m.get("data") is not None:
        m["data"] = str(m["data"])
    return m


def manifest_hash(m: dict) -> str:
    doc = {k: v for k, v in m.items() if k not in _UNHASHED}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _manifest_text(m: dict) -> str:
    doc = {k: v for k, v in m.items() if k not in _UNHASHED}
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def _window(m) -> Window:
    w = m["window"]
    try:
        return Window.from_dates(w["first_day"], w["last_day"])
    except (KeyError, ValueError) as exc:
        raise UsageError(f"bad window: {exc}") from None


def _model_spec(m) -> rg.ModelSpec:
    try:
        return rg.ModelSpec.from_json(m["model"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad model config: {exc}") from None


# ------------------------------------------------------------------------- output


class Output:
    def __init__(self, root, manifest):
        self.root = Path(root)
        self.manifest = manifest
        self.sha = manifest_hash(manifest)

    def path(self, rel) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def text(self, rel, text: str):
        with open(self.path(rel), "w", newline="\n") as fh:
            fh.write(text)

    def json(self, rel, doc: dict):
        doc = dict(doc)
        doc["manifest_sha256"] = self.sha
        doc["seed"] = self.manifest["seed"]
        self.text(rel, json.dumps(doc, sort_keys=True, indent=1) + "\n")

    def stamp(self):
        self.text("manifest.json", _manifest_text(self.manifest))
        self.text("manifest.sha256", self.sha + "\n")


# -------------------------------------------------------------------------- inputs


class Inputs:
    """Lazily loaded dataset under ``data`` plus upstream stage artifacts under ``out``."""

    def __init__(self, manifest, out: Output):
        if not manifest.get("data"):
            raise UsageError("no input data directory (use --data or the manifest 'data' key)")
        self.data = Path(manifest["data"])
        for name in ("hierarchy.json", "population.json", "antenna.tsv", "trajectories.tsv", "survey.tsv"):
            if not (self.data / name).is_file():
                raise UsageError(f"missing input file {self.data / name}")
        self.m = manifest
        self.out = out
        self._cache = {}

    def _get(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    @property
    def hierarchy(self) -> SpatialHierarchy:
        return self._get("h", lambda: SpatialHierarchy.from_json(json.loads((self.data / "hierarchy.json").read_text())))

    @property
    def populations(self) -> PopulationTable:
        return self._get("p", lambda: PopulationTable.from_json(json.loads((self.data / "population.json").read_text())))

    def _validated(self, records, what):
        rep = validate_dataset(records, self.hierarchy, _window(self.m))
        if not rep.accepted(self.m["drop_invalid"]):
            raise StageError("validate", f"{what}: {rep.n_violations} invalid records (use --drop-invalid)")
        return rep.filter(records) if rep.n_violations else records

    @property
    def antenna(self):
        def load():
            with open(self.data / "antenna.tsv") as fh:
                return self._validated(parse_antenna_records(fh), "antenna.tsv")
        return self._get("a", load)

    @property
    def trajectories(self):
        def load():
            with open(self.data / "trajectories.tsv") as fh:
                return self._validated(parse_trajectory_records(fh), "trajectories.tsv")
        return self._get("t", load)

    @property
    def survey(self):
        def load():
            with open(self.data / "survey.tsv") as fh:
                return parse_survey_clusters(fh)
        return self._get("s", load)

    def artifact(self, rel) -> str:
        p = self.out.root / rel
        if not p.is_file():
            raise FileNotFoundError(f"required upstream artifact {rel} not found under {self.out.root}")
        return p.read_text()


# ---------------------------------------------------------------------------- gen


def cmd_gen(m: dict, out: Output):
    seed = int(m["seed"])
    world_cfg = dict(m["world"])
    preset = world_cfg.pop("preset", "small")
    if preset not in ("small", "default"):
        raise UsageError(f"unknown world preset {preset!r}")
    try:
        base = sg.WorldSpec.small(seed) if preset == "small" else sg.WorldSpec(seed=seed)
        params = {**base.to_json(), **world_cfg, "seed": seed}
        if params["populations"] is not None:
            params["populations"] = tuple(params["populations"])
        spec = sg.WorldSpec(**params)
        world = sg.generate_world(spec)
        plan = sg.BehaviorPlan.default(world, seed, **m["plan"])
    except TypeError as exc:
        raise UsageError(f"bad world/plan config: {exc}") from None
    win = _window(m)
    cdr = sg.generate_cdr(world, plan, win, seed)
    traj, mob = sg.generate_trajectories(world, plan, win, seed)
    pl = m["planted"]
    truth = sg.plant_prevalence_range(world, plan, win, pl["features"], pl["low"], pl["high"], pl["noise_sd"], seed)
    survey = sg.generate_survey(world, truth, m["survey"]["clusters_per_dept"], m["survey"]["tested_per_cluster"], seed)

    out.text("hierarchy.json", json.dumps(world.hierarchy.to_json(), sort_keys=True, indent=1) + "\n")
    out.text("population.json", json.dumps(world.populations.to_json(), sort_keys=True, indent=1) + "\n")
    out.text("antenna.tsv", format_antenna_records(cdr))
    out.text("trajectories.tsv", format_trajectory_records(traj))
    out.text("survey.tsv", format_survey_clusters(survey))
    out.json("truth.json", {"prevalence": truth.to_json(), "mobility": mob.to_json()})
    out.json("generator.json", {"world": spec.to_json(), "plan": plan.to_json(), "window": win.to_json(),
                                "planted": truth.to_json()})
    out.stamp()


def cmd_validate(m: dict, out: Output):
    inp = Inputs(m, out)
    win = _window(m)
    with open(inp.data / "antenna.tsv") as fh:
        a = validate_dataset(parse_antenna_records(fh), inp.hierarchy, win)
    with open(inp.data / "trajectories.tsv") as fh:
        t = validate_dataset(parse_trajectory_records(fh), inp.hierarchy, win)
    ok = a.accepted(m["drop_invalid"]) and t.accepted(m["drop_invalid"])
    out.json("validation.json", {"antenna": a.to_json(), "trajectories": t.to_json(), "accepted": ok})
    out.stamp()
    return 0 if ok else 1


# -------------------------------------------------------------------------- stages


def stage_flows(inp: Inputs, out: Output):
    h = inp.hierarchy
    comm = fl.comm_flow(inp.antenna, h)
    night = fl.comm_flow(inp.antenna, h, fl.NIGHT)
    homes = fl.infer_home(inp.trajectories, h)
    runs = fl.away_runs(inp.trajectories, homes, h)
    k = inp.m["flows"]["long_stay_days"]
    mob = fl.mobility_from_runs(runs)
    mob_long = fl.mobility_from_runs(runs, k)
    home_pop = homes.population()
    out.text("flows/homes.tsv", homes.to_tsv())
    out.text("flows/runs.tsv", runs.to_tsv())
    for name, raw, pops in (("comm", comm, inp.populations), ("comm_night", night, inp.populations),
                            ("mobility", mob, home_pop), ("mobility_long", mob_long, home_pop)):
        out.text(f"flows/{name}.tsv", fl.matrix_to_tsv(raw))
        pops_safe = pops if not isinstance(pops, np.ndarray) else np.where(pops > 0, pops, np.inf)
        out.text(f"flows/{name}_strength.tsv", fl.matrix_to_tsv(fl.pair_strength(fl.normalize_flows(raw, pops_safe))))
    out.json("flows/summary.json", {
        "departments": list(h.dept_ids),
        "home_users": dict(zip(map(str, h.dept_ids), home_pop.tolist())),
        "home_ties": len(homes.ties),
        "long_stay_days": k,
        "n_runs": len(runs),
    })


def _label_estimates(inp: Inputs):
    field = _surface(inp)
    return pv.department_prevalence(field, inp.hierarchy, inp.populations, **inp.m["quality_thresholds"])


def _surface(inp: Inputs):
    cfg = pv.KernelConfig(**inp.m["kernel"])
    bw = pv.adaptive_bandwidth(inp.survey, cfg)
    return pv.estimate_surface(inp.survey, bw, cfg, inp.hierarchy.bbox())


def stage_ties(inp: Inputs, out: Output):
    h = inp.hierarchy
    est = _label_estimates(inp)
    summary = {}
    for name in ("comm", "comm_night", "mobility", "mobility_long"):
        m = fl.matrix_from_tsv(inp.artifact(f"flows/{name}_strength.tsv"), "communication")
        ties = fl.strong_ties(m)
        dot, geo = fl.export_tie_graph(ties, h, est, name=name)
        out.text(f"ties/{name}.dot", dot)
        out.text(f"ties/{name}.geojson", fl.dump_geojson(geo))
        summary[name] = {"strong_edges": len(ties.strong_pairs())}
    out.json("ties/summary.json", summary)


def stage_prev(inp: Inputs, out: Output):
    field = _surface(inp)
    est = pv.department_prevalence(field, inp.hierarchy, inp.populations, **inp.m["quality_thresholds"])
    out.text("prev/surface.tsv", field.to_tsv())
    out.text("prev/departments.tsv", pv.estimates_to_tsv(est))
    out.text("prev/choropleth.geojson", fl.dump_geojson(pv.choropleth(est, inp.hierarchy)))
    out.json("prev/summary.json", {
        "bandwidths": field.bandwidths.h.tolist(),
        "degenerate_bandwidth": field.bandwidths.degenerate,
        "undefined_cells": int((~field.defined).sum()),
        "quality_counts": {q: sum(e.quality == q for e in est) for q in ("good", "moderate", "uncertain")},
        "kernel": inp.m["kernel"],
    })


def stage_features(inp: Inputs, out: Output):
    h = inp.hierarchy
    traj = inp.trajectories
    homes = fl.HomeAssignment.from_tsv(inp.artifact("flows/homes.tsv"), traj.user_names, h.dept_ids)
    runs = fl.RunTable.from_tsv(inp.artifact("flows/runs.tsv"), traj.user_names, h.dept_ids)
    fm = ft.extract_features(inp.antenna, traj, h, inp.populations, homes, runs)
    out.text("features/features.tsv", fm.to_tsv())
    out.text("features/features.meta.json", fm.meta_json())


def _design(inp: Inputs):
    """Feature matrix, target (percent) and row labels after subsampling."""
    fm = ft.FeatureMatrix.from_files(inp.artifact("features/features.tsv"), inp.artifact("features/features.meta.json"))
    est = {e.department: e for e in pv.estimates_from_tsv(inp.artifact("prev/departments.tsv"))}
    if inp.m["target"] == "planted":
        truth = json.loads((inp.data / "truth.json").read_text())["prevalence"]["prevalence"]
        y_by = {int(k): v for k, v in truth.items()}
    elif inp.m["target"] == "estimated":
        y_by = {d: e.prevalence for d, e in est.items()}
    else:
        raise UsageError(f"unknown target {inp.m['target']!r}")
    sub = inp.m["subsample"]
    rows = [k for k, d in enumerate(fm.dept_ids) if sub == "all" or est[d].quality in sub]
    if len(rows) < 3:
        raise ValueError(f"only {len(rows)} departments pass the quality filter; need at least 3")
    fm = fm.select(columns=list(range(len(fm.names))), rows=rows)
    y = np.array([100.0 * y_by[d] for d in fm.dept_ids])
    return fm, y


def _fam_matrix(fm, fam):
    sub = fm.select(fam)
    return sub, sub.values


def stage_fit(inp: Inputs, out: Output):
    fm, y = _design(inp)
    spec = _model_spec(inp.m)
    doc = {}
    for fam in ft.FAMILIES:
        sub, X = _fam_matrix(fm, fam)
        model, res = rg.fit_pipeline(spec, X / rg.column_scale(X), y)
        doc[fam] = {
            "method": model.method,
            "hyperparameter": model.hyper,
            "intercept": model.intercept,
            "selected": [sub.names[j] for j in model.selected.tolist()],
            "coefficients": model.coef.tolist(),
            "elimination_order": [sub.names[j] for j in (res.eliminated if res else [])],
            "diagnostics": model.diagnostics,
        }
    out.json("fit/models.json", {"departments": list(fm.dept_ids), "target_percent": y.tolist(),
                                 "spec": spec.to_json(), "models": doc})


def _perm_seeds(m) -> list[int]:
    n = int(m["permutation_seeds"])
    return sg.rng_for(int(m["seed"]), 301).integers(0, 2**31, n).tolist()


def stage_eval(inp: Inputs, out: Output):
    fm, y = _design(inp)
    spec = _model_spec(inp.m)
    threads = int(inp.m.get("threads") or 1)
    seeds = _perm_seeds(inp.m)
    doc, real, rand = {}, [], []
    for fam in ft.FAMILIES:
        sub, X = _fam_matrix(fm, fam)
        r = rg.loo_evaluate(spec, X, y, threads)
        perms = rg.permutation_baseline(spec, X, y, seeds, threads) if seeds else []
        best = rg.best_random(perms) if perms else None
        real.append(r)
        if best is not None:
            rand.append(best)
        doc[fam] = {"real": r.to_json(),
                    "best_random": best.to_json() if best else None,
                    "random_rho": [p.rho for p in perms],
                    "selected_names": [[sub.names[j] for j in s] for s in r.selected]}
        out.text(f"eval/predictions_{fam}.tsv", rg.predictions_tsv(r, fm.dept_ids))
    stack = rg.stack_ensemble(real, y)
    doc["ensemble"] = {"real": stack.to_json(),
                       "random": rg.stack_ensemble(rand, y).to_json() if len(rand) == len(real) else None}
    out.text("eval/predictions_ensemble.tsv", rg.predictions_tsv(stack.report, fm.dept_ids))
    out.json("eval/report.json", {"departments": list(fm.dept_ids), "permutation_seeds": seeds,
                                  "subsample": inp.m["subsample"], "results": doc})


def stage_explain(inp: Inputs, out: Output):
    fm, y = _design(inp)
    spec = _model_spec(inp.m)
    e = inp.m["explain"]
    cfg = ex.ContributionConfig(e["m"], e["iterations"], int(inp.m["seed"]), e["joint_rows"])
    rep = ex.explain_families(fm, y, spec, cfg, e["k"])
    out.text("explain/curves.tsv", rep.to_tsv())
    out.json("explain/summary.json", rep.summary())


STAGE_FUNCS = {"flows": stage_flows, "ties": stage_ties, "prev": stage_prev, "features": stage_features,
               "fit": stage_fit, "eval": stage_eval, "explain": stage_explain}


def run_stage(name: str, inp: Inputs, out: Output):
    try:
        STAGE_FUNCS[name](inp, out)
    except (UsageError, StageError):
        raise
    except Exception as exc:  # noqa: BLE001 - reported with the stage name
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc


def cmd_pipeline(m: dict, out: Output):
    inp = Inputs(m, out)
    for s in STAGES:
        run_stage(s, inp, out)
    out.stamp()


def cmd_stage(name: str, m: dict, out: Output):
    inp = Inputs(m, out)
    run_stage(name, inp, out)
    out.stamp()


# ---------------------------------------------------------------------------- argv


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hivmob", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_data=True):
        sp.add_argument("--manifest", help="JSON manifest; flags override its keys")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, help="worker cap (results do not depend on it)")
        if needs_data:
            sp.add_argument("--data", help="directory produced by 'gen'")
            sp.add_argument("--drop-invalid", action="store_true", default=None,
                            help="drop invalid records instead of failing")
            sp.add_argument("--quality", help="comma-separated grades kept for regression, e.g. good,moderate")
            sp.add_argument("--departments", choices=["all"], help="use every department for regression")
            sp.add_argument("--method", choices=["svr", "ridge"])
            sp.add_argument("--target", choices=["estimated", "planted"])
            sp.add_argument("--perm-seeds", type=int, help="number of permutation-control seeds")

    g = sub.add_parser("gen", help="write a synthetic dataset")
    common(g, needs_data=False)
    g.add_argument("--preset", choices=["small", "default"])
    common(sub.add_parser("validate", help="check ids and window of the input records"))
    for s in STAGES:
        common(sub.add_parser(s, help=f"run the {s} stage"))
    common(sub.add_parser("pipeline", help="run every stage in order"))
    st = sub.add_parser("stage", help="run one named stage against persisted upstream outputs")
    st.add_argument("name", choices=STAGES)
    common(st)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        m = load_manifest(args)
        out = Output(args.out, m)
        if args.command == "gen":
            cmd_gen(m, out)
        elif args.command == "validate":
            return cmd_validate(m, out)
        elif args.command == "pipeline":
            cmd_pipeline(m, out)
        else:
            cmd_stage(args.name if args.command == "stage" else args.command, m, out)
    except (UsageError, sg.ConfigError) as exc:
        print(f"hivmob: error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"hivmob: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"hivmob: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
