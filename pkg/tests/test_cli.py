import hashlib
import json
import shutil
import subprocess
import sys
import time
from pathlib import Path

import pytest

from hivmob import cli
from hivmob import prevalence as pv

CHEAP = {"model": {"method": "ridge", "target_count": 3, "reselect": "once", "nested": True},
         "permutation_seeds": 2, "explain": {"m": 12, "iterations": 20, "k": 3, "joint_rows": False}}


def tree(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "m.json").write_text(json.dumps(CHEAP))
    t0 = time.perf_counter()
    assert run("gen", "--seed", 1, "--out", root / "data") == 0
    root.joinpath("gen_seconds").write_text(str(time.perf_counter() - t0))
    assert run("pipeline", "--manifest", root / "m.json", "--data", root / "data", "--out", root / "full") == 0
    return root


def test_gen_is_fast_and_deterministic(workdir, tmp_path):
    assert float((workdir / "gen_seconds").read_text()) < 10.0
    assert run("gen", "--seed", 1, "--out", tmp_path / "again") == 0
    assert tree(tmp_path / "again") == tree(workdir / "data")
    assert run("gen", "--seed", 2, "--out", tmp_path / "other") == 0
    assert tree(tmp_path / "other") != tree(workdir / "data")


def test_missing_out_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        run("gen", "--seed", 1)
    assert exc.value.code == 2
    proc = subprocess.run([sys.executable, "-m", "hivmob.cli", "gen"], capture_output=True, text=True)
    assert proc.returncode == 2 and "--out" in proc.stderr


def test_pipeline_is_deterministic(workdir, tmp_path):
    assert run("pipeline", "--manifest", workdir / "m.json", "--data", workdir / "data", "--out", tmp_path) == 0
    assert tree(tmp_path) == tree(workdir / "full")


def test_stagewise_equals_pipeline(workdir, tmp_path):
    for s in cli.STAGES:
        assert run("stage", s, "--manifest", workdir / "m.json", "--data", workdir / "data", "--out", tmp_path) == 0
    assert tree(tmp_path) == tree(workdir / "full")


def test_single_stage_outputs(workdir, tmp_path):
    args = ("--manifest", workdir / "m.json", "--data", workdir / "data", "--out", tmp_path)
    assert run("flows", *args) == 0
    assert run("stage", "ties", *args) == 0
    got = tree(tmp_path)
    assert {k.split("/")[0] for k in got} == {"flows", "ties", "manifest.json", "manifest.sha256"}
    full = tree(workdir / "full")
    assert all(full[k] == v for k, v in got.items())


def test_stage_without_upstream_names_file(workdir, tmp_path, capsys):
    assert run("stage", "ties", "--data", workdir / "data", "--out", tmp_path) == 1
    err = capsys.readouterr().err
    assert "stage ties" in err and "flows/comm_strength.tsv" in err


def test_outputs_record_seed_and_hash(workdir):
    full = workdir / "full"
    sha = (full / "manifest.sha256").read_text().strip()
    assert sha == hashlib.sha256(json.dumps(json.loads((full / "manifest.json").read_text()),
                                            sort_keys=True).encode()).hexdigest()
    for p in full.rglob("*.json"):
        if p.name not in ("manifest.json", "features.meta.json"):
            doc = json.loads(p.read_text())
            assert doc["manifest_sha256"] == sha and doc["seed"] == 1


def test_threads_do_not_change_results(workdir, tmp_path):
    out = tmp_path / "t"
    shutil.copytree(workdir / "full", out)
    assert run("stage", "eval", "--manifest", workdir / "m.json", "--data", workdir / "data", "--out", out,
               "--threads", 3) == 0
    assert tree(out) == tree(workdir / "full")


def test_quality_subsample(workdir, tmp_path):
    out = tmp_path / "q"
    shutil.copytree(workdir / "full", out)
    assert run("fit", "--manifest", workdir / "m.json", "--data", workdir / "data", "--out", out,
               "--quality", "good,moderate") == 0
    est = pv.estimates_from_tsv((out / "prev/departments.tsv").read_text())
    keep = [e.department for e in est if e.quality in ("good", "moderate")]
    doc = json.loads((out / "fit/models.json").read_text())
    assert doc["departments"] == keep
    full = json.loads((workdir / "full/fit/models.json").read_text())
    assert len(full["departments"]) == len(est)


def test_manifest_errors(workdir, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"colour": "blue"}))
    assert run("gen", "--manifest", bad, "--out", tmp_path / "x") == 2
    bad.write_text("[1, 2]")
    assert run("gen", "--manifest", bad, "--out", tmp_path / "x") == 2
    bad.write_text(json.dumps({"world": {"preset": "huge"}}))
    assert run("gen", "--manifest", bad, "--out", tmp_path / "x") == 2
    assert run("flows", "--out", tmp_path / "x") == 2
    assert run("flows", "--data", tmp_path / "nowhere", "--out", tmp_path / "x") == 2


def test_flags_override_manifest(tmp_path):
    man = tmp_path / "m.json"
    man.write_text(json.dumps({"seed": 5, "model": {"method": "svr"}}))
    args = cli.build_parser().parse_args(["fit", "--manifest", str(man), "--out", "o", "--seed", "9",
                                          "--method", "ridge"])
    m = cli.load_manifest(args)
    assert m["seed"] == 9 and m["model"]["method"] == "ridge" and m["model"]["target_count"] == 3


def test_validate(workdir, tmp_path):
    assert run("validate", "--data", workdir / "data", "--out", tmp_path / "v") == 0
    data = tmp_path / "d"
    shutil.copytree(workdir / "data", data)
    with open(data / "antenna.tsv", "a") as fh:
        fh.write("2011-12-05T10\t999999\t999998\t1\t10\n")
    assert run("validate", "--data", data, "--out", tmp_path / "v2") == 1
    assert not json.loads((tmp_path / "v2/validation.json").read_text())["accepted"]
    assert run("validate", "--data", data, "--out", tmp_path / "v3", "--drop-invalid") == 0
    assert run("flows", "--data", data, "--out", tmp_path / "f") == 1
    bad = tmp_path / "b"
    shutil.copytree(workdir / "data", bad)
    with open(bad / "antenna.tsv", "a") as fh:
        fh.write("2011-12-05 10\t1\t1\t1\t10\n")
    assert run("validate", "--data", bad, "--out", tmp_path / "v4") == 1
