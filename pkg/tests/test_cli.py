import json
from pathlib import Path

import jsonschema
import pytest

from edgetune import cli

SCHEMAS = Path(__file__).resolve().parent.parent / "docs" / "schemas"


def schema(name):
    return json.loads((SCHEMAS / f"{name}.schema.json").read_text())


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def test_schemas_are_valid():
    for path in SCHEMAS.glob("*.schema.json"):
        jsonschema.Draft202012Validator.check_schema(json.loads(path.read_text()))


def test_plan_simulate_report_flow(workdir):
    assert run("profile-synth", "--model", "toy", "--devices", 3, "--heterogeneity", 0.2,
               "--seq-len", 8, "--out", "p.json") == 0
    assert run("plan", "--model", "toy", "--profiles", "p.json", "-B", 4, "-M", 3,
               "--oracle", "--out", "plan.json") == 0
    assert run("simulate", "--plan", "plan.json", "--profiles", "p.json",
               "--trace", "t.json", "--svg", "t.svg", "--out", "s.json") == 0
    assert run("tune-toy", "--samples", 8, "--epochs", 2, "--cache", "--report", "tune.json") == 0
    assert run("report", "--plan", "plan.json", "--profiles", "p.json", "--trace", "t.json",
               "--tune-report", "tune.json", "--out", "r.json", "--svg", "r.svg") == 0
    for name, path in [("profiles", "p.json"), ("plan", "plan.json"), ("trace", "t.json"),
                       ("simulate-summary", "s.json"), ("tune-report", "tune.json"),
                       ("report", "r.json"), ("manifest", "plan.json.manifest.json"),
                       ("manifest", "r.json.manifest.json")]:
        jsonschema.validate(json.loads(Path(path).read_text()), schema(name))
    summary = json.loads(Path("s.json").read_text())
    assert summary["makespan_ms"] > 0 and summary["analytic_ms"] > 0
    assert Path("r.svg").read_text().startswith("<svg")


def test_cached_simulation_with_real_cache(workdir):
    assert run("tune-toy", "--samples", 8, "--seq-len", 8, "--cache", "--cache-dir", "c",
               "--keep-cache", "--report", "tune.json") == 0
    assert run("plan", "--model", "toy", "--synth", "n=2,het=0,seed=0", "--seq-len", 8,
               "--out", "plan.json") == 0
    assert run("simulate", "--plan", "plan.json", "--synth", "n=2,het=0,seed=0", "--seq-len", 8,
               "--cached", "--samples", 8, "--cache-dir", "c", "--out", "s.json") == 0
    summary = json.loads(Path("s.json").read_text())
    jsonschema.validate(summary, schema("simulate-summary"))
    assert 0 < summary["cached_epoch_ms"]
    assert run("report", "--model", "toy", "--cache-dir", "c", "--out", "r.json") == 0
    assert json.loads(Path("r.json").read_text())["cache"]["integrity"]["ok"]


def test_missing_cache_is_named(workdir, capsys):
    run("plan", "--model", "toy", "--synth", "n=2", "--seq-len", 8, "--out", "plan.json")
    code = run("simulate", "--plan", "plan.json", "--synth", "n=2", "--seq-len", 8,
               "--cached", "--cache-dir", "nowhere", "--out", "s.json")
    assert code == cli.EXIT_INVALID
    assert "nowhere" in capsys.readouterr().err


def test_exit_codes(workdir, capsys):
    assert run("plan", "--model", "t5-large", "--synth", "n=2", "--memory-budget-gib", 0.25,
               "--out", "x.json") == cli.EXIT_INFEASIBLE
    assert "no feasible plan" in capsys.readouterr().err
    assert run("plan", "--model", "t5-large", "--synth", "n=2", "--oracle",
               "--out", "x.json") == cli.EXIT_INVALID
    assert run("plan", "--model", "t5-large", "--out", "x.json") == cli.EXIT_INVALID
    assert run("simulate", "--plan", "missing.json", "--synth", "n=2") == cli.EXIT_INVALID
    assert run("plan", "--bogus") == cli.EXIT_INVALID
    Path("bad.json").write_text("{")
    assert run("plan", "--model", "toy", "--profiles", "bad.json", "--out", "x.json") == 2
    assert not Path("x.json").exists()


def test_unwritable_output_is_io_error(workdir):
    Path("blocker").write_text("")
    assert run("profile-synth", "--model", "toy", "--devices", 1,
               "--out", "blocker/p.json") == cli.EXIT_IO


def test_replay_detects_tampering(workdir, capsys):
    run("profile-synth", "--model", "toy", "--devices", 2, "--out", "p.json")
    manifest = json.loads(Path("p.json.manifest.json").read_text())
    manifest["outputs"]["--out"]["sha256"] = "0" * 64
    Path("m.json").write_text(json.dumps(manifest))
    assert run("replay", "m.json") == cli.EXIT_MISMATCH


def test_replay_detects_changed_input(workdir):
    run("profile-synth", "--model", "toy", "--devices", 2, "--seq-len", 8, "--out", "p.json")
    run("plan", "--model", "toy", "--profiles", "p.json", "--out", "plan.json")
    run("profile-synth", "--model", "toy", "--devices", 2, "--seq-len", 8, "--seed", 1,
        "--heterogeneity", 0.5, "--out", "p.json")
    assert run("replay", "plan.json.manifest.json") == cli.EXIT_INVALID


def test_manifest_records_defaults(workdir):
    run("tune-toy", "--samples", 4, "--epochs", 1, "--report", "t.json")
    m = json.loads(Path("t.json.manifest.json").read_text())
    assert m["parameters"]["lr"] == 0.2 and m["seed"] == 0
    assert "time" not in json.dumps(m).lower()
