import copy
import csv
import json
import subprocess
import sys

import pytest
from hypothesis import given, settings, strategies as st

from ldpkit import config as cfg
from ldpkit.cli import main, run

SWEEP = {
    "model": {"family": "schilder", "x0": [0.0]},
    "grid": {"T": 1.0, "n_steps": 50},
    "task": {"sweep": {"eps_list": [0.5, 0.2, 0.1], "event": {"kind": "halfspace", "z": 2.0},
                       "n_samples": 3000, "seed": 1}},
}

QUICK_VERIFY = {"seed": 2, "trials": 30, "probes": 2000, "n_samples": 2000, "floor_controls": 200,
                "gradient_instances": 20}

MODEL_BLOCKS = {
    "schilder": {"family": "schilder", "x0": [0.0]},
    "ou": {"family": "ou", "params": {"a": 1.0}, "x0": [0.0]},
    "fw": {"family": "fw", "params": {"drift": "-sin(x)", "dispersion": "1 + 0.5*cos(x)"}, "M": 1.5, "x0": [0.5]},
    "delay": {"family": "delay", "params": {"tau": 0.5}, "M": 2.0, "segment": {"constant": 1.0}},
    "cir": {"family": "cir", "params": {"kappa": 1.0, "mu": 1.0, "c": 1.0}, "x0": [1.0]},
}


def write(tmp_path, raw, name="exp.json"):
    p = tmp_path / name
    p.write_text(raw if isinstance(raw, str) else json.dumps(raw))
    return str(p)


def test_minimal_sweep_runs(tmp_path, capsys):
    code = run(write(tmp_path, SWEEP), out=str(tmp_path / "out"))
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "out" / "report.csv")))
    assert len(rows) == 3 and all(r["minus_eps_log"] != "unresolved" for r in rows)
    dat = (tmp_path / "out" / "sweep.dat").read_text().split("\n")
    assert dat[0].startswith("#")
    assert capsys.readouterr().out.startswith("sweep: ")


def test_two_task_blocks_rejected(tmp_path, capsys):
    raw = copy.deepcopy(SWEEP)
    raw["task"]["minimize"] = {"functional": {"kind": "point", "z": [1.0]}}
    assert run(write(tmp_path, raw)) == 1
    err = capsys.readouterr().err
    assert "duplicate task" in err and "minimize" in err


def test_repeated_task_key_rejected(tmp_path, capsys):
    text = json.dumps(SWEEP)[:-1] + ', "task": {"skeleton": {}}}'
    assert run(write(tmp_path, text)) == 1
    assert "duplicate key 'task'" in capsys.readouterr().err


@pytest.mark.parametrize("mutate, message", [
    (lambda r: r["task"]["sweep"].pop("seed"), "needs a seed"),
    (lambda r: r["model"].update(family="heston"), "unknown model family"),
    (lambda r: r["model"].update(x0=[0.0, 1.0]), "dimension"),
    (lambda r: r["task"]["sweep"].update(eps_list=[0.1, 0.5]), "decreasing"),
    (lambda r: r["task"]["sweep"].update(colour="red"), "unknown field"),
    (lambda r: r["grid"].pop("T"), "grid.T"),
])
def test_validation_errors(tmp_path, capsys, mutate, message):
    raw = copy.deepcopy(SWEEP)
    mutate(raw)
    assert run(write(tmp_path, raw)) == 1
    assert message in capsys.readouterr().err


def test_delay_off_grid_rejected(tmp_path, capsys):
    raw = {"model": {"family": "delay", "params": {"tau": 0.333}, "M": 2.0, "segment": {"constant": 1.0}},
           "grid": {"T": 1.0, "n_steps": 100}, "task": {"skeleton": {}}}
    assert run(write(tmp_path, raw)) == 1
    assert "multiple" in capsys.readouterr().err


def test_invalid_json(tmp_path):
    assert run(write(tmp_path, '{"model": ')) == 1


@pytest.mark.parametrize("family", sorted(MODEL_BLOCKS))
def test_verify_all_builtin_models(tmp_path, family):
    raw = {"model": MODEL_BLOCKS[family], "grid": {"T": 1.0, "n_steps": 50},
           "task": {"verify": dict(QUICK_VERIFY, x_bar=0.5 if family == "cir" else None)}}
    assert run(write(tmp_path, raw), out=str(tmp_path / "o"), quiet=True) == 0
    table = json.loads((tmp_path / "o" / "report.json").read_text())["checks"]
    names = {r["check"] for r in table}
    assert {"predictability", "coefficient_growth", "skeleton_growth", "positivity", "weak_l2_continuity",
            "adjoint_gradient"} <= names
    assert any(n.startswith("moment_bound") for n in names)
    status = {r["check"]: r["status"] for r in table}
    assert status["positivity"] == ("pass" if family == "cir" else "n/a")


def test_verify_flags_missing_drift_floor(tmp_path, capsys):
    raw = {"model": {"family": "cir", "params": {"kappa": 1.0, "mu": 0.0}, "x0": [1.0]},
           "grid": {"T": 1.0, "n_steps": 50}, "task": {"verify": dict(QUICK_VERIFY, x_bar=0.5)}}
    assert run(write(tmp_path, raw), out=str(tmp_path / "o")) == 2
    out = capsys.readouterr().out
    assert "positivity" in out and "b(0) > 0" in out


def test_minimize_and_skeleton_tasks(tmp_path):
    raw = {"model": MODEL_BLOCKS["ou"], "grid": {"T": 1.0, "n_steps": 100},
           "task": {"minimize": {"functional": {"kind": "point", "z": [1.0]}}}}
    assert run(write(tmp_path, raw), out=str(tmp_path / "m"), quiet=True) == 0
    rep = json.loads((tmp_path / "m" / "report.json").read_text())
    assert rep["value"] == pytest.approx(1.1565, rel=0.01)
    raw["task"] = {"skeleton": {"control": {"constant": 0.0}}}
    assert run(write(tmp_path, raw), out=str(tmp_path / "s"), quiet=True) == 0
    assert (tmp_path / "s" / "paths.csv").read_text().startswith("t,phi_1,f_1")


def test_simulate_task_outputs(tmp_path):
    raw = {"model": MODEL_BLOCKS["fw"], "grid": {"T": 1.0, "n_steps": 40},
           "task": {"simulate": {"eps": 0.1, "seed": 3, "n_paths": 5}},
           "output": {"directory": str(tmp_path / "sim"), "formats": ["json", "paths", "bin"]}}
    assert run(write(tmp_path, raw), quiet=True) == 0
    from ldpkit.simulate import load_paths
    vals, meta = load_paths((tmp_path / "sim" / "paths.bin").read_bytes())
    assert vals.shape == (5, 41, 1) and meta["seed"] == 3
    assert (tmp_path / "sim" / "paths.csv").read_text().startswith("t,X_1")


def test_byte_identical_reruns_and_threads(tmp_path):
    path = write(tmp_path, SWEEP)
    outs = []
    for name, threads in [("a", 1), ("b", 1), ("c", 8)]:
        assert run(path, out=str(tmp_path / name), threads=threads, quiet=True) == 0
        outs.append({f: (tmp_path / name / f).read_bytes() for f in ("report.csv", "report.json", "sweep.dat")})
    assert outs[0] == outs[1] == outs[2]


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "ldpkit.cli", "run", "--config", write(tmp_path, SWEEP),
                          "--out", str(tmp_path / "o"), "--quiet"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout == ""
    assert main(["run", "--config", str(tmp_path / "missing.json"), "--quiet"]) == 1


families = st.sampled_from(sorted(MODEL_BLOCKS))
tasks = st.sampled_from([
    {"simulate": {"eps": 0.2, "seed": 4}},
    {"skeleton": {"control": {"constant": 0.5}}},
    {"minimize": {"functional": {"kind": "halfspace", "z": 1.0}, "restarts": 2, "seed": 5}},
    {"sweep": {"eps_list": [0.5, 0.1], "functional": {"kind": "cost", "table": [[0.0, 1.0], [1.0, 0.0]]},
               "n_samples": 10, "seed": 0}},
    {"verify": {"seed": 9, "eps_list": [0.5]}},
])


@settings(max_examples=40, deadline=None)
@given(family=families, task=tasks, n_steps=st.sampled_from([20, 40, 100]),
       formats=st.lists(st.sampled_from(sorted(cfg.FORMATS)), min_size=1, unique=True))
def test_config_round_trip(family, task, n_steps, formats):
    raw = {"model": MODEL_BLOCKS[family], "grid": {"T": 1.0, "n_steps": n_steps}, "task": task,
           "output": {"directory": "x", "formats": formats}}
    parsed = cfg.from_dict(copy.deepcopy(raw))
    again = cfg.loads(parsed.dumps())
    assert again == parsed
    assert again.dumps() == parsed.dumps()
