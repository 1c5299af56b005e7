import csv
import json
from pathlib import Path

import pytest

from selective_fusion.cli import CONFIG_DIR_ENV, main
from selective_fusion.gating import LearnedGate, init_gate, GateHyperParams
from selective_fusion.engine import stream_rng
from selective_fusion.scenario import read_log_header

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="module")
def log100(tmp_path_factory):
    p = tmp_path_factory.mktemp("log") / "log.jsonl"
    assert main(["simulate", "generator.json", str(p), "--seed", "1", "--n-scenes", "100"]) == 0
    return p


def test_simulate_counts_and_determinism(tmp_path, log100):
    lines = log100.read_text().splitlines()
    assert len(lines) == 1 + 700
    again = tmp_path / "again.jsonl"
    main(["simulate", "generator.json", str(again), "--seed", "1", "--n-scenes", "100"])
    assert again.read_bytes() == log100.read_bytes()
    other = tmp_path / "other.jsonl"
    main(["simulate", "generator.json", str(other), "--seed", "2", "--n-scenes", "100"])
    assert other.read_bytes() != log100.read_bytes()


def test_simulate_zero_scenes(tmp_path):
    p = tmp_path / "empty.jsonl"
    assert main(["simulate", "generator.json", str(p), "--seed", "0", "--n-scenes", "0"]) == 0
    assert len(p.read_text().splitlines()) == 1
    assert read_log_header(p)["scenes"] == 0


@pytest.mark.parametrize("algorithm", ["nms", "soft_nms", "wbf"])
def test_fuse_fixture_log(tmp_path, algorithm):
    out = tmp_path / "fused.csv"
    assert main(["fuse", str(FIXTURES / "two_scene_log.jsonl"), str(out), "--algorithm", algorithm]) == 0
    rows = list(csv.DictReader(out.open()))
    assert rows and {r["scene"] for r in rows} == {"0", "1"}
    assert all(0.0 <= float(r["score"]) <= 1.0 for r in rows)


def test_fuse_single_branch_json(tmp_path):
    out = tmp_path / "fused.json"
    assert main(["fuse", str(FIXTURES / "two_scene_log.jsonl"), str(out), "--branches", "4", "--format", "json"]) == 0
    dets = json.loads(out.read_text())
    assert {d["branch"] for d in dets} == {4}


def test_train_gate_zero_epochs_is_init(tmp_path, log100):
    out = tmp_path / "gate.json"
    assert main(["train-gate", str(log100), str(out), "--seed", "3", "--epochs", "0", "--holdout", "0"]) == 0
    gate = LearnedGate.load(out)
    rng = stream_rng(3)
    rng.permutation(100)
    expected = init_gate(32, range(7), GateHyperParams(epochs=0), rng)
    assert gate.to_dict() == expected.to_dict()
    assert len((tmp_path / "gate.curve.csv").read_text().splitlines()) == 2


def test_train_gate_is_reproducible(tmp_path, log100):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for p in (a, b):
        assert main(["train-gate", str(log100), str(p), "--seed", "3", "--epochs", "3", "--attention"]) == 0
    assert a.read_bytes() == b.read_bytes()
    curve = list(csv.DictReader((tmp_path / "a.curve.csv").open()))
    assert len(curve) == 4 and curve[-1]["holdout_mae"]


def _tiny_suite(tmp_path, configs=None):
    suite = {
        "scene_source": {"generator": {}},
        "configurations": configs or [{"id": "knowledge-top2", "gate": "knowledge", "k": 2}],
        "master_seed": 0,
        "n_seeds": 1,
        "n_scenes": 20,
        "gate_training": {"n_scenes": 30, "hyperparams": {"epochs": 2}},
    }
    p = tmp_path / "suite.json"
    p.write_text(json.dumps(suite))
    return p


def test_evaluate_one_config_twice(tmp_path):
    suite = _tiny_suite(tmp_path)
    outs = []
    for name in ("a", "b"):
        assert main(["evaluate", str(suite), str(tmp_path / name)]) == 0
        outs.append((tmp_path / name / "comparison.csv").read_bytes())
    assert outs[0] == outs[1]
    assert len(outs[0].decode().splitlines()) == 2


def test_evaluate_traces_and_selection_stats(tmp_path):
    suite = _tiny_suite(tmp_path, [{"id": "o1", "gate": "optimal", "k": 1}, {"id": "k7", "gate": "knowledge", "k": 7}])
    out = tmp_path / "run"
    assert main(["evaluate", str(suite), str(out), "--traces", "--format", "json", "--n-scenes", "10"]) == 0
    assert (out / "reports.json").exists() and (out / "comparison.json").exists()
    traces = (out / "traces.jsonl").read_text().splitlines()
    assert len(traces) == 2
    stats_path = tmp_path / "stats.json"
    assert main(["selection-stats", str(out / "traces.jsonl"), str(stats_path), "--format", "json"]) == 0
    stats = {(s["gate"], s["k"]): s["rates"] for s in json.loads(stats_path.read_text())}
    assert sum(stats[("optimal", 1)].values()) == pytest.approx(1.0)
    assert set(stats[("knowledge", 7)].values()) == {1.0}
    csv_path = tmp_path / "stats.csv"
    assert main(["selection-stats", str(out / "traces.jsonl"), str(csv_path), "--contexts", "snow,fog,night"]) == 0


def test_evaluate_replays_log(tmp_path):
    suite = _tiny_suite(tmp_path, [{"id": "radar", "branches": [0]}])
    out = tmp_path / "run"
    assert main(["evaluate", str(suite), str(out), "--log", str(FIXTURES / "two_scene_log.jsonl")]) == 0
    rows = list(csv.DictReader((out / "comparison.csv").open()))
    assert [r["config"] for r in rows] == ["radar"]


def test_wls_demo(tmp_path):
    out = tmp_path / "wls.csv"
    assert main(["wls-demo", str(out), "--trials", "2000"]) == 0
    rows = {r["subset_id"]: float(r["mean_squared_error"]) for r in csv.DictReader(out.open())}
    # The misspecified third sensor makes the full set worse than the honest pair.
    assert set(rows) == {"all", "s1+s2"}
    assert rows["all"] > rows["s1+s2"]


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["simulate", str(bad), str(tmp_path / "x.jsonl"), "--seed", "0"]) == 1
    assert main(["simulate", "missing.json", str(tmp_path / "x.jsonl"), "--seed", "0"]) == 1
    assert main(["fuse", str(tmp_path / "nope.jsonl"), str(tmp_path / "o.csv")]) == 1
    assert main(["fuse", str(FIXTURES / "two_scene_log.jsonl"), str(tmp_path / "o.csv"), "--branches", "9"]) == 2
    bad.write_text(json.dumps({"bogus": 1}))
    assert main(["simulate", str(bad), str(tmp_path / "x.jsonl"), "--seed", "0"]) == 1
    assert "error:" in capsys.readouterr().err


def test_config_dir_env(tmp_path, monkeypatch):
    (tmp_path / "tiny.json").write_text(json.dumps({"n_scenes": 2}))
    monkeypatch.setenv(CONFIG_DIR_ENV, str(tmp_path))
    out = tmp_path / "log.jsonl"
    assert main(["simulate", "tiny.json", str(out), "--seed", "0"]) == 0
    assert read_log_header(out)["scenes"] == 2
    assert main(["simulate", "generator.json", str(out), "--seed", "0"]) == 1
