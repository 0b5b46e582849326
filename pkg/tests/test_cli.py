import json

import pytest

from swle import cli


def run_cli(*args):
    return cli.main(list(args))


def test_run_writes_csv_and_summary(tmp_path, capsys):
    code = run_cli("run", "--config", "case1", "--views", "120", "--seed", "3", "--out", str(tmp_path))
    assert code == 0
    csv_path = tmp_path / "case1-swle-s3.csv"
    summary = json.loads((tmp_path / "case1-swle-s3.summary.json").read_text())
    assert csv_path.read_text().startswith("view,leader,")
    for key in ("throughput_avg", "latency_avg", "faulty_leader_pct", "timeout_pct", "gamma_report", "v_c"):
        assert key in summary
    assert "faulty leaders" in capsys.readouterr().out


def test_same_seed_gives_identical_files(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run_cli("run", "--config", "fault_free", "--views", "60", "--out", str(out), "--quiet") == 0
    for f in a.iterdir():
        assert f.read_bytes() == (b / f.name).read_bytes()


def test_malformed_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n": 4, "views": "many"}))
    assert run_cli("run", "--config", str(bad)) == 2
    assert "views" in capsys.readouterr().err


def test_unknown_key_is_rejected(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n": 4, "colour": "red"}))
    assert run_cli("run", "--config", str(bad)) == 2


def test_invalid_json_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{n: 4")
    assert run_cli("run", "--config", str(bad)) == 2


def test_too_many_faults_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    faults = [{"replica": i, "kind": "crash"} for i in range(2)]
    bad.write_text(json.dumps({"n": 4, "faults": faults}))
    assert run_cli("run", "--config", str(bad)) == 2


def test_unknown_preset_and_bad_flags_exit_2():
    assert run_cli("run", "--config", "nope") == 2
    assert run_cli("run", "--config", "case1", "--views", "0") == 2
    assert run_cli("bogus") == 2


def test_compare_reports_ratio(tmp_path, capsys):
    code = run_cli("compare", "--config", "case1", "--views", "96", "--seeds", "2", "--out", str(tmp_path))
    assert code == 0
    out = capsys.readouterr().out
    assert "mean throughput ratio" in out
    table = json.loads((tmp_path / "case1-compare.json").read_text())
    assert len(table["runs"]) == 2
    assert table["swle_faulty_leader_pct_mean"] < table["roundrobin_faulty_leader_pct_mean"]


def test_invariant_violation_exits_1(monkeypatch, capsys):
    from swle.sim import InvariantViolation

    def explode(cfg, seed):
        raise InvariantViolation("view 3: conflicting finalizations", ["event a", "event b"])

    monkeypatch.setattr(cli, "simulate", explode)
    assert run_cli("run", "--config", "fault_free") == 1
    err = capsys.readouterr().err
    assert "conflicting finalizations" in err and "event b" in err


def test_log_level_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("SWLE_LOG", "debug")
    assert run_cli("run", "--config", "fault_free", "--views", "20", "--out", str(tmp_path), "--quiet") == 0
    monkeypatch.setenv("SWLE_LOG", "not-a-level")
    assert run_cli("run", "--config", "fault_free", "--views", "20", "--out", str(tmp_path), "--quiet") == 0


@pytest.mark.parametrize("name", cli.PRESETS)
def test_presets_load(name):
    cfg = cli.load_config(name)
    assert cfg.n == 16 and cfg.views == 2000 and cfg.timeout_ms == 1500 and cfg.batch_size == 400
