"""Command-line behavior: argument parsing, files written, exit codes."""

import json

import pytest

from aflsim.cli import main, parse_seed_list, parse_strategy_list

TINY = {
    "dataset": {"classes": 3, "dim": 6, "n_per_class": 40, "test_fraction": 0.25},
    "clients": 4,
    "buffer_size": 2,
    "local_steps": 2,
    "batch_size": 8,
    "max_rounds": 3,
}


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def test_parse_seed_list_forms():
    assert parse_seed_list("1..5") == [1, 2, 3, 4, 5]
    assert parse_seed_list("7..7") == [7]
    assert parse_seed_list("3,1,2") == [3, 1, 2]
    for bad in ("5..1", "a..b", "1,1", "", "x,y"):
        with pytest.raises(ValueError):
            parse_seed_list(bad)


def test_parse_strategy_list_forms():
    assert parse_strategy_list("fedbuff,contribution_aware") == ["fedbuff", "contribution_aware"]
    with pytest.raises(ValueError, match="fedbufff"):
        parse_strategy_list("fedbufff")
    with pytest.raises(ValueError):
        parse_strategy_list("fedbuff,fedbuff")


def test_run_writes_metrics_and_manifest(tmp_path, config_path, capsys):
    out = tmp_path / "results"
    code = main(["run", str(config_path), "--out", str(out)])
    assert code == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("round,sim_time,strategy,seed")
    assert len(lines) == 1 + 4  # baseline + 3 rounds
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["rounds_completed"] == 3
    assert "final accuracy" in capsys.readouterr().out


def test_run_quiet_silences_stdout(tmp_path, config_path, capsys):
    code = main(["run", str(config_path), "--out", str(tmp_path / "o"), "--quiet"])
    assert code == 0
    assert capsys.readouterr().out == ""


def test_run_max_rounds_override(tmp_path, config_path):
    out = tmp_path / "o"
    assert main(["run", str(config_path), "--out", str(out), "--max-rounds", "1", "--quiet"]) == 0
    assert len((out / "metrics.csv").read_text().splitlines()) == 1 + 2


def test_missing_config_exits_2(tmp_path, capsys):
    code = main(["run", str(tmp_path / "nope.json")])
    assert code == 2
    assert "error" in capsys.readouterr().err


def test_invalid_json_exits_2_with_position(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"clients": }')
    assert main(["run", str(path)]) == 2
    assert "line 1" in capsys.readouterr().err


def test_env_var_sets_default_out(tmp_path, config_path, monkeypatch):
    monkeypatch.setenv("AFLSIM_OUT", str(tmp_path / "from_env"))
    assert main(["run", str(config_path), "--quiet"]) == 0
    assert (tmp_path / "from_env" / "metrics.csv").exists()


def test_sweep_end_to_end(tmp_path, config_path, capsys):
    out = tmp_path / "sweep"
    code = main([
        "sweep", str(config_path), "--strategies", "fedbuff,staleness_decay",
        "--seeds", "1..2", "--out", str(out),
    ])
    assert code == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert len(lines) == 1 + 4 * 4  # header + 4 runs x (baseline + 3 rounds)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["strategies"] == ["fedbuff", "staleness_decay"]
    assert manifest["trial_seeds"] == [1, 2]
    assert "rounds_to_target" in manifest
    assert "median final accuracy" in capsys.readouterr().out


def test_sweep_failing_run_exits_1_named(tmp_path, config_path, capsys):
    out = tmp_path / "sweep"
    code = main([
        "sweep", str(config_path), "--strategies", "fedbuff,fedavg_sync",
        "--seeds", "1", "--out", str(out), "--quiet",
    ])
    assert code == 1
    err = capsys.readouterr().err
    assert "strategy=fedavg_sync seed=1" in err
    # the completed fedbuff run was flushed before the failure
    text = (out / "metrics.csv").read_text()
    assert "fedbuff" in text
    assert not (out / "manifest.json").exists()


def test_sweep_bad_strategy_exits_2(tmp_path, config_path, capsys):
    code = main([
        "sweep", str(config_path), "--strategies", "fedbest", "--seeds", "1",
        "--out", str(tmp_path / "s"),
    ])
    assert code == 2
    assert "fedbest" in capsys.readouterr().err
