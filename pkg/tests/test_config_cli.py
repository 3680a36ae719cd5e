import json

import pytest

from plmnet.cli import EXIT_OK, EXIT_OFF_TRACK, EXIT_USAGE, main
from plmnet.config import ConfigError, RunConfig, load_config, parse_schedule

TINY = {"episodes": 4, "episode_duration": 6.0, "bm_epochs": 1, "tapm_epochs": 1, "duration": 6.0,
        "schedules": ["const:0.2"], "resample_points": 50, "pcm_offsets": 10}


def test_defaults_validate():
    cfg = RunConfig()
    assert cfg.bm_epochs <= 50 and cfg.batch == 32 and cfg.lr == 0.001
    assert len(cfg.latency_schedules()) == 5


def test_precedence(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 1, "bins": 11, "lr": 0.01}))
    env = {"PLMNET_SEED": "2", "PLMNET_BINS": "15"}
    cfg = load_config(path, environ=env, cli={"seed": 3})
    assert (cfg.seed, cfg.bins, cfg.lr) == (3, 15, 0.01)


def test_env_coercion():
    cfg = load_config(environ={"PLMNET_REFIT_OUTPUT": "false", "PLMNET_SCHEDULES": "const:0.1,tv:0:0.2",
                               "PLMNET_DURATION": "none"})
    assert cfg.refit_output is False
    assert cfg.schedules == ("const:0.1", "tv:0:0.2")
    assert cfg.duration is None


@pytest.mark.parametrize("override", [{"bins": 0}, {"dt": -1.0}, {"delta_grid": [0.15, 0.12]},
                                      {"delta_grid": [0.12]}, {"val_fraction": 1.0}, {"schedules": ["fast"]},
                                      {"nope": 1}, {"bins": 2.5}, {"track": "missing_track"},
                                      {"duration": 1.01}])
def test_invalid_configs(tmp_path, override):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(override))
    with pytest.raises(ConfigError):
        load_config(path, environ={})


def test_unknown_env_key():
    with pytest.raises(ConfigError):
        load_config(environ={"PLMNET_COLOUR": "red"})


@pytest.mark.parametrize("text, label", [("none", "none"), ("const:0.25", "const_0.25"),
                                         ("tv:0.0:0.35", "tv_0.00_0.35")])
def test_parse_schedule(text, label):
    assert parse_schedule(text).label() == label


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["evaluate", "--delta", "abc"])
    assert exc.value.code == EXIT_USAGE


def test_bad_config_file_exit_code(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    assert main(["collect", "--config", str(path), "--out", str(tmp_path / "run")]) == EXIT_USAGE


def test_stage_order_enforced(tmp_path):
    assert main(["evaluate", "--out", str(tmp_path / "empty")]) == EXIT_USAGE


def test_pipeline_through_cli(tmp_path):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    out = tmp_path / "run"
    args = ["--config", str(cfg), "--out", str(out), "--seed", "3"]
    assert main(["collect", *args]) == EXIT_OK
    assert main(["train", *args]) == EXIT_OK
    code = main(["evaluate", *args, "--delta", "0.1", "--schedule", "tv:0.0:0.3"])
    assert code in (EXIT_OK, EXIT_OFF_TRACK)
    assert (out / "eval" / "const_0.10" / "report.json").exists()
    assert (out / "eval" / "tv_0.00_0.30" / "plm.csv").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert {"collect", "train", "evaluate", "config_sha256"} <= set(manifest)
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["seed"] == 3 and echoed["schedules"] == ["const:0.1", "tv:0.0:0.3"]
    assert not list(out.rglob("*.tmp"))
