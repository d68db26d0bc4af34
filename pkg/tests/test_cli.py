"""
CLI smoke tests: exit codes and the files a quick run leaves behind.
"""

import pandas as pd
import pytest
import yaml

from src.cli import EXIT_CONFIG, EXIT_UNKNOWN_EXPERIMENT, build_parser, main
from src.config.load import load_config
from src.utils.io import read_jsonl


def test_no_command_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_missing_config_exit_code(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["bounds", "--config", str(tmp_path / "nope.yaml")])
    assert exc.value.code == EXIT_CONFIG


def test_unknown_experiment_exit_code(tmp_path):
    config = load_config("src/config/default.yaml")
    config["experiment"] = "nonsense"
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(config))

    with pytest.raises(SystemExit) as exc:
        main(["run", "--config", str(path)])
    assert exc.value.code == EXIT_UNKNOWN_EXPERIMENT


def test_bad_override_is_config_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["bounds", "--percentile", "20", "--output-dir", str(tmp_path)])
    assert exc.value.code == EXIT_CONFIG


def test_bounds_quick_run_writes_outputs(tmp_path, capsys):
    main(["bounds", "--grid", "quick", "--output-dir", str(tmp_path)])

    table = pd.read_csv(tmp_path / "bounds_vs_mc.csv")
    assert len(table) == 12
    assert (table["coupling_violations"] == 0).all()

    manifest = yaml.safe_load((tmp_path / "manifest.yaml").read_text())
    assert manifest["metadata"]["n_samples"] == 10_000
    assert manifest["config"]["experiment"] == "bounds"
    assert "bounds complete" in capsys.readouterr().out


def test_simulate_then_detect(tmp_path):
    out = tmp_path / "sim"
    main(["simulate", "--runs", "1", "--seed", "3", "--output-dir", str(out)])
    run_csv = out / "runs" / "run_0000.csv"
    assert run_csv.exists()

    config = load_config("src/config/default.yaml")
    config["hmm"]["n_restarts"] = 2
    config["hmm"]["max_iters"] = 30
    cfg_path = tmp_path / "fast.yaml"
    cfg_path.write_text(yaml.safe_dump(config))

    det = tmp_path / "det"
    main(["detect", "--config", str(cfg_path), "--input", str(run_csv), "--trace", "--output-dir", str(det)])

    events = read_jsonl(det / "events.jsonl")
    assert all(e["tau"] >= 500 for e in events)
    channels = read_jsonl(det / "channels.jsonl")
    assert channels[0]["t"] == 500
    assert set(channels[0]) >= {"ent", "dep", "spr", "ofi", "composite", "first_channel"}


def test_parser_knows_every_command():
    parser = build_parser()
    for name in ("simulate", "detect", "benchmark", "sweep", "grid", "ablation", "bounds", "replay", "run"):
        args = parser.parse_args([name])
        assert args.command == name
