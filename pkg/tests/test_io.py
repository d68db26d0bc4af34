"""Output writers: CSV tables, JSONL logs and the run manifest."""

import numpy as np
import pandas as pd
import yaml

from src.utils.io import (
    MANIFEST_NAME,
    config_hash,
    read_jsonl,
    write_jsonl,
    write_manifest,
    write_table,
)


def test_empty_table_keeps_header(tmp_path):
    path = write_table([], tmp_path / "empty.csv", columns=["detector", "precision"])
    assert path.read_text().strip() == "detector,precision"


def test_none_and_float_formatting(tmp_path):
    df = pd.DataFrame({"detector": ["a", "b"], "precision": [0.123456789, None], "n": [3, 4]})
    path = write_table(df, tmp_path / "t.csv")

    lines = path.read_text().strip().splitlines()
    assert lines[1] == "a,0.1235,3"
    assert lines[2] == "b,,4", "None should be an empty cell"


def test_jsonl_keeps_full_precision(tmp_path):
    records = [{"tau": np.int64(7), "score": 0.1 + 0.2, "bad": float("nan"), "ok": np.bool_(True)}]
    path = write_jsonl(records, tmp_path / "events.jsonl")

    [back] = read_jsonl(path)
    assert back == {"tau": 7, "score": 0.1 + 0.2, "bad": None, "ok": True}


def test_config_hash_ignores_key_order():
    a = {"seed": 1, "trigger": {"percentile": 85.0, "suppression": 50}}
    b = {"trigger": {"suppression": 50, "percentile": 85.0}, "seed": 1}
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash({**a, "seed": 2})


def test_manifest_contents(tmp_path):
    config = {"seed": 5, "n_runs": 2}
    path = write_manifest(tmp_path / "out", config, seed=5, started=0.0, extra={"cusum_h_mean": np.float64(1.5)})

    assert path.name == MANIFEST_NAME
    manifest = yaml.safe_load(path.read_text())
    assert manifest["config_sha256"] == config_hash(config)
    assert manifest["seed"] == 5
    assert manifest["config"] == config
    assert manifest["metadata"] == {"cusum_h_mean": 1.5}
    assert "git_describe" in manifest
    assert manifest["wall_time_seconds"] > 0
