"""
Basic checks so we don't ship broken config loading.
"""

import copy
import tempfile
from pathlib import Path

import numpy as np
import pytest
import yaml

from src.config.load import (
    OUTPUT_ROOT_ENV,
    apply_overrides,
    dgp_params_from_config,
    experiment_config_from_config,
    load_config,
    resolve_output_dir,
)
from src.detect.trigger import TriggerVariant
from src.errors import ConfigError, UnknownExperimentError


@pytest.fixture
def default_config():
    return load_config("src/config/default.yaml")


def _write(config) -> str:
    f = tempfile.NamedTemporaryFile(mode="w", suffix=".yaml", delete=False)
    yaml.dump(config, f)
    f.close()
    return f.name


def test_real_default_config_works(default_config):
    """Our actual config should load and build every settings object."""
    cfg = experiment_config_from_config(default_config)

    assert cfg.experiment == "benchmark"
    assert cfg.n_runs == 200
    assert cfg.trigger.variant is TriggerVariant.ADAPTIVE
    assert cfg.trigger.percentile == 85.0
    assert cfg.signal.w == 20
    assert cfg.replay.w == 60
    assert cfg.replay.suppression == 120
    assert cfg.trigger.reference_percentile == 99.0
    assert cfg.trigger.stress_gate is True
    assert cfg.signal.entropy_floor == 0.05
    assert cfg.baselines.floor_margin == 2.5


def test_drift_direction_normalised(default_config):
    params = dgp_params_from_config(default_config)

    assert abs(np.linalg.norm(params.v) - 1.0) < 1e-12
    assert np.allclose(params.sigma, 0.25 * np.eye(4))
    assert params.eta() == pytest.approx(0.06)


def test_missing_file_fails():
    """Should fail if config doesn't exist."""
    with pytest.raises(FileNotFoundError):
        load_config("nonsense.yaml")


def test_missing_section_fails(default_config):
    config = copy.deepcopy(default_config)
    del config["trigger"]
    path = _write(config)
    try:
        with pytest.raises(ConfigError, match="trigger"):
            load_config(path)
    finally:
        Path(path).unlink()


def test_bad_yaml_is_config_error():
    with tempfile.NamedTemporaryFile(mode="w", suffix=".yaml", delete=False) as f:
        f.write("dgp: [unclosed\n")
    try:
        with pytest.raises(ConfigError):
            load_config(f.name)
    finally:
        Path(f.name).unlink()


def test_out_of_range_values_rejected(default_config):
    config = copy.deepcopy(default_config)
    config["dgp"]["p12"] = 1.5
    path = _write(config)
    try:
        with pytest.raises(ConfigError):
            load_config(path)
    finally:
        Path(path).unlink()


def test_unknown_experiment(default_config):
    with pytest.raises(UnknownExperimentError):
        apply_overrides(default_config, {"experiment": "nope"})


def test_overrides_apply_and_skip_none(default_config):
    config = apply_overrides(
        default_config, {"trigger.percentile": 90.0, "n_runs": 5, "seed": None}
    )
    cfg = experiment_config_from_config(config)

    assert cfg.trigger.percentile == 90.0
    assert cfg.n_runs == 5
    assert cfg.seed == default_config["seed"]
    # original untouched
    assert default_config["trigger"]["percentile"] == 85.0


def test_run_seeds(default_config):
    cfg = experiment_config_from_config(default_config)
    assert [cfg.run_seed(i) for i in range(3)] == [42, 43, 44]


def test_output_root_env(monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, "/tmp/lobwatch")
    assert resolve_output_dir("results") == Path("/tmp/lobwatch/results")
    assert resolve_output_dir("/abs/results") == Path("/abs/results")

    monkeypatch.delenv(OUTPUT_ROOT_ENV)
    assert resolve_output_dir("results") == Path("results")


@pytest.mark.parametrize("section,key,value", [("trigger", "floor_margin", -1.0), ("baselines", "reference_percentile", 20.0)])
def test_bad_floor_settings_rejected(default_config, section, key, value):
    config = copy.deepcopy(default_config)
    config[section][key] = value
    path = _write(config)
    try:
        with pytest.raises(ConfigError):
            load_config(path)
    finally:
        Path(path).unlink()
