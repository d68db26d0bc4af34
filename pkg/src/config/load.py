"""Config loading for the early-warning benchmark.

Loads the YAML config, checks the sections and ranges that would otherwise
blow up deep inside a run, and builds the typed settings objects the rest of
the package takes.
"""

import copy
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict

import numpy as np
import yaml

from src.data.dgp import DgpParams, FEATURES
from src.detect.baselines import BaselineConfig
from src.detect.trigger import TriggerConfig, TriggerVariant
from src.errors import ConfigError, ParameterError, UnknownExperimentError
from src.features.channels import SignalConfig
from src.pipeline.replay import ReplayConfig

OUTPUT_ROOT_ENV = "LOBWATCH_OUTPUT_ROOT"

EXPERIMENTS = ("simulate", "detect", "benchmark", "sweep", "grid", "ablation", "bounds", "replay")

REQUIRED_SECTIONS = ["dgp", "hmm", "signal", "trigger", "baselines", "evaluation", "theory", "replay"]


@dataclass(frozen=True)
class HmmSettings:
    n_restarts: int = 10
    max_iters: int = 100
    tol: float = 1e-6
    var_floor: float = 1e-6


@dataclass(frozen=True)
class EvaluationSettings:
    t1_bins: tuple = (10, 25)
    snr_bins: tuple = (0.15, 0.30)
    sweep_percentiles: tuple = (70.0, 75.0, 80.0, 85.0, 90.0, 93.0, 95.0)
    grid_delays: tuple = (0.10, 0.05, 0.025)
    grid_noise_levels: tuple = (0.25, 0.50, 1.00)
    runs_per_cell: int = 50


@dataclass(frozen=True)
class TheorySettings:
    etas: tuple = (0.3, 0.5, 1.0)
    t1s: tuple = (20, 50)
    deltas: tuple = (0.05, 0.1)
    n_samples: int = 100_000


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment run needs, resolved from the config file."""

    experiment: str
    dgp: DgpParams
    signal: SignalConfig
    trigger: TriggerConfig
    baselines: BaselineConfig
    hmm: HmmSettings
    evaluation: EvaluationSettings
    theory: TheorySettings
    replay: ReplayConfig
    n_runs: int
    seed: int
    output_dir: Path
    workers: int = 1
    raw: Dict[str, Any] = field(default_factory=dict, repr=False, compare=False)

    def run_seed(self, run_index: int) -> int:
        """Seed for run i: seed + i."""
        return self.seed + run_index


def load_config(config_path: str):
    """Load config YAML and validate the important bits."""
    config_file = Path(config_path)

    if not config_file.exists():
        raise FileNotFoundError(f"Config not found: {config_path}")

    with open(config_file) as f:
        try:
            config = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"Error parsing YAML file {config_path}: {e}")

    if not isinstance(config, dict):
        raise ConfigError(f"Config {config_path} must be a mapping")

    _validate_config(config)
    return config


def _validate_config(config: Dict[str, Any]):
    """Check that config has the stuff we need."""
    for section in REQUIRED_SECTIONS:
        if section not in config:
            raise ConfigError(f"Missing '{section}' section in config")

    experiment = config.get("experiment", "benchmark")
    if experiment not in EXPERIMENTS:
        raise UnknownExperimentError(f"Unknown experiment '{experiment}'")

    if int(config.get("n_runs", 1)) < 1:
        raise ConfigError("n_runs must be >= 1")

    dgp = config["dgp"]
    for key in ("p01", "p12", "p20", "alpha", "sigma_eps", "T", "mu", "drift_direction"):
        if key not in dgp:
            raise ConfigError(f"dgp.{key} is required")
    for regime in ("stable", "buildup", "stress"):
        if len(dgp["mu"].get(regime, [])) != len(FEATURES):
            raise ConfigError(f"dgp.mu.{regime} needs {len(FEATURES)} values")
    if len(dgp["drift_direction"]) != len(FEATURES):
        raise ConfigError(f"dgp.drift_direction needs {len(FEATURES)} values")
    if np.linalg.norm(dgp["drift_direction"]) == 0:
        raise ConfigError("dgp.drift_direction must be non-zero")

    # The typed builders run the per-object checks
    try:
        dgp_params_from_config(config).validate()
        signal = signal_config_from_config(config)
        signal.validate()
        trigger_config_from_config(config).validate(signal)
        baseline_config_from_config(config).validate()
        replay_config_from_config(config).validate()
    except (ParameterError, TypeError, ValueError) as e:
        raise ConfigError(f"Invalid config: {e}")


def dgp_params_from_config(config: Dict[str, Any]) -> DgpParams:
    dgp = config["dgp"]
    mu = np.array([dgp["mu"]["stable"], dgp["mu"]["buildup"], dgp["mu"]["stress"]], dtype=float)
    v = np.asarray(dgp["drift_direction"], dtype=float)
    d = mu.shape[1]
    return DgpParams(
        p01=float(dgp["p01"]),
        p12=float(dgp["p12"]),
        p20=float(dgp["p20"]),
        mu=mu,
        sigma=float(dgp["sigma_eps"]) ** 2 * np.eye(d),
        alpha=float(dgp["alpha"]),
        v=v / np.linalg.norm(v),
        T=int(dgp["T"]),
        rng=str(dgp.get("rng", "PCG64")),
    )


def signal_config_from_config(config: Dict[str, Any]) -> SignalConfig:
    sig = config["signal"]
    return SignalConfig(
        w=int(sig["w"]),
        baseline_window=int(sig["baseline_window"]),
        epsilon=float(sig.get("epsilon", 1e-8)),
        squash_max=float(sig.get("squash_max", 3.0)),
        entropy_floor=float(sig.get("entropy_floor", 0.05)),
    )


def trigger_config_from_config(config: Dict[str, Any]) -> TriggerConfig:
    trig = config["trigger"]
    return TriggerConfig(
        percentile=float(trig["percentile"]),
        suppression=int(trig["suppression"]),
        variant=TriggerVariant(trig.get("variant", "adaptive")),
        burn_in=int(trig["burn_in"]),
        threshold_update_interval=int(trig.get("threshold_update_interval", 1)),
        history_cap=int(trig.get("history_cap", 100_000)),
        reference_percentile=float(trig.get("reference_percentile", 99.0)),
        floor_margin=float(trig.get("floor_margin", 2.5)),
        stress_gate=bool(trig.get("stress_gate", True)),
    )


def baseline_config_from_config(config: Dict[str, Any]) -> BaselineConfig:
    base = config["baselines"]
    return BaselineConfig(
        percentile=float(base.get("percentile", 85.0)),
        bocpd_hazard=float(base.get("bocpd_hazard", 0.035)),
        bocpd_alarm=float(base.get("bocpd_alarm", 0.5)),
        bocpd_max_run=int(base.get("bocpd_max_run", 2000)),
        reference_percentile=float(base.get("reference_percentile", 99.0)),
        floor_margin=float(base.get("floor_margin", 2.5)),
    )


def replay_config_from_config(config: Dict[str, Any]) -> ReplayConfig:
    rep = dict(config["replay"])
    rep.setdefault("max_iters", config.get("hmm", {}).get("max_iters", 100))
    rep.setdefault("seed", config.get("seed", 0))
    known = ReplayConfig.__dataclass_fields__
    unknown = set(rep) - set(known)
    if unknown:
        raise ConfigError(f"Unknown replay keys: {sorted(unknown)}")
    return ReplayConfig(**rep)


def resolve_output_dir(path) -> Path:
    """Relative output dirs are placed under $LOBWATCH_OUTPUT_ROOT when set."""
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def experiment_config_from_config(config: Dict[str, Any]) -> ExperimentConfig:
    hmm = config["hmm"]
    ev = config["evaluation"]
    grid = ev.get("grid", {})
    th = config["theory"]

    return ExperimentConfig(
        experiment=config.get("experiment", "benchmark"),
        dgp=dgp_params_from_config(config),
        signal=signal_config_from_config(config),
        trigger=trigger_config_from_config(config),
        baselines=baseline_config_from_config(config),
        hmm=HmmSettings(
            n_restarts=int(hmm.get("n_restarts", 10)),
            max_iters=int(hmm.get("max_iters", 100)),
            tol=float(hmm.get("tol", 1e-6)),
            var_floor=float(hmm.get("var_floor", 1e-6)),
        ),
        evaluation=EvaluationSettings(
            t1_bins=tuple(ev.get("t1_bins", (10, 25))),
            snr_bins=tuple(ev.get("snr_bins", (0.15, 0.30))),
            sweep_percentiles=tuple(float(p) for p in ev.get("sweep_percentiles", ())),
            grid_delays=tuple(float(p) for p in grid.get("delays", (0.10, 0.05, 0.025))),
            grid_noise_levels=tuple(float(s) for s in grid.get("noise_levels", (0.25, 0.5, 1.0))),
            runs_per_cell=int(grid.get("runs_per_cell", 50)),
        ),
        theory=TheorySettings(
            etas=tuple(float(e) for e in th.get("etas", ())),
            t1s=tuple(int(t) for t in th.get("t1s", ())),
            deltas=tuple(float(d) for d in th.get("deltas", ())),
            n_samples=int(th.get("n_samples", 100_000)),
        ),
        replay=replay_config_from_config(config),
        n_runs=int(config.get("n_runs", 200)),
        seed=int(config.get("seed", 0)),
        output_dir=resolve_output_dir(config.get("output_dir", "experiments/results")),
        workers=int(config.get("workers", 1)),
        raw=config,
    )


def apply_overrides(config: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """
    Copy of config with dotted-key overrides applied, e.g.
    {"trigger.percentile": 90, "n_runs": 50}. None values are skipped so
    unset CLI flags leave the file value alone. The result is re-validated.
    """
    config = copy.deepcopy(config)
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = config
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value

    _validate_config(config)
    return config
