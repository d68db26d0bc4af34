"""CLI for the early-warning benchmark and replay."""

import argparse
import logging
import sys
import time
from pathlib import Path

from src.config.load import (
    apply_overrides,
    baseline_config_from_config,
    experiment_config_from_config,
    load_config,
    replay_config_from_config,
)
from src.data.dgp import extract_episodes, read_run_csv, simulate_run, write_run_csv
from src.data.snapshots import generate_replay_fixture
from src.detect.trigger import run_detector, score_trace
from src.errors import ConfigError, OutputError, UnknownExperimentError
from src.eval.experiments import EXPERIMENT_FUNCTIONS, fit_detection_model
from src.pipeline.replay import replay_detect, replay_tables
from src.utils.io import ensure_output_dir, write_jsonl, write_manifest, write_tables

EXIT_RUNTIME = 1
EXIT_UNKNOWN_EXPERIMENT = 3
EXIT_CONFIG = 4
EXIT_OUTPUT = 5

# CLI flag -> dotted config key
OVERRIDES = {
    "runs": "n_runs",
    "seed": "seed",
    "output_dir": "output_dir",
    "workers": "workers",
    "variant": "trigger.variant",
    "percentile": "trigger.percentile",
    "suppression": "trigger.suppression",
    "burn_in": "trigger.burn_in",
    "data_dir": "replay.data_dir",
    "train_days": "replay.train_days",
    "test_days": "replay.test_days",
}


def _print_table(df, columns):
    cols = [c for c in columns if c in df.columns]
    print(" | ".join(f"{c:>13}" for c in cols))
    print("-" * (16 * len(cols)))
    for _, row in df[cols].iterrows():
        cells = []
        for c in cols:
            value = row[c]
            if isinstance(value, float):
                cells.append(f"{value:13.3f}" if value == value else f"{'-':>13}")
            elif value is None:
                cells.append(f"{'-':>13}")
            else:
                cells.append(f"{str(value):>13}")
        print(" | ".join(cells))


def cmd_simulate(args, config, cfg):
    """Write simulated runs as CSV."""
    print(f"🎯 Simulating {cfg.n_runs} runs (T={cfg.dgp.T}, seed={cfg.seed})...")
    out_dir = ensure_output_dir(cfg.output_dir / "runs")

    n_episodes = 0
    for i in range(cfg.n_runs):
        run = simulate_run(cfg.dgp, cfg.run_seed(i))
        path = out_dir / f"run_{i:04d}.csv"
        try:
            write_run_csv(run, path)
        except OSError as e:
            raise OutputError(f"cannot write {path}: {e}") from e
        n_episodes += len(extract_episodes(run.labels))

    print(f"Saved {cfg.n_runs} runs ({n_episodes} complete episodes) to: {out_dir}")
    return {"n_runs": cfg.n_runs, "n_episodes": n_episodes}


def cmd_detect(args, config, cfg):
    """Run the trigger on one simulated run CSV."""
    if not args.input:
        raise ValueError("detect needs --input <run csv>")
    input_path = Path(args.input)
    if not input_path.exists():
        raise FileNotFoundError(f"Run file not found: {input_path}")

    run = read_run_csv(input_path, seed=cfg.seed)
    print(f"Running {cfg.trigger.variant.value} trigger on {input_path} ({len(run)} steps)...")

    model = fit_detection_model(run.frames, cfg, cfg.seed)
    events = run_detector(run.frames, model, cfg.signal, cfg.trigger)

    out_dir = ensure_output_dir(cfg.output_dir)
    write_jsonl([e.as_record() for e in events], out_dir / "events.jsonl")
    if args.trace:
        trace = score_trace(run.frames, model, cfg.signal, cfg.trigger)
        write_jsonl(trace.channel_records(cfg.trigger.burn_in), out_dir / "channels.jsonl")

    print(f"\n✅ {len(events)} triggers")
    for e in events[:20]:
        print(f"   t={e.tau:5d}  score={e.score:.3f}  threshold={e.threshold:.3f}  first={e.first_channel}")
    if len(events) > 20:
        print(f"   ... {len(events) - 20} more in events.jsonl")
    return {"input": str(input_path), "n_triggers": len(events)}


def cmd_experiment(args, config, cfg):
    """benchmark / sweep / grid / ablation / bounds."""
    name = cfg.experiment
    print(f"🎯 Running {name} ({cfg.n_runs} runs, {cfg.workers} worker(s))...")

    if name == "bounds" and args.grid == "quick":
        output = EXPERIMENT_FUNCTIONS[name](cfg, n_samples=10_000)
    else:
        output = EXPERIMENT_FUNCTIONS[name](cfg)

    paths = write_tables(output.tables, cfg.output_dir)
    for record_name, records in output.records.items():
        paths.append(write_jsonl(records, cfg.output_dir / f"{record_name}.jsonl"))

    print(f"\n✅ {name} complete")
    print("=" * 60)
    if "table1" in output.tables:
        _print_table(output.tables["table1"], ["detector", "mean_lead", "precision", "coverage", "n_triggers"])
    elif "ablation" in output.tables:
        _print_table(output.tables["ablation"], ["arm", "precision", "coverage", "d_precision", "d_coverage"])
    elif "bounds_vs_mc" in output.tables:
        _print_table(output.tables["bounds_vs_mc"], ["eta", "t1", "delta", "bound", "mc_estimate", "coupling_violations"])
    elif "robustness_grid" in output.tables:
        _print_table(output.tables["robustness_grid"], ["p12", "sigma_eps", "mean_lead", "lead_ci", "coverage"])

    for key, value in output.metadata.items():
        print(f"   {key}: {value}")
    for path in paths:
        print(f"Saved to: {path}")
    return output.metadata


def cmd_replay(args, config, cfg):
    """Replay recorded snapshot days through the detector and baselines."""
    rep = replay_config_from_config(config)
    data_dir = Path(rep.data_dir)

    if args.fixture:
        print(f"Writing synthetic snapshot fixture to {data_dir}...")
        generate_replay_fixture(
            data_dir, seed=cfg.seed, n_days=rep.train_days + rep.test_days
        )

    print(f"Replaying {rep.test_days} test day(s) from {data_dir}...")
    result = replay_detect(
        data_dir, rep, baseline_config_from_config(config), model_dir=cfg.output_dir / "models"
    )
    summary, per_event = replay_tables(result)

    paths = write_tables({"replay_summary": summary, "replay_events": per_event}, cfg.output_dir)
    paths.append(
        write_jsonl(
            [
                {"date": day.date.date().isoformat(), **e.as_record()}
                for day in result.days
                for e in day.triggers
            ],
            cfg.output_dir / "replay_triggers.jsonl",
        )
    )

    print("\n✅ Replay complete")
    print("=" * 60)
    _print_table(summary, ["detector", "mean_lead", "precision", "coverage", "n_triggers", "n_events"])
    for path in paths:
        print(f"Saved to: {path}")
    return {"days": len(result.days), "labels": len(result.labels)}


COMMANDS = {
    "simulate": cmd_simulate,
    "detect": cmd_detect,
    "benchmark": cmd_experiment,
    "sweep": cmd_experiment,
    "grid": cmd_experiment,
    "ablation": cmd_experiment,
    "bounds": cmd_experiment,
    "replay": cmd_replay,
}


def _add_common(p):
    p.add_argument("--config", default="src/config/default.yaml", help="Path to config file")
    p.add_argument("--runs", type=int, help="Number of simulated runs (overrides config)")
    p.add_argument("--seed", type=int, help="Base seed; run i uses seed + i")
    p.add_argument("--output-dir", help="Output directory (relative paths go under $LOBWATCH_OUTPUT_ROOT)")
    p.add_argument("--workers", type=int, help="Worker processes for the per-run fan-out")
    p.add_argument("--variant", choices=["standard", "adaptive", "multi"], help="Trigger variant")
    p.add_argument("--percentile", type=float, help="Threshold percentile p")
    p.add_argument("--suppression", type=int, help="Suppression window L")
    p.add_argument("--burn-in", type=int, help="Burn-in length")
    p.add_argument(
        "--log-level",
        default="WARNING",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging level (default: WARNING)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Early-warning detection of latent order-book stress")
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    helps = {
        "simulate": "Simulate runs and save them as CSV",
        "detect": "Run the trigger on one simulated run",
        "benchmark": "Detector comparison, conditional and channel tables",
        "sweep": "Threshold sweep and precision/coverage frontier",
        "grid": "Robustness grid over build-up delay and noise",
        "ablation": "Ablation arms against the full method",
        "bounds": "Detectability bounds against the Monte-Carlo oracle",
        "replay": "Replay recorded snapshot files",
        "run": "Run the experiment named in the config file",
    }
    for name, text in helps.items():
        p = subparsers.add_parser(name, help=text)
        _add_common(p)
        if name == "detect":
            p.add_argument("--input", help="Simulated run CSV")
            p.add_argument("--trace", action="store_true", help="Also write per-step channel scores")
        if name == "bounds":
            p.add_argument("--grid", choices=["default", "quick"], default="default", help="Theory grid size")
        if name in ("replay", "run"):
            p.add_argument("--data-dir", help="Directory of snapshots_YYYYMMDD.csv files")
            p.add_argument("--train-days", type=int, help="Leading days used only for training")
            p.add_argument("--test-days", type=int, help="Days evaluated after the training days")
            p.add_argument("--fixture", action="store_true", help="Write a synthetic fixture to the data dir first")
        p.set_defaults(command=name)

    return parser


def _overrides(args) -> dict:
    overrides = {
        key: getattr(args, flag) for flag, key in OVERRIDES.items() if hasattr(args, flag)
    }
    if args.command != "run":
        overrides["experiment"] = args.command
    return overrides


def main(argv=None):
    """Main CLI entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        sys.exit(2)

    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    # Config problems are reported before anything is written
    try:
        config = apply_overrides(load_config(args.config), _overrides(args))
        cfg = experiment_config_from_config(config)
    except UnknownExperimentError as e:
        print(f"Error: {e}")
        sys.exit(EXIT_UNKNOWN_EXPERIMENT)
    except (FileNotFoundError, ConfigError) as e:
        print(f"Error: {e}")
        sys.exit(EXIT_CONFIG)

    # Subcommand-specific flags default to None for the others
    for flag in ("input", "trace", "grid", "fixture"):
        if not hasattr(args, flag):
            setattr(args, flag, None)

    command = COMMANDS[cfg.experiment]

    started = time.time()
    try:
        metadata = command(args, config, cfg)
        write_manifest(cfg.output_dir, config, cfg.seed, started, metadata)
    except OutputError as e:
        print(f"Error: {e}")
        sys.exit(EXIT_OUTPUT)
    except Exception as e:
        print(f"Error: {e}")
        sys.exit(EXIT_RUNTIME)


if __name__ == "__main__":
    main()
