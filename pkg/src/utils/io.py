"""Writing experiment outputs: CSV tables, JSONL event logs and run manifests."""

import hashlib
import json
import logging
import math
import subprocess
import time
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from src.errors import OutputError

logger = logging.getLogger(__name__)

TABLE_FLOAT_FORMAT = "%.4g"
MANIFEST_NAME = "manifest.yaml"


def ensure_output_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OutputError(f"cannot create output directory {path}: {e}") from e
    return path


def _as_float_columns(df: pd.DataFrame) -> pd.DataFrame:
    """Object columns holding only numbers and None become float so the format applies."""
    out = df.copy()
    for col in out.columns:
        if out[col].dtype != object:
            continue
        values = out[col].dropna()
        if len(values) and all(
            isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, (bool, np.bool_))
            for v in values
        ):
            out[col] = pd.to_numeric(out[col], errors="coerce").astype(float)
    return out


def write_table(table, path, columns=None) -> Path:
    """
    Write one table as CSV with floats at 4 significant digits.

    None/NaN become empty cells. An empty table still gets its header when
    the columns are known.
    """
    path = Path(path)
    if isinstance(table, pd.DataFrame):
        df = table if columns is None else table.reindex(columns=list(columns))
    else:
        df = pd.DataFrame(list(table), columns=list(columns) if columns is not None else None)
    df = _as_float_columns(df)

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(path, index=False, float_format=TABLE_FLOAT_FORMAT, na_rep="")
    except OSError as e:
        raise OutputError(f"cannot write table {path}: {e}") from e
    logger.info("wrote %s (%d rows)", path, len(df))
    return path


def write_tables(tables: dict, output_dir) -> list[Path]:
    """One CSV per named table in output_dir, in the dict's order."""
    output_dir = ensure_output_dir(output_dir)
    return [write_table(df, output_dir / f"{name}.csv") for name, df in tables.items()]


def _jsonable(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    return value


def write_jsonl(records, path) -> Path:
    """One JSON object per line; floats keep full precision."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            for record in records:
                f.write(json.dumps(_jsonable(record), sort_keys=False))
                f.write("\n")
    except OSError as e:
        raise OutputError(f"cannot write {path}: {e}") from e
    logger.info("wrote %s", path)
    return path


def read_jsonl(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def config_hash(config: dict) -> str:
    """SHA-256 of the config in canonical JSON form."""
    canonical = json.dumps(_jsonable(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def git_describe(cwd=None) -> str | None:
    try:
        result = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=cwd,
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return None
    if result.returncode != 0:
        return None
    return result.stdout.strip() or None


def write_manifest(output_dir, config: dict, seed: int, started: float, extra: dict | None = None) -> Path:
    """
    manifest.yaml next to the outputs: the exact config, its hash, the seed,
    git describe, wall time and any experiment metadata.
    """
    output_dir = ensure_output_dir(output_dir)
    manifest = {
        "config_sha256": config_hash(config),
        "seed": int(seed),
        "git_describe": git_describe(),
        "wall_time_seconds": round(time.time() - started, 3),
        "metadata": _jsonable(extra or {}),
        "config": _jsonable(config),
    }
    path = output_dir / MANIFEST_NAME
    try:
        with open(path, "w") as f:
            yaml.safe_dump(manifest, f, sort_keys=False)
    except OSError as e:
        raise OutputError(f"cannot write manifest {path}: {e}") from e
    return path
