import json
import logging
import uuid
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Optional

import duckdb
import numpy as np
import polars as pl

from src.errors import InputError, ScoreQcdError
from src.model_io import write_json

logger = logging.getLogger(__name__)

FLOAT_FORMAT = ".17g"
FLOAT_PRINTF = "%.17g"
SWEEP_SCHEMA = {
    "detector": pl.Utf8,
    "true_post": pl.Utf8,
    "gamma": pl.Float64,
    "tau": pl.Float64,
    "trial": pl.Int64,
    "stopping_time": pl.Int64,
    "delay": pl.Int64,
    "censored": pl.Boolean,
}
TRACKED_PACKAGES = ("numpy", "scipy", "polars", "duckdb", "pyarrow")


def _format_floats(df: pl.DataFrame) -> pl.DataFrame:
    float_columns = [name for name, dtype in zip(df.columns, df.dtypes) if dtype in (pl.Float32, pl.Float64)]
    if not float_columns:
        return df
    return df.with_columns(
        pl.when(pl.col(name).is_null())
        .then(None)
        .otherwise(pl.Series(name, np.char.mod(FLOAT_PRINTF, df[name].fill_null(np.nan).to_numpy())))
        .alias(name)
        for name in float_columns
    )


def write_csv(df: pl.DataFrame, path: Path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        _format_floats(df).write_csv(path)
    except OSError as exc:
        raise ScoreQcdError(f"Failed writing CSV {path}: {exc}") from exc
    logger.info("CSV saved at %s. rows=%s", path, df.height)
    return path


def write_sweep_csv(df: pl.DataFrame, path: Path) -> Path:
    return write_csv(df.select(list(SWEEP_SCHEMA)), path)


def read_sweep_csv(path: Path) -> pl.DataFrame:
    try:
        return pl.read_csv(path, schema=SWEEP_SCHEMA)
    except (OSError, pl.exceptions.PolarsError) as exc:
        raise InputError(f"Failed reading sweep CSV {path}: {exc}") from exc


def write_stream_csv(stream: np.ndarray, path: Path) -> Path:
    X = np.asarray(stream, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    columns = {"t": np.arange(1, X.shape[0] + 1, dtype=np.int64)}
    columns.update({f"x_{index + 1}": X[:, index] for index in range(X.shape[1])})
    return write_csv(pl.DataFrame(columns), path)


def read_stream_csv(path: Path) -> np.ndarray:
    """Stream CSV with header t,x_1..x_d; rows are taken in file order."""
    try:
        df = pl.read_csv(path)
    except (OSError, pl.exceptions.PolarsError) as exc:
        raise InputError(f"Failed reading stream CSV {path}: {exc}") from exc

    coordinates = [column for column in df.columns if column.startswith("x_")]
    if "t" not in df.columns or not coordinates:
        raise InputError(f"Stream CSV {path} needs columns t,x_1..x_d; got {df.columns}")
    expected = [f"x_{index + 1}" for index in range(len(coordinates))]
    if coordinates != expected:
        raise InputError(f"Stream CSV {path} coordinate columns must be {expected}, got {coordinates}")
    if df.is_empty():
        raise InputError(f"Stream CSV {path} has no rows")
    try:
        X = df.select(pl.col(coordinates).cast(pl.Float64, strict=True)).to_numpy()
    except pl.exceptions.PolarsError as exc:
        raise InputError(f"Stream CSV {path} has non-numeric coordinates: {exc}") from exc
    if not np.all(np.isfinite(X)):
        raise InputError(f"Stream CSV {path} contains missing or non-finite coordinates")
    return X


def write_summary_json(result: Any, summary: pl.DataFrame, fits: pl.DataFrame, path: Path) -> Path:
    payload = {
        "run": {
            "nu": result.nu,
            "stream_length": result.stream_length,
            "threshold_mode": result.threshold_mode,
            "detectors": result.detectors,
            "true_posts": result.posts,
            "gammas": result.gammas,
        },
        "cells": summary.to_dicts(),
        "fits": fits.to_dicts(),
        "failures": result.failures,
    }
    return write_json(payload, str(path))


def write_gnuplot_table(summary: pl.DataFrame, path: Path) -> Path:
    """One data block per detector/post pair, separated by two blank lines (gnuplot `index`)."""
    path = Path(path)
    blocks: List[str] = []
    for (detector, true_post), cell in summary.group_by(["detector", "true_post"], maintain_order=True):
        lines = [f"# detector={detector} true_post={true_post}", "# ln_gamma gamma tau edd_mean edd_se arl_mean"]
        for row in cell.sort("gamma").iter_rows(named=True):
            values = [np.log(row["gamma"]), row["gamma"], row["tau"], row["edd_mean"], row["edd_se"], row.get("arl_mean")]
            lines.append(" ".join("nan" if value is None else format(value, FLOAT_FORMAT) for value in values))
        blocks.append("\n".join(lines))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n\n\n".join(blocks) + "\n", encoding="utf-8")
    except OSError as exc:
        raise ScoreQcdError(f"Failed writing gnuplot table {path}: {exc}") from exc
    logger.info("Gnuplot table saved at %s", path)
    return path


def package_versions() -> Dict[str, str]:
    versions = {}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


@dataclass
class RunManifest:
    subcommand: str
    config_path: Optional[str]
    seeds: Dict[str, int]
    argv: List[str] = field(default_factory=list)
    arguments: Dict[str, Any] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)
    settings: Dict[str, Any] = field(default_factory=dict)
    run_id: str = field(default_factory=lambda: uuid.uuid4().hex[:16])
    versions: Dict[str, str] = field(default_factory=package_versions)
    outputs: Dict[str, str] = field(default_factory=dict)
    started_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    wall_clock_seconds: float = 0.0
    status: str = "running"
    warnings: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class ResultLoader:
    def __init__(self, raw_path: str, duckdb_path: str, manifest_path: str):
        self.raw_path = Path(raw_path)
        self.duckdb_path = Path(duckdb_path)
        self.manifest_path = Path(manifest_path)

        self.raw_path.mkdir(parents=True, exist_ok=True)
        self.duckdb_path.parent.mkdir(parents=True, exist_ok=True)
        self.manifest_path.parent.mkdir(parents=True, exist_ok=True)

    def save_raw_artifact(self, payload: Dict[str, Any], kind: str, run_id: str) -> Optional[Path]:
        try:
            timestamp = datetime.now(timezone.utc).strftime("%Y%m%d_%H%M%S")
            filepath = write_json(payload, str(self.raw_path / f"{kind}_{timestamp}_{run_id}.json"))
            logger.info("Raw %s artifact saved at %s", kind, filepath)
            return filepath
        except Exception as exc:
            logger.error("Failed saving raw %s artifact: %s", kind, exc, exc_info=True)
            return None

    def append_manifest(self, manifest: RunManifest) -> bool:
        try:
            with open(self.manifest_path, "a", encoding="utf-8") as handle:
                handle.write(json.dumps(manifest.to_dict(), ensure_ascii=False, sort_keys=True, default=str) + "\n")
            logger.info("Manifest %s appended to %s", manifest.run_id, self.manifest_path)
            return True
        except Exception as exc:
            logger.error("Failed appending manifest: %s", exc, exc_info=True)
            return False

    def read_manifests(self) -> List[Dict[str, Any]]:
        if not self.manifest_path.exists():
            return []
        with open(self.manifest_path, "r", encoding="utf-8") as handle:
            return [json.loads(line) for line in handle if line.strip()]

    @staticmethod
    def _to_duckdb_type(dtype: pl.DataType) -> str:
        if dtype in (pl.Int8, pl.Int16, pl.Int32, pl.Int64, pl.UInt8, pl.UInt16, pl.UInt32, pl.UInt64):
            return "BIGINT"
        if dtype in (pl.Float32, pl.Float64):
            return "DOUBLE"
        if dtype == pl.Boolean:
            return "BOOLEAN"
        return "VARCHAR"

    @staticmethod
    def _quote_ident(name: str) -> str:
        return '"' + name.replace('"', '""') + '"'

    def _qualified(self, table_name: str) -> str:
        schema_name, relation_name = table_name.split(".", 1)
        return f"{self._quote_ident(schema_name)}.{self._quote_ident(relation_name)}"

    def _add_missing_columns(self, conn: duckdb.DuckDBPyConnection, table_name: str, df: pl.DataFrame) -> None:
        existing_columns = {
            row[1] for row in conn.execute(f"PRAGMA table_info({self._qualified(table_name)})").fetchall()
        }
        for column_name, column_dtype in zip(df.columns, df.dtypes):
            if column_name not in existing_columns:
                logger.info("Adding column %s to %s", column_name, table_name)
                conn.execute(
                    f"ALTER TABLE {self._qualified(table_name)} "
                    f"ADD COLUMN {self._quote_ident(column_name)} {self._to_duckdb_type(column_dtype)}"
                )

    def load_into_duckdb(self, df: pl.DataFrame, run_id: str, table_name: str = "analytics.sweep_results") -> bool:
        """Replace every row of run_id in table_name with df; columns new to the table are added first."""
        try:
            if df is None or df.is_empty():
                logger.warning("No sweep rows available for DuckDB load")
                return False

            incoming = df.with_columns(
                pl.lit(run_id).alias("run_id"),
                pl.lit(datetime.now(timezone.utc).isoformat()).alias("loaded_at"),
            )
            relation_name = "incoming_sweep_rows"
            schema_name, _ = table_name.split(".", 1)
            conn = duckdb.connect(str(self.duckdb_path))
            try:
                conn.execute(f"CREATE SCHEMA IF NOT EXISTS {self._quote_ident(schema_name)}")
                conn.register(relation_name, incoming.to_arrow())
                conn.execute(
                    f"CREATE TABLE IF NOT EXISTS {self._qualified(table_name)} AS SELECT * FROM {relation_name} WHERE 1=0"
                )
                self._add_missing_columns(conn, table_name, incoming)

                quoted_columns = ", ".join(self._quote_ident(column) for column in incoming.columns)
                conn.execute(f"DELETE FROM {self._qualified(table_name)} WHERE run_id = ?", [run_id])
                conn.execute(
                    f"INSERT INTO {self._qualified(table_name)} ({quoted_columns}) "
                    f"SELECT {quoted_columns} FROM {relation_name}"
                )
                conn.unregister(relation_name)
            finally:
                conn.close()

            logger.info("DuckDB table %s updated at %s. run_id=%s rows=%s", table_name, self.duckdb_path, run_id, df.height)
            return True

        except Exception as exc:
            logger.error("Failed loading into DuckDB: %s", exc, exc_info=True)
            return False
