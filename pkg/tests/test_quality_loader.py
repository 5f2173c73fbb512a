import duckdb
import numpy as np
import polars as pl
import pytest

from src.errors import EstimationError, InputError
from src.load import ResultLoader, RunManifest, read_stream_csv, write_csv, write_stream_csv
from src.quality import SweepQualityValidator

NU = 50


def _sweep_df():
    return pl.DataFrame(
        [
            {"detector": "rscusum", "true_post": "vertex_0", "gamma": 100.0, "tau": 4.605170185988092,
             "trial": 0, "stopping_time": 61, "delay": 12, "censored": False},
            {"detector": "rscusum", "true_post": "vertex_0", "gamma": 100.0, "tau": 4.605170185988092,
             "trial": 1, "stopping_time": 20, "delay": None, "censored": False},
            {"detector": "rscusum", "true_post": "vertex_0", "gamma": 100.0, "tau": 4.605170185988092,
             "trial": 2, "stopping_time": None, "delay": None, "censored": True},
            {"detector": "rcusum", "true_post": "vertex_0", "gamma": 100.0, "tau": 4.605170185988092,
             "trial": 0, "stopping_time": 55, "delay": 6, "censored": False},
        ],
        schema={
            "detector": pl.Utf8,
            "true_post": pl.Utf8,
            "gamma": pl.Float64,
            "tau": pl.Float64,
            "trial": pl.Int64,
            "stopping_time": pl.Int64,
            "delay": pl.Int64,
            "censored": pl.Boolean,
        },
    )


def _loader(tmp_path):
    return ResultLoader(
        str(tmp_path / "raw"),
        str(tmp_path / "warehouse" / "score_qcd.duckdb"),
        str(tmp_path / "manifests" / "runs.jsonl"),
    )


def _count(duckdb_path, run_id=None):
    conn = duckdb.connect(str(duckdb_path))
    if run_id is None:
        count = conn.execute("SELECT COUNT(*) FROM analytics.sweep_results").fetchone()[0]
    else:
        count = conn.execute("SELECT COUNT(*) FROM analytics.sweep_results WHERE run_id = ?", [run_id]).fetchone()[0]
    conn.close()
    return count


def test_quality_passes_on_consistent_sweep():
    validator = SweepQualityValidator({"max_false_alarm_rate": 0.5}, nu=NU)

    is_valid, errors = validator.validate(_sweep_df())

    assert is_valid is True
    assert errors == []


def test_quality_fails_for_wrong_delay():
    validator = SweepQualityValidator({}, nu=NU)
    df = _sweep_df().with_columns(
        pl.when(pl.col("trial") == 0).then(pl.lit(99, dtype=pl.Int64)).otherwise(pl.col("delay")).alias("delay")
    )

    is_valid, errors = validator.validate(df)

    assert is_valid is False
    assert any("stopping_time - nu + 1" in msg for msg in errors)


def test_quality_fails_for_duplicates_and_negative_threshold():
    validator = SweepQualityValidator({}, nu=NU)
    df = pl.concat([_sweep_df(), _sweep_df().head(1).with_columns(pl.lit(-1.0).alias("tau"))])

    is_valid, errors = validator.validate(df)

    assert is_valid is False
    assert any("duplicated" in msg for msg in errors)
    assert any("Negative threshold" in msg for msg in errors)


def test_quality_fails_when_false_alarms_dominate():
    validator = SweepQualityValidator({"max_false_alarm_rate": 0.2}, nu=NU)

    with pytest.raises(EstimationError):
        validator.validate_or_raise(_sweep_df())


def test_quality_rejects_empty_and_incomplete_frames():
    validator = SweepQualityValidator({}, nu=NU)

    assert validator.validate(_sweep_df().clear()) == (False, ["Sweep result is empty"])
    is_valid, errors = validator.validate(_sweep_df().drop("delay"))
    assert is_valid is False
    assert any("Missing required columns: delay" in msg for msg in errors)


def test_loader_replaces_rows_of_the_same_run(tmp_path):
    loader = _loader(tmp_path)
    df = _sweep_df()

    assert loader.load_into_duckdb(df, run_id="run_a") is True
    assert loader.load_into_duckdb(df, run_id="run_a") is True
    assert _count(loader.duckdb_path, "run_a") == df.height

    assert loader.load_into_duckdb(df, run_id="run_b") is True
    assert _count(loader.duckdb_path) == 2 * df.height


def test_loader_skips_empty_frames(tmp_path):
    loader = _loader(tmp_path)

    assert loader.load_into_duckdb(_sweep_df().clear(), run_id="run_a") is False


def test_loader_handles_duckdb_schema_evolution(tmp_path):
    loader = _loader(tmp_path)
    old_df = _sweep_df()
    assert loader.load_into_duckdb(old_df, run_id="run_a") is True

    new_df = old_df.with_columns(pl.lit("calibrated").alias("threshold_mode"))
    assert loader.load_into_duckdb(new_df, run_id="run_b") is True

    conn = duckdb.connect(str(loader.duckdb_path))
    columns = conn.execute(
        """
        SELECT column_name
        FROM information_schema.columns
        WHERE table_schema = 'analytics' AND table_name = 'sweep_results'
        """
    ).fetchall()
    conn.close()

    col_names = {row[0] for row in columns}
    assert {"threshold_mode", "run_id", "loaded_at"} <= col_names


def test_manifests_append_and_read_back(tmp_path):
    loader = _loader(tmp_path)
    first = RunManifest(subcommand="bench", config_path="config/examples/bench_mvn_m.json", seeds={"seed": 7})
    second = RunManifest(subcommand="detect", config_path=None, seeds={})

    assert loader.append_manifest(first) is True
    assert loader.append_manifest(second) is True

    manifests = loader.read_manifests()
    assert [item["run_id"] for item in manifests] == [first.run_id, second.run_id]
    assert manifests[0]["seeds"] == {"seed": 7}
    assert "numpy" in manifests[0]["versions"]


def test_raw_artifact_is_written_as_json(tmp_path):
    loader = _loader(tmp_path)

    path = loader.save_raw_artifact({"selected_index": 0, "beta": np.array([1.0, 0.0])}, "lfd", "abc123")

    assert path is not None
    assert path.parent == tmp_path / "raw"
    assert path.name.startswith("lfd_") and path.name.endswith("_abc123.json")


def test_stream_csv_round_trip(tmp_path):
    stream = np.array([[0.1, -2.5], [1e-17, 3.0], [0.3333333333333333, 7.25]])

    path = write_stream_csv(stream, tmp_path / "stream.csv")

    assert path.read_text(encoding="utf-8").splitlines()[0] == "t,x_1,x_2"
    assert np.array_equal(read_stream_csv(path), stream)


def test_csv_floats_keep_17_digits_and_nulls(tmp_path):
    df = pl.DataFrame({"trial": [0, 1, 2], "value": [0.1, None, 1.0 / 3.0]})

    path = write_csv(df, tmp_path / "floats.csv")

    assert path.read_text(encoding="utf-8").splitlines() == [
        "trial,value",
        "0,0.10000000000000001",
        "1,",
        "2,0.33333333333333331",
    ]


def test_flat_stream_is_written_as_one_coordinate(tmp_path):
    path = write_stream_csv(np.array([0.5, -1.25, 3.0]), tmp_path / "scalar.csv")

    assert path.read_text(encoding="utf-8").splitlines()[:2] == ["t,x_1", "1,0.5"]
    assert read_stream_csv(path).shape == (3, 1)


@pytest.mark.parametrize(
    "content",
    [
        "t,y_1\n1,0.5\n",
        "t,x_2\n1,0.5\n",
        "t,x_1\n",
        "t,x_1\n1,abc\n",
        "t,x_1\n1,\n",
    ],
)
def test_stream_csv_rejects_malformed_files(tmp_path, content):
    path = tmp_path / "stream.csv"
    path.write_text(content, encoding="utf-8")

    with pytest.raises(InputError):
        read_stream_csv(path)


def test_stream_csv_missing_file(tmp_path):
    with pytest.raises(InputError):
        read_stream_csv(tmp_path / "missing.csv")
