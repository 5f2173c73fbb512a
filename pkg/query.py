import argparse
from typing import Iterable, List, Optional, Sequence, Tuple

import duckdb


def print_table(columns: Sequence[str], rows: Iterable[Tuple]) -> None:
    rows_list: List[Tuple] = list(rows)
    if not rows_list:
        print("No rows found.")
        return

    str_rows = [tuple("" if value is None else str(value) for value in row) for row in rows_list]
    widths = [len(col) for col in columns]
    for row in str_rows:
        for i, value in enumerate(row):
            widths[i] = max(widths[i], len(value))

    header = " | ".join(columns[i].ljust(widths[i]) for i in range(len(columns)))
    separator = "-+-".join("-" * widths[i] for i in range(len(columns)))
    print(header)
    print(separator)
    for row in str_rows:
        print(" | ".join(row[i].ljust(widths[i]) for i in range(len(columns))))


def run_query(db_path: str, sql: str, params: Sequence = ()) -> None:
    conn = duckdb.connect(db_path, read_only=True)
    try:
        result = conn.execute(sql, params)
        columns = [desc[0] for desc in result.description]
        rows = result.fetchall()
        print_table(columns, rows)
    finally:
        conn.close()


def cell_summary(db_path: str, run_id: Optional[str]) -> None:
    sql = """
    WITH base AS (
      SELECT
        detector,
        true_post,
        gamma,
        tau,
        censored,
        stopping_time IS NOT NULL AND stopping_time < nu AS false_alarm,
        CASE WHEN censored THEN stream_length - nu + 1 ELSE delay END AS effective_delay
      FROM analytics.sweep_results
      WHERE run_id = COALESCE(?, (SELECT arg_max(run_id, loaded_at) FROM analytics.sweep_results))
    )
    SELECT
      detector,
      true_post,
      gamma,
      ROUND(ANY_VALUE(tau), 6) AS tau,
      COUNT(*) AS trials,
      ROUND(AVG(effective_delay) FILTER (WHERE NOT false_alarm), 4) AS edd_mean,
      ROUND(STDDEV_SAMP(effective_delay) FILTER (WHERE NOT false_alarm)
            / SQRT(COUNT(effective_delay) FILTER (WHERE NOT false_alarm)), 4) AS edd_se,
      SUM(CASE WHEN false_alarm THEN 1 ELSE 0 END) AS false_alarms,
      SUM(CASE WHEN censored THEN 1 ELSE 0 END) AS censored
    FROM base
    GROUP BY detector, true_post, gamma
    ORDER BY detector, true_post, gamma
    """
    run_query(db_path, sql, [run_id])


def list_runs(db_path: str) -> None:
    sql = """
    SELECT
      run_id,
      COUNT(*) AS rows,
      COUNT(DISTINCT detector) AS detectors,
      COUNT(DISTINCT true_post) AS true_posts,
      COUNT(DISTINCT gamma) AS gammas,
      MAX(trial) + 1 AS trials,
      MAX(loaded_at) AS loaded_at
    FROM analytics.sweep_results
    GROUP BY run_id
    ORDER BY loaded_at DESC
    """
    run_query(db_path, sql)


def latest_rows(db_path: str, limit: int) -> None:
    sql = """
    SELECT run_id, detector, true_post, gamma, tau, trial, stopping_time, delay, censored
    FROM analytics.sweep_results
    ORDER BY loaded_at DESC, detector, true_post, gamma, trial
    LIMIT ?
    """
    run_query(db_path, sql, [limit])


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Query analytics.sweep_results from DuckDB.")
    parser.add_argument(
        "--db",
        default="results/warehouse/score_qcd.duckdb",
        help="DuckDB database path (default: results/warehouse/score_qcd.duckdb).",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    cells_parser = subparsers.add_parser("cells", help="EDD summary per detector/true_post/gamma cell.")
    cells_parser.add_argument("--run-id", default=None, help="Run to summarize (default: most recently loaded run).")

    subparsers.add_parser("runs", help="List stored sweep runs.")

    latest_parser = subparsers.add_parser("latest", help="Show stored sweep rows.")
    latest_parser.add_argument("--limit", type=int, default=20, help="Max number of rows (default: 20).")

    sql_parser = subparsers.add_parser("sql", help="Run custom SQL query.")
    sql_parser.add_argument("--query", required=True, help="SQL statement to execute.")

    return parser.parse_args()


def main() -> None:
    args = parse_args()
    if args.command == "cells":
        cell_summary(args.db, args.run_id)
    elif args.command == "runs":
        list_runs(args.db)
    elif args.command == "latest":
        latest_rows(args.db, args.limit)
    elif args.command == "sql":
        run_query(args.db, args.query)


if __name__ == "__main__":
    main()
