import logging
from typing import Any, Dict, List, Tuple

import polars as pl

from src.errors import EstimationError

logger = logging.getLogger(__name__)


class SweepQualityValidator:
    REQUIRED_COLUMNS = [
        "detector",
        "true_post",
        "gamma",
        "tau",
        "trial",
        "stopping_time",
        "delay",
        "censored",
    ]
    KEY_COLUMNS = ["detector", "true_post", "gamma", "trial"]

    def __init__(self, quality_config: Dict[str, Any], nu: int):
        self.quality_config = quality_config
        self.nu = nu

    def validate(self, df: pl.DataFrame) -> Tuple[bool, List[str]]:
        errors: List[str] = []

        if df is None or df.is_empty():
            return False, ["Sweep result is empty"]

        missing_columns = [col for col in self.REQUIRED_COLUMNS if col not in df.columns]
        if missing_columns:
            errors.append(f"Missing required columns: {', '.join(missing_columns)}")
            return False, errors

        for column_name in ("detector", "true_post", "gamma", "tau", "trial", "censored"):
            null_count = int(df[column_name].null_count())
            if null_count > 0:
                errors.append(f"Column {column_name} has {null_count} null values")

        bad_gamma = df.filter(pl.col("gamma") < 1).height
        if bad_gamma > 0:
            errors.append(f"Target ARL below 1 in {bad_gamma} rows")

        bad_tau = df.filter(pl.col("tau") < 0).height
        if bad_tau > 0:
            errors.append(f"Negative threshold in {bad_tau} rows")

        bad_stop = df.filter(pl.col("stopping_time").is_not_null() & (pl.col("stopping_time") < 1)).height
        if bad_stop > 0:
            errors.append(f"Stopping time below 1 in {bad_stop} rows")

        censored_with_stop = df.filter(pl.col("censored") & pl.col("stopping_time").is_not_null()).height
        if censored_with_stop > 0:
            errors.append(f"Censored rows carrying a stopping time: {censored_with_stop}")

        uncensored_without_stop = df.filter(~pl.col("censored") & pl.col("stopping_time").is_null()).height
        if uncensored_without_stop > 0:
            errors.append(f"Uncensored rows without a stopping time: {uncensored_without_stop}")

        expected_delay_null = pl.col("censored") | (pl.col("stopping_time") < self.nu)
        delay_mismatch = df.filter(
            pl.col("delay").is_null() != expected_delay_null.fill_null(True)
        ).height
        if delay_mismatch > 0:
            errors.append(f"Delay presence disagrees with false-alarm/censoring status in {delay_mismatch} rows")

        wrong_delay = df.filter(
            pl.col("delay").is_not_null() & (pl.col("delay") != pl.col("stopping_time") - self.nu + 1)
        ).height
        if wrong_delay > 0:
            errors.append(f"Delay differs from stopping_time - nu + 1 in {wrong_delay} rows")

        duplicated_keys = int(df.select(self.KEY_COLUMNS).is_duplicated().sum())
        if duplicated_keys > 0:
            errors.append(f"Found {duplicated_keys} duplicated (detector, true_post, gamma, trial) keys")

        max_false_alarm_rate = float(self.quality_config.get("max_false_alarm_rate", 1.0))
        rates = (
            df.group_by(["detector", "true_post", "gamma"])
            .agg((pl.col("delay").is_null() & ~pl.col("censored")).mean().alias("false_alarm_rate"))
            .filter(pl.col("false_alarm_rate") > max_false_alarm_rate)
        )
        if rates.height > 0:
            errors.append(f"False-alarm rate above {max_false_alarm_rate} in {rates.height} cells")

        if errors:
            logger.error("Sweep quality validation failed: %s", errors)
            return False, errors

        logger.info("Sweep quality validation passed")
        return True, []

    def validate_or_raise(self, df: pl.DataFrame) -> None:
        is_valid, errors = self.validate(df)
        if not is_valid:
            raise EstimationError("; ".join(errors))
