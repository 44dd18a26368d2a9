"""Forecast scoring and the train/evaluate experiment protocol.

The score for one region is the sum over evaluation days of the absolute gap
between 7-day moving averages of actual and predicted daily cases, scaled to
cases per 100,000 people.  ``run_experiment`` trains each requested model on
a pooled training slice, rolls every region forward through the evaluation
range under its recorded NPIs, and scores the result.
"""
from __future__ import annotations

import datetime as dt
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from .data_ingest import Dataset, RegionSeries, date_slice
from .features import FeatureConfig, build_frame, build_windows
from .forecast import forecast_region
from .models import MODEL_KINDS, build_model, save_checkpoint
from .nn.training import TrainConfig, TrainingDiverged, train

logger = logging.getLogger(__name__)

PER_100K = 100_000.0
BUCKETS = (
    ("green", 0.0, 2000.0),
    ("yellow", 2000.0, 5000.0),
    ("orange", 5000.0, 8000.0),
    ("red", 8000.0, math.inf),
)
REPORT_FILES = ("daily_mean_curve.csv", "cumulative_mae.csv", "region_buckets.csv", "summary.json")


def seven_day_average(daily, history=None, window: int = 7) -> np.ndarray:
    """Trailing 7-day mean of ``daily``; the first days borrow from ``history`` when given."""
    daily = np.asarray(daily, dtype=np.float64)
    lead = np.asarray(history if history is not None else [], dtype=np.float64)[-(window - 1):] \
        if window > 1 else np.zeros(0)
    full = np.concatenate([lead, daily])
    csum = np.concatenate([[0.0], np.cumsum(full)])
    idx = np.arange(len(lead), len(full))
    lo = np.maximum(0, idx - window + 1)
    return (csum[idx + 1] - csum[lo]) / (idx + 1 - lo)


def daily_error_per_100k(predicted, actual, population, history=None) -> np.ndarray:
    predicted = np.asarray(predicted, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if predicted.shape != actual.shape:
        raise ValueError(f"predicted has {predicted.shape} days, actual {actual.shape}")
    if population <= 0:
        raise ValueError("population must be positive")
    gap = np.abs(seven_day_average(actual, history) - seven_day_average(predicted, history))
    return gap * (PER_100K / population)


def cumul_7dma_mae_per_100k(predicted, actual, population, history=None) -> float:
    """Cumulative 7-day-moving-average absolute error per 100k people.

    ``history`` holds actual daily cases from before the evaluation window;
    its last six values fill the leading averaging windows of both series.
    Without it the leading windows are shortened.
    """
    return float(daily_error_per_100k(predicted, actual, population, history).sum())


def bucket(score: float) -> str:
    if not score >= 0:
        raise ValueError(f"score must be non-negative, got {score}")
    for name, low, high in BUCKETS:
        if low <= score < high:
            return name
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    train_start: dt.date
    train_end: dt.date
    eval_start: dt.date
    eval_end: dt.date
    models: tuple[str, ...] = MODEL_KINDS
    seed: int = 0

    def __post_init__(self):
        for attr in ("train_start", "train_end", "eval_start", "eval_end"):
            value = getattr(self, attr)
            if isinstance(value, str):
                object.__setattr__(self, attr, dt.date.fromisoformat(value))
        object.__setattr__(self, "models", tuple(self.models))
        if self.train_start > self.train_end or self.eval_start > self.eval_end:
            raise ValueError("date ranges must have start <= end")
        if self.eval_start <= self.train_end:
            raise ValueError("evaluation range must start after the training range ends")
        unknown = [m for m in self.models if m not in MODEL_KINDS]
        if unknown:
            raise ValueError(f"unknown model kinds {unknown}")

    @property
    def eval_days(self) -> int:
        return (self.eval_end - self.eval_start).days + 1

    @classmethod
    def e2020(cls, models=MODEL_KINDS, seed=0):
        return cls("E2020", dt.date(2020, 1, 1), dt.date(2020, 7, 31), dt.date(2020, 8, 1), dt.date(2020, 12, 31),
                   models, seed)

    @classmethod
    def e2021(cls, models=MODEL_KINDS, seed=0):
        return cls("E2021", dt.date(2020, 1, 1), dt.date(2020, 12, 31), dt.date(2021, 1, 1), dt.date(2021, 4, 30),
                   models, seed)

    @classmethod
    def named(cls, name: str, models=MODEL_KINDS, seed=0):
        factories = {"e2020": cls.e2020, "e2021": cls.e2021}
        try:
            return factories[name.lower()](models, seed)
        except KeyError:
            raise ValueError(f"unknown experiment {name!r}; choose e2020 or e2021") from None

    def to_dict(self):
        d = asdict(self)
        for k in ("train_start", "train_end", "eval_start", "eval_end"):
            d[k] = d[k].isoformat()
        d["models"] = list(self.models)
        return d


@dataclass
class MetricReport:
    model_kind: str
    per_region: dict[str, float] = field(default_factory=dict)
    per_region_bucket: dict[str, str] = field(default_factory=dict)
    aggregate: float = math.nan
    daily_mean_curve: pd.DataFrame | None = None  # date, predicted_7dma, actual_7dma
    cumulative_mae_curve: pd.DataFrame | None = None  # date, cumulative_mae_per_100k
    countries: dict[str, bool] = field(default_factory=dict)  # geo_id -> is national
    skipped: dict[str, str] = field(default_factory=dict)
    diverged: bool = False
    training: dict = field(default_factory=dict)

    def aggregate_over(self, countries_only: bool = False) -> float:
        scores = [s for g, s in sorted(self.per_region.items()) if not countries_only or self.countries.get(g, True)]
        return float(np.mean(scores)) if scores else math.nan


def score_predictions(dataset: Dataset, predictions: dict[str, tuple[int, np.ndarray]], model_kind: str,
                      skipped: dict[str, str] | None = None) -> MetricReport:
    """Build a :class:`MetricReport` from ``geo_id -> (start_index, predicted daily cases)``."""
    report = MetricReport(model_kind, skipped=dict(skipped or {}))
    curve_rows, cumul_rows = [], []
    for geo_id in sorted(predictions):
        start, predicted = predictions[geo_id]
        series = dataset.by_geo_id(geo_id)
        horizon = len(predicted)
        daily = series.new_cases()
        actual = daily[start:start + horizon]
        if len(actual) != horizon:
            report.skipped[geo_id] = "evaluation range extends past the data"
            continue
        history = daily[max(0, start - 6):start] if start > 0 else None
        errors = daily_error_per_100k(predicted, actual, series.population, history)
        score = float(errors.sum())
        report.per_region[geo_id] = score
        report.per_region_bucket[geo_id] = bucket(score)
        report.countries[geo_id] = series.key.region_name is None
        dates = series.dates[start:start + horizon].astype(str)
        curve_rows.append(pd.DataFrame({
            "date": dates,
            "predicted_7dma": seven_day_average(predicted, history),
            "actual_7dma": seven_day_average(actual, history),
        }))
        cumul_rows.append(pd.DataFrame({"date": dates, "cumulative_mae_per_100k": np.cumsum(errors)}))
    report.aggregate = report.aggregate_over()
    if curve_rows:
        report.daily_mean_curve = pd.concat(curve_rows).groupby("date", sort=True).mean().reset_index()
        report.cumulative_mae_curve = pd.concat(cumul_rows).groupby("date", sort=True).mean().reset_index()
    return report


class ModelForecaster:
    """Adapts a trained model to the ``(series, start_index, horizon) -> daily cases`` interface."""

    def __init__(self, model, dataset: Dataset, feature_config: FeatureConfig = FeatureConfig()):
        self.model = model
        self.dataset = dataset
        self.feature_config = feature_config

    def __call__(self, series: RegionSeries, start_index: int, horizon: int) -> np.ndarray:
        result = forecast_region(self.model, series, start_index, horizon, self.dataset.culture_for(series.key),
                                 self.dataset.schema, self.feature_config)
        if result.aborted:
            raise FloatingPointError(f"rollout aborted after {len(result)} days")
        return result.predicted_new_cases


class PerfectOracle:
    """Returns the recorded daily cases; scoring it must give zero error everywhere."""

    def __call__(self, series: RegionSeries, start_index: int, horizon: int) -> np.ndarray:
        return series.new_cases()[start_index:start_index + horizon].copy()


def training_samples(dataset: Dataset, config: ExperimentConfig, target_kind: str,
                     feature_config: FeatureConfig = FeatureConfig()):
    """Pooled windows from every region's training slice.  Every target day falls inside the training range."""
    train_ds = date_slice(dataset, config.train_start, config.train_end)
    samples = []
    for key, series in train_ds.regions.items():
        frame = build_frame(series, train_ds.culture_for(key), train_ds.schema, feature_config)
        samples += build_windows(frame, feature_config.lookback, target_kind)
    latest = max((s.target_date for s in samples), default=None)
    if latest is not None and latest > np.datetime64(config.train_end, "D"):
        raise AssertionError("training window leaks past the training range")
    return samples


def _eval_start_index(series: RegionSeries, config: ExperimentConfig) -> int | None:
    start = np.datetime64(config.eval_start, "D")
    end = np.datetime64(config.eval_end, "D")
    if series.dates[0] > start or series.dates[-1] < end:
        return None
    return int((start - series.dates[0]).astype(int))


def evaluate_forecaster(dataset: Dataset, config: ExperimentConfig, forecaster, model_kind: str,
                        lookback: int = 21) -> MetricReport:
    predictions, skipped = {}, {}
    for key, series in dataset.regions.items():
        start = _eval_start_index(series, config)
        if start is None:
            skipped[key.geo_id] = "data does not cover the evaluation range"
            continue
        if start < lookback:
            skipped[key.geo_id] = f"only {start} days of history before evaluation; need {lookback}"
            continue
        try:
            predictions[key.geo_id] = (start, forecaster(series, start, config.eval_days))
        except FloatingPointError as exc:
            skipped[key.geo_id] = f"rollout failed: {exc}"
    for geo_id, reason in skipped.items():
        logger.info("%s: skipped %s (%s)", model_kind, geo_id, reason)
    return score_predictions(dataset, predictions, model_kind, skipped)


def run_experiment(dataset: Dataset, config: ExperimentConfig, train_config: TrainConfig | None = None,
                   model_hparams: dict | None = None, feature_config: FeatureConfig = FeatureConfig(),
                   forecasters: dict | None = None, checkpoint_dir=None) -> dict[str, MetricReport]:
    """Train (unless a forecaster is injected), roll forward and score each model kind.

    ``forecasters`` maps model kind -> callable and bypasses training for
    that kind.  ``model_hparams`` maps kind -> builder keyword arguments.
    """
    train_config = train_config or TrainConfig(seed=config.seed)
    model_hparams = model_hparams or {}
    forecasters = forecasters or {}
    reports = {}
    for kind in config.models:
        if kind in forecasters:
            reports[kind] = evaluate_forecaster(dataset, config, forecasters[kind], kind, feature_config.lookback)
            continue
        hp = {"lookback": feature_config.lookback, "seed": config.seed, **model_hparams.get(kind, {})}
        model = build_model(kind, **hp)
        samples = training_samples(dataset, config, model.target_kind, feature_config)
        logger.info("%s: training on %d windows", kind, len(samples))
        diverged = False
        try:
            history = train(model, samples, train_config)
        except TrainingDiverged as exc:
            logger.error("%s: %s", kind, exc)
            history, diverged = exc.history, True
        if checkpoint_dir is not None:
            os.makedirs(checkpoint_dir, exist_ok=True)
            save_checkpoint(model, os.path.join(checkpoint_dir, f"{kind}.json"), train_config, history)
            with open(os.path.join(checkpoint_dir, f"{kind}_history.csv"), "w") as f:
                f.write(history.to_csv())
        report = evaluate_forecaster(dataset, config, ModelForecaster(model, dataset, feature_config), kind,
                                     feature_config.lookback)
        report.diverged = diverged
        report.training = {
            "samples": len(samples),
            "epochs": len(history),
            "best_epoch": history.best_epoch,
            "best_val_loss": history.best_val_loss,
            "initial_val_loss": history.initial_val_loss,
            "latest_training_target": str(max(s.target_date for s in samples)),
        }
        reports[kind] = report
    return reports


def _fmt(frame: pd.DataFrame) -> str:
    return frame.to_csv(index=False, lineterminator="\n", float_format="%.17g")


def emit_report(reports, destination, experiment: ExperimentConfig | None = None) -> list[str]:
    """Write the report files (see ``REPORT_FILES``) under ``destination``.

    ``reports`` is one :class:`MetricReport` or a mapping kind -> report.
    """
    if isinstance(reports, MetricReport):
        reports = {reports.model_kind: reports}
    os.makedirs(destination, exist_ok=True)
    if not os.access(destination, os.W_OK):
        raise PermissionError(f"cannot write to {destination}")

    curves, cumul, buckets, summary = [], [], [], {}
    for kind in sorted(reports):
        rep = reports[kind]
        if rep.daily_mean_curve is not None:
            curves.append(rep.daily_mean_curve.assign(model=kind))
            cumul.append(rep.cumulative_mae_curve.assign(model=kind))
        for geo_id in sorted(rep.per_region):
            buckets.append({"model": kind, "geo_id": geo_id, "score": rep.per_region[geo_id],
                            "bucket": rep.per_region_bucket[geo_id]})
        counts = {name: 0 for name, _, _ in BUCKETS}
        for b in rep.per_region_bucket.values():
            counts[b] += 1
        summary[kind] = {
            "aggregate": None if math.isnan(rep.aggregate) else rep.aggregate,
            "aggregate_countries_only": None if math.isnan(rep.aggregate_over(True)) else rep.aggregate_over(True),
            "regions_scored": len(rep.per_region),
            "bucket_counts": counts,
            "skipped": dict(sorted(rep.skipped.items())),
            "diverged": rep.diverged,
            "training": rep.training,
        }

    curve_cols = ["model", "date", "predicted_7dma", "actual_7dma"]
    cumul_cols = ["model", "date", "cumulative_mae_per_100k"]
    daily = pd.concat(curves)[curve_cols] if curves else pd.DataFrame(columns=curve_cols)
    cumulative = pd.concat(cumul)[cumul_cols] if cumul else pd.DataFrame(columns=cumul_cols)
    region_buckets = pd.DataFrame(buckets, columns=["model", "geo_id", "score", "bucket"])

    paths = [os.path.join(destination, name) for name in REPORT_FILES]
    payload = {
        "experiment": experiment.to_dict() if experiment is not None else None,
        "models": summary,
        "diverged": any(r.diverged for r in reports.values()),
    }
    for path, text in zip(paths, (_fmt(daily), _fmt(cumulative), _fmt(region_buckets),
                                  json.dumps(payload, sort_keys=True, indent=1) + "\n")):
        with open(path, "w") as f:
            f.write(text)
    return paths


def reports_from_forecasts(dataset: Dataset, forecasts: pd.DataFrame) -> dict[str, MetricReport]:
    """Score forecast CSV rows (as written by the forecast module) against the dataset."""
    reports = {}
    for kind, by_model in forecasts.groupby("model", sort=True):
        predictions, skipped = {}, {}
        for geo_id, rows in by_model.groupby("geo_id", sort=True):
            rows = rows.sort_values("date")
            try:
                series = dataset.by_geo_id(geo_id)
            except KeyError:
                skipped[geo_id] = "region not in dataset"
                continue
            first = np.datetime64(rows["date"].iloc[0], "D")
            start = int((first - series.dates[0]).astype(int))
            if start < 0 or start >= len(series):
                skipped[geo_id] = "forecast dates outside the data"
                continue
            predictions[geo_id] = (start, rows["predicted_daily_cases"].to_numpy(dtype=np.float64))
        reports[kind] = score_predictions(dataset, predictions, kind, skipped)
    return reports
