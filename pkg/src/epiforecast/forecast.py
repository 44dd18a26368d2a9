"""Multi-day rollout of a trained model with output clipping.

Each step feeds the trailing ``lookback`` days (real history followed by the
model's own clipped predictions) back into the network.  Ratio outputs are
clipped to ``[0, 2]``; SIR fractions to ``[0, 1]`` and renormalized; the
UT-Cogn proportion to ``[0, 1]``.  Predicted ratios are turned back into
daily case counts by inverting the percent-change definition.
"""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .data_ingest import DEFAULT_SCHEMA, CulturalProfile, NpiSchema, RegionKey, RegionSeries
from .features import RATIO, RATIO_SIR, UNINFECTED, FeatureConfig, FeatureFrame, build_frame

logger = logging.getLogger(__name__)

RATIO_CLIP = (0.0, 2.0)

FORECAST_CSV_COLUMNS = ("date", "geo_id", "model", "predicted_ratio", "predicted_daily_cases",
                        "cumulative_predicted_cases", "flags")


@dataclass(frozen=True)
class ForecastRequest:
    region: RegionKey
    horizon: int
    npi_schedule: np.ndarray  # (horizon, 12) raw NPI levels
    start: np.datetime64 | None = None
    checkpoint: str | None = None

    def __post_init__(self):
        schedule = np.asarray(self.npi_schedule)
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if schedule.shape != (self.horizon, 12):
            raise ValueError(f"npi_schedule must have shape ({self.horizon}, 12), got {schedule.shape}")
        object.__setattr__(self, "npi_schedule", schedule)


@dataclass
class ForecastResult:
    key: RegionKey
    model_kind: str
    dates: np.ndarray
    predicted: np.ndarray  # r-hat, or z-hat for UT-Cogn
    predicted_new_cases: np.ndarray
    predicted_a: np.ndarray
    cumulative_cases: np.ndarray
    fractions: np.ndarray | None = None  # (horizon, 3) for the CultD-SIR models
    flags: list[list[str]] = field(default_factory=list)
    aborted: bool = False

    def __len__(self):
        return len(self.dates)


def ratio_to_cases(a_t: float, ratio: float, population: float) -> tuple[float, float]:
    """Invert ``r = (a' - a) / a``: returns ``(a', new_cases)`` with ``a' <= 1``."""
    a_next = min(1.0, a_t * (1.0 + ratio))
    return a_next, max(0.0, population * (a_next - a_t))


def z_to_cases(z_hat: float, cumulative: float, population: float) -> float:
    """New cases from the predicted share of the not-yet-infected population."""
    remaining = max(0.0, population - cumulative)
    return float(min(max(z_hat, 0.0) * remaining, remaining))


def _clip(value, low, high, flags, tag):
    if value < low or value > high:
        flags.append(tag)
        return float(min(max(value, low), high))
    return float(value)


def roll_forward(model, history: FeatureFrame, request: ForecastRequest) -> ForecastResult:
    lookback = model.lookback
    n = len(history)
    if n < lookback:
        raise ValueError(f"{history.key.geo_id}: history has {n} days, model needs {lookback}")
    start = history.dates[-1] + np.timedelta64(1, "D")
    if request.start is not None and np.datetime64(request.start, "D") != start:
        raise ValueError(f"forecast must start the day after history ({start}), got {request.start}")
    horizon = request.horizon
    kind = model.target_kind

    schedule = np.asarray(request.npi_schedule, dtype=np.float64) / np.asarray(history.npi_max, dtype=np.float64)
    actions = np.concatenate([history.npi_norm, schedule], axis=0)
    context = list(history.context(kind)[-lookback:])
    constants = history.culture_norm[None]
    P = float(history.population)

    a = float(history.a[-1])
    cumulative = a * P
    fractions = np.array([history.S_p[-1], history.I_p[-1], history.R_p[-1]])

    predicted, new_cases, a_path, cum_path, frac_path, flags = [], [], [], [], [], []
    aborted = False
    for k in range(horizon):
        day_flags: list[str] = []
        window = np.asarray(context[-lookback:])[None]
        action = actions[n + k - lookback:n + k][None]
        try:
            raw = model.predict(window, action, constants)[0]
        except FloatingPointError:
            raw = np.array([np.nan])
        if not np.all(np.isfinite(raw)):
            logger.warning("%s: non-finite model output on day %d; stopping rollout", history.key.geo_id, k)
            aborted = True
            break

        if kind == UNINFECTED:
            value = _clip(raw[0], 0.0, 1.0, day_flags, "clipped_z")
            new = z_to_cases(value, cumulative, P)
            cumulative = cumulative + new
            a = cumulative / P
            row = [value]
        else:
            value = _clip(raw[0], *RATIO_CLIP, day_flags, "clipped_ratio")
            a_next, new = ratio_to_cases(a, value, P)
            if a_next >= 1.0 and a * (1.0 + value) > 1.0:
                day_flags.append("saturated")
            a = a_next
            cumulative = a * P
            row = [value]
            if kind == RATIO_SIR:
                frac = np.clip(raw[1:4], 0.0, 1.0)
                if np.any(frac != raw[1:4]):
                    day_flags.append("clipped_fraction")
                total = frac.sum()
                if total > 0:
                    fractions = frac / total
                else:
                    day_flags.append("degenerate_fraction")
                row += list(fractions)
                frac_path.append(fractions.copy())

        assert (0.0 <= value <= 2.0) and new >= 0.0
        if kind == RATIO_SIR:
            assert np.all((fractions >= 0) & (fractions <= 1)) and abs(fractions.sum() - 1.0) <= 1e-9
        predicted.append(value)
        new_cases.append(new)
        a_path.append(a)
        cum_path.append(cumulative)
        flags.append(day_flags)
        context.append(np.asarray(row))

    done = len(predicted)
    return ForecastResult(
        key=history.key,
        model_kind=model.kind,
        dates=start + np.arange(done),
        predicted=np.asarray(predicted),
        predicted_new_cases=np.asarray(new_cases),
        predicted_a=np.asarray(a_path),
        cumulative_cases=np.asarray(cum_path),
        fractions=np.asarray(frac_path).reshape(-1, 3) if kind == RATIO_SIR else None,
        flags=flags,
        aborted=aborted,
    )


def forecast_region(model, series: RegionSeries, start_index: int, horizon: int,
                    culture: CulturalProfile | None = None, schema: NpiSchema = DEFAULT_SCHEMA,
                    feature_config: FeatureConfig = FeatureConfig(), npi_schedule=None) -> ForecastResult:
    """Forecast ``horizon`` days from ``series.dates[start_index]`` using only earlier days as history.

    The NPI schedule defaults to the recorded levels where the series covers
    the horizon, holding the last known level beyond that.
    """
    if start_index < 1 or start_index > len(series):
        raise ValueError(f"start_index {start_index} outside history of {len(series)} days")
    history = build_frame(series.slice(0, start_index), culture, schema, feature_config)
    if npi_schedule is None:
        known = series.npi[start_index:start_index + horizon]
        pad = np.repeat(series.npi[start_index - 1:start_index] if len(known) == 0 else known[-1:],
                        horizon - len(known), axis=0)
        npi_schedule = np.concatenate([known, pad], axis=0) if len(pad) else known
    request = ForecastRequest(series.key, horizon, npi_schedule)
    return roll_forward(model, history, request)


def forecast_to_frame(results) -> pd.DataFrame:
    rows = []
    for res in results:
        for k in range(len(res)):
            rows.append({
                "date": str(res.dates[k]),
                "geo_id": res.key.geo_id,
                "model": res.model_kind,
                "predicted_ratio": float(res.predicted[k]),
                "predicted_daily_cases": float(res.predicted_new_cases[k]),
                "cumulative_predicted_cases": float(res.cumulative_cases[k]),
                "flags": ";".join(res.flags[k]),
            })
    return pd.DataFrame(rows, columns=list(FORECAST_CSV_COLUMNS))


def forecast_to_csv(results) -> str:
    return forecast_to_frame(results).to_csv(index=False, lineterminator="\n", float_format="%.17g")


def read_forecast_csv(raw) -> pd.DataFrame:
    """Parse a forecast CSV; columns are checked against :data:`FORECAST_CSV_COLUMNS`."""
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8")
    frame = pd.read_csv(io.StringIO(raw), dtype={"geo_id": str, "model": str, "flags": str},
                        keep_default_na=False, float_precision="round_trip")
    missing = [c for c in FORECAST_CSV_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"forecast CSV lacks columns {missing}")
    return frame
