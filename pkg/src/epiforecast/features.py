"""Engineered model inputs built from a :class:`RegionSeries`.

Per region we derive the smoothed infected proportion ``a``, its day-over-day
percent change ``r`` (the "infection ratio"), SIR compartments reconstructed
from daily counts and their population fractions, the uninfected-population
infection proportion ``z`` used by the UT-Cogn model, and scaled NPI/culture
vectors.  :func:`build_windows` cuts a frame into fixed-length samples.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import pandas as pd

from .data_ingest import DEFAULT_SCHEMA, CulturalProfile, NpiSchema, RegionKey, RegionSeries

logger = logging.getLogger(__name__)

RATIO = "ratio"
RATIO_SIR = "ratio+sir"
UNINFECTED = "uninfected"
TARGET_KINDS = (RATIO, RATIO_SIR, UNINFECTED)


@dataclass(frozen=True)
class FeatureConfig:
    lookback: int = 21
    recovery_days: float = 14.0
    smoothing_window: int = 7
    normalize_npi: bool = True
    culture_scale: float = 100.0

    def __post_init__(self):
        if self.lookback < 1:
            raise ValueError("lookback must be >= 1")
        if self.recovery_days < 1:
            raise ValueError("recovery_days must be >= 1")
        if self.smoothing_window < 1:
            raise ValueError("smoothing_window must be >= 1")


def infected_proportion(cases, population) -> np.ndarray:
    if population <= 0:
        raise ValueError(f"population must be positive, got {population}")
    a = np.asarray(cases, dtype=np.float64) / float(population)
    if np.any(a > 1.0):
        logger.warning("cumulative cases exceed population on %d days; clamping to 1", int(np.sum(a > 1.0)))
        a = np.minimum(a, 1.0)
    return a


def moving_average_7(series, window: int = 7) -> np.ndarray:
    """Trailing mean over ``series[max(0, t-window+1) .. t]``."""
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0:
        raise ValueError("moving_average_7 needs at least one value")
    return pd.Series(x).rolling(window, min_periods=1).mean().to_numpy()


def percent_change(a) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(r, jump_from_zero)``.

    ``r[t+1] = (a[t+1] - a[t]) / a[t]``; ``r[0] = 0`` and ``r[t+1] = 0``
    wherever ``a[t] == 0``.  The boolean mask flags days where ``a`` left zero,
    since the growth there is undefined rather than genuinely zero.
    """
    a = np.asarray(a, dtype=np.float64)
    r = np.zeros_like(a)
    prev, nxt = a[:-1], a[1:]
    safe = prev > 0
    r[1:][safe] = (nxt[safe] - prev[safe]) / prev[safe]
    jump = np.zeros(a.shape, dtype=bool)
    jump[1:] = (~safe) & (nxt > 0)
    return r, jump


class SirColumns(NamedTuple):
    S: np.ndarray
    I: np.ndarray
    R: np.ndarray
    clamped: np.ndarray  # bool per day


def sir_recursion(new_cases, new_deaths, population, recovery_days=14.0,
                  initial_infected=0.0) -> SirColumns:
    """Reconstruct S, I, R from daily counts.

    ``S[0] = P``, ``I[0] = initial_infected``; then
    ``S[t] = S[t-1] - new_cases[t]``,
    ``I[t] = I[t-1] - I[t-1]/d + new_cases[t] - new_deaths[t]`` and
    ``R[t] = P - S[t] - I[t]``.  ``R`` is "removed" (recovered or dead).
    Negative values are clamped to 0 and flagged.
    """
    if population <= 0:
        raise ValueError(f"population must be positive, got {population}")
    if recovery_days < 1:
        raise ValueError("recovery_days must be >= 1")
    new_cases = np.asarray(new_cases, dtype=np.float64)
    new_deaths = np.asarray(new_deaths, dtype=np.float64)
    n = len(new_cases)
    P = float(population)
    S = np.empty(n)
    I = np.empty(n)
    R = np.empty(n)
    clamped = np.zeros(n, dtype=bool)
    s, i = P, float(initial_infected)
    for t in range(n):
        if t > 0:
            s = s - new_cases[t]
            i = i - i / recovery_days + new_cases[t] - new_deaths[t]
        r = P - s - i
        if s < 0 or i < 0 or r < 0:
            clamped[t] = True
            s, i, r = max(s, 0.0), max(i, 0.0), max(r, 0.0)
        S[t], I[t], R[t] = s, i, r
    return SirColumns(S, I, R, clamped)


def sir_columns(series: RegionSeries, recovery_days=14.0) -> SirColumns:
    return sir_recursion(series.new_cases(), series.new_deaths(), series.population, recovery_days)


def fractions(S, I, R, population) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Compartment fractions, renormalized to sum to exactly one per day."""
    counts = np.stack([np.asarray(c, dtype=np.float64) for c in (S, I, R)], axis=-1) / float(population)
    total = counts.sum(axis=-1, keepdims=True)
    counts = np.where(total > 0, counts / np.where(total > 0, total, 1.0), np.array([1.0, 0.0, 0.0]))
    return counts[..., 0], counts[..., 1], counts[..., 2]


def normalize_npi(npi, schema: NpiSchema = DEFAULT_SCHEMA) -> np.ndarray:
    npi = np.asarray(npi)
    max_levels = schema.max_array
    if np.any(npi < 0) or np.any(npi > max_levels):
        raise ValueError(f"NPI level outside [0, max]: {npi} vs {schema.max_levels}")
    return npi.astype(np.float64) / max_levels


def uninfected_target(series: RegionSeries, window: int = 7) -> np.ndarray:
    """New infections over the currently uninfected population (smoothed).

    ``z[t] = MA(new_cases)[t] / (P - MA(cases)[t-1])``, ``z[0] = 0``.
    """
    P = float(series.population)
    smoothed_new = moving_average_7(series.new_cases(), window)
    smoothed_cum = moving_average_7(series.confirmed_cases, window)
    z = np.zeros(len(series))
    remaining = P - smoothed_cum[:-1]
    ok = remaining > 0
    z[1:][ok] = smoothed_new[1:][ok] / remaining[ok]
    return np.clip(z, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class FeatureFrame:
    key: RegionKey
    population: int
    dates: np.ndarray
    a: np.ndarray
    r: np.ndarray
    S: np.ndarray
    I: np.ndarray
    R: np.ndarray
    S_p: np.ndarray
    I_p: np.ndarray
    R_p: np.ndarray
    npi_norm: np.ndarray  # (days, 12)
    culture_norm: np.ndarray  # (6,)
    z: np.ndarray
    npi_max: tuple[int, ...] = DEFAULT_SCHEMA.max_levels  # divisor that maps raw levels to npi_norm
    anomalies: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.dates)

    def context(self, target_kind: str) -> np.ndarray:
        if target_kind == RATIO:
            return self.r[:, None]
        if target_kind == RATIO_SIR:
            return np.stack([self.r, self.S_p, self.I_p, self.R_p], axis=1)
        if target_kind == UNINFECTED:
            return self.z[:, None]
        raise ValueError(f"unknown target kind {target_kind!r}")


def build_frame(series: RegionSeries, culture: CulturalProfile | None = None,
                schema: NpiSchema = DEFAULT_SCHEMA, config: FeatureConfig = FeatureConfig()) -> FeatureFrame:
    a = moving_average_7(infected_proportion(series.confirmed_cases, series.population), config.smoothing_window)
    r, jumps = percent_change(a)
    sir = sir_columns(series, config.recovery_days)
    S_p, I_p, R_p = fractions(sir.S, sir.I, sir.R, series.population)
    if config.normalize_npi:
        npi = normalize_npi(series.npi, schema)
    else:
        npi = series.npi.astype(np.float64)
    if culture is None:
        culture_norm = np.zeros(6)
    else:
        culture_norm = culture.as_array() / config.culture_scale
    return FeatureFrame(
        key=series.key,
        population=series.population,
        dates=series.dates,
        a=a,
        r=r,
        S=sir.S,
        I=sir.I,
        R=sir.R,
        S_p=S_p,
        I_p=I_p,
        R_p=R_p,
        npi_norm=npi,
        culture_norm=culture_norm,
        z=uninfected_target(series, config.smoothing_window),
        npi_max=schema.max_levels if config.normalize_npi else (1,) * 12,
        anomalies={
            "ratio_jump_from_zero": int(jumps.sum()),
            "sir_clamped": int(sir.clamped.sum()),
            "culture_imputed": bool(culture is not None and culture.imputed),
        },
    )


@dataclass(frozen=True, eq=False)
class WindowSample:
    context: np.ndarray  # (T, C)
    action: np.ndarray  # (T, 12)
    constants: np.ndarray  # (6,)
    target: np.ndarray  # (O,)
    geo_id: str = ""
    target_index: int = -1
    target_date: np.datetime64 | None = None


def _target(frame: FeatureFrame, target_kind: str, t: int) -> np.ndarray:
    if target_kind == RATIO:
        return np.array([frame.r[t]])
    if target_kind == RATIO_SIR:
        return np.array([frame.r[t], frame.S_p[t], frame.I_p[t], frame.R_p[t]])
    return np.array([frame.z[t]])


def build_windows(frame: FeatureFrame, lookback: int = 21, target_kind: str = RATIO) -> list[WindowSample]:
    """One sample per target day ``t >= lookback``; inputs are days ``t-lookback .. t-1``."""
    if target_kind not in TARGET_KINDS:
        raise ValueError(f"unknown target kind {target_kind!r}; expected one of {TARGET_KINDS}")
    n = len(frame)
    if n < lookback + 1:
        logger.warning("%s: %d days is shorter than lookback+1=%d; no windows", frame.key.geo_id, n, lookback + 1)
        return []
    context = frame.context(target_kind)
    samples = []
    for t in range(lookback, n):
        sample = WindowSample(
            context=context[t - lookback:t].copy(),
            action=frame.npi_norm[t - lookback:t].copy(),
            constants=frame.culture_norm.copy(),
            target=_target(frame, target_kind, t),
            geo_id=frame.key.geo_id,
            target_index=t,
            target_date=frame.dates[t],
        )
        if not (np.all(np.isfinite(sample.context)) and np.all(np.isfinite(sample.action))
                and np.all(np.isfinite(sample.target))):
            raise ValueError(f"{frame.key.geo_id}: non-finite window ending {frame.dates[t]}")
        samples.append(sample)
    return samples


def stack_samples(samples: list[WindowSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Batch arrays ``(context[N,T,C], action[N,T,12], constants[N,6], target[N,O])``."""
    return (
        np.stack([s.context for s in samples]),
        np.stack([s.action for s in samples]),
        np.stack([s.constants for s in samples]),
        np.stack([s.target for s in samples]),
    )


FRAME_CSV_COLUMNS = ("date", "geo_id", "a", "r", "S", "I", "R", "S_p", "I_p", "R_p", "z")


def frame_to_csv(frame: FeatureFrame) -> str:
    """Debug dump: one row per day, columns above plus ``npi_0..npi_11``."""
    out = pd.DataFrame({
        "date": frame.dates.astype(str),
        "geo_id": frame.key.geo_id,
        "a": frame.a, "r": frame.r,
        "S": frame.S, "I": frame.I, "R": frame.R,
        "S_p": frame.S_p, "I_p": frame.I_p, "R_p": frame.R_p,
        "z": frame.z,
    })
    for i in range(frame.npi_norm.shape[1]):
        out[f"npi_{i}"] = frame.npi_norm[:, i]
    return out.to_csv(index=False, lineterminator="\n", float_format="%.17g")
