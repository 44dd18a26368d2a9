"""Parametric SIR dynamics and a synthetic-region generator.

``derivative`` evaluates the three right-hand sides, ``simulate`` integrates
them (explicit Euler by default, RK4 optional), and ``synthesize_region``
produces an OxCGRT-shaped :class:`RegionSeries` whose transmission rate drops
as NPI stringency rises.  Used to build test fixtures and sanity oracles.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data_ingest import DEFAULT_SCHEMA, NpiSchema, RegionKey, RegionSeries

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SirParams:
    alpha: float
    beta: float

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"SIR rates must be non-negative: alpha={self.alpha}, beta={self.beta}")


@dataclass(frozen=True)
class SirState:
    S: float
    I: float
    R: float

    @property
    def total(self) -> float:
        return self.S + self.I + self.R

    def as_array(self) -> np.ndarray:
        return np.array([self.S, self.I, self.R])


def derivative(state: SirState, params: SirParams) -> tuple[float, float, float]:
    infection = params.alpha * state.S * state.I
    removal = params.beta * state.I
    return -infection, infection - removal, removal


@dataclass(frozen=True)
class Trajectory:
    S: np.ndarray
    I: np.ndarray
    R: np.ndarray
    clamped: np.ndarray  # bool per step, True when a flow had to be limited

    def __len__(self):
        return len(self.S)

    def state(self, k: int) -> SirState:
        return SirState(float(self.S[k]), float(self.I[k]), float(self.R[k]))


def _euler_flows(s, i, alpha, beta, dt):
    """Infection and removal amounts for one Euler step, limited so no
    compartment goes negative.  Moving whole flows keeps S+I+R exact."""
    infection = alpha * s * i * dt
    removal = beta * i * dt
    limited = False
    if infection > s:
        infection, limited = s, True
    if removal > i + infection:
        removal, limited = i + infection, True
    return infection, removal, limited


def _rk4_flows(s, i, alpha, beta, dt):
    def rates(s_, i_):
        return alpha * s_ * i_, beta * i_

    k1 = rates(s, i)
    k2 = rates(s - 0.5 * dt * k1[0], i + 0.5 * dt * (k1[0] - k1[1]))
    k3 = rates(s - 0.5 * dt * k2[0], i + 0.5 * dt * (k2[0] - k2[1]))
    k4 = rates(s - dt * k3[0], i + dt * (k3[0] - k3[1]))
    infection = dt / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    removal = dt / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    limited = False
    if infection > s:
        infection, limited = s, True
    if removal > i + infection:
        removal, limited = i + infection, True
    return max(infection, 0.0), max(removal, 0.0), limited


def simulate(initial: SirState, params: SirParams, steps: int, dt: float = 1.0,
             method: str = "euler", alphas=None) -> Trajectory:
    """Integrate ``steps`` steps of size ``dt``; returns ``steps + 1`` states.

    ``alphas`` optionally gives a per-step transmission rate overriding
    ``params.alpha``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    flows = {"euler": _euler_flows, "rk4": _rk4_flows}.get(method)
    if flows is None:
        raise ValueError(f"unknown integration method {method!r}")
    if alphas is None:
        alphas = np.full(steps, params.alpha)
    alphas = np.asarray(alphas, dtype=np.float64)
    if len(alphas) != steps:
        raise ValueError("alphas must have one entry per step")

    S = np.empty(steps + 1)
    I = np.empty(steps + 1)
    R = np.empty(steps + 1)
    clamped = np.zeros(steps + 1, dtype=bool)
    s, i, r = initial.S, initial.I, initial.R
    if min(s, i, r) < 0:
        raise ValueError(f"initial state must be non-negative: {initial}")
    S[0], I[0], R[0] = s, i, r
    for k in range(steps):
        infection, removal, limited = flows(s, i, alphas[k], params.beta, dt)
        s, i, r = s - infection, i + infection - removal, r + removal
        if not (np.isfinite(s) and np.isfinite(i) and np.isfinite(r)):
            raise FloatingPointError(f"SIR state became non-finite at step {k + 1}")
        S[k + 1], I[k + 1], R[k + 1] = s, i, r
        clamped[k + 1] = limited
    return Trajectory(S, I, R, clamped)


def npi_alpha(schedule, base_alpha: float, effect, schema: NpiSchema = DEFAULT_SCHEMA) -> np.ndarray:
    """Daily transmission rate ``base_alpha * prod_i effect_i ** (level_i / max_i)``."""
    schedule = np.asarray(schedule, dtype=np.float64)
    effect = np.asarray(effect, dtype=np.float64)
    if np.any(effect <= 0) or np.any(effect > 1):
        raise ValueError("NPI effect multipliers must lie in (0, 1]")
    scaled = schedule / schema.max_array
    return base_alpha * np.prod(effect ** scaled, axis=1)


def synthesize_region(schedule, base_params: SirParams, effect, population: int, days: int,
                      key: RegionKey | None = None, start_date="2020-01-01",
                      initial_infected: float = 1e-4, fatality: float = 0.01,
                      noise: float = 0.0, seed: int = 0,
                      schema: NpiSchema = DEFAULT_SCHEMA) -> RegionSeries:
    """Generate a region whose daily epidemic responds to its NPI schedule.

    Cumulative cases are everyone ever infected (``I + R`` scaled by
    population); cumulative deaths are a fixed ``fatality`` share of ``R``.
    ``noise`` is the sd of multiplicative log-normal reporting noise on daily
    increments, drawn from ``seed``.
    """
    if days < 30:
        raise ValueError("synthesize_region needs days >= 30")
    schedule = np.asarray(schedule, dtype=np.int64)
    if schedule.shape != (days, 12):
        raise ValueError(f"schedule must have shape ({days}, 12), got {schedule.shape}")
    alphas = npi_alpha(schedule, base_params.alpha, effect, schema)
    initial = SirState(1.0 - initial_infected, initial_infected, 0.0)
    traj = simulate(initial, base_params, days - 1, 1.0, alphas=alphas[:-1])

    ever = (traj.I + traj.R) * population
    removed = traj.R * population * fatality
    daily_cases = np.diff(ever, prepend=0.0)
    daily_deaths = np.diff(removed, prepend=0.0)
    if noise > 0:
        rng = np.random.default_rng(seed)
        daily_cases = daily_cases * rng.lognormal(0.0, noise, size=days)
        daily_deaths = daily_deaths * rng.lognormal(0.0, noise, size=days)
    cases = np.floor(np.cumsum(np.maximum(daily_cases, 0.0)))
    deaths = np.floor(np.cumsum(np.maximum(daily_deaths, 0.0)))
    cases = np.minimum(cases, population)
    if cases[-1] <= cases[0]:
        logger.warning("synthetic region produced no new infections")

    if key is None:
        key = RegionKey.make(f"Synthland {seed}")
    dates = np.datetime64(start_date, "D") + np.arange(days)
    return RegionSeries(key, population, dates, cases, deaths, schedule)


def random_schedule(days: int, rng: np.random.Generator, schema: NpiSchema = DEFAULT_SCHEMA,
                    mean_run: int = 21) -> np.ndarray:
    """Piecewise-constant random NPI levels, each column switching every ~``mean_run`` days."""
    out = np.zeros((days, 12), dtype=np.int64)
    for j, top in enumerate(schema.max_levels):
        t = 0
        level = int(rng.integers(0, top + 1))
        while t < days:
            run = int(rng.geometric(1.0 / mean_run))
            out[t:t + run, j] = level
            t += run
            level = int(rng.integers(0, top + 1))
    return out


def synthetic_dataset(n_regions: int = 10, days: int = 150, start_date="2020-01-01", seed: int = 0,
                      noise: float = 0.05, schema: NpiSchema = DEFAULT_SCHEMA):
    """A :class:`Dataset` of ``n_regions`` synthetic regions plus a culture table.

    Each region gets its own random schedule, base transmission rate,
    population and cultural profile; the culture nudges the NPI effect so
    the constants carry signal.
    """
    from .data_ingest import CulturalProfile, CultureTable, Dataset

    rng = np.random.default_rng(seed)
    regions = {}
    profiles = {}
    for k in range(n_regions):
        country = f"Country{k:02d}"
        key = RegionKey.make(country, geo_id=f"C{k:02d}")
        culture = rng.uniform(10, 90, size=6)
        compliance = 0.5 + 0.4 * culture[3] / 100.0
        effect = np.clip(1.0 - compliance * rng.uniform(0.05, 0.25, size=12), 0.05, 1.0)
        params = SirParams(alpha=float(rng.uniform(0.22, 0.4)), beta=float(rng.uniform(0.07, 0.12)))
        regions[key] = synthesize_region(
            random_schedule(days, rng, schema),
            params,
            effect,
            population=int(rng.integers(200_000, 5_000_000)),
            days=days,
            key=key,
            start_date=start_date,
            initial_infected=float(rng.uniform(2e-5, 2e-4)),
            noise=noise,
            seed=seed * 1000 + k,
            schema=schema,
        )
        profiles[country] = CulturalProfile(tuple(culture))
    return Dataset(schema, regions, CultureTable(profiles))
