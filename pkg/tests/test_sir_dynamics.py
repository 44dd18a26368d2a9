import numpy as np
import pytest
from hypothesis import given, strategies as st

from epiforecast.data_ingest import DEFAULT_SCHEMA, dataset_to_json, parse_oxcgrt, write_oxcgrt_csv
from epiforecast.sir_dynamics import (
    SirParams,
    SirState,
    derivative,
    npi_alpha,
    random_schedule,
    simulate,
    synthesize_region,
    synthetic_dataset,
)

rates = st.floats(0.0, 2.0)
state_parts = st.tuples(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0))


def test_derivative_examples():
    assert derivative(SirState(0.9, 0.1, 0.0), SirParams(0.0, 0.0)) == (0.0, 0.0, 0.0)
    dS, dI, dR = derivative(SirState(0.99, 0.01, 0.0), SirParams(0.5, 0.1))
    assert dS == pytest.approx(-0.00495, abs=1e-15)
    assert dI == pytest.approx(0.00395, abs=1e-15)
    assert dR == pytest.approx(0.001, abs=1e-15)
    assert derivative(SirState(0.7, 0.0, 0.3), SirParams(1.3, 0.4)) == (-0.0, 0.0, 0.0)


@given(state_parts, rates, rates)
def test_derivative_sums_to_zero(parts, alpha, beta):
    d = derivative(SirState(*parts), SirParams(alpha, beta))
    assert abs(sum(d)) <= 1e-15 * max(max(abs(x) for x in d), 1e-300)


def test_params_validated():
    with pytest.raises(ValueError):
        SirParams(-0.1, 0.1)


def test_fixed_point_and_one_step():
    traj = simulate(SirState(0.6, 0.3, 0.1), SirParams(0.0, 0.0), 100)
    assert np.all(traj.S == 0.6) and np.all(traj.I == 0.3) and np.all(traj.R == 0.1)
    step = simulate(SirState(0.99, 0.01, 0.0), SirParams(0.5, 0.1), 1).state(1)
    assert step.S == pytest.approx(0.98505, abs=1e-15)
    assert step.I == pytest.approx(0.01395, abs=1e-15)
    assert step.R == pytest.approx(0.001, abs=1e-15)


@given(state_parts, rates, rates, st.sampled_from([1.0, 0.5, 0.25]), st.sampled_from(["euler", "rk4"]))
def test_simulate_conserves_population(parts, alpha, beta, dt, method):
    init = SirState(*parts)
    traj = simulate(init, SirParams(alpha, beta), 365, dt, method)
    total = traj.S + traj.I + traj.R
    assert np.all(np.abs(total - init.total) <= 1e-9 * max(init.total, 1e-300))
    assert np.all(traj.S >= 0) and np.all(traj.I >= 0) and np.all(traj.R >= 0)


@given(state_parts, st.floats(0.01, 2.0))
def test_no_removal_keeps_r_constant(parts, alpha):
    traj = simulate(SirState(*parts), SirParams(alpha, 0.0), 200)
    assert np.all(np.diff(traj.S) <= 0)
    assert np.all(traj.R == parts[2])


def test_overshoot_is_flagged():
    traj = simulate(SirState(0.5, 0.5, 0.0), SirParams(10.0, 0.0), 3)
    assert traj.clamped.any()
    assert np.all(traj.S >= 0)


def test_simulate_argument_checks():
    with pytest.raises(ValueError):
        simulate(SirState(1, 0, 0), SirParams(0, 0), 0)
    with pytest.raises(ValueError):
        simulate(SirState(1, 0, 0), SirParams(0, 0), 5, dt=0)


def test_npi_alpha_examples():
    zeros = np.zeros((5, 12), dtype=int)
    assert np.all(npi_alpha(zeros, 0.3, np.full(12, 0.9)) == 0.3)
    top = np.tile(DEFAULT_SCHEMA.max_array, (5, 1))
    assert np.allclose(npi_alpha(top, 0.3, np.full(12, 0.9)), 0.3 * 0.9 ** 12, rtol=1e-14)


def test_synthesize_region_deterministic():
    rng = np.random.default_rng(0)
    schedule = random_schedule(60, rng)
    kw = dict(base_params=SirParams(0.3, 0.1), effect=np.full(12, 0.8), population=100_000, days=60,
              noise=0.1, seed=4)
    a = synthesize_region(schedule, **kw)
    b = synthesize_region(schedule, **kw)
    assert a.same_as(b)
    assert write_oxcgrt_csv([a]) == write_oxcgrt_csv([b])


def test_synthesize_region_needs_thirty_days():
    with pytest.raises(ValueError):
        synthesize_region(np.zeros((20, 12), int), SirParams(0.3, 0.1), np.full(12, 0.9), 1000, 20)


@given(st.integers(0, 10_000), st.floats(0.15, 0.6), st.floats(0.3, 1.0))
def test_stricter_npis_never_increase_cases(seed, alpha, strength):
    days = 60
    rng = np.random.default_rng(seed)
    strict = random_schedule(days, rng)
    effect = np.full(12, strength)
    kw = dict(base_params=SirParams(alpha, 0.1), effect=effect, population=1_000_000, days=days)
    loose = synthesize_region(np.zeros((days, 12), int), **kw)
    tight = synthesize_region(strict, **kw)
    assert tight.confirmed_cases[-1] <= loose.confirmed_cases[-1]


def test_synthetic_dataset_is_valid_and_reproducible():
    a = synthetic_dataset(3, 40, seed=7)
    b = synthetic_dataset(3, 40, seed=7)
    assert dataset_to_json(a) == dataset_to_json(b)
    assert a.geo_ids() == ["C00", "C01", "C02"]
    parsed = parse_oxcgrt(write_oxcgrt_csv(a.regions.values()))
    assert parsed.geo_ids() == a.geo_ids()
    for series in a.regions.values():
        assert series.confirmed_cases[-1] > series.confirmed_cases[0]
        assert not a.culture_for(series.key).imputed
