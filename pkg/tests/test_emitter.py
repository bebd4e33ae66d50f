import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from qsim.emitter import (EmitterParams, TimeTagStream, WaitingTimeSampler, duration_for_photons,
                          g2_analytic, oracle_bloch_g2, sample_emissions, strictly_increasing)
from qsim.errors import NumericalError, ParameterError

IDEAL = EmitterParams.from_lifetime(745e-12)


def scipy_bloch_g2(params, taus):
    """Independent oracle: adaptive RK45 on (p_e, coherence) from the ground state."""
    o, g2, g = params.rabi_frequency, params.decay_rate, params.dephasing_rate

    def rhs(_t, y):
        pe, q = y
        return [-g2 * pe + o * q, -g * q + 0.5 * o * (1.0 - 2.0 * pe)]

    sol = solve_ivp(rhs, (0.0, taus[-1]), [0.0, 0.0], t_eval=taus, rtol=1e-11, atol=1e-14,
                    method="DOP853")
    return sol.y[0] / params.steady_state_population()


def test_params_validation():
    with pytest.raises(ParameterError):
        EmitterParams(1.0, 0.0, 1.0)
    with pytest.raises(ParameterError):
        EmitterParams(-1.0, 1.0, 1.0)
    with pytest.raises(ParameterError):
        EmitterParams(1.0, 1.0, float("nan"))


def test_unit_conversions():
    p = EmitterParams.from_hz(1e9, 2e8, 3e8)
    assert p.decay_rate == pytest.approx(2 * math.pi * 2e8)
    assert p.to_hz() == pytest.approx((1e9, 2e8, 3e8))
    assert IDEAL.lifetime() == pytest.approx(745e-12)


def test_steady_state_and_rate():
    assert IDEAL.steady_state_population() == pytest.approx(0.25)
    assert IDEAL.emission_rate() == pytest.approx(0.25 / 745e-12)
    # strong drive saturates at one half
    strong = EmitterParams.from_lifetime(1e-9, rabi_ratio=1e3)
    assert strong.steady_state_population() == pytest.approx(0.5, rel=1e-5)


@pytest.mark.parametrize("rates", [(1.0, 1.0, 1.0), (3.0, 1.0, 0.5), (0.2, 1.0, 2.0),
                                   (2.0, 1.0, 3.0), (0.6, 1.0, 2.2)])
def test_analytic_matches_independent_ode(rates):
    p = EmitterParams(*(r * 1e9 for r in rates))
    tau = np.linspace(0.0, 8e-9, 160)
    ref = scipy_bloch_g2(p, tau)
    assert np.max(np.abs(g2_analytic(p, tau) - ref)) < 1e-7
    assert np.max(np.abs(oracle_bloch_g2(p, tau) - ref)) < 1e-7


def test_g2_basic_shape():
    assert g2_analytic(IDEAL, 0.0) == pytest.approx(0.0, abs=1e-15)
    assert g2_analytic(IDEAL, 50e-9) == pytest.approx(1.0, abs=1e-12)
    tau = np.linspace(-5e-9, 5e-9, 101)
    assert np.allclose(g2_analytic(IDEAL, tau), g2_analytic(IDEAL, -tau))
    assert np.all(g2_analytic(IDEAL, tau) >= 0)


def test_g2_continuous_across_critical_damping():
    decay, dephasing = 1e9, 3e9
    critical = abs(dephasing - decay) / 2
    tau = np.linspace(0, 5e-9, 50)
    below = g2_analytic(EmitterParams(critical * (1 - 1e-9), decay, dephasing), tau)
    at = g2_analytic(EmitterParams(critical, decay, dephasing), tau)
    above = g2_analytic(EmitterParams(critical * (1 + 1e-9), decay, dephasing), tau)
    assert np.max(np.abs(below - at)) < 1e-7
    assert np.max(np.abs(above - at)) < 1e-7


def test_strong_drive_shows_rabi_oscillation():
    p = EmitterParams.from_lifetime(745e-12, rabi_ratio=5.0, dephasing_ratio=0.5)
    tau = np.linspace(0, 3e-9, 400)
    assert g2_analytic(p, tau).max() > 1.2


def test_g2_depends_only_on_envelope_and_mu():
    # the normalized curve cannot tell decay and dephasing apart
    a = EmitterParams(2e9, 1e9, 3e9)
    b = EmitterParams(2e9, 3e9, 1e9)
    tau = np.linspace(0, 6e-9, 100)
    assert np.max(np.abs(g2_analytic(a, tau) - g2_analytic(b, tau))) < 1e-14
    assert np.max(np.abs(oracle_bloch_g2(a, tau) - oracle_bloch_g2(b, tau))) < 1e-9


@settings(max_examples=40, deadline=None)
@given(rabi=st.floats(0.05, 10), decay=st.floats(0.1, 5), dephasing=st.floats(0.0, 10),
       tau=st.floats(0.0, 20))
def test_g2_finite_and_nonnegative(rabi, decay, dephasing, tau):
    p = EmitterParams(rabi * 1e9, decay * 1e9, dephasing * 1e9)
    v = g2_analytic(p, tau * 1e-9)
    assert math.isfinite(v) and v >= 0


def test_oracle_input_checks():
    with pytest.raises(ParameterError):
        oracle_bloch_g2(IDEAL, [1e-9, 0.0])
    with pytest.raises(NumericalError):
        oracle_bloch_g2(EmitterParams(0.0, 1e9, 1e9), [0.0, 1e-9])


def test_timetag_stream_invariants():
    s = TimeTagStream(3, [1, 5, 9], 10)
    assert len(s) == 3
    assert s.rate == pytest.approx(3 / 10e-12)
    with pytest.raises(ValueError):
        s.timestamps[0] = 2
    with pytest.raises(ParameterError):
        TimeTagStream(0, [1, 1], 10)
    with pytest.raises(ParameterError):
        TimeTagStream(0, [1, 20], 10)
    with pytest.raises(ParameterError):
        TimeTagStream(256, [], 10)


def test_strictly_increasing_removes_ties():
    out = strictly_increasing(np.array([0, 0, 0, 5, 5, 9]))
    assert list(out) == [0, 1, 2, 5, 6, 9]


def test_sampler_rejects_unphysical_dephasing():
    with pytest.raises(ParameterError):
        WaitingTimeSampler(EmitterParams(1e9, 1e9, 0.2e9))


def test_waiting_times_have_the_emission_rate(rng):
    sampler = WaitingTimeSampler(IDEAL)
    waits = sampler.sample(rng, 400_000)
    assert np.mean(waits) == pytest.approx(1.0 / IDEAL.emission_rate(), rel=0.01)
    # renewal process: the first photon after a jump never comes instantly
    assert np.mean(waits < 20e-12) < 1e-3


def test_sample_emissions_deterministic_and_rate():
    duration = duration_for_photons(IDEAL, 200_000)
    a = sample_emissions(IDEAL, duration, 11)
    b = sample_emissions(IDEAL, duration, 11)
    assert np.array_equal(a.timestamps, b.timestamps)
    assert len(a) == pytest.approx(200_000, rel=0.01)
    seg = sample_emissions(IDEAL, duration, 11, segments=4)
    assert len(seg) == pytest.approx(200_000, rel=0.01)
    assert np.all(np.diff(seg.timestamps) > 0)


def test_sample_emissions_edge_cases():
    assert len(sample_emissions(IDEAL, 0, 1)) == 0
    assert len(sample_emissions(EmitterParams(0.0, 1e9, 1e9), 10_000, 1)) == 0
    with pytest.raises(ParameterError):
        sample_emissions(IDEAL, -1, 1)
