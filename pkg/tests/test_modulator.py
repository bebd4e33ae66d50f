import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import jv

from qsim.errors import ParameterError, SamplingError
from qsim.modulator import (ModulatorConfig, SidebandLadder, bessel_j, carrier_null_index,
                            compose, identity_ladder, lorentzian, sideband_amplitudes,
                            spectrum_trace, truncation_order)


@pytest.mark.parametrize("n", [0, 1, 2, 5, 10, 30, -1, -3])
@pytest.mark.parametrize("beta", [0.0, 1e-6, 0.5, math.pi / 3, 2.404825557695773, 7.5, 12.0,
                                  25.0, 80.0])
def test_bessel_against_scipy(n, beta):
    assert bessel_j(n, beta) == pytest.approx(jv(n, beta), abs=1e-13, rel=1e-10)


@settings(max_examples=60, deadline=None)
@given(beta=st.floats(0, 40))
def test_bessel_sum_rule(beta):
    n_max = int(beta) + 40
    total = sum(bessel_j(n, beta) ** 2 for n in range(-n_max, n_max + 1))
    assert total == pytest.approx(1.0, abs=1e-12)


def test_bessel_input_checks():
    with pytest.raises(ParameterError):
        bessel_j(0, -1.0)
    with pytest.raises(ParameterError):
        bessel_j(5000, 1.0)


def test_config_validation():
    with pytest.raises(ParameterError):
        ModulatorConfig(-0.1, 5e9)
    with pytest.raises(ParameterError):
        ModulatorConfig(1.0, 0.0)
    with pytest.raises(ParameterError):
        ModulatorConfig(1.0, 5e9, 2 * math.pi)


@pytest.mark.parametrize("beta", [0.1, 1.0, 3.0, 10.0])
@pytest.mark.parametrize("eps", [1e-3, 1e-9, 1e-14])
def test_truncation_is_minimal(beta, eps):
    n = truncation_order(beta, eps)
    kept = lambda m: sum(jv(k, beta) ** 2 for k in range(-m, m + 1))  # noqa: E731
    assert 1.0 - kept(n) <= eps * (1 + 1e-6) + 1e-15
    if n > 0:
        tail = 2 * sum(jv(k, beta) ** 2 for k in range(n, n + 200))
        assert tail > eps


def test_ladder_amplitudes_and_phase():
    ladder = sideband_amplitudes(ModulatorConfig(1.0, 5e9, 0.0), center=1e14)
    assert ladder.norm() == pytest.approx(1.0, abs=1e-9)
    assert ladder.amplitude(1) == pytest.approx(jv(1, 1.0) * np.exp(-1j * math.pi / 2))
    assert ladder.amplitude(ladder.order + 1) == 0
    assert ladder.frequencies()[ladder.order + 1] == pytest.approx(1e14 + 5e9)
    assert abs(ladder.amplitude(-1)) == pytest.approx(abs(ladder.amplitude(1)))


def test_zero_index_is_identity():
    ladder = sideband_amplitudes(ModulatorConfig(0.0, 5e9))
    assert ladder.order == 0 and ladder.amplitude(0) == 1


def test_cascade_adds_indices():
    # dropped amplitudes are ~sqrt(epsilon), so truncate far below the tolerance
    a = sideband_amplitudes(ModulatorConfig(0.7, 5e9, 0.3), epsilon=1e-26)
    b = sideband_amplitudes(ModulatorConfig(0.9, 5e9, 0.3), epsilon=1e-26)
    both = sideband_amplitudes(ModulatorConfig(1.6, 5e9, 0.3), epsilon=1e-26)
    c = compose(a, b)
    for n in range(-both.order, both.order + 1):
        assert c.amplitude(n) == pytest.approx(both.amplitude(n), abs=1e-12)


def test_opposite_phase_undoes_modulation():
    a = sideband_amplitudes(ModulatorConfig(1.2, 5e9, 0.0), epsilon=1e-26)
    b = sideband_amplitudes(ModulatorConfig(1.2, 5e9, math.pi), epsilon=1e-26)
    c = compose(a, b)
    assert abs(c.amplitude(0)) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ParameterError):
        compose(a, sideband_amplitudes(ModulatorConfig(1.2, 6e9)))


def test_overlap_matches_by_frequency():
    lad = sideband_amplitudes(ModulatorConfig(1.0, 5e9))
    assert abs(lad.overlap(lad)) == pytest.approx(lad.norm())
    shifted = SidebandLadder(5e9, 5e9, lad.amplitudes)
    expected = sum(np.conj(lad.amplitude(n)) * lad.amplitude(n - 1)
                   for n in range(-lad.order, lad.order + 1))
    assert lad.overlap(shifted) == pytest.approx(expected)
    assert identity_ladder().overlap(identity_ladder(1.0)) == 0


def test_carrier_null():
    assert carrier_null_index(1e-13) == pytest.approx(2.404825557695773, abs=1e-11)
    assert bessel_j(0, carrier_null_index()) ** 2 < 1e-16


def test_lorentzian_unit_area():
    f = np.linspace(-1e4, 1e4, 2_000_001)
    assert np.trapezoid(lorentzian(f, 1.0), f) == pytest.approx(1.0, abs=1e-4)
    assert lorentzian(0.0, 2.0) == pytest.approx(1 / math.pi)


def test_spectrum_trace_shape_and_ratio():
    ladder = sideband_amplitudes(ModulatorConfig(math.pi / 3, 5e9))
    tr = spectrum_trace(ladder, 400e6)
    peak = lambda f: tr.intensities[np.argmin(np.abs(tr.offsets - f))]  # noqa: E731
    assert peak(0) / peak(5e9) == pytest.approx(jv(0, math.pi / 3) ** 2 / jv(1, math.pi / 3) ** 2,
                                               rel=0.02)
    assert tr.line_width == pytest.approx(500e6)
    assert tr.scan_integral() == pytest.approx(1.0, abs=0.02)
    assert tr.integral() == pytest.approx(ladder.norm())
    assert tr.to_csv().splitlines()[0] == "offset_hz,intensity"


def test_spectrum_trace_checks():
    ladder = sideband_amplitudes(ModulatorConfig(1.0, 5e9))
    with pytest.raises(SamplingError):
        spectrum_trace(ladder, 400e6, scan=np.arange(-3e10, 3e10, 2e8))
    with pytest.raises(ParameterError):
        spectrum_trace(ladder, 400e6, scan=np.arange(-1e9, 1e9, 1e7))
    with pytest.raises(ParameterError):
        spectrum_trace(ladder, 0.0)
