"""Sinusoidal electro-optic phase modulation of a single-frequency photon.

A photon in mode ``w0`` leaves the modulator in the superposition
``sum_n J_n(beta) exp(i n (theta - pi/2)) |w0 + n Omega>``. Ladders are
truncated symmetric at ``|n| <= N`` with ``N`` chosen so the dropped
probability is below ``epsilon``.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._util import atomic_write, bisect
from .errors import ParameterError, SamplingError

SERIES_LIMIT = 12.0
MAX_ORDER = 1000
DEFAULT_EPSILON = 1e-9
DEFAULT_ETALON_LINEWIDTH = 100e6


def _bessel_series(n: int, beta: float) -> float:
    # sum_k (-1)^k (beta/2)^(2k+n) / (k! (k+n)!)
    half = beta / 2.0
    if half == 0.0:
        return 1.0 if n == 0 else 0.0
    log_first = n * math.log(half) - math.lgamma(n + 1)
    if log_first < -745.0:
        return 0.0
    term = math.exp(log_first)
    terms = [term]
    largest = abs(term)
    x2 = half * half
    k = 0
    while k < 500:
        k += 1
        term *= -x2 / (k * (k + n))
        terms.append(term)
        largest = max(largest, abs(term))
        if k > half and abs(term) < 1e-20 * largest:
            break
    return math.fsum(terms)


def _bessel_miller(n: int, beta: float) -> float:
    # downward recurrence from well above max(n, beta), normalized with
    # J0 + 2 * sum J_2k = 1
    top = max(n, int(beta)) + 20 + int(math.sqrt(40.0 * max(n, beta)))
    top += top % 2
    j_next, j_cur = 0.0, 1e-300
    norm = 0.0
    target = 0.0
    for k in range(top, 0, -1):
        j_prev = 2.0 * k / beta * j_cur - j_next
        j_next, j_cur = j_cur, j_prev
        if abs(j_cur) > 1e250:
            j_next *= 1e-250
            j_cur *= 1e-250
            norm *= 1e-250
            target *= 1e-250
        if k - 1 == n:
            target = j_cur
        if (k - 1) % 2 == 0 and k - 1 > 0:
            norm += 2.0 * j_cur
    norm += j_cur
    if n == 0:
        target = j_cur
    return target / norm


def bessel_j(order: int, beta: float) -> float:
    """Bessel function of the first kind ``J_order(beta)`` for ``beta >= 0``."""
    n = int(order)
    if beta < 0 or not math.isfinite(beta):
        raise ParameterError(f"beta must be finite and >= 0, got {beta!r}")
    if abs(n) > MAX_ORDER:
        raise ParameterError(f"|order| must be <= {MAX_ORDER}")
    sign = -1.0 if (n < 0 and n % 2) else 1.0
    n = abs(n)
    if beta == 0.0:
        return sign * (1.0 if n == 0 else 0.0)
    if beta < SERIES_LIMIT:
        return sign * _bessel_series(n, beta)
    return sign * _bessel_miller(n, beta)


def bessel_squares(order: int, betas) -> np.ndarray:
    return np.array([bessel_j(order, float(b)) ** 2 for b in np.atleast_1d(betas)])


@dataclass(frozen=True)
class ModulatorConfig:
    modulation_index: float
    drive_frequency: float
    drive_phase: float = 0.0

    def __post_init__(self):
        if not self.modulation_index >= 0:
            raise ParameterError("modulation_index must be >= 0")
        if not self.drive_frequency > 0:
            raise ParameterError("drive_frequency must be > 0")
        if not 0.0 <= self.drive_phase < 2 * math.pi:
            raise ParameterError("drive_phase must lie in [0, 2*pi)")


@dataclass(frozen=True)
class SidebandLadder:
    center_frequency: float
    mode_spacing: float
    amplitudes: np.ndarray = field(repr=False)

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex)
        if amps.ndim != 1 or amps.size % 2 != 1:
            raise ParameterError("amplitudes must be an odd-length 1-D sequence centred on n=0")
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)

    @property
    def order(self) -> int:
        return self.amplitudes.size // 2

    @property
    def indices(self) -> np.ndarray:
        return np.arange(-self.order, self.order + 1)

    def amplitude(self, n: int) -> complex:
        if abs(n) > self.order:
            return 0j
        return complex(self.amplitudes[n + self.order])

    def populations(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def norm(self) -> float:
        return float(np.sum(self.populations()))

    def frequencies(self) -> np.ndarray:
        return self.center_frequency + self.indices * self.mode_spacing

    def overlap(self, other: "SidebandLadder") -> complex:
        """Inner product <self|other>; modes pair up by absolute frequency."""
        scale = max(abs(self.mode_spacing), abs(other.mode_spacing), 1.0)
        theirs = {round(f / scale * 1e9): a
                  for f, a in zip(other.frequencies().tolist(), other.amplitudes.tolist())}
        total = 0j
        for f, a in zip(self.frequencies().tolist(), self.amplitudes.tolist()):
            b = theirs.get(round(f / scale * 1e9))
            if b is not None:
                total += a.conjugate() * b
        return total


def identity_ladder(center: float = 0.0, spacing: float = 1.0) -> SidebandLadder:
    return SidebandLadder(center, spacing, np.array([1.0 + 0j]))


def truncation_order(beta: float, epsilon: float = DEFAULT_EPSILON) -> int:
    """Smallest ``N`` with ``sum_{|n|<=N} J_n(beta)^2 >= 1 - epsilon``.

    Evaluated through the discarded mass ``2 sum_{n>N} J_n^2`` so that
    tolerances far below double-precision resolution of 1 still work.
    """
    if not 0 < epsilon <= 1e-3:
        raise ParameterError("epsilon must lie in (0, 1e-3]")
    if beta < 0:
        raise ParameterError("beta must be >= 0")
    if beta == 0:
        return 0
    squares = []
    m = 0
    while True:
        m += 1
        if m > MAX_ORDER:
            raise ParameterError(f"beta {beta} needs more than {MAX_ORDER} sidebands")
        sq = bessel_j(m, beta) ** 2
        squares.append(sq)
        if m > beta and sq < 1e-6 * epsilon:
            break
    # tail[N] = 2 * sum_{n > N} J_n^2 for N = 0..m-1
    tail = 2.0 * np.cumsum(squares[::-1])[::-1]
    above = np.nonzero(tail > epsilon)[0]
    return int(above[-1] + 1) if above.size else 0


def sideband_amplitudes(config: ModulatorConfig, center: float = 0.0,
                        epsilon: float = DEFAULT_EPSILON) -> SidebandLadder:
    beta = config.modulation_index
    order = truncation_order(beta, epsilon)
    n = np.arange(-order, order + 1)
    jn = np.array([bessel_j(int(k), beta) for k in n])
    phase = np.exp(1j * (config.drive_phase - math.pi / 2) * n)
    return SidebandLadder(center, config.drive_frequency, jn * phase)


def compose(first: SidebandLadder, second: SidebandLadder) -> SidebandLadder:
    """Ladder after two modulators in series (same drive frequency)."""
    if not math.isclose(first.mode_spacing, second.mode_spacing, rel_tol=1e-12):
        raise ParameterError("cascaded modulators must share the drive frequency")
    return SidebandLadder(first.center_frequency, first.mode_spacing,
                          np.convolve(first.amplitudes, second.amplitudes))


def carrier_null_index(tol: float = 1e-9) -> float:
    """First positive zero of ``J_0``: the index that empties the carrier."""
    return bisect(lambda b: bessel_j(0, b), 2.0, 3.0, tol=tol)


def lorentzian(offset, fwhm: float) -> np.ndarray:
    """Unit-area Lorentzian."""
    half = 0.5 * fwhm
    return (half / math.pi) / (np.asarray(offset, dtype=float) ** 2 + half * half)


@dataclass(frozen=True)
class SpectrumTrace:
    offsets: np.ndarray = field(repr=False)
    intensities: np.ndarray = field(repr=False)
    etalon_linewidth: float = DEFAULT_ETALON_LINEWIDTH
    line_width: float = 0.0
    populations: np.ndarray = field(default=None, repr=False)

    def integral(self) -> float:
        """Area under the trace over all frequencies (the summed line weights)."""
        if self.populations is None:
            return self.scan_integral()
        return math.fsum(self.populations.tolist())

    def scan_integral(self) -> float:
        """Trapezoid area over the scanned range only."""
        return float(np.trapezoid(self.intensities, self.offsets))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("offset_hz,intensity\n")
        for f, v in zip(self.offsets.tolist(), self.intensities.tolist()):
            buf.write(f"{f!r},{v!r}\n")
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        atomic_write(path, self.to_csv())


def spectrum_trace(ladder: SidebandLadder, source_linewidth: float,
                   etalon_linewidth: float = DEFAULT_ETALON_LINEWIDTH,
                   scan=None) -> SpectrumTrace:
    """Scanning-etalon transmission spectrum of a ladder.

    Every mode is a Lorentzian of width ``source_linewidth + etalon_linewidth``
    (Lorentzian convolution adds FWHMs) weighted by its population. Offsets
    are in Hz relative to the carrier.
    """
    if not (source_linewidth > 0 and etalon_linewidth > 0):
        raise ParameterError("linewidths must be > 0")
    width = source_linewidth + etalon_linewidth
    if scan is None:
        reach = (ladder.order + 3) * ladder.mode_spacing
        scan = np.arange(-reach, reach + width / 10, width / 10)
    grid = np.asarray(scan, dtype=float)
    if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise ParameterError("scan must be an increasing 1-D frequency grid")
    step = float(np.max(np.diff(grid)))
    if width / step < 5:
        raise SamplingError(
            f"scan step {step:.4g} Hz gives {width / step:.2f} points per FWHM; need >= 5")
    pops = ladder.populations()
    populated = ladder.indices[pops > 1e-12]
    lo, hi = populated.min() * ladder.mode_spacing, populated.max() * ladder.mode_spacing
    if grid[0] > lo or grid[-1] < hi:
        raise ParameterError("scan does not span the populated sidebands")
    positions = ladder.indices * ladder.mode_spacing
    values = lorentzian(grid[:, None] - positions[None, :], width) @ pops
    return SpectrumTrace(grid, values, etalon_linewidth, width, pops)
