"""Resonantly driven two-level emitter.

Rates are angular (rad/s) throughout and ``lifetime = 1 / decay_rate``.
Quoted linewidths in Hz convert with a factor of 2*pi (see
:meth:`EmitterParams.from_hz`).

The population dynamics on resonance reduce to a two-component affine system
for the excited population ``p`` and the (real) coherence amplitude ``q``::

    dp/dt = rabi * q - decay * p
    dq/dt = rabi / 2 * (1 - 2 p) - dephasing * q

``dephasing`` is the total coherence decay rate, so its pure-dephasing part is
``dephasing - decay / 2``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._util import max_workers
from .errors import NumericalError, ParameterError

PS = 1e-12

# Fixed RK4 step is this fraction of the fastest time scale.
STEP_FRACTION = 1.0 / 200.0


@dataclass(frozen=True)
class EmitterParams:
    rabi_frequency: float
    decay_rate: float
    dephasing_rate: float

    def __post_init__(self):
        for name in ("rabi_frequency", "decay_rate", "dephasing_rate"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ParameterError(f"{name} must be finite, got {value!r}")
        if self.rabi_frequency < 0:
            raise ParameterError("rabi_frequency must be >= 0")
        if self.decay_rate <= 0:
            raise ParameterError("decay_rate must be > 0")
        if self.dephasing_rate < 0:
            raise ParameterError("dephasing_rate must be >= 0")

    @classmethod
    def from_lifetime(cls, lifetime: float, rabi_ratio: float = 1.0,
                      dephasing_ratio: float = 1.0) -> "EmitterParams":
        """Build from a lifetime in seconds and rates relative to the decay rate."""
        decay = 1.0 / lifetime
        return cls(rabi_ratio * decay, decay, dephasing_ratio * decay)

    @classmethod
    def from_hz(cls, rabi_hz: float, decay_hz: float, dephasing_hz: float) -> "EmitterParams":
        """Build from rates quoted in ordinary frequency (lifetime = 1/(2 pi decay_hz))."""
        two_pi = 2.0 * math.pi
        return cls(two_pi * rabi_hz, two_pi * decay_hz, two_pi * dephasing_hz)

    def to_hz(self) -> tuple[float, float, float]:
        two_pi = 2.0 * math.pi
        return (self.rabi_frequency / two_pi, self.decay_rate / two_pi,
                self.dephasing_rate / two_pi)

    def lifetime(self) -> float:
        return 1.0 / self.decay_rate

    @property
    def mu_squared(self) -> float:
        return self.rabi_frequency ** 2 - (self.dephasing_rate - self.decay_rate) ** 2 / 4.0

    @property
    def envelope_rate(self) -> float:
        return 0.5 * (self.dephasing_rate + self.decay_rate)

    @property
    def pure_dephasing_rate(self) -> float:
        return self.dephasing_rate - 0.5 * self.decay_rate

    def steady_state_population(self) -> float:
        """Excited-state population under continuous drive."""
        o2 = self.rabi_frequency ** 2
        denom = 2.0 * (o2 + self.decay_rate * self.dephasing_rate)
        if denom == 0.0:
            # zero dephasing: limit of the expression below
            return 0.5 if o2 > 0 else 0.0
        return o2 / denom

    def emission_rate(self) -> float:
        """Mean photon emission rate in photons per second."""
        return self.decay_rate * self.steady_state_population()

    def max_step(self) -> float:
        rates = [self.decay_rate, self.rabi_frequency, self.dephasing_rate]
        return STEP_FRACTION / max(rates)


def _oscillation_terms(mu2: float, a: float, t: np.ndarray) -> np.ndarray:
    """[C(t) + a S(t)] exp(-a t) for t >= 0 in all three damping regimes."""
    z = mu2 * t * t
    out = np.empty_like(t)
    small = np.abs(z) < 1e-3
    if np.any(small):
        zs = z[small]
        c = 1.0 - zs / 2.0 + zs * zs / 24.0 - zs ** 3 / 720.0
        s_over_t = 1.0 - zs / 6.0 + zs * zs / 120.0 - zs ** 3 / 5040.0
        ts = t[small]
        out[small] = (c + a * ts * s_over_t) * np.exp(-a * ts)
    under = (~small) & (z > 0)
    if np.any(under):
        mu = math.sqrt(mu2)
        tu = t[under]
        out[under] = (np.cos(mu * tu) + a / mu * np.sin(mu * tu)) * np.exp(-a * tu)
    over = (~small) & (z < 0)
    if np.any(over):
        m = math.sqrt(-mu2)
        to = t[over]
        # cosh/sinh folded into the envelope; m < a always, so no overflow
        out[over] = 0.5 * ((1.0 + a / m) * np.exp((m - a) * to)
                           + (1.0 - a / m) * np.exp(-(m + a) * to))
    return out


def g2_analytic(params: EmitterParams, tau):
    """Normalized second-order correlation of resonance fluorescence.

    ``tau`` is a delay in seconds (scalar or array). The result is symmetric in
    ``tau`` and exactly zero at ``tau = 0``.
    """
    t = np.abs(np.asarray(tau, dtype=float))
    scalar = t.ndim == 0
    t = np.atleast_1d(t)
    value = 1.0 - _oscillation_terms(params.mu_squared, params.envelope_rate, t)
    value = np.maximum(value, 0.0)
    return float(value[0]) if scalar else value


def _rk4_matrix(generator: np.ndarray, h: float) -> np.ndarray:
    """One classical RK4 step of the linear system ``x' = generator @ x``."""
    a = generator * h
    eye = np.eye(len(generator))
    a2 = a @ a
    a3 = a2 @ a
    return eye + a + a2 / 2.0 + a3 / 6.0 + a2 @ a2 / 24.0


def _bloch_generator(params: EmitterParams) -> np.ndarray:
    # state (p, q, 1); the constant component carries the drive term
    o, g2, g = params.rabi_frequency, params.decay_rate, params.dephasing_rate
    return np.array([
        [-g2, o, 0.0],
        [-o, -g, o / 2.0],
        [0.0, 0.0, 0.0],
    ])


def oracle_bloch_g2(params: EmitterParams, tau_grid) -> np.ndarray:
    """g2 from direct fixed-step RK4 integration of the optical Bloch equations.

    Starts in the ground state (the state right after a detected photon) and
    returns the excited population normalized to its steady-state value.
    """
    taus = np.asarray(tau_grid, dtype=float)
    if taus.ndim != 1:
        raise ParameterError("tau_grid must be one-dimensional")
    if taus.size and (taus[0] < 0 or np.any(np.diff(taus) < 0)):
        raise ParameterError("tau_grid must be sorted and nonnegative")
    if params.rabi_frequency == 0:
        raise NumericalError("steady-state population vanishes without drive")
    h_max = params.max_step()
    span = taus[-1] if taus.size else 0.0
    if not h_max > 0 or span / h_max > 1e12:
        raise NumericalError(f"integration step {h_max!r} s underflows for span {span!r} s")

    gen = _bloch_generator(params)
    x = np.array([0.0, 0.0, 1.0])
    out = np.empty(taus.size)
    t_prev = 0.0
    for i, t in enumerate(taus):
        dt = t - t_prev
        if dt > 0:
            n = int(math.ceil(dt / h_max))
            x = np.linalg.matrix_power(_rk4_matrix(gen, dt / n), n) @ x
        out[i] = x[0]
        t_prev = t
    return out / params.steady_state_population()


@dataclass(frozen=True)
class TimeTagStream:
    """Detection timestamps (integer ps, strictly increasing) of one channel."""

    channel: int
    timestamps: np.ndarray = field(repr=False)
    duration: int

    def __post_init__(self):
        ts = np.ascontiguousarray(self.timestamps, dtype=np.int64)
        ts.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "duration", int(self.duration))
        if not 0 <= int(self.channel) <= 255:
            raise ParameterError(f"channel must fit in one byte, got {self.channel}")
        if ts.ndim != 1:
            raise ParameterError("timestamps must be one-dimensional")
        if self.duration < 0:
            raise ParameterError("duration must be >= 0")
        if ts.size:
            if ts[0] < 0 or ts[-1] > self.duration:
                raise ParameterError("timestamps must lie in [0, duration]")
            if np.any(np.diff(ts) <= 0):
                raise ParameterError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return int(self.timestamps.size)

    @property
    def rate(self) -> float:
        """Mean count rate in counts per second."""
        if self.duration == 0:
            return 0.0
        return len(self) / (self.duration * PS)


def strictly_increasing(ts: np.ndarray) -> np.ndarray:
    """Nudge sorted integer stamps forward by the minimum needed to remove ties."""
    if ts.size < 2:
        return ts
    idx = np.arange(ts.size, dtype=np.int64)
    return np.maximum.accumulate(ts - idx) + idx


class WaitingTimeSampler:
    """Inverse-CDF sampler for the time between successive emissions.

    After each emission the emitter is projected to the ground state, so the
    photon stream is a renewal process. Between jumps the state follows the
    no-emission (norm-decaying) master equation; its trace ``S(t)`` is the
    probability that no photon was emitted yet. Drawing ``u ~ U(0, 1)`` and
    solving ``S(t) = u`` is the norm-threshold jump rule.
    """

    tail_floor = 1e-13
    max_points = 2_000_000

    def __init__(self, params: EmitterParams):
        if params.pure_dephasing_rate < -1e-12 * params.decay_rate:
            raise ParameterError(
                "dephasing_rate must be >= decay_rate/2 for a physical jump unravelling")
        self.params = params
        o, g2, g = params.rabi_frequency, params.decay_rate, params.dephasing_rate
        # conditional state (p_e, p_g, q); emission removes norm, no recycling
        gen = np.array([
            [-g2, 0.0, o],
            [0.0, 0.0, -o],
            [-o / 2.0, o / 2.0, -g],
        ])
        h = params.max_step()
        step = _rk4_matrix(gen, h)
        mean_wait = 1.0 / params.emission_rate()
        horizon = 60.0 * mean_wait
        stride = max(1, int(math.ceil(horizon / h / self.max_points)))

        block = 1024
        powers = np.empty((block, 3, 3))
        powers[0] = step
        for k in range(1, block):
            powers[k] = step @ powers[k - 1]
        jump = powers[-1]

        x = np.array([0.0, 1.0, 0.0])
        survival = [1.0]
        n_steps = 0
        while True:
            states = powers @ x
            surv = states[:, 0] + states[:, 1]
            # global step index of states[j] is n_steps + j + 1
            first = (-(n_steps + 1)) % stride
            survival.extend(surv[first::stride].tolist())
            n_steps += block
            x = jump @ x
            if surv[-1] < self.tail_floor or n_steps * h > 10 * horizon:
                break
        self.dt = h * stride
        self.survival = np.minimum.accumulate(np.clip(np.asarray(survival), 0.0, 1.0))
        self.times = np.arange(self.survival.size) * self.dt
        tail = max(self.survival.size // 10, 2)
        s1, s0 = self.survival[-1], self.survival[-tail]
        if s1 > 0 and s0 > s1:
            self.tail_rate = math.log(s0 / s1) / (self.times[-1] - self.times[-tail])
        else:
            self.tail_rate = 1.0 / mean_wait
        # S is nonincreasing; np.interp wants ascending abscissae
        self._s_asc = self.survival[::-1]
        self._t_asc = self.times[::-1]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        u = rng.random(n)
        waits = np.interp(u, self._s_asc, self._t_asc)
        s_end = self.survival[-1]
        deep = u < s_end
        if np.any(deep):
            waits[deep] = self.times[-1] + np.log(s_end / u[deep]) / self.tail_rate
        return waits


def _sample_segment(sampler: WaitingTimeSampler, start: int, stop: int,
                    seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    length_s = (stop - start) * PS
    expected = sampler.params.emission_rate() * length_s
    chunks = []
    t = 0.0
    batch = int(expected * 1.02 + 10 * math.sqrt(expected) + 64)
    while True:
        times = t + np.cumsum(sampler.sample(rng, batch))
        if times[-1] > length_s:
            chunks.append(times[times <= length_s])
            break
        chunks.append(times)
        t = times[-1]
        batch = max(64, batch // 8)
    times_s = np.concatenate(chunks)
    stamps = np.rint(times_s / PS).astype(np.int64) + start
    return stamps


def sample_emissions(params: EmitterParams, duration: int, seed: int,
                     channel: int = 0, segments: int = 1) -> TimeTagStream:
    """Monte Carlo photon emission times over ``[0, duration]`` picoseconds.

    With ``segments > 1`` the interval is split into independent pieces, each
    restarted in the ground state with a seed spawned from ``seed``; this
    discards correlations across the segment boundaries.
    """
    duration = int(duration)
    if duration < 0:
        raise ParameterError("duration must be >= 0")
    if duration == 0 or params.rabi_frequency == 0:
        return TimeTagStream(channel, np.empty(0, np.int64), duration)
    sampler = WaitingTimeSampler(params)
    segments = max(1, int(segments))
    bounds = np.linspace(0, duration, segments + 1).round().astype(np.int64)
    if segments == 1:
        seeds = [seed]
    else:
        root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        seeds = root.spawn(segments)
    jobs = list(zip(bounds[:-1], bounds[1:], seeds))
    workers = min(max_workers(), segments)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda j: _sample_segment(sampler, *j), jobs))
    else:
        parts = [_sample_segment(sampler, *j) for j in jobs]
    stamps = strictly_increasing(np.concatenate(parts))
    stamps = stamps[stamps <= duration]
    return TimeTagStream(channel, stamps, duration)


def duration_for_photons(params: EmitterParams, photons: int) -> int:
    """Acquisition time in ps expected to yield ``photons`` emissions."""
    rate = params.emission_rate()
    if rate <= 0:
        raise ParameterError("emitter does not emit without drive")
    return int(math.ceil(photons / rate / PS))
