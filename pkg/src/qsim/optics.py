"""Beam splitters, detectors and the unbalanced Mach-Zehnder HOM interferometer.

Coincidence models follow the continuous-wave treatment: the zero-delay
coincidence of the two output detectors mixes the emitter's own g2 with the
g2 shifted by the arm delay, and for co-polarized photons the shifted terms
are suppressed by the two-photon overlap ``v_c * exp(-2|tau| / tau_c)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .correlator import CorrelationHistogram, bin_index
from .emitter import PS, EmitterParams, TimeTagStream, g2_analytic
from .errors import NumericalError, ParameterError
from .modulator import SidebandLadder

PARALLEL = "parallel"
ORTHOGONAL = "orthogonal"
DEFAULT_ARM_DELAY = 35_000


@dataclass(frozen=True)
class HomConfig:
    arm_delay: int = DEFAULT_ARM_DELAY  # ps
    mode_overlap: float = 1.0
    coherence_time: float = 2e-9  # s
    polarization: str = PARALLEL

    def __post_init__(self):
        if not self.arm_delay > 0:
            raise ParameterError("arm_delay must be > 0")
        if not 0.0 <= self.mode_overlap <= 1.0:
            raise ParameterError("mode_overlap must lie in [0, 1]")
        if not self.coherence_time > 0:
            raise ParameterError("coherence_time must be > 0")
        if self.polarization not in (PARALLEL, ORTHOGONAL):
            raise ParameterError(f"polarization must be {PARALLEL!r} or {ORTHOGONAL!r}")

    def with_polarization(self, polarization: str) -> "HomConfig":
        return replace(self, polarization=polarization)


@dataclass(frozen=True)
class DetectorModel:
    jitter_sigma: float = 0.0  # ps
    dead_time: int = 0  # ps
    efficiency: float = 1.0
    dark_rate: float = 0.0  # counts/s

    def __post_init__(self):
        for name in ("jitter_sigma", "dead_time", "efficiency", "dark_rate"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ParameterError(f"{name} must be finite and >= 0")
        if self.efficiency > 1:
            raise ParameterError("efficiency must be <= 1")


IDEAL_DETECTOR = DetectorModel()


def _shifted_g2(tau, params: EmitterParams, delay_s: float):
    t = np.asarray(tau, dtype=float)
    return g2_analytic(params, t - delay_s) + g2_analytic(params, t + delay_s)


def _hom_curve(tau, params: EmitterParams, config: HomConfig, parallel: bool):
    t = np.asarray(tau, dtype=float)
    delay = config.arm_delay * PS
    value = 0.5 * g2_analytic(params, t) + 0.25 * _shifted_g2(t, params, delay)
    if parallel:
        overlap = config.mode_overlap * np.exp(-2.0 * np.abs(t) / config.coherence_time)
        value = value - 0.25 * _shifted_g2(t, params, delay) * overlap
    return value


def hom_p2_parallel(tau, params: EmitterParams, config: HomConfig):
    """Normalized coincidence probability for co-polarized inputs (tau in s)."""
    if config.polarization != PARALLEL:
        raise ParameterError("hom_p2_parallel needs a parallel-polarization config")
    return _hom_curve(tau, params, config, True)


def hom_p2_orthogonal(tau, params: EmitterParams, config: HomConfig):
    """Normalized coincidence probability for cross-polarized inputs (tau in s)."""
    if config.polarization != ORTHOGONAL:
        raise ParameterError("hom_p2_orthogonal needs an orthogonal-polarization config")
    return _hom_curve(tau, params, config, False)


def hom_p2(tau, params: EmitterParams, config: HomConfig):
    return _hom_curve(tau, params, config, config.polarization == PARALLEL)


def hom_visibility(tau, params: EmitterParams, config: HomConfig):
    p_orth = _hom_curve(tau, params, config, False)
    p_par = _hom_curve(tau, params, config, True)
    if np.any(np.asarray(p_orth) <= 0):
        raise NumericalError("visibility undefined where the cross-polarized coincidence vanishes")
    return (p_orth - p_par) / p_orth


def gaussian_smooth(func, tau, sigma: float, nodes: int = 129):
    """Convolve ``func`` with a unit-mass Gaussian of standard deviation ``sigma``.

    Trapezoid quadrature over +-5 sigma with renormalized weights.
    """
    t = np.asarray(tau, dtype=float)
    if sigma <= 0:
        return func(t)
    if nodes < 64:
        raise ParameterError("need at least 64 quadrature nodes")
    u = np.linspace(-5.0 * sigma, 5.0 * sigma, nodes)
    w = np.exp(-0.5 * (u / sigma) ** 2)
    w[0] *= 0.5
    w[-1] *= 0.5
    w /= w.sum()
    flat = t.reshape(-1)
    values = func((flat[:, None] - u[None, :]).reshape(-1)).reshape(flat.size, nodes) @ w
    return values.reshape(t.shape) if t.ndim else float(values[0])


def coincidence_jitter(sigma_ps: float) -> float:
    """Width (s) of the delay smearing from two independent detectors."""
    return math.sqrt(2.0) * sigma_ps * PS


def hom_p2_smoothed(tau, params: EmitterParams, config: HomConfig, jitter_sigma: float = 0.0,
                    nodes: int = 257):
    """Coincidence curve as seen through detectors with Gaussian jitter (ps)."""
    parallel = config.polarization == PARALLEL
    return gaussian_smooth(lambda t: _hom_curve(t, params, config, parallel), tau,
                           coincidence_jitter(jitter_sigma), nodes)


def hom_visibility_smoothed(tau, params: EmitterParams, config: HomConfig,
                            jitter_sigma: float = 0.0):
    p_orth = hom_p2_smoothed(tau, params, config.with_polarization(ORTHOGONAL), jitter_sigma)
    p_par = hom_p2_smoothed(tau, params, config.with_polarization(PARALLEL), jitter_sigma)
    return (p_orth - p_par) / p_orth


def apply_detector(stream: TimeTagStream, model: DetectorModel, seed) -> TimeTagStream:
    """Detector response: losses, timing jitter, dark counts, then dead time.

    Dead time is enforced last, on the merged signal and dark tags, so the
    output never holds two tags closer than ``dead_time``.
    """
    rng = np.random.default_rng(seed)
    ts = stream.timestamps
    duration = stream.duration
    if model.efficiency < 1:
        ts = ts[rng.random(ts.size) < model.efficiency]
    if model.jitter_sigma > 0 and ts.size:
        ts = ts + np.rint(rng.normal(0.0, model.jitter_sigma, ts.size)).astype(np.int64)
        ts = np.clip(ts, 0, duration)
        ts.sort()
    if model.dark_rate > 0 and duration > 0:
        n_dark = rng.poisson(model.dark_rate * duration * PS)
        dark = rng.integers(0, duration, n_dark, endpoint=True)
        ts = np.sort(np.concatenate([ts, dark]))
    if model.dead_time > 0:
        ts = _enforce_dead_time(ts, int(model.dead_time))
    elif ts.size > 1:
        ts = np.unique(ts)
    return TimeTagStream(stream.channel, ts, duration)


def _enforce_dead_time(ts: np.ndarray, dead: int) -> np.ndarray:
    if ts.size < 2:
        return ts
    if np.min(np.diff(ts)) >= dead:
        return ts
    keep = np.zeros(ts.size, dtype=bool)
    last = None
    for i, t in enumerate(ts.tolist()):
        if last is None or t - last >= dead:
            keep[i] = True
            last = t
    return ts[keep]


def split_stream(stream: TimeTagStream, seed, channels: tuple[int, int] = (1, 2)):
    """50:50 beam splitter: route each tag independently to one of two outputs."""
    rng = np.random.default_rng(seed)
    to_a = rng.random(len(stream)) < 0.5
    ts = stream.timestamps
    return (TimeTagStream(channels[0], ts[to_a], stream.duration),
            TimeTagStream(channels[1], ts[~to_a], stream.duration))


def effective_overlap(config: HomConfig, ladder_a: SidebandLadder | None,
                      ladder_b: SidebandLadder | None = None) -> float:
    """Mode overlap including the frequency-mode overlap of both photons.

    Both interferometer arms carry photons from the same modulator, so with a
    single ladder the factor is ``|<L|L>|^2``, i.e. unity up to truncation.
    """
    if ladder_a is None and ladder_b is None:
        return config.mode_overlap
    ladder_b = ladder_a if ladder_b is None else ladder_b
    ladder_a = ladder_b if ladder_a is None else ladder_a
    return config.mode_overlap * min(1.0, abs(ladder_a.overlap(ladder_b)) ** 2)


def simulate_hom_clicks(params: EmitterParams, config: HomConfig, model: DetectorModel,
                        target_pairs: int, seed, bin_width: int = 64, window: int | None = None,
                        ladder: SidebandLadder | None = None,
                        ladder_b: SidebandLadder | None = None) -> CorrelationHistogram:
    """Event-level coincidence histogram for one polarization setting.

    Delays are drawn by rejection sampling from the analytic coincidence
    curve over the window (default +-3 arm delays, widened by 5 jitter widths
    so the edge bins are not depleted), smeared by the detector-pair jitter
    and binned. Only ``model.jitter_sigma`` enters; losses and dark counts
    are assumed already folded into the pair budget. The histogram carries a
    reference level so that :func:`normalize_to_g2` maps it onto the curve.
    """
    if target_pairs <= 0:
        raise ParameterError("target_pairs must be > 0")
    window = 3 * config.arm_delay if window is None else int(window)
    cfg = replace(config, mode_overlap=effective_overlap(config, ladder, ladder_b))
    parallel = cfg.polarization == PARALLEL
    smear = coincidence_jitter(model.jitter_sigma)
    half_bins = window // bin_width
    reach = ((half_bins + 0.5) * bin_width) * PS + 5.0 * smear

    grid = np.linspace(-reach, reach, 200_001)
    dense = _hom_curve(grid, params, cfg, parallel)
    total = float(np.trapezoid(dense, grid))
    bound = 1.05 * float(dense.max()) + 1e-12
    if total <= 0 or total / (2 * reach) / bound < 1e-6:
        raise NumericalError("rejection efficiency underflow for this configuration")

    rng = np.random.default_rng(seed)
    accepted = []
    have = 0
    efficiency = total / (2 * reach) / bound
    while have < target_pairs:
        batch = int((target_pairs - have) / efficiency * 1.1) + 1024
        tau = rng.uniform(-reach, reach, batch)
        keep = rng.random(batch) * bound < _hom_curve(tau, params, cfg, parallel)
        tau = tau[keep]
        accepted.append(tau)
        have += tau.size
    tau = np.concatenate(accepted)[:target_pairs]
    if smear > 0:
        tau = tau + rng.normal(0.0, smear, tau.size)
    delays = np.rint(tau / PS).astype(np.int64)
    k = bin_index(delays, bin_width)
    inside = np.abs(k) <= half_bins
    counts = np.bincount(k[inside] + half_bins, minlength=2 * half_bins + 1)
    reference = target_pairs / (total / PS)
    return CorrelationHistogram(bin_width, window, counts, target_pairs, 0, 0,
                                reference=reference)


def measured_visibility(parallel: CorrelationHistogram, orthogonal: CorrelationHistogram,
                        half_width: int = 0) -> tuple[float, float]:
    """Zero-delay visibility and its Poisson standard error from two histograms.

    Sums the ``2 * half_width + 1`` central bins of each histogram.
    """
    if not parallel.same_geometry(orthogonal):
        raise ParameterError("histograms must share bin geometry")
    c = parallel.half_bins
    sl = slice(c - half_width, c + half_width + 1)
    widths = parallel.bin_widths[sl].sum()
    n_par = float(parallel.counts[sl].sum())
    n_orth = float(orthogonal.counts[sl].sum())
    if n_orth == 0:
        raise NumericalError("no cross-polarized coincidences near zero delay")
    p_par = n_par / (parallel.accidental_density() * widths)
    p_orth = n_orth / (orthogonal.accidental_density() * widths)
    ratio = p_par / p_orth
    rel = math.sqrt(1.0 / max(n_par, 1.0) + 1.0 / n_orth)
    return 1.0 - ratio, ratio * rel
