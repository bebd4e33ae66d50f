"""Damped nonlinear least squares and the model families fitted to the data.

Model families work in laboratory units: delays in ns, rates in rad/ns,
frequencies in GHz. Parameters with equal lower and upper bounds are held
fixed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .correlator import CorrelationHistogram, normalize_to_g2
from .emitter import EmitterParams, g2_analytic
from .errors import NumericalError, ParameterError, RankDeficiencyError
from .modulator import bessel_j, lorentzian
from .optics import ORTHOGONAL, PARALLEL, HomConfig, _hom_curve, gaussian_smooth

NS = 1e-9

LAMBDA_START = 1e-3
LAMBDA_ACCEPT = 0.3
LAMBDA_REJECT = 10.0
LAMBDA_MAX = 1e16
COST_RTOL = 1e-10
MAX_ITER = 200
# column-scaled Jacobian singular values below this ratio mean the
# parameters are not separately identifiable from the data
RANK_RTOL = 1e-8


@dataclass(frozen=True)
class ModelFamily:
    name: str
    func: Callable[[np.ndarray, np.ndarray], np.ndarray]
    param_names: tuple[str, ...]

    def __call__(self, x, p):
        return self.func(np.asarray(x, dtype=float), np.asarray(p, dtype=float))


@dataclass
class FitProblem:
    model: ModelFamily | Callable
    x: np.ndarray
    y: np.ndarray
    p0: Sequence[float]
    sigma: np.ndarray | None = None
    bounds: tuple[Sequence[float], Sequence[float]] | None = None
    names: Sequence[str] | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.p0 = np.asarray(self.p0, dtype=float)
        if self.x.shape[0] != self.y.shape[0]:
            raise ParameterError("x and y must have the same length")
        if self.sigma is not None:
            self.sigma = np.asarray(self.sigma, dtype=float)
            if self.sigma.shape != self.y.shape:
                raise ParameterError("sigma must match y")
            if np.any(self.sigma <= 0):
                raise ParameterError("uncertainties must be > 0")
        n = self.p0.size
        if self.bounds is None:
            self.bounds = (np.full(n, -np.inf), np.full(n, np.inf))
        lo = np.asarray(self.bounds[0], dtype=float)
        hi = np.asarray(self.bounds[1], dtype=float)
        if lo.shape != (n,) or hi.shape != (n,):
            raise ParameterError("bounds must match the parameter vector")
        if np.any(self.p0 < lo) or np.any(self.p0 > hi):
            raise ParameterError("initial guess lies outside the bounds")
        self.bounds = (lo, hi)
        if self.names is None:
            self.names = getattr(self.model, "param_names", None) or tuple(
                f"p{i}" for i in range(n))
        if len(self.names) != n:
            raise ParameterError("one name per parameter required")

    @property
    def free(self) -> np.ndarray:
        lo, hi = self.bounds
        return lo < hi


@dataclass
class FitResult:
    names: tuple[str, ...]
    parameters: np.ndarray
    covariance: np.ndarray
    chi2_reduced: float
    iterations: int
    converged: bool
    cost_history: list[float] = field(default_factory=list, repr=False)
    derived: dict[str, float] = field(default_factory=dict)

    @property
    def errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def __getitem__(self, name: str) -> float:
        return float(self.parameters[list(self.names).index(name)])

    def error(self, name: str) -> float:
        return float(self.errors[list(self.names).index(name)])

    def to_dict(self) -> dict:
        return {
            "parameters": {
                n: {"value": float(v), "error": float(e)}
                for n, v, e in zip(self.names, self.parameters, self.errors)
            },
            "chi2_reduced": float(self.chi2_reduced),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "derived": {k: float(v) for k, v in self.derived.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def fd_step(p: np.ndarray, scale: float = 1.0) -> np.ndarray:
    return scale * np.maximum(1e-8, 1e-6 * np.abs(p))


def jacobian(model, x, p, bounds=None, step_scale: float = 1.0) -> np.ndarray:
    """Central-difference Jacobian; one-sided next to a bound."""
    p = np.asarray(p, dtype=float)
    h = fd_step(p, step_scale)
    lo, hi = bounds if bounds is not None else (np.full(p.size, -np.inf), np.full(p.size, np.inf))
    f0 = None
    cols = []
    for i in range(p.size):
        up, down = p.copy(), p.copy()
        up[i] += h[i]
        down[i] -= h[i]
        if up[i] > hi[i]:
            if f0 is None:
                f0 = model(x, p)
            cols.append((f0 - model(x, down)) / h[i])
        elif down[i] < lo[i]:
            if f0 is None:
                f0 = model(x, p)
            cols.append((model(x, up) - f0) / h[i])
        else:
            cols.append((model(x, up) - model(x, down)) / (2.0 * h[i]))
    return np.stack(cols, axis=-1).reshape(-1, p.size)


def _residuals(problem: FitProblem, p: np.ndarray) -> np.ndarray:
    r = problem.model(problem.x, p) - problem.y
    r = np.asarray(r, dtype=float).reshape(-1)
    if problem.sigma is not None:
        r = r / problem.sigma.reshape(-1)
    return r


def least_squares(problem: FitProblem) -> FitResult:
    """Levenberg-style damped Gauss-Newton with Marquardt diagonal scaling."""
    lo, hi = problem.bounds
    free = problem.free
    n_free = int(free.sum())
    n_data = problem.y.size
    if n_data < n_free:
        raise ParameterError(f"{n_data} data points cannot constrain {n_free} parameters")
    weights = None if problem.sigma is None else 1.0 / problem.sigma.reshape(-1)

    def jac(p):
        j = jacobian(problem.model, problem.x, p, (lo, hi))[:, free]
        return j if weights is None else j * weights[:, None]

    p = np.clip(problem.p0.copy(), lo, hi)
    r = _residuals(problem, p)
    cost = float(r @ r)
    if not math.isfinite(cost):
        raise NumericalError("model is not finite at the initial guess")
    history = [cost]
    lam = LAMBDA_START
    converged = False
    iterations = 0

    j = jac(p)
    scale = np.linalg.norm(j, axis=0)
    if np.any(scale == 0):
        raise RankDeficiencyError(
            "parameters with no influence on the model: "
            + ", ".join(n for n, f, s in zip(np.asarray(problem.names)[free], free, scale) if s == 0))
    sv = np.linalg.svd(j / scale, compute_uv=False)
    if sv[-1] < RANK_RTOL * sv[0]:
        raise RankDeficiencyError(
            f"normal equations are singular (scaled condition {sv[0] / sv[-1]:.3g}); "
            "the free parameters are not separately identifiable")

    while iterations < MAX_ITER and not converged:
        iterations += 1
        a = j.T @ j
        g = j.T @ r
        diag = np.diag(a).copy()
        # floor keeps the damped system solvable if a column fades mid-run
        diag = np.maximum(diag, 1e-12 * diag.max())
        # parameters pinned on a bound with the descent pointing outward sit
        # this step out; otherwise clipping makes the fit crawl along the bound
        pf = p[free]
        active = ((pf <= lo[free]) & (g > 0)) | ((pf >= hi[free]) & (g < 0))
        move = ~active
        if not move.any():
            converged = True
            break
        while True:
            step = np.zeros(pf.size)
            sub = np.ix_(move, move)
            try:
                step[move] = np.linalg.solve(a[sub] + lam * np.diag(diag[move]), -g[move])
            except np.linalg.LinAlgError as exc:
                raise RankDeficiencyError("normal equations are singular") from exc
            trial = p.copy()
            trial[free] += step
            trial = np.clip(trial, lo, hi)
            r_new = _residuals(problem, trial)
            cost_new = float(r_new @ r_new)
            if math.isfinite(cost_new) and cost_new < cost:
                rel = (cost - cost_new) / cost
                p, r, cost = trial, r_new, cost_new
                history.append(cost)
                lam = max(lam * LAMBDA_ACCEPT, 1e-15)
                if rel < COST_RTOL or cost == 0.0:
                    converged = True
                else:
                    j = jac(p)
                break
            lam *= LAMBDA_REJECT
            if lam > LAMBDA_MAX:
                # no descent direction left at working precision
                converged = True
                break

    j = jac(p)
    dof = max(n_data - n_free, 1)
    chi2 = cost / dof
    cov_free = np.linalg.pinv(j.T @ j)
    if weights is None:
        cov_free = cov_free * chi2
    cov = np.zeros((p.size, p.size))
    cov[np.ix_(free, free)] = cov_free
    return FitResult(tuple(problem.names), p, cov, chi2, iterations, converged, history)


def best_of(problems: Sequence[FitProblem]) -> FitResult:
    """Fit from several starting points and keep the lowest cost."""
    results = []
    for prob in problems:
        try:
            results.append(least_squares(prob))
        except RankDeficiencyError:
            if len(problems) == 1:
                raise
    if not results:
        raise RankDeficiencyError("every starting point was rank deficient")
    return min(results, key=lambda r: r.cost_history[-1])


# --- model families ---------------------------------------------------------

def _emitter(rabi, dephasing, decay) -> EmitterParams:
    return EmitterParams(max(rabi, 0.0) / NS, max(decay, 1e-300) / NS, max(dephasing, 0.0) / NS)


def _g2_model(x, p):
    rabi, dephasing, decay, amplitude, baseline, jitter = p
    params = _emitter(rabi, dephasing, decay)
    curve = gaussian_smooth(lambda t: g2_analytic(params, t * NS), x,
                            math.sqrt(2.0) * abs(jitter))
    return baseline + amplitude * curve


G2_MODEL = ModelFamily(
    "g2_model", _g2_model,
    ("rabi_per_ns", "dephasing_per_ns", "decay_per_ns", "amplitude", "baseline", "jitter_ns"))


def model_g2(params: EmitterParams, tau, amplitude: float = 1.0, baseline: float = 0.0,
             jitter_sigma: float = 0.0):
    """g2 seen through two detectors with Gaussian jitter ``jitter_sigma`` (s each)."""
    curve = gaussian_smooth(lambda t: g2_analytic(params, t), tau, math.sqrt(2.0) * jitter_sigma)
    return baseline + amplitude * curve


def jitter_for_g2_zero(params: EmitterParams, target: float, lo: float = 1e-12,
                       hi: float = 2e-9) -> float:
    """Per-detector jitter (s) at which the smeared g2(0) equals ``target``."""
    from ._util import bisect

    f = lambda s: model_g2(params, 0.0, jitter_sigma=s) - target  # noqa: E731
    if f(lo) > 0 or f(hi) < 0:
        raise ParameterError(f"g2(0) = {target} is not reachable with jitter in [{lo}, {hi}] s")
    return bisect(f, lo, hi, tol=1e-20)


def _exp_offset(x, p):
    amplitude, lifetime, offset = p
    return amplitude * np.exp(-x / lifetime) + offset


EXP_OFFSET = ModelFamily("exp_offset", _exp_offset, ("amplitude", "lifetime_ns", "offset"))


def lorentzian_comb(order: int) -> ModelFamily:
    """Weights ``w_-N..w_N`` of unit-area Lorentzians at ``n * spacing`` (GHz)."""
    idx = np.arange(-order, order + 1)

    def func(x, p):
        weights = p[:idx.size]
        spacing, width = p[idx.size], p[idx.size + 1]
        return lorentzian(x[:, None] - idx[None, :] * spacing, abs(width)) @ weights

    names = tuple(f"w{n}" for n in idx) + ("spacing_ghz", "width_ghz")
    return ModelFamily("lorentzian_comb", func, names)


def model_lorentzian_comb(weights, spacing: float, width: float, offsets) -> np.ndarray:
    weights = np.asarray(weights, dtype=float)
    order = weights.size // 2
    return lorentzian_comb(order)(offsets, np.concatenate([weights, [spacing, width]]))


def _hom_pair(x, p):
    # x columns: delay (ns), 1 for co-polarized / 0 for cross-polarized
    rabi, dephasing, decay, arm_delay, jitter, overlap, coherence = p
    params = _emitter(rabi, dephasing, decay)
    cfg = HomConfig(arm_delay=max(arm_delay * 1e3, 1e-9),
                    mode_overlap=min(max(overlap, 0.0), 1.0),
                    coherence_time=max(coherence, 1e-12) * NS)
    tau = x[:, 0]
    par = x[:, 1] > 0.5
    out = np.empty(tau.size)
    smear = math.sqrt(2.0) * abs(jitter)
    for flag in (True, False):
        sel = par == flag
        if sel.any():
            out[sel] = gaussian_smooth(lambda t: _hom_curve(t * NS, params, cfg, flag),
                                       tau[sel], smear, nodes=129)
    return out


HOM_PAIR = ModelFamily(
    "hom_pair", _hom_pair,
    ("rabi_per_ns", "dephasing_per_ns", "decay_per_ns", "arm_delay_ns", "jitter_ns",
     "mode_overlap", "coherence_time_ns"))


def _bessel_intensity(x, p):
    # x columns: nominal modulation index, sideband order
    scale, index_scale = p
    return np.array([scale * bessel_j(int(n), abs(index_scale) * b) ** 2
                     for b, n in zip(x[:, 0], x[:, 1])])


BESSEL_INTENSITY = ModelFamily("bessel_intensity", _bessel_intensity, ("scale", "index_scale"))

FAMILIES = {
    "g2_model": G2_MODEL,
    "exp_offset": EXP_OFFSET,
    "lorentzian_comb": lorentzian_comb(3),
    "hom_pair": HOM_PAIR,
    "bessel_intensity": BESSEL_INTENSITY,
}


# --- task-level fits ----------------------------------------------------------

def fit_lifetime(t_ns, counts, sigma=None) -> FitResult:
    """Single exponential with offset; the initial guess comes from the data."""
    t_ns = np.asarray(t_ns, dtype=float)
    counts = np.asarray(counts, dtype=float)
    offset0 = float(np.min(counts))
    amp0 = float(counts[0] - offset0)
    above = counts - offset0
    # 1/e crossing for the lifetime guess
    cross = np.nonzero(above < amp0 / math.e)[0]
    tau0 = float(t_ns[cross[0]] - t_ns[0]) if cross.size else float(np.ptp(t_ns)) / 3
    tau0 = max(tau0, 1e-3)
    problem = FitProblem(EXP_OFFSET, t_ns - t_ns[0], counts, [amp0, tau0, offset0], sigma,
                         bounds=([0, 1e-6, -np.inf], [np.inf, np.inf, np.inf]))
    result = least_squares(problem)
    result.derived["lifetime_ps"] = result["lifetime_ns"] * 1e3
    return result


def fit_g2(tau_ns, g2, sigma=None, *, guess: EmitterParams, fixed=("dephasing",),
           jitter_ns: float = 0.0, fit_jitter: bool = False, amplitude: float | None = 1.0,
           baseline: float | None = 0.0) -> FitResult:
    """Fit the smeared g2 model.

    Normalized g2 constrains only the envelope rate ``(dephasing + decay) / 2``
    and ``mu_squared``, so at least one of the three emitter rates has to be
    held fixed (``fixed`` names from ``rabi``, ``dephasing``, ``decay``).
    ``amplitude`` / ``baseline`` set to ``None`` are fitted. Starts from
    ``guess`` and from the guess with the Rabi frequency halved and doubled,
    keeping the best.
    """
    names = ("rabi", "dephasing", "decay")
    for name in fixed:
        if name not in names:
            raise ParameterError(f"unknown emitter rate {name!r}")
    base = [guess.rabi_frequency * NS, guess.dephasing_rate * NS, guess.decay_rate * NS,
            1.0 if amplitude is None else amplitude, 0.0 if baseline is None else baseline,
            jitter_ns if fit_jitter else jitter_ns]
    lo = [1e-9, 0.0, 1e-9, 0.0, -np.inf, 0.0]
    hi = [np.inf] * 6
    for i, name in enumerate(names):
        if name in fixed:
            lo[i] = hi[i] = base[i]
    if amplitude is not None:
        lo[3] = hi[3] = amplitude
    if baseline is not None:
        lo[4] = hi[4] = baseline
    if not fit_jitter:
        lo[5] = hi[5] = jitter_ns
    elif base[5] <= 0:
        base[5] = 0.05
    problems = []
    for factor in (1.0, 0.5, 2.0):
        p0 = list(base)
        if "rabi" not in fixed:
            p0[0] *= factor
        problems.append(FitProblem(G2_MODEL, tau_ns, g2, p0, sigma, (lo, hi)))
        if "rabi" in fixed:
            break
    result = best_of(problems)
    result.derived["lifetime_ps"] = 1e3 / result["decay_per_ns"]
    return result


def fit_spectrum(offsets_hz, intensities, spacing_hz: float, line_width_hz: float,
                 order: int = 3) -> FitResult:
    """Fit a Lorentzian comb to an etalon trace; weights come out as mode populations."""
    family = lorentzian_comb(order)
    x = np.asarray(offsets_hz, dtype=float) * 1e-9
    y = np.asarray(intensities, dtype=float) * 1e9
    spacing = spacing_hz * 1e-9
    width = line_width_hz * 1e-9
    idx = np.arange(-order, order + 1)
    peaks = np.interp(idx * spacing, x, y)
    weights = np.clip(peaks * math.pi * width / 2.0, 0.0, None)
    p0 = np.concatenate([weights, [spacing, width]])
    # the spacing is the drive frequency, known exactly
    lo = np.concatenate([np.zeros(idx.size), [spacing, 0.1 * width]])
    hi = np.concatenate([np.full(idx.size, np.inf), [spacing, 10.0 * width]])
    result = least_squares(FitProblem(family, x, y, p0, None, (lo, hi)))
    w = result.parameters[:idx.size]
    for n in range(order + 1):
        result.derived[f"w{n}"] = float(w[order + n])
    if order >= 1 and w[order + 1] > 0:
        result.derived["carrier_ratio"] = float(w[order] / w[order + 1])
    return result


def histogram_data(hist: CorrelationHistogram, method: str = "rates"):
    """Delay (ns), normalized value and Poisson uncertainty per bin."""
    g2 = normalize_to_g2(hist, method)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(hist.counts > 0, g2 / np.maximum(hist.counts, 1), 0.0)
    if method == "rates":
        scale = 1.0 / (hist.accidental_density() * hist.bin_widths)
    sigma = np.sqrt(np.maximum(hist.counts, 1)) * scale
    return hist.taus * 1e-3, g2, sigma


def fit_hom_pair(parallel: CorrelationHistogram, orthogonal: CorrelationHistogram,
                 params: EmitterParams, config: HomConfig, jitter_ps: float = 100.0,
                 max_delay_ns: float | None = None, fix_jitter: bool = False) -> FitResult:
    """Joint fit of co- and cross-polarized coincidence histograms.

    Emitter rates are shared and held at ``params``; arm delay and jitter are
    shared and fitted; mode overlap and coherence time act on the co-polarized
    curve only. ``fix_jitter`` holds the detector jitter at ``jitter_ps``, e.g.
    when it is already known from an autocorrelation measurement; the HOM
    histograms alone constrain it weakly. Reports the zero-delay visibility of the jitter-smeared curves
    (``visibility``) and of the intrinsic curves (``visibility_intrinsic``).
    """
    if not parallel.same_geometry(orthogonal):
        raise ParameterError("HOM histograms must share bin geometry")
    tp, yp, sp = histogram_data(parallel)
    to, yo, so = histogram_data(orthogonal)
    if max_delay_ns is not None:
        keep = np.abs(tp) <= max_delay_ns
        tp, yp, sp, to, yo, so = tp[keep], yp[keep], sp[keep], to[keep], yo[keep], so[keep]
    x = np.concatenate([np.column_stack([tp, np.ones_like(tp)]),
                        np.column_stack([to, np.zeros_like(to)])])
    y = np.concatenate([yp, yo])
    sigma = np.concatenate([sp, so])

    centre = parallel.half_bins
    p_par0 = float(normalize_to_g2(parallel)[centre])
    p_orth0 = float(normalize_to_g2(orthogonal)[centre])
    overlap0 = float(np.clip(2.0 * (p_orth0 - p_par0), 0.05, 0.99))
    p0 = [params.rabi_frequency * NS, params.dephasing_rate * NS, params.decay_rate * NS,
          config.arm_delay * 1e-3, (jitter_ps if fix_jitter else max(jitter_ps, 1.0)) * 1e-3, overlap0,
          config.coherence_time / NS]
    lo = [p0[0], p0[1], p0[2], 0.5 * p0[3], 0.0, 0.0, 1e-3]
    hi = [p0[0], p0[1], p0[2], 1.5 * p0[3], 5.0, 1.0, 1e4]
    if np.max(np.abs(x[:, 0])) < 1.5 * p0[3]:
        # side dips outside the fitted range: the arm delay is not measured
        lo[3] = hi[3] = p0[3]
    if fix_jitter:
        lo[4] = hi[4] = p0[4]
    result = least_squares(FitProblem(HOM_PAIR, x, y, p0, sigma, (lo, hi)))

    pfit = result.parameters
    cov = result.covariance

    def visibility(p, smeared=True):
        zero = np.array([[0.0, 1.0], [0.0, 0.0]])
        q = p.copy()
        if not smeared:
            q[4] = 0.0
        par, orth = HOM_PAIR(zero, q)
        return (orth - par) / orth

    v = visibility(pfit)
    grad = np.zeros(pfit.size)
    for i in np.nonzero(result.errors > 0)[0]:
        h = fd_step(pfit)[i]
        up, dn = pfit.copy(), pfit.copy()
        up[i] += h
        dn[i] -= h
        grad[i] = (visibility(up) - visibility(dn)) / (2 * h)
    result.derived.update(
        visibility=float(v),
        visibility_error=float(math.sqrt(max(grad @ cov @ grad, 0.0))),
        visibility_intrinsic=float(visibility(pfit, smeared=False)),
        p_parallel_zero=float(HOM_PAIR(np.array([[0.0, 1.0]]), pfit)[0]),
        p_orthogonal_zero=float(HOM_PAIR(np.array([[0.0, 0.0]]), pfit)[0]),
    )
    return result


def hom_config_from_fit(result: FitResult) -> HomConfig:
    return HomConfig(arm_delay=int(round(result["arm_delay_ns"] * 1e3)),
                     mode_overlap=result["mode_overlap"],
                     coherence_time=result["coherence_time_ns"] * NS,
                     polarization=PARALLEL)


__all__ = [
    "BESSEL_INTENSITY", "EXP_OFFSET", "FAMILIES", "FitProblem", "FitResult", "G2_MODEL",
    "HOM_PAIR", "ModelFamily", "ORTHOGONAL", "PARALLEL", "best_of", "fit_g2", "fit_hom_pair",
    "fit_lifetime", "fit_spectrum", "jacobian", "jitter_for_g2_zero", "least_squares", "lorentzian_comb",
    "model_g2", "model_lorentzian_comb",
]
