"""Command-line front end.

    qsim run CONFIG.json [--output-dir DIR]
    qsim correlate-file A B --bin-ps 64 --window-ps 20000 [--channel-a N] [--channel-b N] [--out hist.csv]
    qsim bessel --beta 1.047 [--max-order N]
    qsim spectrum --beta 1.047 --drive-ghz 5 [--out spectrum.csv]

Exit status 1 means invalid input, 2 a numerical failure.
"""

from __future__ import annotations

import argparse
import io
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from ._util import atomic_write, max_workers
from .config import RunConfig, load_config
from .correlator import (cross_correlate, load_stream, normalize_to_g2, histogram_csv,
                         write_histogram_csv, write_timetags)
from .emitter import duration_for_photons, sample_emissions
from .errors import NumericalError, ParameterError
from .fitting import fit_g2, fit_hom_pair, fit_lifetime, fit_spectrum, histogram_data
from .modulator import (ModulatorConfig, bessel_j, sideband_amplitudes, spectrum_trace,
                        truncation_order)
from .optics import ORTHOGONAL, PARALLEL, apply_detector, simulate_hom_clicks, split_stream

EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2


def _fmt(value: float, digits: int = 4) -> str:
    return f"{value:.{digits}g}"


# --- experiments ----------------------------------------------------------------

def run_hbt(cfg: RunConfig, out: Path) -> dict[str, float]:
    params = cfg.emitter.params()
    section = cfg.hbt
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    duration = duration_for_photons(params, int(section.photons * 1.01))
    source = sample_emissions(params, duration, seeds[0], channel=0,
                              segments=section.segments)
    a, b = split_stream(source, seeds[1])
    detector = cfg.detector.model()
    a = apply_detector(a, detector, seeds[2])
    b = apply_detector(b, detector, seeds[3])
    write_timetags(out / "timetags.ttag", [a, b])
    hist = cross_correlate(a, b, section.bin_ps, section.window_ps,
                           partitions=min(max_workers(), 8))
    g2 = normalize_to_g2(hist)
    write_histogram_csv(out / "histogram.csv", hist, g2)
    summary = {"photons": float(len(source)), "g2_zero": float(g2[hist.half_bins])}
    if section.fit:
        tau, y, sigma = histogram_data(hist)
        fit = fit_g2(tau, y, sigma, guess=params, fixed=("dephasing",),
                     jitter_ns=detector.jitter_sigma * 1e-3)
        atomic_write(out / "fit_g2.json", fit.to_json())
        summary["lifetime_ps"] = fit.derived["lifetime_ps"]
    return summary


def run_lifetime(cfg: RunConfig, out: Path) -> dict[str, float]:
    section = cfg.lifetime
    rng = np.random.default_rng(cfg.seed)
    t_ns = np.linspace(0.0, section.span_ns, section.points)
    clean = section.amplitude * np.exp(-t_ns / (section.lifetime_ps * 1e-3)) + section.offset
    # proportional noise: each point carries the stated relative uncertainty
    counts = clean * (1.0 + section.noise * rng.standard_normal(t_ns.size))
    sigma = section.noise * np.abs(clean) if section.noise > 0 else None
    buf = io.StringIO()
    buf.write("t_ps,counts\n")
    for t, c in zip((t_ns * 1e3).tolist(), counts.tolist()):
        buf.write(f"{t!r},{c!r}\n")
    atomic_write(out / "decay.csv", buf.getvalue())
    fit = fit_lifetime(t_ns, counts, sigma)
    atomic_write(out / "fit_lifetime.json", fit.to_json())
    return {"lifetime_ps": fit.derived["lifetime_ps"],
            "lifetime_err_ps": fit.error("lifetime_ns") * 1e3}


def _spectrum_fit(beta: float, cfg: RunConfig):
    mod = cfg.modulator
    spec = cfg.spectrum
    drive = mod.drive_ghz * 1e9
    if drive <= 0:
        raise ParameterError("modulator.drive_ghz: must be > 0 for a spectrum")
    ladder = sideband_amplitudes(ModulatorConfig(beta, drive, mod.phase), epsilon=mod.epsilon)
    trace = spectrum_trace(ladder, spec.source_linewidth_mhz * 1e6,
                           spec.etalon_linewidth_mhz * 1e6)
    order = max(spec.comb_order, ladder.order)
    fit = fit_spectrum(trace.offsets, trace.intensities, drive, trace.line_width, order)
    return trace, fit


def run_spectrum(cfg: RunConfig, out: Path) -> dict[str, float]:
    trace, fit = _spectrum_fit(cfg.modulator.beta, cfg)
    trace.write_csv(out / "spectrum.csv")
    atomic_write(out / "fit_spectrum.json", fit.to_json())
    summary = {"w0": fit.derived["w0"], "integral": trace.integral()}
    if "carrier_ratio" in fit.derived:
        summary["carrier_ratio"] = fit.derived["carrier_ratio"]
    return summary


def run_bessel_sweep(cfg: RunConfig, out: Path) -> dict[str, float]:
    betas = cfg.sweep.betas()
    with ThreadPoolExecutor(max_workers=max_workers()) as pool:
        fits = list(pool.map(lambda b: _spectrum_fit(b, cfg)[1], betas))
    buf = io.StringIO()
    buf.write("beta,w0,w1,w2,j0_sq,j1_sq,j2_sq\n")
    worst = 0.0
    for beta, fit in zip(betas, fits):
        w = [fit.derived.get(f"w{n}", 0.0) for n in range(3)]
        j = [bessel_j(n, beta) ** 2 for n in range(3)]
        worst = max(worst, max(abs(x - y) for x, y in zip(w, j)))
        buf.write(",".join(repr(float(v)) for v in [beta, *w, *j]) + "\n")
    atomic_write(out / "bessel_sweep.csv", buf.getvalue())
    return {"points": float(len(betas)), "max_deviation": worst}


def run_hom(cfg: RunConfig, out: Path) -> dict[str, float]:
    params = cfg.emitter.params()
    section = cfg.hom
    hom = section.config()
    detector = cfg.detector.model()
    ladder = None
    if cfg.modulator is not None and cfg.modulator.config() is not None:
        ladder = sideband_amplitudes(cfg.modulator.config(), epsilon=cfg.modulator.epsilon)
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    hists = {}
    for pol, seed in zip((PARALLEL, ORTHOGONAL), seeds):
        hists[pol] = simulate_hom_clicks(params, hom.with_polarization(pol), detector,
                                         section.pairs, seed, section.bin_ps,
                                         section.window_ps, ladder=ladder)
        write_histogram_csv(out / f"hom_{pol}.csv", hists[pol])
    fit = fit_hom_pair(hists[PARALLEL], hists[ORTHOGONAL], params, hom,
                       jitter_ps=detector.jitter_sigma if section.fix_jitter
                       else max(detector.jitter_sigma, 50.0),
                       max_delay_ns=section.fit_window_ns, fix_jitter=section.fix_jitter)
    atomic_write(out / "fit_hom.json", fit.to_json())
    return {"visibility": fit.derived["visibility"],
            "visibility_err": fit.derived["visibility_error"],
            "mode_overlap": fit["mode_overlap"],
            "p_parallel_zero": fit.derived["p_parallel_zero"]}


EXPERIMENTS = {
    "hbt": run_hbt,
    "lifetime": run_lifetime,
    "spectrum": run_spectrum,
    "hom": run_hom,
    "bessel-sweep": run_bessel_sweep,
}


def run_config(cfg: RunConfig, output_dir: str | None = None) -> tuple[Path, dict[str, float]]:
    if output_dir is not None:
        cfg = cfg.model_copy(update={"output_dir": output_dir})
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = EXPERIMENTS[cfg.experiment](cfg, out)
    atomic_write(out / "effective_config.json", cfg.to_json())
    line = " ".join(f"{k}={_fmt(v)}" for k, v in summary.items())
    atomic_write(out / "summary.txt", line + "\n")
    return out, summary


# --- subcommands ---------------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = load_config(args.config)
    _, summary = run_config(cfg, args.output_dir)
    print(" ".join(f"{k}={_fmt(v)}" for k, v in summary.items()))
    return 0


def cmd_correlate(args) -> int:
    a = load_stream(args.a, args.channel_a)
    b = load_stream(args.b, args.channel_b)
    same = Path(args.a).resolve() == Path(args.b).resolve() and a.channel == b.channel
    hist = cross_correlate(a, b, args.bin_ps, args.window_ps,
                           partitions=min(max_workers(), 8), exclude_self=same)
    if hist.counts.sum() and hist.count_a and hist.count_b and hist.duration:
        g2 = normalize_to_g2(hist)
    else:
        g2 = np.zeros(hist.n_bins)
    text = histogram_csv(hist, g2)
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_bessel(args) -> int:
    if not (math.isfinite(args.beta) and args.beta >= 0):
        raise ParameterError("--beta must be finite and >= 0")
    order = args.max_order if args.max_order is not None else truncation_order(args.beta) \
        if args.beta > 0 else 0
    sys.stdout.write("n,j_n,j_n_sq\n")
    for n in range(-order, order + 1):
        j = bessel_j(n, args.beta)
        sys.stdout.write(f"{n},{j!r},{j * j!r}\n")
    return 0


def cmd_spectrum(args) -> int:
    if not args.drive_ghz > 0:
        raise ParameterError("--drive-ghz must be > 0")
    ladder = sideband_amplitudes(ModulatorConfig(args.beta, args.drive_ghz * 1e9))
    trace = spectrum_trace(ladder, args.source_linewidth_mhz * 1e6,
                           args.etalon_linewidth_mhz * 1e6)
    if args.out:
        trace.write_csv(args.out)
    else:
        sys.stdout.write(trace.to_csv())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qsim", description="Single-photon source simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment from a JSON config")
    p.add_argument("config")
    p.add_argument("--output-dir", default=None, help="override the config's output_dir")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("correlate-file", help="coincidence histogram of two time-tag files")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--bin-ps", type=int, default=64)
    p.add_argument("--window-ps", type=int, default=20_000)
    p.add_argument("--channel-a", type=int, default=None, help="channel to read from A")
    p.add_argument("--channel-b", type=int, default=None, help="channel to read from B")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("bessel", help="sideband amplitudes J_n(beta)")
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--max-order", type=int, default=None)
    p.set_defaults(func=cmd_bessel)

    p = sub.add_parser("spectrum", help="etalon spectrum of a modulated photon")
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--drive-ghz", type=float, required=True)
    p.add_argument("--source-linewidth-mhz", type=float, default=400.0)
    p.add_argument("--etalon-linewidth-mhz", type=float, default=100.0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_spectrum)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
