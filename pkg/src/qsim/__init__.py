"""Simulation and analysis of single photons from a resonantly driven two-level emitter."""

from .correlator import (CorrelationHistogram, cross_correlate, merge, normalize_to_g2,
                         read_timetags, write_timetags)
from .emitter import (EmitterParams, TimeTagStream, g2_analytic, oracle_bloch_g2,
                      sample_emissions)
from .errors import (FormatError, NumericalError, ParameterError, QsimError,
                     RankDeficiencyError, SamplingError)
from .fitting import (FitProblem, FitResult, fit_hom_pair, least_squares, model_g2,
                      model_lorentzian_comb)
from .modulator import (ModulatorConfig, SidebandLadder, SpectrumTrace, bessel_j,
                        sideband_amplitudes, spectrum_trace)
from .optics import (DetectorModel, HomConfig, hom_p2_orthogonal, hom_p2_parallel,
                     hom_visibility, simulate_hom_clicks)

__version__ = "0.1.0"

__all__ = [
    "CorrelationHistogram", "DetectorModel", "EmitterParams", "FitProblem", "FitResult",
    "FormatError", "HomConfig", "ModulatorConfig", "NumericalError", "ParameterError",
    "QsimError", "RankDeficiencyError", "SamplingError", "SidebandLadder", "SpectrumTrace",
    "TimeTagStream", "bessel_j", "cross_correlate", "fit_hom_pair", "g2_analytic",
    "hom_p2_orthogonal", "hom_p2_parallel", "hom_visibility", "least_squares", "merge",
    "model_g2", "model_lorentzian_comb", "normalize_to_g2", "oracle_bloch_g2",
    "read_timetags", "sample_emissions", "sideband_amplitudes", "simulate_hom_clicks",
    "spectrum_trace", "write_timetags",
]
