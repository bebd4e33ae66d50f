"""Run configuration: a versioned JSON document validated with pydantic."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .emitter import EmitterParams
from .errors import ParameterError
from .modulator import ModulatorConfig
from .optics import DetectorModel, HomConfig, PARALLEL

SCHEMA = "qsim.run/1"

EXPERIMENTS = ("hbt", "lifetime", "spectrum", "hom", "bessel-sweep")
STOCHASTIC = {"hbt", "lifetime", "hom"}
# sections each experiment reads
REQUIRED = {
    "hbt": ("emitter", "detector", "hbt"),
    "lifetime": ("lifetime",),
    "spectrum": ("modulator", "spectrum"),
    "hom": ("emitter", "detector", "hom"),
    "bessel-sweep": ("modulator", "spectrum", "sweep"),
}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EmitterSection(_Section):
    lifetime_ps: float = Field(745.0, gt=0)
    rabi_ratio: float = Field(1.0, gt=0)
    dephasing_ratio: float = Field(1.0, ge=0)

    def params(self) -> EmitterParams:
        return EmitterParams.from_lifetime(self.lifetime_ps * 1e-12, self.rabi_ratio,
                                           self.dephasing_ratio)


class DetectorSection(_Section):
    jitter_sigma_ps: float = Field(0.0, ge=0)
    dead_time_ps: int = Field(0, ge=0)
    efficiency: float = Field(1.0, ge=0, le=1)
    dark_rate_hz: float = Field(0.0, ge=0)

    def model(self) -> DetectorModel:
        return DetectorModel(self.jitter_sigma_ps, self.dead_time_ps, self.efficiency,
                             self.dark_rate_hz)


class ModulatorSection(_Section):
    beta: float = Field(math.pi / 3, ge=0)
    drive_ghz: float = Field(5.0, ge=0)
    phase: float = Field(0.0, ge=0, lt=2 * math.pi)
    epsilon: float = Field(1e-9, gt=0, le=1e-3)

    def config(self) -> ModulatorConfig | None:
        """None when the modulator is switched off (zero drive or index)."""
        if self.drive_ghz == 0 or self.beta == 0:
            return None
        return ModulatorConfig(self.beta, self.drive_ghz * 1e9, self.phase)


class HbtSection(_Section):
    photons: int = Field(1_000_000, gt=0)
    bin_ps: int = Field(64, gt=0)
    window_ps: int = Field(20_000, gt=0)
    segments: int = Field(4, ge=1)
    fit: bool = True


class LifetimeSection(_Section):
    lifetime_ps: float = Field(745.0, gt=0)
    points: int = Field(200, ge=4)
    span_ns: float = Field(5.0, gt=0)
    amplitude: float = Field(1000.0, gt=0)
    offset: float = Field(20.0, ge=0)
    noise: float = Field(0.01, ge=0)


class SpectrumSection(_Section):
    source_linewidth_mhz: float = Field(400.0, gt=0)
    etalon_linewidth_mhz: float = Field(100.0, gt=0)
    comb_order: int = Field(3, ge=0)


class HomSection(_Section):
    arm_delay_ps: int = Field(35_000, gt=0)
    mode_overlap: float = Field(0.8, ge=0, le=1)
    coherence_time_ns: float = Field(2.0, gt=0)
    pairs: int = Field(1_000_000, gt=0)
    bin_ps: int = Field(64, gt=0)
    window_ps: int = Field(80_000, gt=0)
    fit_window_ns: Optional[float] = Field(None, gt=0)
    # treat the detector section's jitter as known instead of fitting it
    fix_jitter: bool = True

    def config(self) -> HomConfig:
        return HomConfig(self.arm_delay_ps, self.mode_overlap, self.coherence_time_ns * 1e-9,
                         PARALLEL)


class SweepSection(_Section):
    beta_start: float = Field(0.0, ge=0)
    beta_stop: float = Field(math.pi, ge=0)
    beta_step: float = Field(0.1, gt=0)

    @model_validator(mode="after")
    def _ordered(self):
        if self.beta_stop < self.beta_start:
            raise ValueError("beta_stop must be >= beta_start")
        return self

    def betas(self) -> list[float]:
        count = int(math.floor((self.beta_stop - self.beta_start) / self.beta_step + 1e-9)) + 1
        return [round(self.beta_start + i * self.beta_step, 12) for i in range(count)]


class RunConfig(_Section):
    schema_: Literal["qsim.run/1"] = Field(alias="schema")
    experiment: Literal["hbt", "lifetime", "spectrum", "hom", "bessel-sweep"]
    seed: Optional[int] = Field(None, ge=0)
    output_dir: str = "out"
    emitter: Optional[EmitterSection] = None
    detector: Optional[DetectorSection] = None
    modulator: Optional[ModulatorSection] = None
    hbt: Optional[HbtSection] = None
    lifetime: Optional[LifetimeSection] = None
    spectrum: Optional[SpectrumSection] = None
    hom: Optional[HomSection] = None
    sweep: Optional[SweepSection] = None

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    @model_validator(mode="after")
    def _sections_present(self):
        missing = [s for s in REQUIRED[self.experiment] if getattr(self, s) is None]
        if missing:
            raise ValueError(f"experiment {self.experiment!r} needs section(s): "
                             + ", ".join(missing))
        if self.experiment in STOCHASTIC and self.seed is None:
            raise ValueError(f"experiment {self.experiment!r} is stochastic and needs a seed")
        return self

    def to_json(self) -> str:
        data = self.model_dump(by_alias=True, exclude_none=True)
        return json.dumps(data, indent=2, sort_keys=True) + "\n"


def _describe(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        where = ".".join(str(x) for x in e["loc"]) or "config"
        parts.append(f"{where}: {e['msg']}")
    return "; ".join(parts)


def parse_config(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParameterError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ParameterError("config must be a JSON object")
    if "schema" not in data:
        raise ParameterError(f"schema: missing (expected {SCHEMA!r})")
    if data["schema"] != SCHEMA:
        raise ParameterError(f"schema: unsupported version {data['schema']!r} (expected {SCHEMA!r})")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ParameterError(_describe(exc)) from exc


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParameterError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text)
