"""Run configuration: one validated document shared by every subcommand."""

from __future__ import annotations

import hashlib
import json
import os
from importlib import resources
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

ENV_VAR = "AFC_CONFIG"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class MaterialConfig(_Section):
    dipole_difference_hz_per_v_m: float = Field(1.116e3, gt=0)
    dipole_angle_deg: float = Field(12.4, ge=0, le=90)
    electrode_gap_m: float = Field(6e-3, gt=0)
    excited_lifetime_s: float = Field(164e-6, gt=0)
    optical_coherence_time_s: float = Field(152e-6, gt=0)


class CombConfig(_Section):
    peak_count: int = Field(4, ge=2)
    spacing_hz: float = Field(2.3e6, gt=0)
    peak_fwhm_hz: float = Field(140e3, gt=0)
    peak_optical_depth: float = Field(45.0, ge=0)
    center_frequency_hz: float = 0.0
    height_multipliers: Optional[list[float]] = None


class EfficiencyConfig(_Section):
    times_s: list[float] = Field(default_factory=lambda: [k * 0.1e-6 for k in range(51)], min_length=1)
    cross_validate: bool = False
    cross_validate_ions: int = Field(20000, ge=100)

    @model_validator(mode="after")
    def _times(self):
        if any(t < 0 for t in self.times_s):
            raise ValueError("storage times must be >= 0")
        return self


class StarkPulseConfig(_Section):
    shape: Literal["gaussian", "square"] = "gaussian"
    duration_s: float = Field(23e-9, gt=0)
    phase_rad: float = 1.5707963267948966


class EchoMapConfig(_Section):
    n_ions: int = Field(20000, ge=2)
    delay_start_s: float = Field(0.0, ge=0)
    delay_stop_s: float = Field(4.5e-6, ge=0)
    delay_step_s: float = Field(50e-9, gt=0)
    delays_s: Optional[list[float]] = None
    n_echoes: float = Field(12.0, gt=0)
    samples_per_period: int = Field(64, ge=8)
    input_pulse_fwhm_s: Optional[float] = Field(150e-9, gt=0)
    attrition: bool = True
    mode: Literal["bright", "weak"] = "bright"
    pulse: StarkPulseConfig = StarkPulseConfig()

    def delay_list(self) -> list[float]:
        if self.delays_s is not None:
            return list(self.delays_s)
        n = int(round((self.delay_stop_s - self.delay_start_s) / self.delay_step_s))
        return [self.delay_start_s + k * self.delay_step_s for k in range(n + 1)]

    @model_validator(mode="after")
    def _delays(self):
        if self.delays_s is not None:
            if not self.delays_s:
                raise ValueError("delays_s must not be empty")
            if any(d < 0 for d in self.delays_s) or sorted(self.delays_s) != list(self.delays_s):
                raise ValueError("delays_s must be sorted and non-negative")
        elif self.delay_stop_s < self.delay_start_s:
            raise ValueError("delay_stop_s must be >= delay_start_s")
        return self


class PrepConfig(_Section):
    levels_file: Optional[str] = None
    sequence_file: Optional[str] = None
    afc_width_mhz: Optional[float] = Field(None, gt=0)
    freq_start_hz: float = -3e6
    freq_stop_hz: float = 21e6
    freq_step_hz: float = Field(10e3, gt=0)
    window_width_hz: float = Field(18e6, gt=0)
    window_start_hz: float = 0.0
    residual: float = Field(1e-3, gt=0, lt=1)
    background_optical_depth: float = Field(47.0, gt=0)
    linewidth_hz: Optional[float] = Field(None, gt=0)
    drive: Literal["target", "ground", "all"] = "ground"
    saturate: bool = True


class DetectorResponseConfig(_Section):
    model: Literal["single_pole", "tabulated", "none"] = "single_pole"
    bandwidth_hz: float = Field(3.5e6, gt=0)
    table_file: Optional[str] = None
    compensate: bool = True
    floor: float = Field(1e-3, gt=0, lt=1)


class ReadoutConfig(_Section):
    profile: Literal["comb", "single_peak", "flat", "file"] = "comb"
    profile_file: Optional[str] = None
    peak_optical_depth: float = Field(0.8, ge=0)
    chirp_rate_hz_per_s: float = Field(1e12, gt=0)
    chirp_span_hz: float = Field(30e6, gt=0)
    chirp_center_hz: Optional[float] = None
    sample_rate_hz: Optional[float] = Field(None, gt=0)
    profile_step_hz: float = Field(5e3, gt=0)
    detector: DetectorResponseConfig = DetectorResponseConfig()
    fit: bool = True


class CavityConfig(_Section):
    r1: float = Field(0.96, ge=0, le=1)
    r2: float = Field(0.999, gt=0, le=1)
    peak_fwhm_hz: float = Field(1e3, gt=0)
    peak_optical_depth: float = Field(1.0, ge=0)
    storage_time_s: float = Field(100e-6, ge=0)
    finesse_min: float = Field(1.05, gt=1)
    finesse_max: float = Field(1000.0, gt=1)
    finesse_count: int = Field(4000, ge=2)


class CountingConfig(_Section):
    quantum_efficiency: float = Field(0.69, ge=0, le=1)
    dark_rate_hz: float = Field(26.0, ge=0)
    bin_width_s: float = Field(350e-9, gt=0)
    mean_photons: float = Field(0.097, ge=0)
    shots_per_cycle: int = Field(2000, ge=1)
    cycles: int = Field(15, ge=1)
    path_transmission: Optional[float] = Field(None, ge=0, le=1)
    target_snr: float = Field(570.0, gt=0)
    reference_efficiency: float = Field(0.38, gt=0, le=1)


class RunConfig(_Section):
    """Everything a run needs; defaults reproduce the Pr:Y2SiO5 experiment."""

    seed: int = Field(0, ge=0)
    material: MaterialConfig = MaterialConfig()
    comb: CombConfig = CombConfig()
    efficiency: EfficiencyConfig = EfficiencyConfig()
    echo_map: EchoMapConfig = EchoMapConfig()
    prep: PrepConfig = PrepConfig()
    readout: ReadoutConfig = ReadoutConfig()
    cavity: CavityConfig = CavityConfig()
    counting: CountingConfig = CountingConfig()

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def with_seed(self, seed: int | None) -> "RunConfig":
        return self if seed is None else self.model_copy(update={"seed": int(seed)})


def default_config_text() -> str:
    return resources.files("afcmem").joinpath("data/default_config.yaml").read_text(encoding="utf-8")


def load_config(path=None) -> tuple[RunConfig, Path | None]:
    """Load and validate a config; ``None`` falls back to ``$AFC_CONFIG`` then the packaged defaults.

    Relative file references inside the config resolve against the
    config file's directory.
    """
    if path is None:
        path = os.environ.get(ENV_VAR) or None
    if path is None:
        return RunConfig.model_validate(yaml.safe_load(default_config_text()) or {}), None
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if not isinstance(data, dict):
        raise ValueError("config must be a mapping")
    return RunConfig.model_validate(data), path.resolve().parent


def resolve(base: Path | None, name: str | None) -> Path | None:
    if name is None:
        return None
    p = Path(name)
    return p if p.is_absolute() or base is None else base / p
