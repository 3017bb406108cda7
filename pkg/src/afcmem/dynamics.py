"""Microscopic ensemble engine for Stark-controlled comb echoes.

Ions are sampled into comb peaks and into two electrically inequivalent
classes whose transitions shift by +Omega and -Omega under a field along
the crystal b axis. The forward-mode field radiated at time ``t`` is

    E(t) = sum_j c_j exp(i 2 pi delta_j t + i s_j phi(t))

with ``s_j = +/-1`` the class label and ``phi(t)`` the accumulated Stark
phase of the positive class. Because ``phi`` only depends on the class,
the per-class sums ``S_+(t)`` and ``S_-(t)`` are computed once per
ensemble and time grid and then combined for any timeline.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import erf

from afcmem import csvio
from afcmem.spectra import (
    FWHM_PER_SIGMA,
    GAUSS_AREA,
    CombSpec,
    check_uniform,
    efficiency_forward,
)

#: Re-anchor the phasor recurrence with an exact exponential this often.
_REANCHOR = 64


@dataclass(frozen=True)
class MaterialSpec:
    """Stark and relaxation parameters of the doping site.

    ``dipole_difference`` is |mu_g - mu_e| / h in Hz per V/m. The default
    (1.116e3, i.e. 111.6 kHz per V/cm) is a literature value for site 1 of
    Pr:Y2SiO5 and should be treated as a configuration constant.
    """

    dipole_difference: float = 1.116e3
    dipole_angle_to_b: float = 12.4
    electrode_gap: float = 6e-3
    excited_lifetime: float = 164e-6
    optical_coherence_time: float = 152e-6

    def __post_init__(self):
        for name in ("dipole_difference", "electrode_gap", "excited_lifetime", "optical_coherence_time"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.dipole_angle_to_b <= 90:
            raise ValueError("dipole_angle_to_b must lie in [0, 90] degrees")


def field_from_voltage(voltage: float, material: MaterialSpec) -> float:
    """Field in V/m for a voltage across the electrode gap."""
    return voltage / material.electrode_gap


def stark_shift(field_v_per_m, material: MaterialSpec):
    """Shift in Hz of the positive class; the negative class shifts by minus this."""
    # cos(pi/2) is 6e-17, not zero
    angle = material.dipole_angle_to_b
    proj = 0.0 if angle == 90 else math.cos(math.radians(angle))
    return material.dipole_difference * field_v_per_m * proj


@dataclass(frozen=True)
class StarkPulse:
    """Electric-field pulse along b.

    For ``shape="square"`` the field is ``amplitude`` on
    ``[start, start + duration]``. For ``shape="gaussian"`` ``duration``
    is the FWHM and the pulse is centred at ``start + duration`` so that
    it occupies ``[start, start + 2 * duration]`` for overlap checks.
    """

    start: float
    duration: float
    amplitude: float
    shape: str = "square"

    def __post_init__(self):
        if self.shape not in ("square", "gaussian"):
            raise ValueError(f"unknown pulse shape {self.shape!r}")
        if self.start < 0:
            raise ValueError("pulse start must be >= 0")
        if not self.duration > 0:
            raise ValueError("pulse duration must be positive")

    @property
    def center(self) -> float:
        if self.shape == "square":
            return self.start + 0.5 * self.duration
        return self.start + self.duration

    @property
    def end(self) -> float:
        if self.shape == "square":
            return self.start + self.duration
        return self.start + 2.0 * self.duration

    @property
    def extent(self) -> float:
        return self.end - self.start

    def shifted_to(self, start: float) -> "StarkPulse":
        return dataclasses.replace(self, start=start)

    def scaled(self, factor: float) -> "StarkPulse":
        return dataclasses.replace(self, amplitude=self.amplitude * factor)

    def area(self) -> float:
        """Time integral of the field, V s / m."""
        if self.shape == "square":
            return self.amplitude * self.duration
        return self.amplitude * self.duration * GAUSS_AREA

    def cumulative_area(self, t) -> np.ndarray:
        """Integral of the field from -inf to ``t``."""
        t = np.asarray(t, dtype=float)
        if self.shape == "square":
            return self.amplitude * np.clip(t - self.start, 0.0, self.duration)
        sigma = self.duration / FWHM_PER_SIGMA
        return 0.5 * self.area() * (1.0 + erf((t - self.center) / (math.sqrt(2.0) * sigma)))


def stark_phase(pulse: StarkPulse, material: MaterialSpec) -> tuple[float, float]:
    """Total phase (positive class, negative class) acquired over the pulse."""
    phi = 2.0 * math.pi * stark_shift(pulse.area(), material)
    return float(phi), float(-phi)


def pulse_for_phase(
    phase: float,
    material: MaterialSpec,
    duration: float = 23e-9,
    shape: str = "gaussian",
    start: float = 0.0,
) -> StarkPulse:
    """Pulse whose positive-class phase equals ``phase`` radians."""
    unit = StarkPulse(start, duration, 1.0, shape)
    per_volt = 2.0 * math.pi * stark_shift(unit.area(), material)
    if per_volt == 0:
        raise ValueError("material has no Stark response along b")
    return unit.scaled(phase / per_volt)


@dataclass(frozen=True)
class StarkTimeline:
    """Ordered, non-overlapping Stark pulses acting on one material."""

    pulses: tuple[StarkPulse, ...] = ()
    material: MaterialSpec = field(default_factory=MaterialSpec)
    kick_threshold: float = 0.1

    def __post_init__(self):
        pulses = tuple(sorted(self.pulses, key=lambda p: p.start))
        for a, b in zip(pulses, pulses[1:]):
            if b.start < a.end:
                raise ValueError(f"pulses overlap: {a} and {b}")
        object.__setattr__(self, "pulses", pulses)

    @property
    def phases(self) -> list[tuple[float, float]]:
        return [stark_phase(p, self.material) for p in self.pulses]

    def swapped(self) -> "StarkTimeline":
        """Timeline with every field negated."""
        return dataclasses.replace(self, pulses=tuple(p.scaled(-1.0) for p in self.pulses))

    def positive_phase(self, t, spacing: float) -> np.ndarray:
        """Accumulated phase of the positive class at times ``t``.

        Pulses shorter than ``kick_threshold / spacing`` act as
        instantaneous kicks at their centre; longer pulses are integrated
        exactly.
        """
        t = np.asarray(t, dtype=float)
        phi = np.zeros_like(t)
        k = 2.0 * math.pi * stark_shift(1.0, self.material)
        for p in self.pulses:
            if p.extent <= self.kick_threshold / spacing:
                phi = phi + np.where(t >= p.center, k * p.area(), 0.0)
            else:
                phi = phi + k * p.cumulative_area(t)
        return phi


@dataclass(frozen=True, eq=False)
class IonEnsemble:
    """Sampled ions, stored sorted so the positive class comes first.

    ``detuning`` is the offset from the ion's own peak centre (Hz);
    ``weight`` is the excitation amplitude c_j; ``spatial_phase`` is k z_j.
    """

    spec: CombSpec
    peak_index: np.ndarray
    detuning: np.ndarray
    stark_class: np.ndarray
    weight: np.ndarray
    spatial_phase: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        arrays = dict(
            peak_index=np.asarray(self.peak_index, dtype=np.int64),
            detuning=np.asarray(self.detuning, dtype=float),
            stark_class=np.asarray(self.stark_class, dtype=np.int8),
            weight=np.asarray(self.weight, dtype=complex),
            spatial_phase=np.asarray(self.spatial_phase, dtype=float),
        )
        n = {a.shape for a in arrays.values()}
        if len(n) != 1 or arrays["detuning"].ndim != 1:
            raise ValueError("per-ion arrays must be 1-D with equal length")
        if not np.all(np.isin(arrays["stark_class"], (-1, 1))):
            raise ValueError("stark_class entries must be +1 or -1")
        if not np.all(np.isfinite(arrays["weight"])):
            raise ValueError("weights must be finite")
        if np.any(arrays["peak_index"] < 0) or np.any(arrays["peak_index"] >= self.spec.peak_count):
            raise ValueError("peak index out of range")
        # stable sort: positive class first, original order kept within a class
        order = np.argsort(-arrays["stark_class"], kind="stable")
        for k, a in arrays.items():
            a = a[order]
            a.setflags(write=False)
            object.__setattr__(self, k, a)

    def __len__(self):
        return self.detuning.size

    @property
    def n_plus(self) -> int:
        return int(np.count_nonzero(self.stark_class == 1))

    @property
    def n_minus(self) -> int:
        return len(self) - self.n_plus

    @property
    def total_detuning(self) -> np.ndarray:
        s = self.spec
        return s.center_frequency + s.spacing * self.peak_index + self.detuning

    def class_imbalance(self) -> float:
        return (self.n_plus - self.n_minus) / len(self)

    def with_classes_swapped(self) -> "IonEnsemble":
        return dataclasses.replace(self, stark_class=-self.stark_class)

    def with_spatial_phase(self, spatial_phase) -> "IonEnsemble":
        return dataclasses.replace(self, spatial_phase=spatial_phase)

    def forward_weights(self) -> np.ndarray:
        """Amplitudes projected on the phase-matched forward mode.

        The k z imprint from absorption is undone by the emission mode
        with the same wavevector, so only ``c_j`` survives.
        """
        kz = self.spatial_phase
        return self.weight * np.exp(-1j * kz) * np.exp(1j * kz)


def _allocate(n: int, multipliers: Sequence[float]) -> np.ndarray:
    """Integer split of ``n`` proportional to ``multipliers`` (largest remainder)."""
    m = np.asarray(multipliers, dtype=float)
    exact = n * m / m.sum()
    counts = np.floor(exact).astype(np.int64)
    short = n - counts.sum()
    if short:
        order = np.argsort(-(exact - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def input_spectrum_weights(detuning: np.ndarray, pulse_fwhm: float, carrier: float) -> np.ndarray:
    """Spectral field amplitude of a Gaussian input pulse of intensity FWHM ``pulse_fwhm``."""
    x = np.pi * pulse_fwhm * (detuning - carrier)
    return np.exp(-(x**2) / (4.0 * math.log(2.0)))


def sample_ensemble(
    spec: CombSpec,
    n_ions: int,
    seed: int,
    input_pulse_fwhm: float | None = None,
) -> IonEnsemble:
    """Draw ``n_ions`` ions into the comb peaks and the two Stark classes.

    Ions are split between peaks in proportion to the height multipliers;
    within a peak detunings are Gaussian with FWHM ``spec.peak_fwhm``.
    Each ion joins the positive class with probability 1/2. With
    ``input_pulse_fwhm`` the excitation amplitudes follow the spectrum of
    a Gaussian input pulse centred on the comb; otherwise all are 1.
    """
    n_ions = int(n_ions)
    if n_ions < 2 * spec.peak_count:
        raise ValueError(f"need at least {2 * spec.peak_count} ions, got {n_ions}")
    rng = np.random.default_rng(seed)
    counts = _allocate(n_ions, spec.height_multipliers)
    peak = np.repeat(np.arange(spec.peak_count), counts)
    sigma = spec.peak_fwhm / FWHM_PER_SIGMA
    detuning = rng.normal(0.0, sigma, n_ions)
    cls = np.where(rng.random(n_ions) < 0.5, 1, -1).astype(np.int8)
    kz = rng.uniform(0.0, 2.0 * np.pi, n_ions)
    weight = np.ones(n_ions, dtype=complex)
    ens = IonEnsemble(spec, peak, detuning, cls, weight, kz, seed)
    if input_pulse_fwhm is not None:
        carrier = float(np.mean(spec.peak_centers))
        w = input_spectrum_weights(ens.total_detuning, input_pulse_fwhm, carrier)
        ens = dataclasses.replace(ens, weight=w.astype(complex))
    return ens


def balanced_ensemble(spec: CombSpec, n_per_class: int, seed: int) -> IonEnsemble:
    """Exactly balanced ensemble: every positive ion has a negative twin.

    The twins share detuning, weight and spatial phase, so a +/- pi/2
    kick cancels the forward field exactly.
    """
    half = sample_ensemble(spec, n_per_class, seed)
    cat = lambda a, b: np.concatenate([a, b])  # noqa: E731
    return IonEnsemble(
        spec,
        cat(half.peak_index, half.peak_index),
        cat(half.detuning, half.detuning),
        cat(np.ones(len(half), np.int8), -np.ones(len(half), np.int8)),
        cat(half.weight, half.weight),
        cat(half.spatial_phase, half.spatial_phase),
        seed,
    )


def class_sums(ensemble: IonEnsemble, t) -> np.ndarray:
    """Per-class forward field sums, shape ``(2, len(t))`` (positive, negative).

    Uniform grids use a phasor recurrence re-anchored with an exact
    exponential every few steps; any other ``t`` is evaluated directly.
    Reductions run in a fixed order, so results do not depend on chunking.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    nu = ensemble.total_detuning
    w = ensemble.forward_weights()
    npl = ensemble.n_plus
    out = np.empty((2, t.size), dtype=complex)
    uniform = False
    if t.size > 2:
        try:
            dt = check_uniform(t, "time grid", rtol=1e-9)
            uniform = True
        except ValueError:
            uniform = False
    if not uniform:
        for k, tk in enumerate(t):
            z = w * np.exp(2j * np.pi * nu * tk)
            out[0, k] = z[:npl].sum()
            out[1, k] = z[npl:].sum()
        return out
    step = np.exp(2j * np.pi * nu * dt)
    z = None
    for k in range(t.size):
        if k % _REANCHOR == 0:
            z = w * np.exp(2j * np.pi * nu * t[k])
        else:
            z *= step
        out[0, k] = z[:npl].sum()
        out[1, k] = z[npl:].sum()
    return out


@dataclass(frozen=True)
class EmissionTrace:
    """Forward-emitted intensity on a uniform time grid.

    ``intensity`` is scaled so the free first echo at ``1/spacing`` equals
    the analytic recall efficiency there; ``scale`` is that factor applied
    to the raw |field|^2 and ``echo_duration`` the integral of the
    normalised free first echo divided by its peak (s).
    """

    t: np.ndarray
    intensity: np.ndarray
    scale: float
    echo_duration: float
    spacing: float

    def __post_init__(self):
        if np.any(self.intensity < 0):
            raise ValueError("intensity must be non-negative")

    @property
    def step(self) -> float:
        return float(self.t[1] - self.t[0])

    def value_near(self, t0: float, window: float | None = None) -> tuple[float, float]:
        """(time, intensity) of the maximum within ``window`` of ``t0``."""
        window = 0.25 / self.spacing if window is None else window
        sel = np.flatnonzero(np.abs(self.t - t0) <= window)
        if sel.size == 0:
            raise ValueError(f"no grid samples within {window:g} s of {t0:g} s")
        i = sel[np.argmax(self.intensity[sel])]
        return float(self.t[i]), float(self.intensity[i])

    def bin_efficiency(self, edges) -> np.ndarray:
        """Echo efficiency collected in each time bin.

        The integral of intensity over the bin divided by ``echo_duration``,
        so a whole free first echo contributes its analytic efficiency.
        """
        edges = np.asarray(edges, dtype=float)
        dt = self.step
        idx = np.clip(np.searchsorted(edges, self.t, side="right") - 1, -1, edges.size - 1)
        valid = (idx >= 0) & (idx < edges.size - 1)
        out = np.zeros(edges.size - 1)
        np.add.at(out, idx[valid], self.intensity[valid] * dt)
        return out / self.echo_duration

    def to_csv(self, path):
        return csvio.write_columns(path, ("t_s", "intensity"), (self.t, self.intensity))


def check_time_grid(spec: CombSpec, grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 3:
        raise ValueError("time grid needs at least 3 samples")
    if grid[0] < 0:
        raise ValueError("time grid must start at t >= 0")
    dt = check_uniform(grid, "time grid", rtol=1e-9)
    limit = 1.0 / (4.0 * spec.peak_count * spec.spacing)
    if dt > limit * (1 + 1e-9):
        raise ValueError(f"time step {dt:g} s coarser than 1/(4 M Delta) = {limit:g} s")
    return grid


def echo_grid(spec: CombSpec, n_echoes: float, per_period: int | None = None) -> np.ndarray:
    """Uniform grid from 0 to ``n_echoes / spacing`` with every m/Delta on a sample."""
    if per_period is None:
        per_period = max(32, 4 * spec.peak_count)
    per_period = max(int(per_period), 4 * spec.peak_count)
    n = int(math.ceil(n_echoes * per_period))
    return np.arange(n + 1) / (per_period * spec.spacing)


def _reference_scale(ensemble: IonEnsemble) -> float:
    t1 = 1.0 / ensemble.spec.spacing
    s = class_sums(ensemble, [t1])
    raw = abs(s[0, 0] + s[1, 0]) ** 2
    if raw == 0:
        raise ValueError("free first echo vanishes; cannot normalise")
    return efficiency_forward(ensemble.spec, t1) / raw


def _echo_duration(ensemble: IonEnsemble, scale: float, per_period: int = 256) -> float:
    s = ensemble.spec
    t = (1.0 + (np.arange(per_period) - per_period // 2) / per_period) / s.spacing
    sums = class_sums(ensemble, t)
    inten = scale * np.abs(sums[0] + sums[1]) ** 2
    return float(inten.sum() * (t[1] - t[0]) / inten[per_period // 2])


def attrition_factors(
    spec: CombSpec, t: np.ndarray, phase_plus, phase_minus
) -> np.ndarray:
    """Amplitude factor left after earlier unsuppressed echoes.

    At each rephasing time m/Delta the in-phase fraction
    cos^2((phi_+ - phi_-)/2) of the analytic echo efficiency is emitted,
    and the remaining amplitude is multiplied by sqrt(1 - eta_echo). The
    step is applied half a period after the echo so each echo is emitted
    with its pre-echo amplitude.
    """
    period = 1.0 / spec.spacing
    m_max = int(np.floor(t[-1] / period))
    factor = np.ones_like(t)
    amp = 1.0
    for m in range(1, m_max + 1):
        tm = m * period
        dphi = float(phase_plus(tm) - phase_minus(tm))
        frac = math.cos(0.5 * dphi) ** 2
        eta = min(1.0, efficiency_forward(spec, tm) * frac)
        amp *= math.sqrt(1.0 - eta)
        factor[t > tm + 0.5 * period] = amp
    return factor


class _Engine:
    """Caches class sums and normalisation for one ensemble and grid."""

    def __init__(self, ensemble: IonEnsemble, grid):
        self.ensemble = ensemble
        self.t = check_time_grid(ensemble.spec, grid)
        self.sums = class_sums(ensemble, self.t)
        self.scale = _reference_scale(ensemble)
        self.echo_duration = _echo_duration(ensemble, self.scale)

    def trace(
        self,
        timeline: StarkTimeline,
        attrition: bool = True,
        decay: bool = False,
    ) -> EmissionTrace:
        spec = self.ensemble.spec
        t = self.t

        def phase_plus(x):
            return timeline.positive_phase(x, spec.spacing)

        def phase_minus(x):
            return -timeline.positive_phase(x, spec.spacing)

        pp = phase_plus(t)
        field_ = np.exp(1j * pp) * self.sums[0] + np.exp(-1j * pp) * self.sums[1]
        inten = self.scale * (field_.real**2 + field_.imag**2)
        if attrition:
            inten = inten * attrition_factors(spec, t, phase_plus, phase_minus) ** 2
        if decay:
            inten = inten * np.exp(-2.0 * t / timeline.material.optical_coherence_time)
        return EmissionTrace(t.copy(), inten, self.scale, self.echo_duration, spec.spacing)


def emission_trace(
    ensemble: IonEnsemble,
    timeline: StarkTimeline,
    grid,
    attrition: bool = True,
    decay: bool = False,
) -> EmissionTrace:
    """Forward intensity of the ensemble under ``timeline`` on ``grid``.

    ``attrition`` removes the emitted energy of each unsuppressed echo from
    the stored excitation; ``decay`` applies exp(-2 t / T2) using the
    material's optical coherence time.
    """
    return _Engine(ensemble, grid).trace(timeline, attrition=attrition, decay=decay)


def two_pulse_timeline(
    pulse_template: StarkPulse,
    first_center: float,
    second_center: float,
    material: MaterialSpec,
) -> StarkTimeline:
    """Two copies of ``pulse_template`` centred at the given times.

    Overlapping copies are merged into one pulse of doubled amplitude
    (Stark phases add linearly in the field).
    """
    offset = pulse_template.center - pulse_template.start
    a = pulse_template.shifted_to(first_center - offset)
    b = pulse_template.shifted_to(second_center - offset)
    if b.start < a.end:
        return StarkTimeline((a.scaled(2.0),), material)
    return StarkTimeline((a, b), material)


def default_first_pulse_center(spec: CombSpec) -> float:
    return 0.25 / spec.spacing


def echo_map(
    ensemble: IonEnsemble,
    delays: Sequence[float],
    grid,
    pulse_template: StarkPulse,
    material: MaterialSpec,
    first_center: float | None = None,
    attrition: bool = True,
) -> list[EmissionTrace]:
    """One trace per delay between the first and second Stark pulse."""
    delays = np.asarray(delays, dtype=float)
    if np.any(delays < 0) or np.any(np.diff(delays) < 0):
        raise ValueError("delays must be sorted and non-negative")
    spec = ensemble.spec
    first_center = default_first_pulse_center(spec) if first_center is None else first_center
    engine = _Engine(ensemble, grid)
    return [
        engine.trace(two_pulse_timeline(pulse_template, first_center, first_center + d, material), attrition)
        for d in delays
    ]


def suppression_ratio(ensemble: IonEnsemble, timeline: StarkTimeline) -> float:
    """First-echo intensity with the single pulse relative to without it."""
    spec = ensemble.spec
    if len(timeline.pulses) != 1 or timeline.pulses[0].end > 1.0 / spec.spacing:
        raise ValueError("expected exactly one pulse ending before 1/Delta")
    t1 = 1.0 / spec.spacing
    s = class_sums(ensemble, [t1])[:, 0]
    phi = float(timeline.positive_phase(t1, spec.spacing))
    on = abs(np.exp(1j * phi) * s[0] + np.exp(-1j * phi) * s[1]) ** 2
    off = abs(s[0] + s[1]) ** 2
    return float(on / off)


@dataclass(frozen=True)
class Recall:
    echo_time: float
    efficiency: float
    trace: EmissionTrace


def on_demand_recall(
    ensemble: IonEnsemble,
    n: int,
    pulse_template: StarkPulse,
    material: MaterialSpec,
    grid=None,
    attrition: bool = True,
) -> Recall:
    """Suppress with one pulse before 1/Delta and restore with a second in ((n-1)/Delta, n/Delta).

    The first pulse is centred at 0.25/Delta and the second at
    (n - 0.5)/Delta.
    """
    if int(n) != n or n < 1:
        raise ValueError("n must be a positive integer")
    spec = ensemble.spec
    period = 1.0 / spec.spacing
    phi, _ = stark_phase(pulse_template, material)
    if not math.isclose(abs(phi), math.pi / 2, rel_tol=1e-6):
        raise ValueError(f"pulse template gives phase {phi:.6g} rad, expected +/- pi/2")
    if pulse_template.extent >= 0.25 * period:
        raise ValueError("pulse template too long for the comb period")
    if grid is None:
        grid = echo_grid(spec, n + 0.5)
    timeline = two_pulse_timeline(pulse_template, 0.25 * period, (n - 0.5) * period, material)
    trace = emission_trace(ensemble, timeline, grid, attrition=attrition)
    t_echo, eff = trace.value_near(n * period)
    return Recall(t_echo, eff, trace)


def free_timeline(material: MaterialSpec | None = None) -> StarkTimeline:
    return StarkTimeline((), material or MaterialSpec())
