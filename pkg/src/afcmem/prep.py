"""Spectral hole burning of the comb in a three-level-ground hyperfine system.

Ion classes are labelled by ``nu0``, the frequency of their
|1/2g> -> |1/2e> transition. The transition g -> e of a class sits at
``nu0 + G[g] + X[e]`` where ``G`` and ``X`` are the cumulative ground and
excited hyperfine energies. Each class keeps the occupation of its three
ground levels; excitation is followed immediately by branching back to
the ground levels (excited-state populations are not tracked).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml
from scipy.signal import find_peaks

from afcmem.spectra import AbsorptionProfile, FWHM_PER_SIGMA, check_uniform

GROUND = ("1/2g", "3/2g", "5/2g")
EXCITED = ("1/2e", "3/2e", "5/2e")

TRANSFER_EFFICIENCY = 0.05
CLEAN_SCAN_WIDTH = 0.8e6


def _level_index(name: str, names: Sequence[str]) -> int:
    key = name.strip().replace(" ", "")
    if key not in names:
        raise ValueError(f"unknown level {name!r}; expected one of {names}")
    return names.index(key)


@dataclass(frozen=True)
class LevelScheme:
    """Hyperfine splittings (Hz), oscillator strengths s[g][e] and branching b[e][g]."""

    ground_splittings: tuple[float, float]
    excited_splittings: tuple[float, float]
    strengths: np.ndarray
    branching: np.ndarray

    def __post_init__(self):
        if any(not x > 0 for x in (*self.ground_splittings, *self.excited_splittings)):
            raise ValueError("all splittings must be positive")
        s = np.array(self.strengths, dtype=float)
        b = np.array(self.branching, dtype=float)
        if s.shape != (3, 3) or b.shape != (3, 3):
            raise ValueError("strength and branching tables must be 3x3")
        if np.any(s <= 0) or np.any(s > 1):
            raise ValueError("oscillator strengths must lie in (0, 1]")
        if np.any(b < 0) or np.any(np.abs(b.sum(axis=1) - 1) > 1e-12):
            raise ValueError("each branching row must be non-negative and sum to 1")
        s.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "strengths", s)
        object.__setattr__(self, "branching", b)

    @property
    def ground_energies(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.ground_splittings)])

    @property
    def excited_energies(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.excited_splittings)])

    @property
    def offsets(self) -> np.ndarray:
        """offsets[g, e] = transition frequency minus the class label nu0."""
        return self.ground_energies[:, None] + self.excited_energies[None, :]

    @classmethod
    def from_dict(cls, d: dict) -> "LevelScheme":
        unknown = set(d) - {"ground_splittings_hz", "excited_splittings_hz", "strengths", "branching", "description"}
        if unknown:
            raise ValueError(f"unknown level-scheme keys: {sorted(unknown)}")
        s = np.array(d["strengths"], dtype=float)
        b = d.get("branching")
        if b is None:
            b = np.full((3, 3), 1.0 / 3.0)
        b = np.array(b, dtype=float)
        return cls(tuple(float(x) for x in d["ground_splittings_hz"]),
                   tuple(float(x) for x in d["excited_splittings_hz"]), s, b)

    @classmethod
    def from_yaml(cls, path) -> "LevelScheme":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"level-scheme file not found: {path}")
        return cls.from_dict(yaml.safe_load(path.read_text(encoding="utf-8")))

    @classmethod
    def default(cls) -> "LevelScheme":
        """Pr:Y2SiO5 site 1, from the packaged ``pr_yso_levels.yaml``."""
        text = resources.files("afcmem").joinpath("data/pr_yso_levels.yaml").read_text(encoding="utf-8")
        return cls.from_dict(yaml.safe_load(text))


@dataclass(frozen=True)
class PopulationState:
    """Ground-level occupations for classes on a uniform ``nu0`` grid."""

    class_freq: np.ndarray
    pop: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.class_freq, dtype=float)
        p = np.array(self.pop, dtype=float)
        check_uniform(f, "class grid")
        if p.shape != (f.size, 3):
            raise ValueError("pop must have shape (n_classes, 3)")
        if np.any(p < -1e-15) or np.any(p.sum(axis=1) > 1 + 1e-12):
            raise ValueError("occupations must be >= 0 with per-class sum <= 1")
        p = np.clip(p, 0.0, None)
        p.setflags(write=False)
        object.__setattr__(self, "class_freq", f)
        object.__setattr__(self, "pop", p)

    @classmethod
    def thermal(cls, class_freq) -> "PopulationState":
        class_freq = np.asarray(class_freq, dtype=float)
        return cls(class_freq, np.full((class_freq.size, 3), 1.0 / 3.0))

    @property
    def step(self) -> float:
        return float(self.class_freq[1] - self.class_freq[0])

    @property
    def totals(self) -> np.ndarray:
        return self.pop.sum(axis=1)


@dataclass(frozen=True)
class BurnPulseSpec:
    """One row of a burn sequence.

    ``target`` is a (ground, excited) index pair; ``kind`` is ``"sechyp"``
    or ``"hybrid"`` (sechyp edges around a linear scan of ``scan_width``).
    ``t_cutoff`` is carried along but unused by the collapsed dynamics.
    """

    name: str
    center: float
    width: float
    t_fwhm: float
    t_cutoff: float
    target: tuple[int, int]
    repetitions: int = 1
    kind: str = "sechyp"
    scan_width: float = 0.0

    def __post_init__(self):
        if self.repetitions < 1 or int(self.repetitions) != self.repetitions:
            raise ValueError("repetitions must be an integer >= 1")
        if not (self.width > 0 and self.t_fwhm > 0):
            raise ValueError("pulse widths must be positive")
        if self.kind not in ("sechyp", "hybrid"):
            raise ValueError(f"unknown pulse kind {self.kind!r}")
        if self.scan_width < 0:
            raise ValueError("scan_width must be >= 0")
        g, e = self.target
        if g not in range(3) or e not in range(3):
            raise ValueError("target indices must be 0..2")

    @property
    def bandwidth(self) -> float:
        return self.width + (self.scan_width if self.kind == "hybrid" else 0.0)

    @property
    def edge_scale(self) -> float:
        """tanh edge scale (Hz): sechyp truncation rate ln(2+sqrt 3)/(pi t_FWHM)."""
        return math.log(2.0 + math.sqrt(3.0)) / (math.pi * self.t_fwhm)

    @classmethod
    def from_dict(cls, d: dict) -> "BurnPulseSpec":
        allowed = {"name", "nu_mhz", "nu_width_mhz", "t_fwhm_us", "t_cutoff_us", "target", "reps", "kind", "scan_width_mhz"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown burn-pulse keys: {sorted(unknown)}")
        g, e = (s.strip() for s in str(d["target"]).replace("->", ",").split(","))
        kind = d.get("kind", "sechyp")
        scan = d.get("scan_width_mhz", CLEAN_SCAN_WIDTH / 1e6 if kind == "hybrid" else 0.0)
        return cls(
            name=str(d["name"]),
            center=float(d["nu_mhz"]) * 1e6,
            width=float(d["nu_width_mhz"]) * 1e6,
            t_fwhm=float(d["t_fwhm_us"]) * 1e-6,
            t_cutoff=float(d["t_cutoff_us"]) * 1e-6,
            target=(_level_index(g, GROUND), _level_index(e, EXCITED)),
            repetitions=int(d.get("reps", 1)),
            kind=kind,
            scan_width=float(scan) * 1e6,
        )


@dataclass(frozen=True)
class BurnSequence:
    pulses: tuple[BurnPulseSpec, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "pulses", tuple(self.pulses))

    def __iter__(self):
        return iter(self.pulses)

    def __len__(self):
        return len(self.pulses)

    def validate(self) -> None:
        if not self.pulses:
            raise ValueError("burn sequence is empty")

    def with_burnback_width(self, width: float) -> "BurnSequence":
        """Copy with every burnback (non-cleaning) pulse given bandwidth ``width`` (Hz)."""
        return BurnSequence(tuple(
            dataclasses.replace(p, width=width) if p.kind == "sechyp" else p for p in self.pulses
        ))

    def only(self, *names: str) -> "BurnSequence":
        return BurnSequence(tuple(p for p in self.pulses if p.name in names))

    @classmethod
    def from_list(cls, rows: list[dict]) -> "BurnSequence":
        return cls(tuple(BurnPulseSpec.from_dict(r) for r in rows))

    @classmethod
    def from_yaml(cls, path) -> "BurnSequence":
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        return cls.from_list(data["pulses"] if isinstance(data, dict) else data)

    @classmethod
    def default(cls) -> "BurnSequence":
        """The ten-pulse burnback and cleaning sequence packaged with the library."""
        text = resources.files("afcmem").joinpath("data/burn_sequence.yaml").read_text(encoding="utf-8")
        data = yaml.safe_load(text)
        return cls.from_list(data["pulses"])


def transfer_profile(pulse: BurnPulseSpec, detuning, strength: float = 1.0,
                     efficiency: float = TRANSFER_EFFICIENCY) -> np.ndarray:
    """Transfer probability per shot versus laser-frame frequency ``detuning`` (Hz).

    A plateau of ``efficiency * strength`` across the pulse bandwidth with
    tanh edges; the plateau centre is exactly ``efficiency * strength``.
    """
    x = np.asarray(detuning, dtype=float) - pulse.center
    half = 0.5 * pulse.bandwidth
    w = pulse.edge_scale
    shape = 0.5 * (np.tanh((x + half) / w) - np.tanh((x - half) / w))
    shape /= math.tanh(half / w)
    return np.clip(efficiency * strength * shape, 0.0, 1.0)


def transition_freqs(state: PopulationState, scheme: LevelScheme) -> np.ndarray:
    """Array (n_classes, 3, 3) of transition frequencies."""
    return state.class_freq[:, None, None] + scheme.offsets[None, :, :]


def burn_window(state: PopulationState, scheme: LevelScheme, width: float,
                start: float = 0.0, residual: float = 1e-3) -> PopulationState:
    """Optically pump every class out of levels that absorb in ``[start, start + width]``.

    A level is dark if none of its transitions falls in the window. Bright
    levels are cut down to a common occupation chosen so the optical depth
    left inside the window is ``residual`` times the depth just outside
    its shallower edge; the removed population is shared equally between
    the class's dark levels. Classes with no dark level are emptied.
    """
    span = state.class_freq[-1] - state.class_freq[0]
    if width < 0 or width > span:
        raise ValueError(f"window width {width:g} Hz outside [0, class-grid span {span:g}]")
    if width == 0:
        return state
    nu = transition_freqs(state, scheme)
    inside = (nu >= start) & (nu <= start + width)
    bright = inside.any(axis=2)                       # (n, 3)
    pop = state.pop.copy()
    s = scheme.strengths
    # depth (per class-grid bin, strength units) carried by dark levels at each edge
    step = state.step
    edge = []
    for f in (start - 3 * step, start + width + 3 * step):
        hit = np.abs(nu - f) < 0.5 * step
        edge.append(float(np.sum(np.where(~bright[:, :, None] & hit, pop[:, :, None] * s, 0.0))))
    cap = residual * min(edge) / s.sum()
    excess = np.where(bright, np.clip(pop - cap, 0.0, None), 0.0)
    pop -= excess
    n_dark = (~bright).sum(axis=1)
    moved = excess.sum(axis=1)
    has_dark = n_dark > 0
    share = np.zeros_like(moved)
    share[has_dark] = moved[has_dark] / n_dark[has_dark]
    pop += np.where(~bright, share[:, None], 0.0)
    pop[~has_dark] = 0.0
    return PopulationState(state.class_freq, pop)


def pulse_probabilities(pulse: BurnPulseSpec, state: PopulationState, scheme: LevelScheme,
                        drive: str = "ground", saturate: bool = True) -> np.ndarray:
    """Per-shot excitation probability for every class and transition, shape (n, 3, 3).

    The pulse reaches ``efficiency`` on its target transition. Other
    transitions under the pulse are driven in proportion to their
    oscillator strength relative to the target's; with ``saturate`` that
    ratio is capped at 1 (an adiabatic pulse transfers no better on a
    stronger line). ``drive`` selects which transitions respond:
    ``"target"`` only the target line, ``"ground"`` every line out of the
    target ground level, ``"all"`` every line.
    """
    g0, e0 = pulse.target
    s = scheme.strengths
    rel = s / s[g0, e0]
    if saturate:
        rel = np.minimum(rel, 1.0)
    mask = np.zeros((3, 3), dtype=bool)
    if drive == "all":
        mask[:] = True
    elif drive == "ground":
        mask[g0, :] = True
    elif drive == "target":
        mask[g0, e0] = True
    else:
        raise ValueError(f"unknown drive mode {drive!r}")
    nu = transition_freqs(state, scheme)
    p = np.zeros_like(nu)
    for g, e in zip(*np.nonzero(mask)):
        p[:, g, e] = transfer_profile(pulse, nu[:, g, e], strength=rel[g, e])
    total = p.sum(axis=2, keepdims=True)
    return np.where(total > 1.0, p / np.where(total > 0, total, 1.0), p)


def apply_pulse(state: PopulationState, pulse: BurnPulseSpec, scheme: LevelScheme,
                drive: str = "ground", saturate: bool = True) -> PopulationState:
    """Apply ``pulse.repetitions`` shots: excite, then branch back to the ground levels."""
    p = pulse_probabilities(pulse, state, scheme, drive, saturate)
    if not p.any():
        return state
    b = scheme.branching
    pop = state.pop.copy()
    for _ in range(pulse.repetitions):
        exc = pop[:, :, None] * p                      # (n, g, e)
        pop = pop - exc.sum(axis=2) + exc.sum(axis=1) @ b
    return PopulationState(state.class_freq, np.clip(pop, 0.0, None))


def class_grid_for(freq_grid, scheme: LevelScheme, margin: float = 1e6) -> np.ndarray:
    """Class grid (same step as ``freq_grid``) holding every class that can absorb on it."""
    freq_grid = np.asarray(freq_grid, dtype=float)
    step = check_uniform(freq_grid, "frequency grid")
    lo = freq_grid[0] - scheme.offsets.max() - margin
    hi = freq_grid[-1] - scheme.offsets.min() + margin
    k0 = math.floor((lo - freq_grid[0]) / step)
    k1 = math.ceil((hi - freq_grid[0]) / step)
    return freq_grid[0] + step * np.arange(k0, k1 + 1)


def _deposit(freq_grid: np.ndarray, positions: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Linear (cloud-in-cell) deposition of point weights onto a uniform grid."""
    step = freq_grid[1] - freq_grid[0]
    x = (positions - freq_grid[0]) / step
    i0 = np.floor(x).astype(np.int64)
    frac = x - i0
    out = np.zeros(freq_grid.size + 1)
    for idx, w in ((i0, weights * (1 - frac)), (i0 + 1, weights * frac)):
        ok = (idx >= 0) & (idx < freq_grid.size)
        np.add.at(out, idx[ok], w[ok])
    return out[:-1]


def _broaden(alpha: np.ndarray, step: float, linewidth: float) -> np.ndarray:
    sigma = linewidth / FWHM_PER_SIGMA / step
    half = int(math.ceil(5 * sigma))
    k = np.exp(-0.5 * (np.arange(-half, half + 1) / sigma) ** 2)
    k /= k.sum()
    return np.convolve(alpha, k, mode="same")


def transition_components(state: PopulationState, scheme: LevelScheme, freq_grid,
                          background: float = 47.0, linewidth: float | None = None) -> np.ndarray:
    """Optical depth of each (ground, excited) transition, shape (3, 3, n_freq).

    Scaled so a thermal (1/3 per level) distribution of classes gives
    ``background`` summed over all transitions.
    """
    freq_grid = np.asarray(freq_grid, dtype=float)
    step = check_uniform(freq_grid, "frequency grid")
    if not math.isclose(state.step, step, rel_tol=1e-9):
        raise ValueError("class grid and frequency grid must share a step")
    linewidth = step if linewidth is None else linewidth
    s = scheme.strengths
    thermal = s.sum() / 3.0
    nu = transition_freqs(state, scheme)
    out = np.zeros((3, 3, freq_grid.size))
    for g in range(3):
        for e in range(3):
            dep = _deposit(freq_grid, nu[:, g, e], state.pop[:, g] * s[g, e])
            out[g, e] = _broaden(dep, step, linewidth) * background / thermal
    return np.clip(out, 0.0, None)


def absorption_profile(state: PopulationState, scheme: LevelScheme, freq_grid,
                       background: float = 47.0, linewidth: float | None = None) -> AbsorptionProfile:
    comps = transition_components(state, scheme, freq_grid, background, linewidth)
    return AbsorptionProfile(np.asarray(freq_grid, dtype=float), comps.sum(axis=(0, 1)))


@dataclass(frozen=True)
class PrepResult:
    state: PopulationState
    profile: AbsorptionProfile
    components: np.ndarray


def run_sequence(seq: BurnSequence, scheme: LevelScheme, freq_grid,
                 window_width: float = 18e6, window_start: float = 0.0,
                 residual: float = 1e-3, background: float = 47.0,
                 linewidth: float | None = None, drive: str = "ground",
                 saturate: bool = True) -> PrepResult:
    """Burn the transmission window, then apply every pulse of ``seq`` in order."""
    freq_grid = np.asarray(freq_grid, dtype=float)
    state = PopulationState.thermal(class_grid_for(freq_grid, scheme))
    state = burn_window(state, scheme, window_width, window_start, residual)
    for pulse in seq:
        state = apply_pulse(state, pulse, scheme, drive, saturate)
    comps = transition_components(state, scheme, freq_grid, background, linewidth)
    profile = AbsorptionProfile(freq_grid, comps.sum(axis=(0, 1)))
    return PrepResult(state, profile, comps)


def comb_peaks(profile: AbsorptionProfile, lo: float, hi: float,
               prominence: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """(frequencies, depths) of local maxima in ``[lo, hi]`` with at least ``prominence``."""
    idx, _ = find_peaks(profile.alpha_l, prominence=prominence)
    f = profile.freq[idx]
    keep = (f >= lo) & (f <= hi)
    return f[keep], profile.alpha_l[idx][keep]
