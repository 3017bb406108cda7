"""Photon-counting statistics for weak coherent input states."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from afcmem import csvio


@dataclass(frozen=True)
class DetectorSpec:
    """Single-photon detector: quantum efficiency, dark-count rate (Hz), time-bin width (s)."""

    quantum_efficiency: float = 0.69
    dark_rate: float = 26.0
    bin_width: float = 350e-9

    def __post_init__(self):
        if not 0 <= self.quantum_efficiency <= 1:
            raise ValueError("quantum_efficiency must be in [0, 1]")
        if not self.dark_rate >= 0:
            raise ValueError("dark_rate must be >= 0")
        if not self.bin_width > 0:
            raise ValueError("bin_width must be positive")


@dataclass(frozen=True)
class ShotPlan:
    """How many weak pulses are stored and detected.

    ``path_transmission`` lumps every loss between the crystal and the
    detector that is not otherwise calibrated; it is a free parameter.
    """

    mean_photons: float = 0.097
    shots_per_cycle: int = 2000
    cycles: int = 15
    path_transmission: float = 1.0

    def __post_init__(self):
        if not self.mean_photons >= 0:
            raise ValueError("mean_photons must be >= 0")
        if int(self.shots_per_cycle) != self.shots_per_cycle or self.shots_per_cycle < 1:
            raise ValueError("shots_per_cycle must be a positive integer")
        if int(self.cycles) != self.cycles or self.cycles < 1:
            raise ValueError("cycles must be a positive integer")
        if not 0 <= self.path_transmission <= 1:
            raise ValueError("path_transmission must be in [0, 1]")

    @property
    def total_shots(self) -> int:
        return int(self.shots_per_cycle) * int(self.cycles)


def expected_signal(plan: ShotPlan, eta, det: DetectorSpec):
    """Mean number of detected echo photons accumulated over all shots."""
    return plan.mean_photons * np.asarray(eta) * plan.path_transmission * det.quantum_efficiency * plan.total_shots


def expected_dark(det: DetectorSpec, shots) -> float:
    """Mean dark counts in one time bin accumulated over ``shots``."""
    return det.dark_rate * det.bin_width * shots


def snr(signal_counts, dark_counts):
    """Signal over the unconditional noise floor (here: dark counts)."""
    dark = np.asarray(dark_counts, dtype=float)
    if np.any(dark <= 0):
        raise ValueError("noise floor must be positive")
    return np.asarray(signal_counts, dtype=float) / dark


def fit_path_transmission(target_snr: float, eta: float, plan: ShotPlan, det: DetectorSpec) -> float:
    """Path transmission that makes the expected SNR equal ``target_snr``.

    The SNR is linear in the transmission, so this is a closed-form
    one-parameter fit.
    """
    ideal = snr(expected_signal(ShotPlan(plan.mean_photons, plan.shots_per_cycle, plan.cycles, 1.0), eta, det),
                expected_dark(det, plan.total_shots))
    if not ideal > 0:
        raise ValueError("zero signal: transmission cannot be fitted")
    value = target_snr / float(ideal)
    if value > 1:
        raise ValueError(f"target SNR {target_snr:g} exceeds the lossless prediction {float(ideal):g}")
    return value


@dataclass(frozen=True)
class CountHistogram:
    """Counts per time bin summed over cycles; ``per_cycle`` keeps the split."""

    bin_start: np.ndarray
    counts: np.ndarray
    per_cycle: np.ndarray
    mean: np.ndarray
    seed: int

    @property
    def bin_width(self) -> float:
        return float(self.bin_start[1] - self.bin_start[0]) if self.bin_start.size > 1 else math.nan

    def to_csv(self, path):
        return csvio.write_columns(path, ("bin_start_s", "counts"), (self.bin_start, self.counts.astype(np.int64)))

    @classmethod
    def from_csv(cls, path) -> "CountHistogram":
        b, c = csvio.read_columns(path, ("bin_start_s", "counts"))
        c = c.astype(np.int64)
        return cls(b, c, c[None, :], c.astype(float), seed=-1)


def bin_edges(t_start: float, t_stop: float, det: DetectorSpec, offset: float = 0.0) -> np.ndarray:
    """Edges of contiguous detector bins covering ``[t_start, t_stop]``, one edge at ``offset``."""
    k0 = math.floor((t_start - offset) / det.bin_width)
    k1 = math.ceil((t_stop - offset) / det.bin_width)
    return offset + det.bin_width * np.arange(k0, k1 + 1)


def bin_means(plan: ShotPlan, trace, det: DetectorSpec, edges) -> np.ndarray:
    """Expected counts (signal + dark) per bin over the whole plan."""
    eta = trace.bin_efficiency(edges)
    widths = np.diff(edges)
    dark = det.dark_rate * widths * plan.total_shots
    return expected_signal(plan, eta, det) + dark


def simulate_detection(plan: ShotPlan, trace, det: DetectorSpec, seed: int,
                       edges=None) -> CountHistogram:
    """Poisson-sample detector counts per time bin.

    ``trace`` is an emission trace whose ``bin_efficiency`` gives the
    recall efficiency collected per bin. Each cycle draws from its own
    child of ``SeedSequence(seed)``, so results do not depend on how the
    cycles are scheduled.
    """
    if edges is None:
        edges = bin_edges(trace.t[0], trace.t[-1], det, offset=trace.t[0])
    edges = np.asarray(edges, dtype=float)
    mean = bin_means(plan, trace, det, edges)
    per_cycle_mean = mean / plan.cycles
    children = np.random.SeedSequence(seed).spawn(plan.cycles)
    per_cycle = np.stack([np.random.default_rng(c).poisson(per_cycle_mean) for c in children])
    return CountHistogram(edges[:-1].copy(), per_cycle.sum(axis=0), per_cycle, mean, int(seed))


def describe(plan: ShotPlan, det: DetectorSpec) -> dict:
    """Plain-dict record of the plan and detector for manifests."""
    return {"plan": asdict(plan), "detector": asdict(det)}
