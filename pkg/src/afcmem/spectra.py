"""Analytic comb models: profiles, effective absorption and recall efficiency.

The efficiency model treats each comb peak as a Gaussian of FWHM ``gamma``;
storage time enters only through the Gaussian dephasing envelope
``exp(-(t * gamma_tilde)**2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from afcmem import csvio

#: sqrt(pi / (4 ln 2)); ratio of a Gaussian's area to (height * FWHM).
GAUSS_AREA = math.sqrt(math.pi / (4.0 * math.log(2.0)))
#: FWHM / sigma for a Gaussian.
FWHM_PER_SIGMA = math.sqrt(8.0 * math.log(2.0))

ALPHA_BOUNDS = (1e-9, 200.0)


class CavityDivergenceError(ValueError):
    """Raised when the cavity round-trip factor reaches unity."""


class FitError(RuntimeError):
    """Raised when a fit fails to converge or the input is degenerate."""


@dataclass(frozen=True)
class CombSpec:
    """Periodic Gaussian absorption comb.

    Attributes
    ----------
    peak_count : int
        Number of peaks M.
    spacing : float
        Peak separation Delta in Hz.
    peak_fwhm : float
        Peak FWHM gamma in Hz.
    peak_optical_depth : float
        Peak optical depth alpha*L (dimensionless).
    center_frequency : float
        Offset of the comb's first peak, Hz.
    height_multipliers : tuple of float
        Per-peak depth multipliers, default all ones.
    """

    peak_count: int
    spacing: float
    peak_fwhm: float
    peak_optical_depth: float
    center_frequency: float = 0.0
    height_multipliers: tuple[float, ...] | None = None

    def __post_init__(self):
        if int(self.peak_count) != self.peak_count or self.peak_count < 2:
            raise ValueError(f"peak_count must be an integer >= 2, got {self.peak_count}")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        if not 0 < self.peak_fwhm < self.spacing:
            raise ValueError("peak_fwhm must satisfy 0 < gamma < spacing")
        if not self.peak_optical_depth >= 0 or not math.isfinite(self.peak_optical_depth):
            raise ValueError("peak_optical_depth must be finite and >= 0")
        if self.height_multipliers is None:
            object.__setattr__(self, "height_multipliers", (1.0,) * int(self.peak_count))
        else:
            mult = tuple(float(m) for m in self.height_multipliers)
            if len(mult) != self.peak_count:
                raise ValueError("need one height multiplier per peak")
            if any(not m > 0 for m in mult):
                raise ValueError("height multipliers must be positive")
            object.__setattr__(self, "height_multipliers", mult)

    @property
    def finesse(self) -> float:
        return comb_finesse(self)

    @property
    def peak_centers(self) -> np.ndarray:
        return self.center_frequency + self.spacing * np.arange(self.peak_count)


@dataclass(frozen=True)
class AbsorptionProfile:
    """Optical depth sampled on a uniform, increasing frequency grid (Hz)."""

    freq: np.ndarray
    alpha_l: np.ndarray

    def __post_init__(self):
        freq = np.asarray(self.freq, dtype=float)
        alpha = np.asarray(self.alpha_l, dtype=float)
        if freq.ndim != 1 or freq.shape != alpha.shape or freq.size < 2:
            raise ValueError("freq and alpha_l must be 1-D arrays of equal length >= 2")
        check_uniform(freq, "frequency grid")
        if not np.all(np.isfinite(alpha)) or np.any(alpha < 0):
            raise ValueError("optical depth samples must be finite and >= 0")
        freq.setflags(write=False)
        alpha.setflags(write=False)
        object.__setattr__(self, "freq", freq)
        object.__setattr__(self, "alpha_l", alpha)

    @property
    def step(self) -> float:
        return float(self.freq[1] - self.freq[0])

    def to_csv(self, path):
        return csvio.write_columns(path, ("freq_hz", "alphaL"), (self.freq, self.alpha_l))

    @classmethod
    def from_csv(cls, path) -> "AbsorptionProfile":
        f, a = csvio.read_columns(path, ("freq_hz", "alphaL"))
        return cls(f, a)


@dataclass(frozen=True)
class CavitySpec:
    r1: float
    r2: float

    def __post_init__(self):
        if not 0 <= self.r1 < 1:
            raise ValueError("R1 must be in [0, 1)")
        if not 0 < self.r2 <= 1:
            raise ValueError("R2 must be in (0, 1]")


@dataclass(frozen=True)
class EfficiencyCurve:
    """Measured or synthetic recall efficiency versus storage time."""

    t: np.ndarray
    eta: np.ndarray
    stderr: np.ndarray = field(default=None)

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        eta = np.asarray(self.eta, dtype=float)
        err = np.zeros_like(t) if self.stderr is None else np.asarray(self.stderr, dtype=float)
        if not (t.ndim == 1 and t.shape == eta.shape == err.shape):
            raise ValueError("t, eta and stderr must be 1-D arrays of equal length")
        if np.any(t < 0):
            raise ValueError("storage times must be >= 0")
        if np.any(eta < 0) or np.any(eta > 1):
            raise ValueError("efficiencies must lie in [0, 1]")
        if np.any(err < 0):
            raise ValueError("standard errors must be >= 0")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "stderr", err)

    def __len__(self):
        return self.t.size

    def to_csv(self, path):
        return csvio.write_columns(path, ("t_s", "eta", "stderr"), (self.t, self.eta, self.stderr))

    @classmethod
    def from_csv(cls, path) -> "EfficiencyCurve":
        return cls(*csvio.read_columns(path, ("t_s", "eta", "stderr")))


def check_uniform(grid: np.ndarray, what: str = "grid", rtol: float = 1e-6) -> float:
    """Return the step of a strictly increasing uniform grid or raise."""
    d = np.diff(grid)
    if d.size == 0 or np.any(d <= 0):
        raise ValueError(f"{what} must be strictly increasing")
    step = (grid[-1] - grid[0]) / (grid.size - 1)
    if np.max(np.abs(d - step)) > rtol * abs(step):
        raise ValueError(f"{what} must be uniform")
    return float(step)


def comb_finesse(spec: CombSpec) -> float:
    """Finesse F = spacing / FWHM."""
    return spec.spacing / spec.peak_fwhm


def effective_absorption(alpha_l, finesse):
    """Comb-averaged optical depth (alpha L / F) * sqrt(pi / 4 ln 2)."""
    finesse = np.asarray(finesse, dtype=float)
    if np.any(finesse <= 0):
        raise ValueError("finesse must be positive")
    alpha_l = np.asarray(alpha_l, dtype=float)
    if np.any(alpha_l < 0):
        raise ValueError("alpha_l must be >= 0")
    out = alpha_l / finesse * GAUSS_AREA
    return float(out) if out.ndim == 0 else out


def gamma_tilde(fwhm):
    """Dephasing rate in rad/s for a Gaussian peak of the given FWHM (Hz)."""
    fwhm = np.asarray(fwhm, dtype=float)
    if np.any(fwhm <= 0):
        raise ValueError("peak FWHM must be positive")
    out = 2.0 * np.pi * fwhm / FWHM_PER_SIGMA
    return float(out) if out.ndim == 0 else out


def dephasing_envelope(spec: CombSpec, t):
    t = np.asarray(t, dtype=float)
    return np.exp(-((t * gamma_tilde(spec.peak_fwhm)) ** 2))


def _forward_from_effective(a_eff, envelope):
    return a_eff**2 * np.exp(-a_eff) * envelope


def efficiency_forward(spec: CombSpec, t):
    """Free-space forward recall efficiency at storage time ``t`` (s).

    Works on scalars or arrays of ``t``; results are clamped to [0, 1].
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("storage time must be >= 0")
    a_eff = effective_absorption(spec.peak_optical_depth, comb_finesse(spec))
    eta = np.clip(_forward_from_effective(a_eff, dephasing_envelope(spec, t)), 0.0, 1.0)
    return float(eta) if eta.ndim == 0 else eta


def efficiency_cavity(spec: CombSpec, cavity: CavitySpec, t, tol: float = 1e-12):
    """Recall efficiency for an impedance-matching cavity around the comb.

    Assumes lossless mirrors apart from their transmission.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("storage time must be >= 0")
    a_eff = effective_absorption(spec.peak_optical_depth, comb_finesse(spec))
    round_trip = math.sqrt(cavity.r1 * cavity.r2) * math.exp(-a_eff)
    if round_trip >= 1.0 - tol:
        raise CavityDivergenceError(
            f"cavity divergence: sqrt(R1 R2) exp(-alpha_eff L) = {round_trip:.15g} >= 1"
        )
    num = 4.0 * a_eff**2 * math.exp(-2.0 * a_eff) * (1.0 - cavity.r1) ** 2 * cavity.r2
    eta = num * dephasing_envelope(spec, t) / (1.0 - round_trip) ** 4
    eta = np.clip(eta, 0.0, 1.0)
    return float(eta) if eta.ndim == 0 else eta


def scan_cavity_finesse(
    peak_fwhm: float,
    alpha_l: float,
    cavity: CavitySpec,
    t: float,
    finesse_grid: Sequence[float] | None = None,
):
    """Tabulate cavity efficiency over a finesse grid at fixed peak width.

    Returns ``(finesse, eta, best_index)``. The spacing is set to
    ``finesse * peak_fwhm`` for each point.
    """
    if finesse_grid is None:
        finesse_grid = np.geomspace(1.05, 1000.0, 4000)
    fgrid = np.asarray(finesse_grid, dtype=float)
    eta = np.array(
        [
            efficiency_cavity(
                CombSpec(2, f * peak_fwhm, peak_fwhm, alpha_l), cavity, t
            )
            for f in fgrid
        ]
    )
    return fgrid, eta, int(np.argmax(eta))


def _gaussian(x, center, fwhm):
    return np.exp(-4.0 * math.log(2.0) * ((x - center) / fwhm) ** 2)


def build_comb_profile(spec: CombSpec, grid) -> AbsorptionProfile:
    """Sample the sum of the comb's Gaussian peaks on a uniform grid.

    The grid must contain every peak center and resolve each FWHM with at
    least eight samples.
    """
    grid = np.asarray(grid, dtype=float)
    step = check_uniform(grid, "frequency grid")
    if spec.peak_fwhm / step < 8:
        raise ValueError(
            f"grid under-resolved: {spec.peak_fwhm / step:.2f} samples per FWHM (need >= 8)"
        )
    centers = spec.peak_centers
    if centers[0] < grid[0] or centers[-1] > grid[-1]:
        raise ValueError("grid does not span all comb peaks")
    alpha = np.zeros_like(grid)
    for c, m in zip(centers, spec.height_multipliers):
        alpha += spec.peak_optical_depth * m * _gaussian(grid, c, spec.peak_fwhm)
    return AbsorptionProfile(grid, alpha)


def default_grid(spec: CombSpec, resolution: float = 10e3, margin_fwhm: float = 10.0):
    """Uniform grid covering the comb with ``margin_fwhm`` widths on each side."""
    lo = spec.center_frequency - margin_fwhm * spec.peak_fwhm
    hi = spec.peak_centers[-1] + margin_fwhm * spec.peak_fwhm
    n = int(math.ceil((hi - lo) / resolution)) + 1
    return lo + resolution * np.arange(n)


@dataclass(frozen=True)
class AlphaFit:
    """Result of :func:`fit_alpha`.

    ``interval`` is the 95 % interval from the linearised residual
    covariance; ``branch`` names the side of the efficiency maximum
    (effective depth 2) that the estimate was restricted to.
    """

    alpha_l: float
    stderr: float
    interval: tuple[float, float]
    branch: str
    chi2: float
    n_points: int


def fit_alpha(
    curve: EfficiencyCurve,
    peak_fwhm: float,
    spacing: float,
    branch: str = "high",
    bounds: tuple[float, float] = ALPHA_BOUNDS,
) -> AlphaFit:
    """Least-squares estimate of the peak optical depth from an efficiency curve.

    The model's time dependence is fixed by ``peak_fwhm``; only the
    amplitude (a^2 e^-a in the effective depth a) depends on alpha L, and it
    is not monotonic. ``branch="high"`` searches effective depth >= 2,
    ``"low"`` searches below it.
    """
    if len(curve) < 3:
        raise FitError("need at least 3 points to fit")
    if np.all(curve.eta == 0):
        raise FitError("degenerate curve: all efficiencies are zero")
    if branch not in ("high", "low"):
        raise ValueError("branch must be 'high' or 'low'")
    if not 0 < peak_fwhm < spacing:
        raise ValueError("need 0 < peak_fwhm < spacing")

    finesse = spacing / peak_fwhm
    env = np.exp(-((curve.t * gamma_tilde(peak_fwhm)) ** 2))
    w = np.ones_like(curve.eta)
    if np.all(curve.stderr > 0):
        w = 1.0 / curve.stderr**2

    def model(alpha_l):
        return _forward_from_effective(alpha_l / finesse * GAUSS_AREA, env)

    def cost(alpha_l):
        r = curve.eta - model(alpha_l)
        return float(np.sum(w * r * r))

    # effective depth 2 separates the two branches
    turn = 2.0 * finesse / GAUSS_AREA
    lo, hi = bounds
    lo, hi = (max(lo, turn), hi) if branch == "high" else (lo, min(hi, turn))
    if not lo < hi:
        raise FitError(f"{branch} branch is empty inside bounds {bounds}")

    res = minimize_scalar(cost, bounds=(lo, hi), method="bounded", options={"xatol": 1e-10 * hi})
    if not res.success:
        raise FitError(f"alpha fit did not converge: {res.message}")
    a_hat = float(res.x)

    # linearised covariance from a central-difference Jacobian
    h = 1e-6 * max(a_hat, 1.0)
    jac = (model(a_hat + h) - model(a_hat - h)) / (2 * h)
    jtj = float(np.sum(w * jac * jac))
    n = len(curve)
    chi2 = cost(a_hat)
    if jtj <= 0:
        raise FitError("model is insensitive to alpha L at the optimum")
    if np.all(curve.stderr > 0):
        var = 1.0 / jtj
    else:
        var = chi2 / max(n - 1, 1) / jtj
    se = math.sqrt(var)
    return AlphaFit(a_hat, se, (a_hat - 1.96 * se, a_hat + 1.96 * se), branch, chi2, n)
