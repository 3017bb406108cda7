"""Chirped-probe readout of an absorption structure.

A linear frequency chirp is sent through the medium, whose complex
transmission is the minimum-phase filter with amplitude ``exp(-alphaL/2)``.
The detected intensity is a beat pattern between the probe and the
free-induction decay of the ions. :func:`deconvolve_profile` inverts this:
dividing out the known chirp turns the intensity into ``|1 + Q(f)|**2``
on the chirp's frequency axis, where ``Q`` is the spectrum of the chirped
impulse response. Minimum-phase retrieval gives ``Q`` back, and removing
the chirp phase in the delay domain recovers the transmission.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import fft, ifft, irfft, next_fast_len, rfft, rfftfreq
from scipy.signal import find_peaks, peak_widths

from afcmem import csvio
from afcmem.spectra import AbsorptionProfile, FWHM_PER_SIGMA, FitError, check_uniform

FOUR_LN2 = 4.0 * math.log(2.0)


class NyquistError(ValueError):
    """Raised when a sampling grid cannot represent the chirp."""


class IllConditionedError(RuntimeError):
    """Raised when detector compensation would divide by noise over most of the band."""


class DegeneratePeaksError(FitError):
    """Raised when requested peaks cannot be told apart."""


@dataclass(frozen=True)
class ChirpSpec:
    """Linear frequency chirp.

    The chirp starts at ``t = 0`` at ``center - span/2`` and sweeps up at
    ``rate``. The record continues for ``tail`` seconds after the sweep
    ends (default: one sweep duration). ``sample_rate`` defaults to four
    times the span.
    """

    span: float
    rate: float = 1e12
    amplitude: float = 1.0
    center: float = 0.0
    sample_rate: float | None = None
    tail: float | None = None

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("chirp rate must be positive")
        if not self.span > 0:
            raise ValueError("chirp span must be positive")
        if not self.amplitude > 0:
            raise ValueError("chirp amplitude must be positive")
        if self.sample_rate is None:
            object.__setattr__(self, "sample_rate", 4.0 * self.span)
        if self.tail is None:
            object.__setattr__(self, "tail", self.duration)
        if self.tail < 0:
            raise ValueError("tail must be >= 0")

    @property
    def duration(self) -> float:
        return self.span / self.rate

    @property
    def f_start(self) -> float:
        return self.center - 0.5 * self.span

    @property
    def f_stop(self) -> float:
        return self.center + 0.5 * self.span

    @property
    def dt(self) -> float:
        return 1.0 / self.sample_rate

    def time_grid(self) -> np.ndarray:
        n = int(round((self.duration + self.tail) * self.sample_rate)) + 1
        return self.dt * np.arange(n)

    def n_sweep(self) -> int:
        """Number of samples inside the sweep."""
        return int(round(self.duration * self.sample_rate))

    def frequency_grid(self) -> np.ndarray:
        """Instantaneous frequency at each sweep sample."""
        return self.f_start + self.rate * self.dt * np.arange(self.n_sweep())

    def field(self, t) -> np.ndarray:
        """Baseband field (carrier ``center`` removed)."""
        t = np.asarray(t, dtype=float)
        # compare on the sample index so t == duration is not admitted by rounding
        on = (t >= 0) & (t * self.sample_rate < self.n_sweep() - 1e-6)
        phase = 2 * np.pi * (-0.5 * self.span * t + 0.5 * self.rate * t**2)
        return np.where(on, self.amplitude * np.exp(1j * phase), 0.0)


@dataclass(frozen=True)
class DetectorResponse:
    """Linear response of the photodetector.

    ``model`` is ``"single_pole"`` (``1 / (1 + i f / bandwidth)``),
    ``"tabulated"`` (complex samples at non-negative frequencies,
    interpolated and held constant beyond the table) or ``"none"``.
    """

    model: str = "single_pole"
    bandwidth: float = 3.5e6
    table_freq: np.ndarray | None = None
    table_response: np.ndarray | None = None

    def __post_init__(self):
        if self.model not in ("single_pole", "tabulated", "none"):
            raise ValueError(f"unknown detector model {self.model!r}")
        if not self.bandwidth > 0:
            raise ValueError("detector bandwidth must be positive")
        if self.model == "tabulated":
            if self.table_freq is None or self.table_response is None:
                raise ValueError("tabulated detector needs table_freq and table_response")
            f = np.asarray(self.table_freq, dtype=float)
            h = np.asarray(self.table_response, dtype=complex)
            if f.shape != h.shape or f.size < 2 or np.any(np.diff(f) <= 0) or f[0] < 0:
                raise ValueError("detector table must have increasing non-negative frequencies")
            object.__setattr__(self, "table_freq", f)
            object.__setattr__(self, "table_response", h)

    def response(self, freq) -> np.ndarray:
        freq = np.asarray(freq, dtype=float)
        if self.model == "none":
            return np.ones(freq.shape, dtype=complex)
        if self.model == "single_pole":
            return 1.0 / (1.0 + 1j * freq / self.bandwidth)
        f, h = self.table_freq, self.table_response
        return np.interp(freq, f, h.real) + 1j * np.interp(freq, f, h.imag)

    @classmethod
    def from_csv(cls, path) -> "DetectorResponse":
        f, re, im = csvio.read_columns(path, ("freq_hz", "re", "im"))
        return cls(model="tabulated", table_freq=f, table_response=re + 1j * im)

    def to_csv(self, path, freq=None):
        if freq is None:
            freq = self.table_freq if self.model == "tabulated" else np.linspace(0, 10 * self.bandwidth, 201)
        h = self.response(freq)
        return csvio.write_columns(path, ("freq_hz", "re", "im"), (freq, h.real, h.imag))


@dataclass(frozen=True)
class BeatTrace:
    """Detected intensity on a uniform time grid starting at the chirp start."""

    t: np.ndarray
    intensity: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        y = np.asarray(self.intensity, dtype=float)
        if t.ndim != 1 or t.shape != y.shape or t.size < 2:
            raise ValueError("t and intensity must be 1-D arrays of equal length >= 2")
        check_uniform(t, "time grid")
        t.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "intensity", y)

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def energy(self) -> float:
        return float(np.sum(self.intensity) * self.dt)

    def to_csv(self, path):
        return csvio.write_columns(path, ("t_s", "intensity"), (self.t, self.intensity))

    @classmethod
    def from_csv(cls, path) -> "BeatTrace":
        return cls(*csvio.read_columns(path, ("t_s", "intensity")))


def _check_nyquist(dt: float, chirp: ChirpSpec) -> None:
    if not dt < 1.0 / (2.0 * chirp.span):
        raise NyquistError(
            f"time step {dt:g} s does not resolve a {chirp.span:g} Hz chirp (need < {1 / (2 * chirp.span):g} s)"
        )


def _causal_fold(x: np.ndarray) -> np.ndarray:
    """Keep the causal half of a cepstrum (numpy sign convention), doubling n > 0."""
    n = x.size
    y = np.zeros_like(x, dtype=complex)
    y[0] = x[0]
    half = n // 2
    y[1:half] = 2.0 * x[1:half]
    if n % 2 == 0:
        y[half] = x[half]
    else:
        y[half] = 2.0 * x[half]
    return y


def minimum_phase_log(log_mag: np.ndarray) -> np.ndarray:
    """Complex log-spectrum of the minimum-phase filter with ``log|H| = log_mag``.

    ``log_mag`` is sampled on an FFT frequency axis (``fftfreq`` order).
    The result's inverse FFT is causal.
    """
    return fft(_causal_fold(ifft(np.asarray(log_mag, dtype=float))))


def transmission(profile: AbsorptionProfile, freq) -> np.ndarray:
    """Minimum-phase field transmission of ``profile`` at ``freq`` (FFT order).

    ``freq`` must be a full FFT frequency axis (uniform and periodic);
    absorption outside the profile grid is zero.
    """
    alpha = np.interp(freq, profile.freq, profile.alpha_l, left=0.0, right=0.0)
    return np.exp(minimum_phase_log(-0.5 * alpha))


def chirp_forward(profile: AbsorptionProfile, chirp: ChirpSpec, pad: int = 4) -> BeatTrace:
    """Transmit the chirp through ``profile`` and detect ``|E|**2``.

    The full linear filter is applied by FFT on a record zero-padded
    ``pad`` times so the ions' response does not wrap around.
    """
    if profile.freq[0] > chirp.f_start + profile.step or profile.freq[-1] < chirp.f_stop - profile.step:
        raise ValueError("profile grid does not cover the chirp span")
    _check_nyquist(chirp.dt, chirp)
    if pad < 1:
        raise ValueError("pad must be >= 1")
    t = chirp.time_grid()
    n = next_fast_len(pad * t.size)
    e_in = np.zeros(n, dtype=complex)
    e_in[: t.size] = chirp.field(t)
    freq = np.fft.fftfreq(n, chirp.dt) + chirp.center
    e_out = ifft(fft(e_in) * transmission(profile, freq))[: t.size]
    return BeatTrace(t, np.abs(e_out) ** 2)


def _filter(y: np.ndarray, dt: float, weights) -> np.ndarray:
    """Apply a frequency-domain weight to a real record padded with zeros."""
    n = next_fast_len(2 * y.size)
    spec = rfft(y, n)
    return irfft(spec * weights(rfftfreq(n, dt)), n)[: y.size]


def apply_detector(trace: BeatTrace, det: DetectorResponse | None) -> BeatTrace:
    """Filter the detected intensity with the detector's linear response.

    Light is taken to be absent before the first sample, so a trace that
    starts abruptly shows the detector's rise.
    """
    if det is None or det.model == "none":
        return trace
    return BeatTrace(trace.t, _filter(trace.intensity, trace.dt, det.response))


def compensate_detector(trace: BeatTrace, det: DetectorResponse, floor: float = 1e-3,
                        band: float | None = None) -> BeatTrace:
    """Undo the detector response by Tikhonov-regularized division.

    ``floor`` is relative to the largest response magnitude. If more than
    half of the frequencies below ``band`` (default: Nyquist) fall under
    the floor, the inversion is refused.
    """
    if det.model == "none":
        return trace
    n = next_fast_len(2 * trace.t.size)
    f = rfftfreq(n, trace.dt)
    h = det.response(f)
    mag = np.abs(h)
    lam = floor * mag.max()
    sel = f <= (band if band is not None else f[-1])
    if np.mean(mag[sel] < lam) > 0.5:
        raise IllConditionedError(
            f"detector response below the {floor:g} floor over {100 * np.mean(mag[sel] < lam):.0f}% of the band"
        )
    inv = np.conj(h) / (mag**2 + lam**2)
    return BeatTrace(trace.t, irfft(rfft(trace.intensity, n) * inv, n)[: trace.t.size])


def deconvolve_profile(trace: BeatTrace, chirp: ChirpSpec, det: DetectorResponse | None = None,
                       floor: float = 1e-3, pad: int = 4) -> AbsorptionProfile:
    """Recover the optical depth on the chirp's frequency grid.

    With ``det`` given, the detector response is first divided out
    (:func:`compensate_detector`). Small negative optical depths produced
    by noise are clipped to zero.
    """
    if not math.isclose(trace.dt, chirp.dt, rel_tol=1e-9):
        raise ValueError("trace sampling does not match the chirp's sample rate")
    _check_nyquist(trace.dt, chirp)
    if det is not None:
        trace = compensate_detector(trace, det, floor, band=chirp.span)
    m = chirp.n_sweep()
    if trace.t.size < m:
        raise ValueError("trace is shorter than the chirp sweep")
    y2 = trace.intensity[:m] / chirp.amplitude**2
    tiny = 1e-12
    if np.mean(y2 < tiny) > 0.5:
        raise IllConditionedError("transmitted intensity vanishes over most of the sweep")
    n = next_fast_len(pad * m)
    log_mag = np.zeros(n)
    log_mag[:m] = 0.5 * np.log(np.maximum(y2, tiny))
    # spectrum of the chirped impulse response, sampled on the chirp axis
    q_spec = np.exp(fft(_causal_fold(ifft(log_mag)))) - 1.0
    w = ifft(q_spec)
    w[n // 2:] = 0.0
    dtau = 1.0 / (n * chirp.rate * chirp.dt)
    tau = dtau * np.arange(n)
    h = 1.0 + fft(w * np.exp(-1j * np.pi * chirp.rate * tau**2))[:m]
    alpha = np.clip(-2.0 * np.log(np.maximum(np.abs(h), tiny)), 0.0, None)
    return AbsorptionProfile(chirp.frequency_grid(), alpha)


def mapped_profile(trace: BeatTrace, chirp: ChirpSpec) -> AbsorptionProfile:
    """Fast approximation: read ``-ln(I / I0)`` directly at the instantaneous frequency.

    Only meaningful when the chirp is slow compared to the square of the
    narrowest feature width.
    """
    m = chirp.n_sweep()
    y2 = np.maximum(trace.intensity[:m] / chirp.amplitude**2, 1e-12)
    return AbsorptionProfile(chirp.frequency_grid(), np.clip(-np.log(y2), 0.0, None))


# --------------------------------------------------------------------------- peak fitting


@dataclass(frozen=True)
class PeakFit:
    center: float
    fwhm: float
    alpha_l: float
    center_err: float
    fwhm_err: float
    alpha_l_err: float


@dataclass(frozen=True)
class PeakFitResult:
    peaks: tuple[PeakFit, ...]
    cost_history: tuple[float, ...]
    iterations: int
    converged: bool
    covariance: np.ndarray = field(repr=False)

    def __iter__(self):
        return iter(self.peaks)

    def __len__(self):
        return len(self.peaks)


def gaussian_sum(x, params) -> np.ndarray:
    """Sum of Gaussians; ``params`` is a flat sequence of (center, fwhm, height)."""
    p = np.asarray(params, dtype=float).reshape(-1, 3)
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for c, w, a in p:
        out += a * np.exp(-FOUR_LN2 * ((x - c) / w) ** 2)
    return out


def _jacobian(x, params) -> np.ndarray:
    p = np.asarray(params, dtype=float).reshape(-1, 3)
    jac = np.empty((x.size, p.size))
    for k, (c, w, a) in enumerate(p):
        u = (x - c) / w
        g = np.exp(-FOUR_LN2 * u**2)
        jac[:, 3 * k] = a * g * 2 * FOUR_LN2 * u / w
        jac[:, 3 * k + 1] = a * g * 2 * FOUR_LN2 * u**2 / w
        jac[:, 3 * k + 2] = g
    return jac


def _levenberg_marquardt(x, y, p0, max_iter=200, xtol=1e-12, ftol=1e-15):
    """Plain Levenberg-Marquardt; returns (params, jacobian, accepted costs, iterations, converged)."""
    p = np.asarray(p0, dtype=float).copy()
    r = y - gaussian_sum(x, p)
    cost = 0.5 * float(r @ r)
    history = [cost]
    lam = 1e-3
    for it in range(1, max_iter + 1):
        jac = _jacobian(x, p)
        jtj = jac.T @ jac
        grad = jac.T @ r
        accepted = False
        while lam < 1e16:
            a = jtj + lam * np.diag(np.diag(jtj) + 1e-300)
            try:
                step = np.linalg.solve(a, grad)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            trial = p + step
            widths = trial[1::3]
            if np.all(widths > 0):
                r_new = y - gaussian_sum(x, trial)
                c_new = 0.5 * float(r_new @ r_new)
                if c_new <= cost:
                    accepted = True
                    break
            lam *= 10
        if not accepted:
            return p, _jacobian(x, p), history, it, True
        small_step = np.all(np.abs(step) <= xtol * (np.abs(p) + xtol))
        small_cost = cost - c_new <= ftol * max(cost, 1e-300)
        p, r, cost = trial, r_new, c_new
        history.append(cost)
        lam = max(lam / 10, 1e-12)
        if small_step or small_cost:
            return p, _jacobian(x, p), history, it, True
    return p, _jacobian(x, p), history, max_iter, False


def _initial_peaks(profile: AbsorptionProfile, n_peaks: int) -> np.ndarray:
    """Largest local maxima, skipping any that sit on the half-max shoulder of one already taken."""
    y = profile.alpha_l
    idx, _ = find_peaks(np.concatenate([[-np.inf], y, [-np.inf]]))
    idx = idx - 1
    idx = idx[y[idx] > 0]
    idx = idx[np.argsort(y[idx], kind="stable")[::-1]]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        _, _, left, right = peak_widths(y, idx, rel_height=0.5)
    keep = []
    for k, lo, hi in zip(idx, left, right):
        if not any(l0 <= k <= h0 for _, l0, h0 in keep):
            keep.append((k, lo, hi))
        if len(keep) == n_peaks:
            break
    if len(keep) < n_peaks:
        raise DegeneratePeaksError(
            f"profile has {len(keep)} resolved maxima but {n_peaks} peaks were requested"
        )
    keep.sort()
    p0 = np.empty(3 * n_peaks)
    p0[0::3] = profile.freq[[k for k, _, _ in keep]]
    p0[1::3] = [max((hi - lo) * profile.step, 2 * profile.step) for _, lo, hi in keep]
    p0[2::3] = y[[k for k, _, _ in keep]]
    return p0


def fit_peaks(profile: AbsorptionProfile, n_peaks: int, max_iter: int = 200) -> PeakFitResult:
    """Least-squares fit of ``n_peaks`` Gaussians to an absorption profile.

    Starting values come from the ``n_peaks`` highest local maxima. Errors
    are one-sigma values from the residual covariance.

    Raises
    ------
    DegeneratePeaksError
        Too few maxima, or two fitted peaks closer than half a FWHM.
    FitError
        No convergence within ``max_iter`` iterations.
    """
    if int(n_peaks) != n_peaks or n_peaks < 1:
        raise ValueError("n_peaks must be an integer >= 1")
    x, y = profile.freq, profile.alpha_l
    if x.size <= 3 * n_peaks:
        raise FitError("not enough samples for the requested number of peaks")
    p0 = _initial_peaks(profile, n_peaks)
    p, jac, history, its, ok = _levenberg_marquardt(x, y, p0, max_iter=max_iter)
    if not ok:
        raise FitError(f"peak fit did not converge in {max_iter} iterations")
    dof = x.size - p.size
    s2 = 2.0 * history[-1] / dof
    try:
        cov = np.linalg.pinv(jac.T @ jac) * s2
    except np.linalg.LinAlgError as exc:  # pragma: no cover
        raise FitError("singular Jacobian at the solution") from exc
    err = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    rows = p.reshape(-1, 3)
    order = np.argsort(rows[:, 0])
    for a, b in zip(order[:-1], order[1:]):
        sep = rows[b, 0] - rows[a, 0]
        if sep < 0.5 * max(rows[a, 1], rows[b, 1]):
            raise DegeneratePeaksError(f"peaks at {rows[a, 0]:g} and {rows[b, 0]:g} Hz overlap")
    peaks = tuple(
        PeakFit(rows[k, 0], abs(rows[k, 1]), rows[k, 2], err[3 * k], err[3 * k + 1], err[3 * k + 2])
        for k in order
    )
    return PeakFitResult(peaks, tuple(history), its, ok, cov)
