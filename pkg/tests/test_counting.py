import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from afcmem import counting as C
from afcmem.dynamics import EmissionTrace

DET = C.DetectorSpec()
PLAN = C.ShotPlan()
PERIOD = 1 / 2.3e6


def echo_trace(eta=0.38, n_echoes=3, step=5e-9):
    """Gaussian echoes at m/Delta whose first one integrates to ``eta``."""
    t = np.arange(0, (n_echoes + 0.5) * PERIOD, step)
    width = 60e-9
    y = sum(eta * 0.5 ** (m - 1) * np.exp(-0.5 * ((t - m * PERIOD) / width) ** 2) for m in range(1, n_echoes + 1))
    return EmissionTrace(t, y, 1.0, width * math.sqrt(2 * math.pi), 2.3e6)


class TestArithmetic:
    def test_total_shots(self):
        assert PLAN.total_shots == 30000

    def test_signal(self):
        assert float(C.expected_signal(PLAN, 0.38, DET)) == pytest.approx(0.097 * 0.38 * 0.69 * 3e4, rel=1e-14)
        assert float(C.expected_signal(PLAN, 0.38, DET)) == pytest.approx(763.002, abs=1e-3)
        assert float(C.expected_signal(PLAN, 0.0, DET)) == 0.0

    def test_dark(self):
        assert C.expected_dark(DET, 3e4) == pytest.approx(0.273, rel=1e-12)
        assert C.expected_dark(C.DetectorSpec(dark_rate=0.0), 3e4) == 0.0
        wide = C.DetectorSpec(bin_width=700e-9)
        assert C.expected_dark(wide, 3e4) == pytest.approx(2 * C.expected_dark(DET, 3e4), rel=1e-15)

    def test_snr(self):
        assert float(C.snr(156, 0.273)) == pytest.approx(571.43, abs=0.01)
        assert float(C.snr(763.002, 0.273)) == pytest.approx(2794.88, abs=0.01)
        assert float(C.snr(3.0, 3.0)) == 1.0
        with pytest.raises(ValueError):
            C.snr(1.0, 0.0)

    def test_fit_path_transmission(self):
        tr = C.fit_path_transmission(570.0, 0.38, PLAN, DET)
        assert tr == pytest.approx(570 / 2794.879, rel=1e-5)
        plan = C.ShotPlan(path_transmission=tr)
        s = C.snr(C.expected_signal(plan, 0.38, DET), C.expected_dark(DET, plan.total_shots))
        assert float(s) == pytest.approx(570.0, rel=1e-12)

    def test_fit_rejects_impossible(self):
        with pytest.raises(ValueError):
            C.fit_path_transmission(1e5, 0.38, PLAN, DET)

    @pytest.mark.parametrize("kw", [dict(mean_photons=-1), dict(cycles=0), dict(shots_per_cycle=1.5),
                                    dict(path_transmission=1.1)])
    def test_plan_validation(self, kw):
        with pytest.raises(ValueError):
            C.ShotPlan(**kw)

    @pytest.mark.parametrize("kw", [dict(quantum_efficiency=1.2), dict(dark_rate=-1), dict(bin_width=0)])
    def test_detector_validation(self, kw):
        with pytest.raises(ValueError):
            C.DetectorSpec(**kw)


@settings(max_examples=50)
@given(st.floats(0.001, 1.0), st.floats(0.01, 1.0), st.floats(0.1, 1.0), st.integers(1, 10**6), st.floats(1.0, 1e3))
def test_signal_linear(nbar, eta, qe, shots, k):
    plan = C.ShotPlan(nbar, shots, 1)
    det = C.DetectorSpec(quantum_efficiency=qe)
    base = float(C.expected_signal(plan, eta, det))
    assert float(C.expected_signal(C.ShotPlan(nbar * k, shots, 1), eta, det)) == pytest.approx(k * base, rel=1e-12)
    assert base == pytest.approx(nbar * eta * qe * shots, rel=1e-12)


@settings(max_examples=50)
@given(st.integers(1, 10**5), st.integers(1, 100), st.floats(0.01, 1.0))
def test_snr_invariant_under_shot_scaling(shots, k, eta):
    a = C.ShotPlan(shots_per_cycle=shots, cycles=1)
    b = C.ShotPlan(shots_per_cycle=shots * k, cycles=1)
    sa = C.snr(C.expected_signal(a, eta, DET), C.expected_dark(DET, a.total_shots))
    sb = C.snr(C.expected_signal(b, eta, DET), C.expected_dark(DET, b.total_shots))
    assert float(sb) == pytest.approx(float(sa), rel=1e-12)


class TestSimulation:
    def test_bins_contiguous(self):
        e = C.bin_edges(0.0, 2e-6, DET)
        np.testing.assert_allclose(np.diff(e), DET.bin_width, rtol=1e-12)
        assert e[0] <= 0.0 and e[-1] >= 2e-6

    def test_first_echo_bin_carries_eta(self):
        tr = echo_trace()
        edges = np.array([PERIOD - 175e-9, PERIOD + 175e-9])
        captured = math.erf(175e-9 / (60e-9 * math.sqrt(2)))
        assert float(tr.bin_efficiency(edges)[0]) == pytest.approx(0.38 * captured, rel=1e-4)

    def test_reproducible(self):
        tr = echo_trace()
        a = C.simulate_detection(PLAN, tr, DET, seed=5)
        b = C.simulate_detection(PLAN, tr, DET, seed=5)
        np.testing.assert_array_equal(a.counts, b.counts)
        c = C.simulate_detection(PLAN, tr, DET, seed=6)
        assert not np.array_equal(a.counts, c.counts)

    def test_counts_are_integers(self):
        h = C.simulate_detection(PLAN, echo_trace(), DET, seed=1)
        assert h.counts.dtype.kind == "i"
        assert np.all(h.counts >= 0)
        assert h.per_cycle.shape[0] == PLAN.cycles
        np.testing.assert_array_equal(h.per_cycle.sum(axis=0), h.counts)

    def test_echoes_align(self):
        tr = echo_trace()
        edges = PERIOD * (np.arange(0, 4) + 0.5)
        h = C.simulate_detection(PLAN, tr, DET, seed=3, edges=edges)
        # each bin is centred on an echo; counts halve echo to echo
        assert h.counts[0] > h.counts[1] > h.counts[2]

    def test_dark_only(self):
        plan = C.ShotPlan(mean_photons=0.0)
        tr = echo_trace()
        edges = np.array([PERIOD - 175e-9, PERIOD + 175e-9])
        means = [C.simulate_detection(plan, tr, DET, s, edges).counts[0] for s in range(1000)]
        assert np.mean(means) == pytest.approx(0.273, abs=3 * math.sqrt(0.273 / 1000))

    def test_monte_carlo_means(self):
        tr = echo_trace()
        edges = C.bin_edges(0.0, 3 * PERIOD, DET)
        mean = C.bin_means(PLAN, tr, DET, edges)
        samples = np.array([C.simulate_detection(PLAN, tr, DET, s, edges).counts for s in range(1000)])
        sigma = np.sqrt(mean / 1000)
        assert np.all(np.abs(samples.mean(axis=0) - mean) <= 3 * sigma + 1e-12)

    def test_csv(self, tmp_path):
        h = C.simulate_detection(PLAN, echo_trace(), DET, seed=0)
        h.to_csv(tmp_path / "h.csv")
        assert (tmp_path / "h.csv").read_text().startswith("bin_start_s,counts\n")
        back = C.CountHistogram.from_csv(tmp_path / "h.csv")
        np.testing.assert_array_equal(back.counts, h.counts)

    def test_describe(self):
        d = C.describe(PLAN, DET)
        assert d["plan"]["cycles"] == 15 and d["detector"]["dark_rate"] == 26.0
