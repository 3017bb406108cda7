import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from afcmem import cli
from afcmem.config import RunConfig, load_config
from afcmem.spectra import CombSpec, efficiency_forward

SMALL_ECHO = {"echo_map": {"n_ions": 2000, "delays_s": [0.0, 0.5e-6, 1.2e-6], "n_echoes": 4.5}}


def write_cfg(tmp_path, data, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return p


def run(tmp_path, command, data=None, *extra, out="out"):
    args = [command, "--out", str(tmp_path / out), *extra]
    if data is not None:
        args += ["--config", str(write_cfg(tmp_path, data))]
    return cli.main(args)


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=float)


def manifest(tmp_path, out="out"):
    return json.loads((tmp_path / out / "manifest.json").read_text())


class TestConfig:
    def test_defaults_file_matches_model(self):
        cfg, base = load_config(None)
        assert base is None
        assert cfg == RunConfig()

    def test_unknown_key_rejected(self, tmp_path):
        assert run(tmp_path, "efficiency-curve", {"comb": {"spacing": 1.0}}) == 2

    def test_env_var(self, tmp_path, monkeypatch):
        p = write_cfg(tmp_path, {"comb": {"peak_fwhm_hz": 297e3, "peak_optical_depth": 34.0}}, "env.yaml")
        monkeypatch.setenv("AFC_CONFIG", str(p))
        assert cli.main(["efficiency-curve", "--out", str(tmp_path / "o")]) == 0
        assert manifest(tmp_path, "o")["config_hash"] == load_config(p)[0].config_hash()

    def test_missing_config(self, tmp_path):
        assert cli.main(["efficiency-curve", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)]) == 2

    def test_hash_is_canonical(self):
        a = RunConfig()
        b = RunConfig.model_validate(json.loads(a.canonical_json()))
        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != a.with_seed(1).config_hash()


class TestEfficiencyCurve:
    def test_default(self, tmp_path):
        assert run(tmp_path, "efficiency-curve") == 0
        head, data = read_csv(tmp_path / "out" / "efficiency_curve.csv")
        assert head[0] == "t_s"
        spec = CombSpec(4, 2.3e6, 140e3, 45.0)
        eta = np.interp(0.86e-6, data[:, 0], data[:, 1])
        assert abs(eta - efficiency_forward(spec, 0.86e-6)) < 5e-3
        assert 0.40 < efficiency_forward(spec, 0.86e-6) < 0.42

    def test_broad_peak_decays_faster(self, tmp_path):
        run(tmp_path, "efficiency-curve", None, out="a")
        run(tmp_path, "efficiency-curve", {"comb": {"peak_fwhm_hz": 297e3, "peak_optical_depth": 34.0}}, out="b")
        _, a = read_csv(tmp_path / "a" / "efficiency_curve.csv")
        _, b = read_csv(tmp_path / "b" / "efficiency_curve.csv")
        late = a[:, 0] >= 1e-6
        assert np.all(b[late, 1] / b[0, 1] < a[late, 1] / a[0, 1])

    def test_empty_times(self, tmp_path):
        assert run(tmp_path, "efficiency-curve", {"efficiency": {"times_s": []}}) == 2

    def test_cross_validation(self, tmp_path):
        data = {"efficiency": {"times_s": [0.0, 0.5e-6, 0.9e-6], "cross_validate": True, "cross_validate_ions": 20000}}
        assert run(tmp_path, "efficiency-curve", data) == 0
        check = json.loads((tmp_path / "out" / "summary.json").read_text())["ensemble_check"]
        assert len(check) == 2
        for row in check:
            assert row["ensemble"] == pytest.approx(row["analytic"], rel=0.1)


class TestEchoMap:
    def test_bright(self, tmp_path):
        assert run(tmp_path, "echo-map", SMALL_ECHO) == 0
        rows = [json.loads(x) for x in (tmp_path / "out" / "index.jsonl").read_text().splitlines()]
        assert [r["delay_s"] for r in rows] == [0.0, 0.5e-6, 1.2e-6]
        assert "counts" not in rows[0]
        assert (tmp_path / "out" / rows[2]["trace"]).is_file()

    def test_single_delay(self, tmp_path):
        data = {"echo_map": {**SMALL_ECHO["echo_map"], "delays_s": [0.3e-6]}}
        assert run(tmp_path, "echo-map", data) == 0
        assert len((tmp_path / "out" / "index.jsonl").read_text().splitlines()) == 1

    def test_weak_mode_counts(self, tmp_path):
        data = {"echo_map": {**SMALL_ECHO["echo_map"], "mode": "weak"}}
        assert run(tmp_path, "echo-map", data) == 0
        rows = [json.loads(x) for x in (tmp_path / "out" / "index.jsonl").read_text().splitlines()]
        head, counts = read_csv(tmp_path / "out" / rows[0]["counts"])
        assert head == ["bin_start_s", "counts"]
        assert np.all(counts[:, 1] >= 0) and np.all(counts[:, 1] == np.round(counts[:, 1]))
        assert 0 < rows[0]["path_transmission"] < 1

    def test_byte_identical(self, tmp_path):
        data = {"echo_map": {**SMALL_ECHO["echo_map"], "mode": "weak"}}
        run(tmp_path, "echo-map", data, out="a")
        run(tmp_path, "echo-map", data, out="b")
        for f in manifest(tmp_path, "a")["outputs"]:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_seed_flag(self, tmp_path):
        run(tmp_path, "echo-map", SMALL_ECHO, "--seed", "1", out="a")
        run(tmp_path, "echo-map", SMALL_ECHO, "--seed", "2", out="b")
        assert manifest(tmp_path, "a")["seeds"] == [1]
        assert (tmp_path / "a" / "trace_0.csv").read_bytes() != (tmp_path / "b" / "trace_0.csv").read_bytes()


class TestPrepareComb:
    def test_default(self, tmp_path):
        assert run(tmp_path, "prepare-comb") == 0
        peaks = json.loads((tmp_path / "out" / "summary.json").read_text())["peaks"]
        f = [p["freq_hz"] for p in peaks]
        for k in range(4):
            assert any(abs(x - (4.04e6 + 2.3e6 * k)) <= 10e3 for x in f)
        head, _ = read_csv(tmp_path / "out" / "components.csv")
        assert head == ["freq_hz", "g1_2", "g3_2", "g5_2"]

    def test_wider_burnback(self, tmp_path):
        run(tmp_path, "prepare-comb", None, out="a")
        run(tmp_path, "prepare-comb", {"prep": {"afc_width_mhz": 0.5}}, out="b")
        _, a = read_csv(tmp_path / "a" / "profile.csv")
        _, b = read_csv(tmp_path / "b" / "profile.csv")

        def area_over_peak(d, center):
            sel = np.abs(d[:, 0] - center) < 0.6e6
            return d[sel, 1].sum() / d[sel, 1].max()

        assert area_over_peak(b, 8.64e6) > 1.5 * area_over_peak(a, 8.64e6)

    def test_missing_levels(self, tmp_path):
        assert run(tmp_path, "prepare-comb", {"prep": {"levels_file": "missing.yaml"}}) == 2

    def test_relative_paths(self, tmp_path):
        from importlib import resources
        text = resources.files("afcmem").joinpath("data/pr_yso_levels.yaml").read_text()
        (tmp_path / "levels.yaml").write_text(text)
        assert run(tmp_path, "prepare-comb", {"prep": {"levels_file": "levels.yaml"}}) == 0


class TestReadout:
    def test_comb_round_trip(self, tmp_path):
        assert run(tmp_path, "readout") == 0
        s = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert len(s["recovered"]) == 4
        for p in s["recovered"]:
            assert p["fwhm_hz"] == pytest.approx(140e3, rel=0.02)
        for p in s["uncompensated"]:
            assert p["fwhm_hz"] > 1.03 * 140e3

    def test_flat(self, tmp_path):
        assert run(tmp_path, "readout", {"readout": {"profile": "flat", "detector": {"model": "none"}}}) == 0
        _, tr = read_csv(tmp_path / "out" / "beat_trace.csv")
        sweep = tr[:, 0] < 30e-6 - 1e-9
        np.testing.assert_allclose(tr[sweep, 1], 1.0, atol=1e-9)

    def test_tabulated_missing(self, tmp_path):
        assert run(tmp_path, "readout", {"readout": {"detector": {"model": "tabulated"}}}) == 2

    def test_nyquist(self, tmp_path):
        assert run(tmp_path, "readout", {"readout": {"sample_rate_hz": 40e6}}) == 2


class TestCavity:
    def test_default(self, tmp_path):
        assert run(tmp_path, "cavity-design") == 0
        s = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert 0.86 <= s["best_eta"] <= 0.90

    def test_zero_storage_is_better(self, tmp_path):
        run(tmp_path, "cavity-design", None, out="a")
        run(tmp_path, "cavity-design", {"cavity": {"storage_time_s": 0.0}}, out="b")
        a = json.loads((tmp_path / "a" / "summary.json").read_text())["best_eta"]
        b = json.loads((tmp_path / "b" / "summary.json").read_text())["best_eta"]
        assert b > a

    def test_r1_one_diverges(self, tmp_path):
        assert run(tmp_path, "cavity-design", {"cavity": {"r1": 1.0}}) == 3


class TestManifest:
    @pytest.mark.parametrize("command", list(cli.COMMANDS))
    def test_dry_run_writes_nothing(self, tmp_path, command, capsys):
        data = SMALL_ECHO if command == "echo-map" else {}
        assert run(tmp_path, command, data, "--dry-run") == 0
        assert not (tmp_path / "out").exists()
        assert "config ok" in capsys.readouterr().out

    def test_manifest_hash(self, tmp_path):
        p = write_cfg(tmp_path, {"seed": 4})
        assert cli.main(["cavity-design", "--config", str(p), "--out", str(tmp_path / "o")]) == 0
        m = manifest(tmp_path, "o")
        cfg, _ = load_config(p)
        assert m["config_hash"] == cfg.config_hash()
        assert m["config_hash"] == hashlib.sha256(cfg.canonical_json().encode()).hexdigest()
        assert sorted(m["outputs"]) == sorted(["cavity_scan.csv", "summary.json", "config.json"])
        for f in m["outputs"]:
            assert (tmp_path / "o" / f).is_file()
        assert json.loads((tmp_path / "o" / "config.json").read_text())["seed"] == 4

    def test_console_script(self, tmp_path):
        r = subprocess.run([sys.executable, "-m", "afcmem.cli", "cavity-design", "--dry-run"],
                           capture_output=True, text=True, cwd=tmp_path)
        assert r.returncode == 0, r.stderr
