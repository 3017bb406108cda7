"""Command-line entry point: ``afc <subcommand> [--config FILE] [--out DIR] [--seed N] [--dry-run]``.

Exit codes: 0 success, 2 invalid configuration or input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np
import yaml
from pydantic import ValidationError

from afcmem import __version__, counting, csvio, dynamics, prep, readout, spectra
from afcmem.config import RunConfig, load_config, resolve

log = logging.getLogger("afc")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3
NUMERIC_ERRORS = (
    spectra.CavityDivergenceError,
    spectra.FitError,
    readout.IllConditionedError,
    FloatingPointError,
    np.linalg.LinAlgError,
)


# --------------------------------------------------------------------------- builders


def comb_spec(cfg: RunConfig) -> spectra.CombSpec:
    c = cfg.comb
    mult = tuple(c.height_multipliers) if c.height_multipliers is not None else None
    return spectra.CombSpec(c.peak_count, c.spacing_hz, c.peak_fwhm_hz, c.peak_optical_depth,
                            c.center_frequency_hz, mult)


def material_spec(cfg: RunConfig) -> dynamics.MaterialSpec:
    m = cfg.material
    return dynamics.MaterialSpec(m.dipole_difference_hz_per_v_m, m.dipole_angle_deg, m.electrode_gap_m,
                                 m.excited_lifetime_s, m.optical_coherence_time_s)


def detector_spec(cfg: RunConfig) -> counting.DetectorSpec:
    c = cfg.counting
    return counting.DetectorSpec(c.quantum_efficiency, c.dark_rate_hz, c.bin_width_s)


def shot_plan(cfg: RunConfig, det: counting.DetectorSpec) -> counting.ShotPlan:
    c = cfg.counting
    plan = counting.ShotPlan(c.mean_photons, c.shots_per_cycle, c.cycles, 1.0)
    path = c.path_transmission
    if path is None:
        path = counting.fit_path_transmission(c.target_snr, c.reference_efficiency, plan, det)
    return counting.ShotPlan(c.mean_photons, c.shots_per_cycle, c.cycles, path)


def _write_json(path: Path, obj) -> None:
    csvio.write_text_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- commands
# Each command validates and builds its inputs first, returns early on a dry
# run, then computes. It returns the list of files written (relative to out).


def cmd_efficiency_curve(cfg: RunConfig, base, out: Path, dry_run: bool) -> list[str]:
    spec = comb_spec(cfg)
    t = np.asarray(cfg.efficiency.times_s, dtype=float)
    if dry_run:
        return []
    eta = spectra.efficiency_forward(spec, t)
    curve = spectra.EfficiencyCurve(t, np.atleast_1d(eta), np.zeros_like(t))
    curve.to_csv(out / "efficiency_curve.csv")
    summary = {
        "finesse": spectra.comb_finesse(spec),
        "effective_absorption": spectra.effective_absorption(spec.peak_optical_depth, spectra.comb_finesse(spec)),
        "gamma_tilde_rad_per_s": spectra.gamma_tilde(spec.peak_fwhm),
        "eta_at_zero": spectra.efficiency_forward(spec, 0.0),
        "eta_first_echo": spectra.efficiency_forward(spec, 1.0 / spec.spacing),
    }
    if cfg.efficiency.cross_validate:
        n_max = int(math.floor(t.max() * spec.spacing + 1e-9))
        if n_max >= 1:
            ens = dynamics.sample_ensemble(spec, cfg.efficiency.cross_validate_ions, cfg.seed)
            grid = dynamics.echo_grid(spec, n_max + 0.5)
            tr = dynamics.emission_trace(ens, dynamics.free_timeline(material_spec(cfg)), grid, attrition=False)
            summary["ensemble_check"] = [
                {"t_s": m / spec.spacing, "ensemble": tr.value_near(m / spec.spacing)[1],
                 "analytic": spectra.efficiency_forward(spec, m / spec.spacing)}
                for m in range(1, n_max + 1)
            ]
    _write_json(out / "summary.json", summary)
    return ["efficiency_curve.csv", "summary.json"]


def cmd_echo_map(cfg: RunConfig, base, out: Path, dry_run: bool) -> list[str]:
    e = cfg.echo_map
    spec = comb_spec(cfg)
    material = material_spec(cfg)
    delays = e.delay_list()
    template = dynamics.pulse_for_phase(e.pulse.phase_rad, material, e.pulse.duration_s, e.pulse.shape)
    grid = dynamics.echo_grid(spec, e.n_echoes, e.samples_per_period)
    det = detector_spec(cfg)
    plan = shot_plan(cfg, det) if e.mode == "weak" else None
    if dry_run:
        return []
    ens = dynamics.sample_ensemble(spec, e.n_ions, cfg.seed, input_pulse_fwhm=e.input_pulse_fwhm_s)
    traces = dynamics.echo_map(ens, delays, grid, template, material, attrition=e.attrition)
    files, index = [], []
    h = cfg.config_hash()
    width = len(str(len(delays) - 1))
    for i, (d, tr) in enumerate(zip(delays, traces)):
        name = f"trace_{i:0{width}d}.csv"
        tr.to_csv(out / name)
        files.append(name)
        row = {"index": i, "delay_s": d, "trace": name, "seed": cfg.seed, "config_hash": h}
        if plan is not None:
            sub_seed = int(np.random.SeedSequence([cfg.seed, i]).generate_state(1)[0])
            hist = counting.simulate_detection(plan, tr, det, sub_seed)
            hname = f"counts_{i:0{width}d}.csv"
            hist.to_csv(out / hname)
            files.append(hname)
            row.update(counts=hname, count_seed=sub_seed, path_transmission=plan.path_transmission)
        index.append(json.dumps(row, sort_keys=True))
    csvio.write_text_atomic(out / "index.jsonl", "\n".join(index) + "\n")
    return files + ["index.jsonl"]


def _prep_inputs(cfg: RunConfig, base):
    p = cfg.prep
    lv = resolve(base, p.levels_file)
    sq = resolve(base, p.sequence_file)
    scheme = prep.LevelScheme.from_yaml(lv) if lv is not None else prep.LevelScheme.default()
    if sq is not None:
        if not sq.is_file():
            raise FileNotFoundError(f"burn sequence file not found: {sq}")
        seq = prep.BurnSequence.from_yaml(sq)
    else:
        seq = prep.BurnSequence.default()
    if p.afc_width_mhz is not None:
        seq = seq.with_burnback_width(p.afc_width_mhz * 1e6)
    n = int(round((p.freq_stop_hz - p.freq_start_hz) / p.freq_step_hz)) + 1
    if n < 3:
        raise ValueError("frequency grid needs at least 3 samples")
    grid = p.freq_start_hz + p.freq_step_hz * np.arange(n)
    return scheme, seq, grid


def cmd_prepare_comb(cfg: RunConfig, base, out: Path, dry_run: bool) -> list[str]:
    p = cfg.prep
    scheme, seq, grid = _prep_inputs(cfg, base)
    if dry_run:
        return []
    res = prep.run_sequence(seq, scheme, grid, p.window_width_hz, p.window_start_hz, p.residual,
                            p.background_optical_depth, p.linewidth_hz, p.drive, p.saturate)
    res.profile.to_csv(out / "profile.csv")
    by_ground = res.components.sum(axis=1)
    csvio.write_columns(out / "components.csv", ("freq_hz", "g1_2", "g3_2", "g5_2"), (grid, *by_ground))
    f, a = prep.comb_peaks(res.profile, p.window_start_hz, p.window_start_hz + p.window_width_hz)
    _write_json(out / "summary.json", {
        "peaks": [{"freq_hz": float(x), "alphaL": float(y)} for x, y in zip(f, a)],
        "pulses": [q.name for q in seq],
    })
    return ["profile.csv", "components.csv", "summary.json"]


def _readout_profile(cfg: RunConfig, base, center: float, half_span: float):
    r = cfg.readout
    step = r.profile_step_hz
    n = int(math.ceil(half_span * 1.05 / step))
    freq = center + step * np.arange(-n, n + 1)
    spec = comb_spec(cfg)
    if r.profile == "flat":
        return spectra.AbsorptionProfile(freq, np.zeros_like(freq))
    if r.profile == "file":
        path = resolve(base, r.profile_file)
        if path is None or not path.is_file():
            raise FileNotFoundError(f"readout profile file not found: {path}")
        return spectra.AbsorptionProfile.from_csv(path)
    count = 2 if r.profile == "single_peak" else spec.peak_count
    spacing = spec.spacing if r.profile == "comb" else max(4 * half_span, 10 * spec.peak_fwhm)
    first = center - 0.5 * (count - 1) * spacing if r.profile == "comb" else center
    cs = spectra.CombSpec(count, spacing, spec.peak_fwhm, r.peak_optical_depth, first)
    alpha = np.zeros_like(freq)
    for c in cs.peak_centers[: (1 if r.profile == "single_peak" else count)]:
        alpha += r.peak_optical_depth * np.exp(-4 * math.log(2) * ((freq - c) / spec.peak_fwhm) ** 2)
    return spectra.AbsorptionProfile(freq, alpha)


def cmd_readout(cfg: RunConfig, base, out: Path, dry_run: bool) -> list[str]:
    r = cfg.readout
    center = 0.0 if r.chirp_center_hz is None else r.chirp_center_hz
    chirp = readout.ChirpSpec(r.chirp_span_hz, r.chirp_rate_hz_per_s, 1.0, center, r.sample_rate_hz)
    d = r.detector
    if d.model == "tabulated":
        path = resolve(base, d.table_file)
        if path is None or not path.is_file():
            raise FileNotFoundError(f"detector table not found: {path}")
        det = readout.DetectorResponse.from_csv(path)
    else:
        det = readout.DetectorResponse(d.model, d.bandwidth_hz)
    profile = _readout_profile(cfg, base, center, 0.5 * r.chirp_span_hz)
    if dry_run:
        return []
    raw = readout.chirp_forward(profile, chirp)
    detected = readout.apply_detector(raw, det)
    detected.to_csv(out / "beat_trace.csv")
    profile.to_csv(out / "profile_true.csv")
    recovered = readout.deconvolve_profile(detected, chirp, det if d.compensate else None, d.floor)
    recovered.to_csv(out / "profile_recovered.csv")
    files = ["beat_trace.csv", "profile_true.csv", "profile_recovered.csv"]
    summary = {"reabsorption": "not modelled; recovered depths are biased low for optically thick features"}
    if r.fit and r.profile != "flat" and recovered.alpha_l.max() > 0:
        n_peaks = comb_spec(cfg).peak_count if r.profile == "comb" else 1
        variants = {"recovered": recovered}
        if det.model != "none" and d.compensate:
            variants["uncompensated"] = readout.deconvolve_profile(detected, chirp, None, d.floor)
        for key, prof in variants.items():
            fit = readout.fit_peaks(prof, n_peaks)
            summary[key] = [
                {"center_hz": p.center, "fwhm_hz": p.fwhm, "alphaL": p.alpha_l,
                 "center_err_hz": p.center_err, "fwhm_err_hz": p.fwhm_err, "alphaL_err": p.alpha_l_err}
                for p in fit
            ]
    _write_json(out / "summary.json", summary)
    return files + ["summary.json"]


def cmd_cavity_design(cfg: RunConfig, base, out: Path, dry_run: bool) -> list[str]:
    c = cfg.cavity
    if c.r1 >= 1:
        raise spectra.CavityDivergenceError("cavity divergence: R1 = 1 leaves no input coupling")
    if c.finesse_max <= c.finesse_min:
        raise ValueError("finesse_max must exceed finesse_min")
    cavity = spectra.CavitySpec(c.r1, c.r2)
    fgrid = np.geomspace(c.finesse_min, c.finesse_max, c.finesse_count)
    if dry_run:
        return []
    f, eta, best = spectra.scan_cavity_finesse(c.peak_fwhm_hz, c.peak_optical_depth, cavity, c.storage_time_s, fgrid)
    csvio.write_columns(out / "cavity_scan.csv", ("finesse", "eta"), (f, eta))
    _write_json(out / "summary.json", {
        "best_finesse": float(f[best]),
        "best_eta": float(eta[best]),
        "best_spacing_hz": float(f[best] * c.peak_fwhm_hz),
        "envelope": float(math.exp(-(c.storage_time_s * spectra.gamma_tilde(c.peak_fwhm_hz)) ** 2)),
    })
    return ["cavity_scan.csv", "summary.json"]


COMMANDS = {
    "efficiency-curve": cmd_efficiency_curve,
    "echo-map": cmd_echo_map,
    "prepare-comb": cmd_prepare_comb,
    "readout": cmd_readout,
    "cavity-design": cmd_cavity_design,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="afc", description="Stark-controlled AFC memory simulations")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None, help="YAML config (default: $AFC_CONFIG, else built-in defaults)")
        sp.add_argument("--out", default=None, help="output directory (default: ./out/<command>)")
        sp.add_argument("--seed", type=int, default=None, help="override config seed")
        sp.add_argument("--dry-run", action="store_true", help="validate inputs without computing")
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def write_manifest(out: Path, cfg: RunConfig, command: str, files: list[str], wall: float) -> None:
    _write_json(out / "manifest.json", {
        "command": command,
        "config_hash": cfg.config_hash(),
        "tool_version": __version__,
        "seeds": [cfg.seed],
        "wall_time_s": wall,
        "outputs": sorted(files),
    })


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out) if args.out else Path("out") / args.command
    t0 = time.perf_counter()
    try:
        cfg, base = load_config(args.config)
        cfg = cfg.with_seed(args.seed)
        if args.dry_run:
            COMMANDS[args.command](cfg, base, out, True)
            print(f"config ok: {cfg.config_hash()}")
            return EXIT_OK
        out.mkdir(parents=True, exist_ok=True)
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            files = COMMANDS[args.command](cfg, base, out, False)
        csvio.write_text_atomic(out / "config.json", cfg.canonical_json() + "\n")
        files.append("config.json")
        write_manifest(out, cfg, args.command, files, time.perf_counter() - t0)
    except NUMERIC_ERRORS as exc:
        print(f"afc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, ValueError, FileNotFoundError, yaml.YAMLError) as exc:
        print(f"afc: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    log.info("wrote %d files to %s", len(files) + 1, out)
    print(out / "manifest.json")
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
