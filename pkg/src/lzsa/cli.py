"""Command-line front end: ``lzsa simulate | process | estimate | report``.

A run directory collects everything one experiment produces::

    config.cfg      scenario used by every later stage
    raw.lzr         faraday, reference and preroll channels
    truth.json      ground truth (simulated runs only)
    demod.lzr/.csv  normalized frame-1R and frame-2S products
    correction.csv  Rabi control-error correction on a 1 ms grid
    process.json    transitions, mask and pipeline notes
    estimate.json   retrieved parameters, covariance, provenance
    overlay.csv     data and model fz1R on the evaluation grid

Exit codes: 0 success, 2 configuration error, 3 pipeline or I/O error,
4 estimation did not converge (results are still written).
"""
from __future__ import annotations

import argparse
import math
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import dsp, estimator, io, model, synth
from .errors import ConfigurationError, LZSAError
from .timeseries import TimeSeries

EXIT_OK, EXIT_CONFIG, EXIT_PIPELINE, EXIT_NOT_CONVERGED = 0, 2, 3, 4


class StageError(Exception):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except ConfigurationError:
        raise
    except (LZSAError, ValueError, OSError) as e:
        raise StageError(name, e) from e


def _run_config(run: Path) -> cfgmod.ScenarioConfig:
    path = run / "config.cfg"
    if not path.exists():
        raise StageError("load", FileNotFoundError(f"{path} not found"))
    return cfgmod.load_config(path)


# -- simulate ----------------------------------------------------------------

def simulate(cfg: cfgmod.ScenarioConfig, run: Path, config_text: str) -> dict:
    run.mkdir(parents=True, exist_ok=True)
    sweep = cfg.sweep
    corr = _stage("distortion", synth.distortion_correction, sweep, cfg.distortion)
    traj = _stage("integrate", model.integrate, sweep, cfg.tones, corr, cfg.init)
    far = _stage(
        "synthesize_faraday", synth.synthesize_faraday, traj, sweep, cfg.decay, cfg.noise,
        cfg.rate, cfg.quantize, cfg.full_scale,
    )
    ref = _stage(
        "synthesize_reference", synth.synthesize_reference, sweep, cfg.distortion, cfg.rate,
        cfg.hw_phase_deg, cfg.quantize, cfg.full_scale,
    )
    pre = _stage("preroll", synth.preroll, cfg.noise, cfg.rate)
    (run / "config.cfg").write_text(config_text)
    io.write_record(
        run / "raw.lzr",
        {"faraday": far, "reference": ref, "preroll": pre},
        meta={"scenario": cfg.name, "seed": cfg.noise.seed},
        units={"faraday": "spin", "reference": "drive", "preroll": "spin"},
    )
    truth = cfg.truth_dict()
    if not corr.is_zero:
        t = np.arange(0.0, sweep.duration + 1e-12, 1e-3)
        truth["rabi_error_rad_s"] = {"t": t.tolist(), "value": corr(t).tolist()}
    io.write_json(run / "truth.json", truth)
    return {"record": str(run / "raw.lzr"), "samples": len(far)}


def cmd_simulate(args) -> int:
    cfg = cfgmod.resolve(args.config)
    text = cfgmod.preset_text(args.config) if args.config in cfgmod.PRESETS else Path(args.config).read_text()
    if args.noise == "off":
        cfg = cfg.without_noise()
        text += "\n# --noise off\nnoise.shot_rms = 0 rel\nnoise.electronic_rms = 0 rel\n"
        text = _drop_keys(text, ("noise.shot_rms", "noise.electronic_rms"), keep_last=True)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, noise=replace(cfg.noise, seed=args.seed))
        text = _drop_keys(text + f"\nseed = {args.seed}\n", ("seed",), keep_last=True)
    out = simulate(cfg, Path(args.run), text)
    print(f"wrote {out['record']} ({out['samples']} samples per channel)")
    return EXIT_OK


def _drop_keys(text: str, keys, keep_last: bool) -> str:
    """Remove all but the last assignment of each key."""
    lines = text.splitlines()
    last = {}
    for i, line in enumerate(lines):
        k = line.split("#", 1)[0].split("=", 1)[0].strip()
        if k in keys:
            last[k] = i
    out = []
    for i, line in enumerate(lines):
        k = line.split("#", 1)[0].split("=", 1)[0].strip()
        if k in keys and keep_last and i != last[k]:
            continue
        out.append(line)
    return "\n".join(out) + "\n"


# -- process -----------------------------------------------------------------

def process_run(run: Path, skip_rabi_correction: bool = False) -> dsp.PipelineResult:
    cfg = _run_config(run)
    channels, _ = _stage("read", io.read_record, run / "raw.lzr")
    far, ref = channels["faraday"], channels["reference"]
    settings = cfg.process
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = _stage(
            "process", dsp.process, far, ref, cfg.sweep, cfg.hw_phase_deg,
            settings.rabi_correction and not skip_rabi_correction, settings.smoothness,
            cfg.estimate.tones or 1, settings.mask_widths,
        )
    chans = {
        "fz1R": res.fz, "fy1R": res.fy, "envelope": res.demod.envelope,
        "fx2S": res.fx2S, "fy2S": res.fy2S, "azimuth": res.azimuth,
        "fx2S_corrected": res.fx2S_corrected, "fy2S_corrected": res.fy2S_corrected,
    }
    io.write_record(run / "demod.lzr", chans, meta={"stage": "process"})
    io.write_record(run / "demod.csv", chans, meta={"stage": "process"})
    t = np.arange(0.0, cfg.sweep.duration + 1e-12, 1e-3)
    io.write_table(run / "correction.csv", {"t": t, "delta_rabi_rad_s": res.correction(t)}, "Rabi control-error correction")
    info = {
        "transitions_s": res.transitions.tolist(),
        "mask_s": [list(m) for m in res.mask],
        "rabi_correction": not res.correction.is_zero,
        "correction_max_abs_rad_s": res.correction.max_abs(cfg.sweep.duration),
        "notes": list(res.notes) + [str(w.message) for w in caught if str(w.message) not in res.notes],
    }
    io.write_json(run / "process.json", info)
    return res


def cmd_process(args) -> int:
    run = Path(args.run)
    res = process_run(run, args.skip_rabi_correction)
    print(f"transitions at {', '.join(f'{t * 1e3:.2f} ms' for t in res.transitions)}; "
          f"correction max {res.correction.max_abs(res.fz.t_end):.3g} rad/s")
    return EXIT_OK


def _load_correction(run: Path) -> model.RabiCorrection:
    path = run / "correction.csv"
    if not path.exists():
        return model.RabiCorrection.zero()
    data = np.loadtxt(path, delimiter=",", skiprows=2, ndmin=2)
    if not np.any(data[:, 1]):
        return model.RabiCorrection.zero()
    return model.RabiCorrection(data[:, 0], data[:, 1])


# -- estimate ----------------------------------------------------------------

def estimate_run(run: Path, tones=None, auto_bounds=None, no_phase=False, seed=None, workers=None,
                 max_steps=None, window=None, correction_iterations=None) -> estimator.EstimationResult:
    cfg = _run_config(run)
    st = cfg.estimate
    demod, _ = _stage("read", io.read_record, run / "demod.lzr")
    fz, fy = demod["fz1R"], demod["fy1R"]
    sweep = cfg.sweep
    corr = _stage("read", _load_correction, run)
    n = tones or st.tones or 1
    amp = (st.amplitude_min, st.amplitude_max)
    use_auto = st.auto_bounds if auto_bounds is None else auto_bounds
    if use_auto:
        bounds = _stage("auto_bounds", estimator.auto_bounds, fz, sweep, n, amp)
    else:
        bounds = estimator.SearchBounds.default(sweep, n, amp)
    ecfg = estimator.EstimateConfig(
        de=estimator.DEConfig(
            population=st.population, window=window or st.window, max_steps=max_steps or st.max_steps,
            seed=st.seed if seed is None else seed, workers=workers or st.workers,
        ),
        phase=st.phase and not no_phase,
    )
    res = _stage("estimate", estimator.estimate, fz, sweep, corr, bounds, ecfg)
    iters = st.correction_iterations if correction_iterations is None else correction_iterations
    if iters > 0:
        res, corr = _stage("refine_with_correction", estimator.refine_with_correction, res, fz, fy, sweep, corr, iters, ecfg)
        t = np.arange(0.0, sweep.duration + 1e-12, 1e-3)
        io.write_table(run / "correction_refined.csv", {"t": t, "delta_rabi_rad_s": corr(t)},
                       "model-consistent Rabi correction")
    res.provenance["bounds"] = {
        "auto": bool(use_auto),
        "frequency_hz": [[model.to_hz(a), model.to_hz(b)] for a, b in bounds.frequency],
        "amplitude_hz": [[model.to_hz(a), model.to_hz(b)] for a, b in bounds.amplitude],
    }
    truth = None
    if (run / "truth.json").exists():
        truth = _truth_params(io.read_json(run / "truth.json"))
    out = res.to_dict(gamma=cfg.gamma, truth=truth)
    out["rabi_correction_max_abs_rad_s"] = corr.max_abs(sweep.duration)
    io.write_json(run / "estimate.json", out)
    cost = estimator.CostFunction(fz, sweep, corr, res.params.n, res.phase_included,
                                  fixed_phases=[t.phase for t in res.params.tones])
    io.write_table(run / "overlay.csv", {"t": cost.times, "fz1R_data": cost.data,
                                         "fz1R_model": cost.model(res.params)}, "data vs model fz1R")
    return res


def _truth_params(d: dict) -> estimator.ParameterVector | None:
    tones = [model.Tone(t["amplitude_rad_s"], t["frequency_rad_s"], t["phase_rad"]) for t in d["tones"]]
    if not tones:
        return None
    return estimator.ParameterVector(tuple(tones), d["fz0"])


def cmd_estimate(args) -> int:
    res = estimate_run(Path(args.run), args.tones, args.auto_bounds or None, args.no_phase, args.seed,
                       args.workers, args.max_steps, args.window, args.correction_iterations)
    for j, t in enumerate(res.params.tones):
        print(f"tone {j}: f = {model.to_hz(t.frequency):.5f} Hz, "
              f"A = {model.to_hz(t.amplitude):.4f} Hz, phase = {t.phase:.4f} rad")
    print(f"cost {res.cost:.6g}; converged: {res.converged} ({res.stop_reason})")
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


# -- report ------------------------------------------------------------------

REPORT_INPUTS = ("config.cfg", "raw.lzr", "demod.lzr", "estimate.json", "overlay.csv")


def report_run(run: Path) -> dict:
    missing = [f for f in REPORT_INPUTS if not (run / f).exists()]
    if missing:
        raise StageError("report", FileNotFoundError("missing artifacts: " + ", ".join(str(run / f) for f in missing)))
    cfg = _run_config(run)
    sweep = cfg.sweep
    raw, _ = io.read_record(run / "raw.lzr")
    demod, _ = io.read_record(run / "demod.lzr")
    est = io.read_json(run / "estimate.json")

    lo = (sweep.carrier - 1.2 * sweep.rabi_stop) / model.TWO_PI
    hi = (sweep.carrier + 1.2 * sweep.rabi_stop) / model.TWO_PI
    t, f, db = dsp.spectrogram(raw["faraday"], band=(lo, hi))
    tt, ff = np.meshgrid(t, f, indexing="ij")
    io.write_table(run / "spectrogram.csv", {"t": tt.ravel(), "f_hz": ff.ravel(), "power_db": db.T.ravel()},
                   "faraday spectrogram")

    corr = _load_correction(run)
    if (run / "correction_refined.csv").exists():
        data = np.loadtxt(run / "correction_refined.csv", delimiter=",", skiprows=2, ndmin=2)
        corr = model.RabiCorrection(data[:, 0], data[:, 1]) if np.any(data[:, 1]) else model.RabiCorrection.zero()
    params = _params_from_estimate(est)
    fy = demod["fy1R"]
    mfy = estimator.model_fy(params, sweep, corr, fy.rate).crop(fy.t0, fy.t_end)
    mfy = TimeSeries(fy.rate, fy.t0, mfy.samples, "model fy1R", fy.valid)
    mfx2, mfy2 = dsp.demod_second(mfy, sweep)
    maz = dsp.azimuth(mfx2, mfy2)
    az = demod["azimuth"]
    io.write_table(run / "overlay_azimuth.csv", {"t": az.times, "azimuth_data": az.samples,
                                                 "azimuth_model": maz.samples}, "frame-2S azimuth, data vs model")
    traj = model.integrate(sweep, params.tones, corr, params.init, step=1.0 / fy.rate)
    s2 = model.to_frame_2s(traj, sweep, corr)
    k = np.clip(np.round((fy.times - s2.times[0]) / s2.step).astype(int), 0, len(s2.times) - 1)
    io.write_table(run / "bloch_2s.csv", {
        "t": fy.times,
        "fx2S_data": demod["fx2S_corrected"].samples, "fy2S_data": demod["fy2S_corrected"].samples,
        "fz2S_data": demod["fz1R"].samples,
        "fx2S_model": s2.fx[k], "fy2S_model": s2.fy[k], "fz2S_model": s2.fz[k],
    }, "frame-2S Bloch coordinates")

    ov = np.loadtxt(run / "overlay.csv", delimiter=",", skiprows=2, ndmin=2)
    resid = ov[:, 1] - ov[:, 2]
    summary = {
        "scenario": cfg.name,
        "rbw_hz": model.rbw(sweep),
        "sqrt_lambda_rad_s": math.sqrt(sweep.rate),
        "sqrt_lambda_hz": model.to_hz(math.sqrt(sweep.rate)),
        "overlay_residual_rms": float(np.sqrt(np.mean(resid**2))),
        "cost": est["cost"],
        "wall_time_s": est["wall_time_s"],
        "converged": est["converged"],
        "tones": [
            {k: t[k] for k in ("frequency_hz", "frequency_sigma_hz", "amplitude_hz", "amplitude_sigma_hz",
                               "field_nt", "field_sigma_nt", "phase_rad", "phase_sigma_rad")}
            for t in est["tones"]
        ],
    }
    if "truth_comparison" in est:
        summary["truth_comparison"] = est["truth_comparison"]
    io.write_json(run / "summary.json", summary)
    lines = [f"scenario            {cfg.name}",
             f"RBW                 {summary['rbw_hz']:.4g} Hz",
             f"sqrt(lambda)        {summary['sqrt_lambda_hz']:.4g} Hz",
             f"cost                {summary['cost']:.6g}",
             f"overlay resid RMS   {summary['overlay_residual_rms']:.3g}",
             f"runtime             {summary['wall_time_s']:.1f} s",
             f"converged           {summary['converged']}"]
    for j, t in enumerate(summary["tones"]):
        lines.append(f"tone {j}: f = {t['frequency_hz']:.5f} +/- {t['frequency_sigma_hz']:.3g} Hz, "
                     f"B = {t['field_nt']:.4f} +/- {t['field_sigma_nt']:.3g} nT, "
                     + (f"phase = {t['phase_rad']:.4f} +/- {t['phase_sigma_rad']:.3g} rad"
                        if t["phase_rad"] is not None else "phase not fitted"))
    (run / "summary.txt").write_text("\n".join(lines) + "\n")
    return summary


def _params_from_estimate(est: dict) -> estimator.ParameterVector:
    tones = [model.Tone(t["amplitude_rad_s"], t["frequency_rad_s"], t["phase_rad"] or 0.0) for t in est["tones"]]
    return estimator.ParameterVector(tuple(tones), est["fz0"])


def cmd_report(args) -> int:
    report_run(Path(args.run))
    print((Path(args.run) / "summary.txt").read_text(), end="")
    return EXIT_OK


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lzsa", description="Swept Landau-Zener spectrum analyzer simulator and estimator")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="synthesize a raw record from a scenario")
    s.add_argument("config", help=f"config file or preset ({', '.join(cfgmod.PRESETS)})")
    s.add_argument("run", help="run directory")
    s.add_argument("--noise", choices=("on", "off"), default="on")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("process", help="demodulate a raw record")
    s.add_argument("run")
    s.add_argument("--skip-rabi-correction", action="store_true")
    s.set_defaults(func=cmd_process)

    s = sub.add_parser("estimate", help="retrieve tone parameters")
    s.add_argument("run")
    s.add_argument("--tones", type=int)
    s.add_argument("--auto-bounds", action="store_true")
    s.add_argument("--no-phase", action="store_true")
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--max-steps", type=int)
    s.add_argument("--window", type=int)
    s.add_argument("--correction-iterations", type=int)
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("report", help="write plot data and a summary")
    s.add_argument("run")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as e:
        print(f"configuration error:\n{e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as e:
        print(f"error in stage {e}", file=sys.stderr)
        return EXIT_PIPELINE
    except (LZSAError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
