"""Command-line entry point: simulate, analyze, fit, cavity-equiv, predict, report.

Setting precedence (later wins): built-in defaults, ``preset``, explicit config
sections, command-line flags (``--seed``, ``--out``, ``--format``,
``--zero-gain``). Worker count for angle sweeps comes from the
``FDSQUEEZE_WORKERS`` environment variable and defaults to the number of CPUs.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 fit did not
converge.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from importlib import metadata
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import ValidationError

from . import estimator as est
from . import fitter as ft
from . import spectral_model as sm
from .config import RunConfig, describe_validation_error, load_config
from .errors import (
    CsvParseError,
    DegenerateDataError,
    DegenerateFitError,
    DomainError,
    GridMismatchError,
    ParameterError,
    RecordLengthError,
    SingularEvaluationError,
)
from .params import FrequencyGrid, SpectrumSeries, params_to_jsonable
from .synthesizer import SynthesisConfig, _atomic_write_text, export_csv, ingest_csv, synthesize_angle

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NONCONVERGED = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        from . import __version__

        return __version__


def workers() -> int:
    env = os.environ.get("FDSQUEEZE_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise CliError(EXIT_CONFIG, f"FDSQUEEZE_WORKERS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _ordered_map(fn, items):
    items = list(items)
    n = workers()
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# ------------------------------------------------------------------ helpers


def _load(args, require_model: bool = True) -> RunConfig:
    try:
        data = json.loads(Path(args.config).read_text()) if args.config else {}
    except FileNotFoundError:
        raise CliError(EXIT_CONFIG, f"config file not found: {args.config}") from None
    except json.JSONDecodeError as e:
        raise CliError(EXIT_CONFIG, f"{args.config}: invalid JSON at line {e.lineno}: {e.msg}") from None
    if not isinstance(data, dict):
        raise CliError(EXIT_CONFIG, "configuration root must be a JSON object")
    data = dict(data)
    if getattr(args, "seed", None) is not None:
        data.setdefault("synthesis", {})
        data["synthesis"] = {**data["synthesis"], "seed": args.seed}
    out = {}
    if getattr(args, "out", None):
        out["dir"] = args.out
    if getattr(args, "format", None):
        out["format"] = args.format
    if out:
        data["output"] = {**data.get("output", {}), **out}
    if getattr(args, "zero_gain", False):
        data["analysis"] = {**data.get("analysis", {}), "zero_gain": True}
    try:
        cfg = load_config(data=data, require_model=require_model)
        if cfg.has_model:
            cfg.model_params()  # surface domain-invariant violations as config errors
    except ValidationError as e:
        raise CliError(EXIT_CONFIG, describe_validation_error(e)) from None
    except (ParameterError, DomainError) as e:
        raise CliError(EXIT_CONFIG, f"configuration error: {e}") from None
    return cfg


def _outdir(cfg: RunConfig) -> Path:
    p = Path(cfg.output.dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _welch_cfg(cfg: RunConfig, fs: float) -> est.WelchConfig:
    w = cfg.welch
    L = w.segment_length or est.default_segment_length(fs)
    try:
        return est.WelchConfig(L, w.overlap, w.window, w.detrend)
    except ParameterError as e:
        raise CliError(EXIT_CONFIG, f"configuration error: welch: {e}") from None


def _deg_tag(theta: float) -> str:
    return f"{math.degrees(theta):07.2f}".replace(".", "p").replace("-", "m")


def _write_series(series: SpectrumSeries, path: Path, fmt: str):
    if fmt == "json":
        payload = {
            "freq_hz": series.hz.tolist(),
            "kind": series.kind,
            "normalization": series.normalization,
        }
        if np.iscomplexobj(series.values):
            payload["real"] = series.values.real.tolist()
            payload["imag"] = series.values.imag.tolist()
        else:
            payload["value"] = np.asarray(series.values).tolist()
        est.write_json(payload, path.with_suffix(".json"))
    else:
        est.export_spectrum_csv(series, path.with_suffix(".csv"))


def _write_json(obj, path: Path):
    est.write_json(params_to_jsonable(obj), path)


def _data_files(paths) -> list[Path]:
    files = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files.extend(sorted(p.glob("record_*.csv")) or sorted(p.glob("*.csv")))
        elif p.is_file():
            files.append(p)
        else:
            raise CliError(EXIT_DATA, f"data path not found: {p}")
    if not files:
        raise CliError(EXIT_DATA, "no data files found")
    return files


def _load_records(paths, cfg: RunConfig):
    recs = []
    for f in _data_files(paths):
        pair = ingest_csv(f, None)
        if pair.theta_s is None:
            raise CliError(EXIT_DATA, f"{f}: no theta_s in header; cannot place the record in a sweep")
        recs.append(pair)
    return recs


# ------------------------------------------------------------------ commands


def cmd_simulate(args) -> int:
    cfg = _load(args)
    mp = cfg.model_params()
    s = cfg.synthesis
    try:
        scfg = SynthesisConfig(s.sample_rate_hz, s.duration_s, s.seed, mp.spin, mp.epr, mp.det, cfg.thetas())
    except ParameterError as e:
        raise CliError(EXIT_CONFIG, f"configuration error: synthesis: {e}") from None
    out = _outdir(cfg)

    def one(j):
        # each angle uses one worker; inner bin blocks stay sequential
        pair = synthesize_angle(scfg, j, workers=1)
        path = out / f"record_theta_{_deg_tag(pair.theta_s)}.csv"
        export_csv(pair, path)
        return path.name

    files = _ordered_map(one, range(len(scfg.theta_s_list)))
    manifest = {
        "command": "simulate",
        "tool_version": tool_version(),
        "seed": scfg.seed,
        "parameter_digest": scfg.digest(),
        "sample_rate_hz": scfg.sample_rate,
        "duration_s": scfg.duration,
        "theta_s_deg": list(cfg.detection.theta_s_deg),
        "files": files,
        "config": json.loads(cfg.model_dump_json()),
        "created_utc": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    _write_json(manifest, out / "manifest.json")
    print(f"wrote {len(files)} record(s) to {out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _load(args, require_model=False)
    recs = _load_records(args.data, cfg)
    out = _outdir(cfg)
    fmt = cfg.output.format
    lo, hi = cfg.analysis.band_hz

    def one(pair):
        wc = _welch_cfg(cfg, pair.sample_rate)
        res = est.condition_record(pair, wc, cfg.analysis.mode, cfg.analysis.smooth, cfg.analysis.zero_gain)
        tag = _deg_tag(pair.theta_s)
        w = res.filter.spectra
        if w is not None:
            _write_series(w.psd_signal, out / f"psd_signal_{tag}", fmt)
            _write_series(w.psd_idler, out / f"psd_idler_{tag}", fmt)
            _write_series(w.csd, out / f"csd_{tag}", fmt)
        else:
            _write_series(res.signal_spectrum, out / f"psd_signal_{tag}", fmt)
        _write_series(res.filter.gain, out / f"gain_{tag}", fmt)
        _write_series(res.spectrum, out / f"conditional_{tag}", fmt)
        mean, se = est.band_average(res.spectrum, lo, hi)
        band = res.spectrum.band(lo, hi)
        k = int(np.argmin(band.values))
        return pair.theta_s, res.spectrum, {
            "theta_s_deg": math.degrees(pair.theta_s),
            "band_mean": mean,
            "band_mean_stderr": se,
            "band_mean_db": 10 * math.log10(mean),
            "min_db": float(10 * np.log10(band.values[k])),
            "argmin_freq_hz": float(band.hz[k]),
            "source": pair.provenance,
        }

    results = _ordered_map(one, recs)
    summary = {"command": "analyze", "tool_version": tool_version(), "records": [r[2] for r in results]}
    if len(results) >= 3:
        sg = est.build_spectrogram([(t, s) for t, s, _ in results])
        traj = est.extract_angle_trajectory(sg)
        est.export_spectrogram_csv(sg, out / "spectrogram.csv")
        deg = SpectrumSeries(traj.grid, np.degrees(traj.values), "shot-noise", "angle")
        _write_series(deg, out / "trajectory", "csv")
        summary.update(est.summary_dict(sg, traj, (lo, hi), stride=4))
    _write_json(summary, out / "summary.json")
    print(f"analyzed {len(results)} record(s); outputs in {out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = _load(args)
    recs = _load_records(args.data, cfg)
    out = _outdir(cfg)
    base = cfg.model_params()
    obs = []
    for pair in recs:
        wc = _welch_cfg(cfg, pair.sample_rate)
        w = est.welch_pair(pair, wc)
        ker = est.window_kernel(wc, pair.sample_rate) if cfg.fit.window_kernel else None
        if "conditional" in cfg.fit.observables:
            res = est.condition_record(pair, wc, cfg.analysis.mode, cfg.analysis.smooth)
            obs.append(ft.Observation("conditional", res.spectrum, pair.theta_s, ker))
        kinds = [k for k in cfg.fit.observables if k != "conditional"]
        obs.extend(ft.observations_from_welch(w, pair.theta_s, kinds, ker))
    try:
        problem = ft.FitProblem(
            tuple(obs), base, cfg.fit_bounds(), tuple(cfg.fit.band_hz), cfg.fit_initial() or None,
            cfg.fit.seed if cfg.fit.seed is not None else cfg.synthesis.seed,
            cfg.fit.restarts, cfg.fit.max_evals,
        )
        result = ft.fit_model(problem)
    except ParameterError as e:
        raise CliError(EXIT_CONFIG, f"configuration error: fit: {e}") from None
    _atomic_write_text(out / "fit_result.json", lambda fh: fh.write(result.to_json()))
    print(f"chi2/dof = {result.chi2:.6g}/{result.dof}, converged = {result.converged}")
    return EXIT_OK if result.converged else EXIT_NONCONVERGED


def _read_trajectory(path: Path) -> SpectrumSeries:
    f, v = [], []
    with open(path) as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header is None:
            raise CsvParseError(path, 1, "empty trajectory file")
        for lineno, row in enumerate(rows, start=2):
            try:
                f.append(float(row[0]))
                v.append(float(row[1]))
            except (ValueError, IndexError):
                raise CsvParseError(path, lineno, f"malformed row {row!r}") from None
    deg = header[1].strip() != "value_rad"
    vals = np.radians(v) if deg else np.asarray(v)
    try:
        return SpectrumSeries(FrequencyGrid.from_hz(f), np.asarray(vals), "shot-noise", "angle")
    except ParameterError as e:
        raise CsvParseError(path, 0, str(e)) from None


def cmd_cavity_equiv(args) -> int:
    cfg = _load(args, require_model=False)
    out = _outdir(cfg)
    traj = _read_trajectory(Path(args.trajectory))
    band = tuple(cfg.cavity.band_hz) if cfg.cavity.band_hz else None
    cav, res = ft.fit_cavity_equivalent(traj, cfg.cavity.finesse, band, cfg.synthesis.seed)
    payload = {
        "detuning_hz": cav.detuning / (2 * math.pi),
        "bandwidth_hz": cav.bandwidth / (2 * math.pi),
        "finesse": cav.finesse,
        "equivalent_length_m": sm.equivalent_length(cav),
        "fit": res.to_dict(),
    }
    _write_json(payload, out / "cavity.json")
    print(json.dumps({k: payload[k] for k in ("detuning_hz", "bandwidth_hz", "equivalent_length_m")}))
    return EXIT_OK if res.converged else EXIT_NONCONVERGED


def cmd_predict(args) -> int:
    cfg = _load(args)
    out = _outdir(cfg)
    fmt = cfg.output.format
    mp = cfg.model_params()
    p = cfg.predict
    grid = FrequencyGrid.linspace_hz(p.f_min_hz, p.f_max_hz, p.n_points)

    def one(theta):
        mpt = mp.with_theta(theta)
        s = sm.conditional_spectrum(mpt.spin, mpt.epr, mpt.det, grid)
        _write_series(s, out / f"model_conditional_{_deg_tag(theta)}", fmt)
        return math.degrees(theta), float(np.min(s.values))

    mins = _ordered_map(one, cfg.thetas())
    ang = sm.squeezing_angle(mp.spin, mp.det, grid)
    _write_series(SpectrumSeries(grid, np.degrees(ang.values), "shot-noise", "angle"), out / "model_angle", fmt)
    opt = sm.optimal_conditional_spectrum(mp.spin, mp.epr, mp.det, grid)
    _write_series(opt, out / "model_optimal", fmt)
    proj = []
    for sc in p.improvements:
        s = ft.project_improvement(mp, grid, sc.n_th_divisor, sc.bb_readout_divisor)
        name = f"projection_th{sc.n_th_divisor:g}_bb{sc.bb_readout_divisor:g}"
        _write_series(s, out / name, fmt)
        proj.append({"file": name, "n_th_divisor": sc.n_th_divisor, "bb_readout_divisor": sc.bb_readout_divisor,
                     "mean_db_in_band": float(10 * np.log10(np.mean(s.band(3e3, 60e3).values)))})
    ge, le = sm.vr_effective_params(mp.spin, mp.det)
    try:
        coop = sm.cooperativity(mp.spin)
    except DomainError:
        coop = None
    summary = {
        "command": "predict",
        "tool_version": tool_version(),
        "sql_bandwidth_hz": sm.sql_bandwidth(mp.spin, mp.det) / (2 * math.pi),
        "effective_readout_hz": ge / (2 * math.pi),
        "effective_larmor_hz": le / (2 * math.pi),
        "cooperativity": coop,
        "duan_simon_level": sm.duan_simon_level(mp.epr),
        "duan_simon_db": 10 * math.log10(sm.duan_simon_level(mp.epr)),
        "conditional_min_by_theta": [{"theta_s_deg": t, "min_db": 10 * math.log10(v)} for t, v in mins],
        "projections": proj,
    }
    _write_json(summary, out / "predict_summary.json")
    print(f"SQL bandwidth {summary['sql_bandwidth_hz'] / 1e3:.4g} kHz; outputs in {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    d = Path(args.dir)
    if not d.is_dir():
        raise CliError(EXIT_DATA, f"not a directory: {d}")
    parts = {}
    for name in ("manifest.json", "summary.json", "predict_summary.json", "fit_result.json", "cavity.json"):
        f = d / name
        if f.is_file():
            try:
                parts[name.removesuffix(".json")] = json.loads(f.read_text())
            except json.JSONDecodeError as e:
                raise CliError(EXIT_DATA, f"{f}: invalid JSON ({e.msg})") from None
    if not parts:
        raise CliError(EXIT_DATA, f"no run outputs found in {d}")
    lines = [f"report for {d}"]
    if "manifest" in parts:
        m = parts["manifest"]
        lines.append(f"  simulate: seed {m.get('seed')}, {len(m.get('files', []))} record(s), digest {m.get('parameter_digest', '')[:12]}")
    if "summary" in parts:
        s = parts["summary"]
        for r in s.get("records", []):
            lines.append(f"  theta_s {r['theta_s_deg']:7.2f} deg: band mean {r['band_mean_db']:+.3f} dB, "
                         f"min {r['min_db']:+.3f} dB at {r['argmin_freq_hz'] / 1e3:.3g} kHz")
        if s.get("empirical_sql_bandwidth_hz") is not None:
            lines.append(f"  empirical SQL bandwidth {s['empirical_sql_bandwidth_hz'] / 1e3:.4g} kHz")
    if "predict_summary" in parts:
        p = parts["predict_summary"]
        lines.append(f"  model SQL bandwidth {p['sql_bandwidth_hz'] / 1e3:.4g} kHz, "
                     f"Duan-Simon {p['duan_simon_db']:+.2f} dB")
    if "fit_result" in parts:
        f = parts["fit_result"]
        lines.append(f"  fit: chi2/dof {f['chi2']:.4g}/{f['dof']}, converged {f['converged']}")
    if "cavity" in parts:
        c = parts["cavity"]
        lines.append(f"  cavity: detuning {c['detuning_hz'] / 1e3:.4g} kHz, linewidth {c['bandwidth_hz'] / 1e3:.4g} kHz, "
                     f"length {c['equivalent_length_m']:.4g} m")
    text = "\n".join(lines)
    print(text)
    _write_json(parts, d / "report.json")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fdsqueeze", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {tool_version()}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="JSON run configuration")
        if seed:
            p.add_argument("--seed", type=int, help="override synthesis.seed")
        p.add_argument("--out", help="override output.dir")
        p.add_argument("--format", choices=("csv", "json"), help="override output.format")

    p = sub.add_parser("simulate", help="synthesize signal/idler records")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="Welch spectra, Wiener conditioning, spectrogram")
    p.add_argument("data", nargs="+", help="record CSV files or a directory of them")
    common(p)
    p.add_argument("--zero-gain", action="store_true", help="apply g = 0 (conditional equals signal)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("fit", help="chi-squared fit of model parameters to records")
    p.add_argument("data", nargs="+")
    common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("cavity-equiv", help="fit a filter-cavity rotation to an angle trajectory")
    p.add_argument("trajectory", help="trajectory CSV (freq_hz, angle in degrees)")
    common(p)
    p.set_defaults(func=cmd_cavity_equiv)

    p = sub.add_parser("predict", help="model spectra, angle curve and projections")
    common(p, seed=False)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="summarize outputs in a run directory")
    p.add_argument("dir")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(str(e), file=sys.stderr)
        return e.code
    except (CsvParseError, RecordLengthError, DegenerateDataError, GridMismatchError, DegenerateFitError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ParameterError, DomainError, SingularEvaluationError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
