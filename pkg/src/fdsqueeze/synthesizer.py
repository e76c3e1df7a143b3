"""Seeded two-channel photocurrent synthesis by frequency-domain coloring.

Records are in shot-noise units: a vacuum-limited channel is unit-variance
white noise, so its one-sided PSD is ``2/fs``.

Every bath (EPR vacua, loss vacua, thermal and broadband forces) is drawn as
independent circular Gaussian rfft bins. The idler passes through the
quadrature-rotation and spin response exactly as the input-output relations
prescribe; the signal is a rotated homodyne quadrature. One inverse FFT per
channel gives a real record. The FFT length exceeds the record by a guard of
about 10 %, and the tail is dropped so the kept record is not periodic.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.fft import irfft, next_fast_len

from .errors import CsvParseError, ParameterError
from .params import DetectionConfig, EprParams, SpinParams, params_to_jsonable
from .spectral_model import _backaction, _broadband, _thermal

GUARD_FRACTION = 0.10
BLOCK_BINS = 1 << 16
_U64 = (1 << 64) - 1


@dataclass(frozen=True)
class SynthesisConfig:
    sample_rate: float
    duration: float
    seed: int
    spin: SpinParams
    epr: EprParams
    det: DetectionConfig = field(default_factory=DetectionConfig)
    theta_s_list: tuple = (0.0,)

    def __post_init__(self):
        if not (math.isfinite(self.sample_rate) and self.sample_rate > 0):
            raise ParameterError(f"sample_rate must be positive, got {self.sample_rate!r}")
        if not (math.isfinite(self.duration) and self.duration > 0):
            raise ParameterError(f"duration must be positive, got {self.duration!r}")
        n = self.sample_rate * self.duration
        if abs(n - round(n)) > 1e-6 * max(1.0, n):
            raise ParameterError(f"sample_rate * duration = {n!r} is not an integer sample count")
        if round(n) < 16:
            raise ParameterError("record must hold at least 16 samples")
        if not isinstance(self.seed, (int, np.integer)) or not (0 <= int(self.seed) <= _U64):
            raise ParameterError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        thetas = tuple(float(t) for t in np.atleast_1d(self.theta_s_list))
        if not thetas or not all(math.isfinite(t) for t in thetas):
            raise ParameterError("theta_s_list must hold at least one finite angle")
        object.__setattr__(self, "theta_s_list", thetas)
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def n_samples(self) -> int:
        return int(round(self.sample_rate * self.duration))

    @property
    def fft_length(self) -> int:
        m = next_fast_len(int(math.ceil(self.n_samples * (1.0 + GUARD_FRACTION))), real=True)
        while m % 2:
            m = next_fast_len(m + 1, real=True)
        return m

    def digest(self) -> str:
        blob = json.dumps(params_to_jsonable(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True, eq=False)
class TimeSeriesPair:
    signal: np.ndarray
    idler: np.ndarray
    sample_rate: float
    provenance: str = "unknown"
    theta_s: Optional[float] = None
    seed: Optional[int] = None

    def __post_init__(self):
        s = np.ascontiguousarray(self.signal, dtype=float)
        i = np.ascontiguousarray(self.idler, dtype=float)
        if s.ndim != 1 or i.ndim != 1:
            raise ParameterError("signal and idler must be one-dimensional")
        if s.shape != i.shape:
            raise ParameterError(f"signal ({s.size}) and idler ({i.size}) lengths differ")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(i))):
            raise ParameterError("time series contain non-finite samples")
        if not (math.isfinite(self.sample_rate) and self.sample_rate > 0):
            raise ParameterError("sample_rate must be positive")
        object.__setattr__(self, "signal", s)
        object.__setattr__(self, "idler", i)

    def __len__(self):
        return self.signal.size

    @property
    def duration(self) -> float:
        return self.signal.size / self.sample_rate

    def slice(self, start: int, stop: int) -> "TimeSeriesPair":
        return TimeSeriesPair(
            self.signal[start:stop], self.idler[start:stop], self.sample_rate,
            self.provenance, self.theta_s, self.seed,
        )

    def with_idler(self, idler) -> "TimeSeriesPair":
        return TimeSeriesPair(self.signal, idler, self.sample_rate, self.provenance, self.theta_s, self.seed)


# ------------------------------------------------------------------ synthesis


def _block_rng(seed: int, angle_index: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(angle_index, block))))


def _fill_block(cfg, theta_s, angle_index, block, lo, hi, m, sig_out, idl_out):
    """Colour bins [lo, hi) of both channels in place (numpy FFT convention)."""
    spin, epr = cfg.spin, cfg.epr
    rng = _block_rng(cfg.seed, angle_index, block)
    nb = hi - lo
    # 10 baths x (re, im)
    z = rng.standard_normal((10, 2, nb))
    scale = math.sqrt(m / 2.0)
    a1, a2, b1, b2, v_s, u_x, u_p, v_o, f_a, f_bb = (scale * (q[0] + 1j * q[1]) for q in z)
    k = np.arange(lo, hi)
    w = 2.0 * math.pi * cfg.sample_rate * k / m

    ch, sh = math.cosh(epr.r), math.sinh(epr.r)
    x_s = ch * a1 + sh * a2
    x_i = sh * a1 + ch * a2
    p_s = ch * b1 - sh * b2
    p_i = -sh * b1 + ch * b2

    # idler: input loss, spin interaction with wave-plate offset, output loss
    ei, eo = epr.eta_i_in, epr.eta_i_out
    x = math.sqrt(ei) * x_i + math.sqrt(1.0 - ei) * u_x
    p = math.sqrt(ei) * p_i + math.sqrt(1.0 - ei) * u_p
    cd, sd = math.cos(cfg.det.delta_theta_i), math.sin(cfg.det.delta_theta_i)
    # physics-convention responses act on numpy-convention bins via conjugation
    kk = np.conj(_backaction(spin.larmor, spin.readout, spin.decay, w))
    kth = np.conj(_thermal(spin.larmor, spin.readout, spin.decay, w))
    kbb = np.conj(_broadband(spin.larmor, spin.bb_readout, spin.bb_decay, w))
    f_a *= math.sqrt(2.0 * spin.n_th + 1.0)
    f_bb *= math.sqrt(2.0 * spin.n_bb_value + 1.0)
    q_i = p + cd * (kk * (x * cd - p * sd) + kth * f_a + kbb * f_bb)
    idl_out[lo:hi] = math.sqrt(eo) * q_i + math.sqrt(1.0 - eo) * v_o

    es = epr.eta_s
    sig_out[lo:hi] = math.sqrt(es) * (x_s * math.sin(theta_s) + p_s * math.cos(theta_s)) + math.sqrt(1.0 - es) * v_s


def _default_workers() -> int:
    env = os.environ.get("FDSQUEEZE_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def synthesize_angle(cfg: SynthesisConfig, angle_index: int, workers: Optional[int] = None) -> TimeSeriesPair:
    """Synthesize the record for ``cfg.theta_s_list[angle_index]``."""
    theta_s = cfg.theta_s_list[angle_index]
    m = cfg.fft_length
    nbins = m // 2 + 1
    sig = np.zeros(nbins, dtype=complex)
    idl = np.zeros(nbins, dtype=complex)
    # DC (bin 0) and Nyquist (bin m/2) stay zero
    edges = list(range(1, nbins - 1, BLOCK_BINS)) + [nbins - 1]
    jobs = [(b, edges[b], edges[b + 1]) for b in range(len(edges) - 1)]
    workers = workers or _default_workers()

    def run(job):
        b, lo, hi = job
        _fill_block(cfg, theta_s, angle_index, b, lo, hi, m, sig, idl)

    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, jobs))
    else:
        for job in jobs:
            run(job)

    n = cfg.n_samples
    s = irfft(sig, n=m)[:n]
    del sig
    i = irfft(idl, n=m)[:n]
    return TimeSeriesPair(s, i, cfg.sample_rate, "synth:" + cfg.digest()[:16], theta_s, cfg.seed)


def synthesize(cfg: SynthesisConfig, workers: Optional[int] = None) -> list[TimeSeriesPair]:
    """One independent realization per entry of ``cfg.theta_s_list``."""
    return [synthesize_angle(cfg, j, workers) for j in range(len(cfg.theta_s_list))]


# ------------------------------------------------------------------ CSV I/O

_HEADER_RE = re.compile(r"(\w+)=([^\s]+)")


def _atomic_write_text(path: Path, writer) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def export_csv(pair: TimeSeriesPair, path) -> Path:
    """Write ``# fs=.. seed=.. theta_s=..`` then ``signal,idler`` rows (17 significant digits)."""
    seed = "none" if pair.seed is None else str(int(pair.seed))
    theta = "none" if pair.theta_s is None else repr(math.degrees(pair.theta_s))
    header = f"# fs={pair.sample_rate!r} seed={seed} theta_s={theta}"

    def write(fh):
        fh.write(header + "\n")
        fh.write("signal,idler\n")
        np.savetxt(fh, np.column_stack([pair.signal, pair.idler]), fmt="%.17g", delimiter=",")

    _atomic_write_text(Path(path), write)
    return Path(path)


def _parse_header(line: str) -> dict:
    out = {}
    for key, val in _HEADER_RE.findall(line):
        out[key] = val
    return out


def _scan(path: Path):
    """Slow path: parse line by line, raising with the exact line number."""
    meta, rows, ncol, header_seen = {}, [], None, False
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                meta.update(_parse_header(line))
                continue
            parts = [p.strip() for p in line.split(",")]
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                if not header_seen and not rows:
                    header_seen = True
                    continue
                raise CsvParseError(path, lineno, f"non-numeric field in {line!r}") from None
            if len(vals) not in (2, 3):
                raise CsvParseError(path, lineno, f"expected 2 or 3 columns, found {len(vals)}")
            if ncol is None:
                ncol = len(vals)
            elif len(vals) != ncol:
                raise CsvParseError(path, lineno, f"expected {ncol} columns, found {len(vals)}")
            if not all(math.isfinite(v) for v in vals):
                raise CsvParseError(path, lineno, "NaN or infinite sample")
            rows.append(vals)
    return meta, np.asarray(rows, dtype=float).reshape(-1, ncol or 2)


def _fast_load(path: Path):
    """np.loadtxt path; returns (meta, None) whenever anything looks off."""
    meta, skip = {}, 0
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                meta.update(_parse_header(line))
                continue
            try:
                [float(p) for p in line.split(",")]
            except ValueError:
                skip = lineno
            break
    try:
        data = np.loadtxt(path, delimiter=",", comments="#", skiprows=skip, ndmin=2)
    except ValueError:
        return meta, None
    if data.shape[1] not in (2, 3) or not np.all(np.isfinite(data)):
        return meta, None
    return meta, data


def ingest_csv(path, sample_rate: Optional[float] = None) -> TimeSeriesPair:
    """Read ``signal,idler`` or ``time,signal,idler`` rows.

    The sample rate comes from the argument, else the ``fs=`` header field,
    else the time column. Malformed rows raise :class:`CsvParseError` with
    the offending line number.
    """
    path = Path(path)
    if not path.is_file():
        raise CsvParseError(path, 0, "file not found")
    meta, data = _fast_load(path)
    if data is None:
        meta, data = _scan(path)
    if data.shape[0] == 0:
        raise CsvParseError(path, 0, "no data rows")
    t = None
    if data.shape[1] == 3:
        t, sig, idl = data[:, 0], data[:, 1], data[:, 2]
    else:
        sig, idl = data[:, 0], data[:, 1]
    fs = sample_rate
    if fs is None and "fs" in meta:
        try:
            fs = float(meta["fs"])
        except ValueError:
            raise CsvParseError(path, 1, f"bad fs field {meta['fs']!r}") from None
    if fs is None and t is not None and t.size > 1:
        dt = np.diff(t)
        if np.any(dt <= 0):
            raise CsvParseError(path, 0, "time column is not strictly increasing")
        fs = 1.0 / float(np.median(dt))
    if fs is None:
        raise CsvParseError(path, 0, "sample rate unknown: pass it explicitly or add an fs= header")
    seed = meta.get("seed")
    theta = meta.get("theta_s")
    return TimeSeriesPair(
        sig, idl, float(fs),
        provenance=f"csv:{path.name}",
        theta_s=None if theta in (None, "none") else math.radians(float(theta)),
        seed=None if seed in (None, "none") else int(seed),
    )


def synthesize_from(spin, epr, det, sample_rate, duration, seed, thetas: Sequence[float], workers=None):
    """Convenience wrapper building the config in place."""
    cfg = SynthesisConfig(sample_rate, duration, seed, spin, epr, det, tuple(thetas))
    return synthesize(cfg, workers)
