"""Welch spectra, data-driven Wiener gains, non-causal conditioning, spectrograms."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.fft import irfft, rfft
from scipy.signal import get_window, oaconvolve

from .errors import DegenerateDataError, GridMismatchError, ParameterError, RecordLengthError
from .params import FrequencyGrid, SpectrumSeries
from .synthesizer import TimeSeriesPair, _atomic_write_text

WINDOWS = {"hann": "hann", "rect": "boxcar"}
FLAG_EPS = 1e-6
_CHUNK_SEGMENTS = 256


def default_segment_length(sample_rate: float, resolution_hz: float = 100.0) -> int:
    """Smallest power of two (>= 64) whose bin spacing is at most ``resolution_hz``."""
    n = 64
    while sample_rate / n > resolution_hz:
        n *= 2
    return n


@dataclass(frozen=True)
class WelchConfig:
    segment_length: int = 4096
    overlap: float = 0.5
    window: str = "hann"
    detrend: bool = False

    def __post_init__(self):
        L = int(self.segment_length)
        if L < 64 or L & (L - 1):
            raise ParameterError(f"segment_length must be a power of two >= 64, got {self.segment_length!r}")
        if not (0.0 <= self.overlap < 1.0):
            raise ParameterError(f"overlap must lie in [0, 1), got {self.overlap!r}")
        if self.window not in WINDOWS:
            raise ParameterError(f"window must be one of {sorted(WINDOWS)}, got {self.window!r}")
        object.__setattr__(self, "segment_length", L)

    @property
    def step(self) -> int:
        return max(1, int(round(self.segment_length * (1.0 - self.overlap))))

    def window_array(self) -> np.ndarray:
        return get_window(WINDOWS[self.window], self.segment_length, fftbins=True)

    def n_segments(self, n: int) -> int:
        return 0 if n < self.segment_length else 1 + (n - self.segment_length) // self.step

    def grid(self, sample_rate: float) -> FrequencyGrid:
        k = np.arange(1, self.segment_length // 2 + 1)
        return FrequencyGrid.from_hz(k * sample_rate / self.segment_length)

    def overlap_factor(self) -> float:
        """Variance inflation of a segment average caused by overlap (Gaussian data)."""
        w = self.window_array()
        L, D = self.segment_length, self.step
        norm = float(np.dot(w, w))
        total, j = 1.0, 1
        while j * D < L:
            rho = float(np.dot(w[: L - j * D], w[j * D:])) / norm
            total += 2.0 * rho * rho
            j += 1
        return total


def _check_length(n: int, cfg: WelchConfig):
    if n < 2 * cfg.segment_length:
        raise RecordLengthError(
            f"record of {n} samples is shorter than two segments ({2 * cfg.segment_length})"
        )


def _segment_ffts(x: np.ndarray, cfg: WelchConfig, start: int, count: int, win: np.ndarray):
    L, D = cfg.segment_length, cfg.step
    view = np.lib.stride_tricks.sliding_window_view(x, L)[start * D:(start + count) * D:D]
    seg = view * win if not cfg.detrend else (view - view.mean(axis=1, keepdims=True)) * win
    return rfft(seg, axis=1)[:, 1:]


@dataclass(frozen=True)
class WelchResult:
    """One-pass auto/cross spectra of a signal/idler pair."""

    grid: FrequencyGrid
    psd_signal: SpectrumSeries
    psd_idler: SpectrumSeries
    csd: SpectrumSeries
    n_segments: int


def _welch_accumulate(channels: Sequence[np.ndarray], cfg: WelchConfig, sample_rate: float, cross: bool):
    n = channels[0].size
    _check_length(n, cfg)
    win = cfg.window_array()
    K = cfg.n_segments(n)
    nb = cfg.segment_length // 2
    sums = [np.zeros(nb) for _ in channels]
    sq = [np.zeros(nb) for _ in channels]
    csum = np.zeros(nb, dtype=complex)
    csq = np.zeros(nb)
    for start in range(0, K, _CHUNK_SEGMENTS):
        cnt = min(_CHUNK_SEGMENTS, K - start)
        ffts = [_segment_ffts(x, cfg, start, cnt, win) for x in channels]
        for c, X in enumerate(ffts):
            p = X.real ** 2 + X.imag ** 2
            sums[c] += p.sum(axis=0)
            sq[c] += (p * p).sum(axis=0)
        if cross:
            cx = np.conj(ffts[0]) * ffts[1]
            csum += cx.sum(axis=0)
            csq += (cx.real ** 2 + cx.imag ** 2).sum(axis=0)
    scale = np.full(nb, 2.0 / (sample_rate * float(np.dot(win, win))))
    if cfg.segment_length % 2 == 0:
        scale[-1] /= 2.0  # Nyquist is not doubled
    infl = cfg.overlap_factor()

    def finish(s, q):
        mean = s / K
        var_seg = np.maximum(q / K - np.abs(mean) ** 2, 0.0) * (K / (K - 1) if K > 1 else 1.0)
        return mean * scale, var_seg / K * infl * scale ** 2

    psds = [finish(s, q) for s, q in zip(sums, sq)]
    cs = finish(csum, csq) if cross else None
    return psds, cs, K


def _to_units(values, variance, sample_rate, units):
    if units == "absolute":
        return values, variance, "absolute"
    if units == "shot-noise":
        f = sample_rate / 2.0
        return values * f, variance * f * f, "shot-noise"
    raise ParameterError(f"units must be 'absolute' or 'shot-noise', got {units!r}")


def welch_psd(x, sample_rate: float, cfg: WelchConfig = WelchConfig(), units: str = "absolute") -> SpectrumSeries:
    """One-sided Welch PSD, DC excluded, with a segment-scatter variance per bin.

    ``units='absolute'`` gives power per Hz (white unit-variance noise -> 2/fs);
    ``units='shot-noise'`` rescales by fs/2 for records already normalized to
    the vacuum level.
    """
    x = np.asarray(x, dtype=float)
    (psds, _, K) = _welch_accumulate([x], cfg, sample_rate, cross=False)
    vals, var = psds[0]
    vals, var, norm = _to_units(vals, var, sample_rate, units)
    return SpectrumSeries(cfg.grid(sample_rate), vals, norm, "psd", var, {"n_segments": K})


def welch_csd(pair: TimeSeriesPair, cfg: WelchConfig = WelchConfig(), units: str = "absolute") -> SpectrumSeries:
    """Cross spectrum S_{signal,idler} = <conj(F signal) F idler>."""
    return welch_pair(pair, cfg, units).csd


def welch_pair(pair: TimeSeriesPair, cfg: WelchConfig = WelchConfig(), units: str = "shot-noise") -> WelchResult:
    fs = pair.sample_rate
    psds, cs, K = _welch_accumulate([pair.signal, pair.idler], cfg, fs, cross=True)
    grid = cfg.grid(fs)
    meta = {"n_segments": K}
    out = []
    for (v, var) in psds:
        v, var, norm = _to_units(v, var, fs, units)
        out.append(SpectrumSeries(grid, v, norm, "psd", var, dict(meta)))
    cv, cvar, norm = _to_units(cs[0], cs[1], fs, units)
    return WelchResult(grid, out[0], out[1], SpectrumSeries(grid, cv, norm, "csd", cvar, dict(meta)), K)


def coherence(w: WelchResult) -> np.ndarray:
    return np.abs(w.csd.values) ** 2 / (w.psd_signal.values * w.psd_idler.values)


# ------------------------------------------------------------------ Wiener


@dataclass(frozen=True)
class WienerFilterEstimate:
    gain: SpectrumSeries
    source: str = "data-driven"
    flagged: Optional[np.ndarray] = None
    spectra: Optional[WelchResult] = None

    def __post_init__(self):
        if self.source not in ("data-driven", "analytical"):
            raise ParameterError(f"unknown gain source {self.source!r}")
        if self.gain.kind != "gain":
            raise ParameterError("Wiener estimate must hold a gain series")


def smooth3(values: np.ndarray) -> np.ndarray:
    """Centred 3-bin moving average, edge bins averaged over what exists."""
    v = np.asarray(values)
    out = v.copy()
    if v.size >= 3:
        out[1:-1] = (v[:-2] + v[1:-1] + v[2:]) / 3.0
        out[0] = (v[0] + v[1]) / 2.0
        out[-1] = (v[-2] + v[-1]) / 2.0
    return out


def estimate_wiener(
    pair: TimeSeriesPair, cfg: WelchConfig = WelchConfig(), smooth: bool = False, eps: float = FLAG_EPS
) -> WienerFilterEstimate:
    """Per-bin g = -CSD / PSD_idler from Welch spectra of ``pair``."""
    if not np.any(pair.idler):
        raise DegenerateDataError("idler record is identically zero")
    w = welch_pair(pair, cfg)
    p_i = w.psd_idler.values
    flagged = p_i < eps * np.median(p_i)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(flagged, 0.0, -w.csd.values / np.where(flagged, 1.0, p_i))
    if smooth:
        g = np.where(flagged, 0.0, smooth3(g))
    gain = SpectrumSeries(w.grid, g.astype(complex), "shot-noise", "gain",
                          meta={"n_segments": w.n_segments, "smoothed": bool(smooth)})
    return WienerFilterEstimate(gain, "data-driven", flagged, w)


def _impulse_response(gain: SpectrumSeries, L: int) -> np.ndarray:
    """Centred (non-causal) FIR taps realizing ``gain`` on an L-point grid."""
    full = np.zeros(L // 2 + 1, dtype=complex)
    full[1:] = np.conj(gain.values)  # physics-convention gain onto numpy bins
    full[-1] = full[-1].real  # Nyquist must be real for a real filter
    return np.roll(irfft(full, n=L), L // 2)


def apply_conditioning(
    pair: TimeSeriesPair, filt: WienerFilterEstimate, cfg: WelchConfig = WelchConfig()
) -> tuple[np.ndarray, SpectrumSeries]:
    """Return (signal + g*idler, its Welch spectrum in shot-noise units).

    The gain is applied as a non-causal FIR via overlap-add convolution. The
    spectrum is estimated on the interior of the record, dropping half a
    segment at each end where the filter sees zero padding.
    """
    L = cfg.segment_length
    grid = cfg.grid(pair.sample_rate)
    if not grid.same_as(filt.gain.grid):
        raise GridMismatchError(
            f"gain grid ({len(filt.gain.grid)} bins) does not match the Welch grid "
            f"({len(grid)} bins at fs={pair.sample_rate:g} Hz, L={L})"
        )
    n = len(pair)
    if not np.any(filt.gain.values):
        cond = pair.signal.copy()
    else:
        h = _impulse_response(filt.gain, L)
        cond = pair.signal + oaconvolve(pair.idler, h)[L // 2: L // 2 + n]
    inner = cond[L // 2: n - L // 2] if n - L >= 2 * L else cond
    spec = welch_psd(inner, pair.sample_rate, cfg, units="shot-noise")
    return cond, spec


@dataclass(frozen=True)
class ConditioningResult:
    theta_s: Optional[float]
    filter: WienerFilterEstimate
    conditioned: np.ndarray
    spectrum: SpectrumSeries
    signal_spectrum: SpectrumSeries
    mode: str


def condition_record(
    pair: TimeSeriesPair,
    cfg: WelchConfig = WelchConfig(),
    mode: str = "in-sample",
    smooth: bool = False,
    zero_gain: bool = False,
) -> ConditioningResult:
    """Estimate the gain and condition the record.

    ``in-sample`` estimates and applies on the whole record. ``unbiased``
    estimates on the first half and applies to the second half only.
    ``zero_gain`` skips estimation and applies g = 0.
    """
    if mode not in ("in-sample", "unbiased"):
        raise ParameterError(f"mode must be 'in-sample' or 'unbiased', got {mode!r}")
    if mode == "unbiased":
        half = len(pair) // 2
        train, test = pair.slice(0, half), pair.slice(half, len(pair))
    else:
        train = test = pair
    if zero_gain:
        grid = cfg.grid(pair.sample_rate)
        filt = WienerFilterEstimate(SpectrumSeries(grid, np.zeros(len(grid), complex), "shot-noise", "gain"))
    else:
        filt = estimate_wiener(train, cfg, smooth=smooth)
    cond, spec = apply_conditioning(test, filt, cfg)
    sig = welch_psd(test.signal, test.sample_rate, cfg, units="shot-noise")
    return ConditioningResult(pair.theta_s, filt, cond, spec, sig, mode)


# ------------------------------------------------------------------ spectrogram


@dataclass(frozen=True, eq=False)
class Spectrogram:
    theta_s_axis: np.ndarray  # rad, ascending
    grid: FrequencyGrid
    values: np.ndarray  # dB re shot noise, shape (angles, bins)

    def __post_init__(self):
        th = np.asarray(self.theta_s_axis, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if v.shape != (th.size, len(self.grid)):
            raise ParameterError(f"spectrogram matrix {v.shape} != ({th.size}, {len(self.grid)})")
        object.__setattr__(self, "theta_s_axis", th)
        object.__setattr__(self, "values", v)

    def is_periodic(self) -> bool:
        """True when the axis is uniform and spans one full period of pi."""
        th = self.theta_s_axis
        if th.size < 3:
            return False
        d = np.diff(th)
        step = d.mean()
        return bool(np.allclose(d, step, rtol=1e-6, atol=1e-9) and abs(th[-1] - th[0] + step - math.pi) < 1e-6)


def build_spectrogram(entries: Iterable[tuple[float, SpectrumSeries]]) -> Spectrogram:
    """Stack shot-noise-unit conditional spectra into a dB matrix sorted by angle."""
    entries = list(entries)
    thetas = np.array([float(t) for t, _ in entries])
    if np.unique(np.round(thetas, 12)).size != thetas.size:
        raise ParameterError("duplicate theta_s in spectrogram input")
    if thetas.size < 3:
        raise ParameterError(f"need at least 3 distinct theta_s values, got {thetas.size}")
    grid = entries[0][1].grid
    rows = []
    for t, s in entries:
        if not s.grid.same_as(grid):
            raise GridMismatchError(f"spectrum for theta_s={math.degrees(t):g} deg is on a different grid")
        s = s.in_shot_noise_units()
        rows.append(10.0 * np.log10(s.values))
    order = np.argsort(thetas)
    return Spectrogram(thetas[order], grid, np.asarray(rows)[order])


def extract_angle_trajectory(sg: Spectrogram) -> SpectrumSeries:
    """Per-bin argmin over theta_s with a three-point parabolic refinement.

    When the axis covers a full period the neighbours wrap around; otherwise
    minima on the axis ends are returned unrefined. Output is folded into
    [0, pi).
    """
    th, v = sg.theta_s_axis, sg.values
    na, nb = v.shape
    periodic = sg.is_periodic()
    idx = np.argmin(v, axis=0)
    cols = np.arange(nb)
    out = th[idx].copy()
    if periodic:
        step = th[1] - th[0]
        lo, hi = (idx - 1) % na, (idx + 1) % na
        ok = np.ones(nb, dtype=bool)
    else:
        lo, hi = np.clip(idx - 1, 0, na - 1), np.clip(idx + 1, 0, na - 1)
        ok = (idx > 0) & (idx < na - 1)
        step = None
    y0, y1, y2 = v[lo, cols], v[idx, cols], v[hi, cols]
    den = y0 - 2.0 * y1 + y2
    safe = ok & (den > 0)
    frac = np.zeros(nb)
    frac[safe] = 0.5 * (y0[safe] - y2[safe]) / den[safe]
    frac = np.clip(frac, -0.5, 0.5)
    if periodic:
        out = th[idx] + frac * step
    else:
        # local spacing differs on each side for non-uniform axes
        left = th[idx] - th[lo]
        right = th[hi] - th[idx]
        out = th[idx] + np.where(frac < 0, frac * left, frac * right)
    return SpectrumSeries(sg.grid, np.mod(out, math.pi), "shot-noise", "angle")


def angle_difference(a, b) -> np.ndarray:
    """Signed difference a - b folded into [-pi/2, pi/2)."""
    return np.mod(np.asarray(a) - np.asarray(b) + math.pi / 2, math.pi) - math.pi / 2


def db_normalize(spectrum: SpectrumSeries, shot_reference) -> SpectrumSeries:
    """10 log10(S / S_ref) per bin; ``shot_reference`` is a positive scalar or series."""
    ref = shot_reference.values if isinstance(shot_reference, SpectrumSeries) else np.asarray(shot_reference, float)
    if isinstance(shot_reference, SpectrumSeries) and not shot_reference.grid.same_as(spectrum.grid):
        raise GridMismatchError("shot reference grid differs from spectrum grid")
    if np.any(ref <= 0):
        raise ParameterError("shot_reference must be positive")
    vals = 10.0 * np.log10(np.asarray(spectrum.values, float) / ref)
    return SpectrumSeries(spectrum.grid, vals * np.ones(len(spectrum)), "shot-noise", "db", meta=dict(spectrum.meta))


def empirical_sql_bandwidth(trajectory: SpectrumSeries) -> Optional[float]:
    """Frequency span (Hz) between the 90 deg crossing and the next 45 deg offset.

    Returns None when the trajectory never crosses 90 deg or never reaches a
    45 deg offset above it.
    """
    f = trajectory.hz
    dev = angle_difference(trajectory.values, math.pi / 2)
    sgn = np.sign(dev)
    cross = np.flatnonzero((sgn[:-1] * sgn[1:] < 0) & (np.abs(dev[:-1] - dev[1:]) < math.pi / 2))
    if cross.size == 0:
        return None
    i = cross[np.argmin(np.abs(dev[cross]) + np.abs(dev[cross + 1]))]
    f90 = f[i] + (f[i + 1] - f[i]) * dev[i] / (dev[i] - dev[i + 1])
    above = np.flatnonzero((np.arange(f.size) > i) & (np.abs(dev) >= math.pi / 4))
    if above.size == 0:
        return None
    j = above[0]
    a0, a1 = abs(dev[j - 1]), abs(dev[j])
    f45 = f[j - 1] + (f[j] - f[j - 1]) * (math.pi / 4 - a0) / (a1 - a0) if a1 != a0 else f[j]
    return float(f45 - f90)


def band_average(series: SpectrumSeries, lo_hz: float, hi_hz: float) -> tuple[float, float]:
    """Mean over the band and its standard error (bins treated as independent)."""
    b = series.band(lo_hz, hi_hz)
    if len(b) == 0:
        raise ParameterError(f"no bins in [{lo_hz}, {hi_hz}] Hz")
    mean = float(np.mean(b.values.real))
    if b.variance is None:
        se = float(np.std(b.values.real, ddof=1) / math.sqrt(len(b))) if len(b) > 1 else float("nan")
    else:
        se = float(math.sqrt(np.sum(b.variance)) / len(b))
    return mean, se


# ------------------------------------------------------------------ exports


def export_spectrum_csv(series: SpectrumSeries, path) -> Path:
    cplx = np.iscomplexobj(series.values)

    def write(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["freq_hz", "value", "imag"] if cplx else ["freq_hz", "value"])
        for f, v in zip(series.hz, series.values):
            w.writerow([repr(float(f)), repr(float(v.real)), repr(float(v.imag))] if cplx
                       else [repr(float(f)), repr(float(v))])

    _atomic_write_text(Path(path), write)
    return Path(path)


def export_spectrogram_csv(sg: Spectrogram, path) -> Path:
    """Rows are frequencies; the header row lists the angles in degrees."""

    def write(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["freq_hz"] + [repr(math.degrees(t)) for t in sg.theta_s_axis])
        for k, f in enumerate(sg.grid.hz):
            w.writerow([repr(float(f))] + [repr(float(x)) for x in sg.values[:, k]])

    _atomic_write_text(Path(path), write)
    return Path(path)


def summary_dict(sg: Spectrogram, trajectory: SpectrumSeries, band_hz=(3e3, 60e3), stride: int = 1) -> dict:
    mask = sg.grid.band_mask(*band_hz)
    sub = np.where(mask[None, :], sg.values, np.inf)
    a, k = np.unravel_index(np.argmin(sub), sub.shape)
    traj = trajectory.restrict(mask)
    return {
        "min_db": float(sg.values[a, k]),
        "argmin_freq_hz": float(sg.grid.hz[k]),
        "argmin_theta_s_deg": float(math.degrees(sg.theta_s_axis[a])),
        "empirical_sql_bandwidth_hz": empirical_sql_bandwidth(trajectory),
        "trajectory": {
            "freq_hz": [float(x) for x in traj.hz[::stride]],
            "theta_s_deg": [float(math.degrees(x)) for x in traj.values[::stride]],
        },
    }


def write_json(obj, path) -> Path:
    _atomic_write_text(Path(path), lambda fh: json.dump(obj, fh, indent=2, sort_keys=True))
    return Path(path)


__all__ = [
    "WelchConfig", "WelchResult", "default_segment_length", "welch_psd", "welch_csd", "welch_pair",
    "coherence", "WienerFilterEstimate", "estimate_wiener", "apply_conditioning", "ConditioningResult",
    "condition_record", "Spectrogram", "build_spectrogram", "extract_angle_trajectory", "angle_difference",
    "db_normalize", "empirical_sql_bandwidth", "band_average", "export_spectrum_csv",
    "export_spectrogram_csv", "summary_dict", "write_json", "smooth3", "window_kernel",
]


def window_kernel(cfg: WelchConfig, sample_rate: float, oversample: int = 2, half_width_bins: int = 4):
    """Offsets (Hz) and weights of the Welch spectral window |W(f)|^2.

    The expected Welch estimate at f is sum_j weights[j] * S(f + offsets[j]).
    Weights are sampled on a grid ``oversample`` times finer than the bin
    spacing and renormalized to sum to one over +-``half_width_bins`` bins.
    """
    L = cfg.segment_length
    n = L * oversample
    spec = np.abs(np.fft.fft(cfg.window_array(), n)) ** 2
    j = np.arange(-half_width_bins * oversample, half_width_bins * oversample + 1)
    w = spec[j % n]
    return j * sample_rate / n, w / w.sum()
