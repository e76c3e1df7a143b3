"""Value types for the hybrid EPR / spin-oscillator model.

All rates and frequencies are angular (rad/s). Human-facing code converts at the
boundary with :func:`hz` and :func:`rad_s`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Optional

import numpy as np

from .errors import ParameterError

TWO_PI = 2.0 * math.pi


def rad_s(f_hz):
    """Hz -> rad/s."""
    return TWO_PI * np.asarray(f_hz, dtype=float) if np.ndim(f_hz) else TWO_PI * float(f_hz)


def hz(omega):
    """rad/s -> Hz."""
    return np.asarray(omega, dtype=float) / TWO_PI if np.ndim(omega) else float(omega) / TWO_PI


def wrap_angle(angle: float) -> float:
    """Map an angle onto (-pi, pi]."""
    return math.pi - math.fmod(math.fmod(math.pi - angle, TWO_PI) + TWO_PI, TWO_PI)


def _check_finite(name, value, nonneg=False):
    if not math.isfinite(value):
        raise ParameterError(f"{name} must be finite, got {value!r}")
    if nonneg and value < 0:
        raise ParameterError(f"{name} must be >= 0, got {value!r}")


@dataclass(frozen=True)
class SpinParams:
    """Spin-oscillator parameters.

    ``larmor`` is signed: a negative value is the negative-effective-mass
    configuration. ``n_bb=None`` ties the broadband occupation to ``n_th``.
    """

    larmor: float
    readout: float
    decay: float = 0.0
    bb_readout: float = 0.0
    bb_decay: float = 0.0
    n_th: float = 0.0
    n_bb: Optional[float] = None

    def __post_init__(self):
        _check_finite("larmor", self.larmor)
        for name in ("readout", "decay", "bb_readout", "bb_decay", "n_th"):
            _check_finite(name, getattr(self, name), nonneg=True)
        if self.n_bb is not None:
            _check_finite("n_bb", self.n_bb, nonneg=True)
        if self.decay > 0 and self.bb_decay > 0 and self.bb_decay < self.decay:
            raise ParameterError(
                f"broadband decay ({self.bb_decay:g}) must not be slower than the "
                f"narrowband decay ({self.decay:g})"
            )

    @property
    def n_bb_value(self) -> float:
        return self.n_th if self.n_bb is None else self.n_bb

    @classmethod
    def from_hz(cls, larmor_hz, readout_hz, decay_hz=0.0, bb_readout_hz=0.0,
                bb_decay_hz=0.0, n_th=0.0, n_bb=None):
        return cls(
            larmor=TWO_PI * larmor_hz,
            readout=TWO_PI * readout_hz,
            decay=TWO_PI * decay_hz,
            bb_readout=TWO_PI * bb_readout_hz,
            bb_decay=TWO_PI * bb_decay_hz,
            n_th=float(n_th),
            n_bb=None if n_bb is None else float(n_bb),
        )

    def to_hz(self) -> dict:
        return {
            "larmor_hz": self.larmor / TWO_PI,
            "readout_hz": self.readout / TWO_PI,
            "decay_hz": self.decay / TWO_PI,
            "bb_readout_hz": self.bb_readout / TWO_PI,
            "bb_decay_hz": self.bb_decay / TWO_PI,
            "n_th": self.n_th,
            "n_bb": self.n_bb,
        }


@dataclass(frozen=True)
class EprParams:
    r: float
    eta_s: float = 1.0
    eta_i_in: float = 1.0
    eta_i_out: float = 1.0

    def __post_init__(self):
        _check_finite("r", self.r, nonneg=True)
        for name in ("eta_s", "eta_i_in", "eta_i_out"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ParameterError(f"{name} must lie in (0, 1], got {v!r}")

    @property
    def eta_i(self) -> float:
        return self.eta_i_in * self.eta_i_out


@dataclass(frozen=True)
class DetectionConfig:
    """Signal homodyne angle and idler quarter-wave-plate offset, radians in (-pi, pi]."""

    theta_s: float = 0.0
    delta_theta_i: float = 0.0

    def __post_init__(self):
        for name in ("theta_s", "delta_theta_i"):
            v = float(getattr(self, name))
            _check_finite(name, v)
            object.__setattr__(self, name, wrap_angle(v))

    @classmethod
    def from_degrees(cls, theta_s_deg=0.0, delta_theta_i_deg=0.0):
        return cls(math.radians(theta_s_deg), math.radians(delta_theta_i_deg))


@dataclass(frozen=True)
class CavityParams:
    detuning: float
    bandwidth: float
    finesse: float = 6000.0

    def __post_init__(self):
        _check_finite("detuning", self.detuning)
        _check_finite("bandwidth", self.bandwidth)
        _check_finite("finesse", self.finesse)
        if self.bandwidth <= 0:
            raise ParameterError(f"cavity bandwidth must be > 0, got {self.bandwidth!r}")
        if self.finesse <= 0:
            raise ParameterError(f"finesse must be > 0, got {self.finesse!r}")


@dataclass(frozen=True)
class ModelParams:
    """Everything the closed-form model needs, bundled for fitting and configs."""

    spin: SpinParams
    epr: EprParams
    det: DetectionConfig = field(default_factory=DetectionConfig)

    def with_theta(self, theta_s: float) -> "ModelParams":
        return ModelParams(self.spin, self.epr, DetectionConfig(theta_s, self.det.delta_theta_i))

    def as_flat(self) -> dict:
        out = {}
        for f in fields(self.spin):
            out[f.name] = getattr(self.spin, f.name)
        for f in fields(self.epr):
            out[f.name] = getattr(self.epr, f.name)
        out["delta_theta_i"] = self.det.delta_theta_i
        return out

    @classmethod
    def from_flat(cls, flat: dict, theta_s: float = 0.0) -> "ModelParams":
        spin = SpinParams(**{f.name: flat[f.name] for f in fields(SpinParams) if f.name in flat})
        epr = EprParams(**{f.name: flat[f.name] for f in fields(EprParams) if f.name in flat})
        return cls(spin, epr, DetectionConfig(theta_s, flat.get("delta_theta_i", 0.0)))


SPIN_FIELDS = tuple(f.name for f in fields(SpinParams))
EPR_FIELDS = tuple(f.name for f in fields(EprParams))
PARAM_NAMES = SPIN_FIELDS + EPR_FIELDS + ("delta_theta_i",)
# parameters carrying an angular-frequency dimension
RATE_PARAMS = frozenset({"larmor", "readout", "decay", "bb_readout", "bb_decay"})


@dataclass(frozen=True, eq=False)
class FrequencyGrid:
    """Strictly increasing, strictly positive angular frequencies."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float).ravel()
        if v.size == 0:
            raise ParameterError("frequency grid is empty")
        if not np.all(np.isfinite(v)):
            raise ParameterError("frequency grid contains non-finite values")
        if np.any(v <= 0):
            raise ParameterError("frequency grid must exclude DC and negative frequencies")
        if v.size > 1 and np.any(np.diff(v) <= 0):
            raise ParameterError("frequency grid must be strictly increasing")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size

    @property
    def hz(self) -> np.ndarray:
        return self.values / TWO_PI

    @classmethod
    def from_hz(cls, f_hz) -> "FrequencyGrid":
        return cls(TWO_PI * np.asarray(f_hz, dtype=float))

    @classmethod
    def linspace_hz(cls, start, stop, num) -> "FrequencyGrid":
        return cls.from_hz(np.linspace(start, stop, int(num)))

    def same_as(self, other: "FrequencyGrid", rtol=1e-12) -> bool:
        return len(self) == len(other) and np.allclose(self.values, other.values, rtol=rtol, atol=0)

    def band_mask(self, lo_hz, hi_hz) -> np.ndarray:
        f = self.hz
        tol = 1e-12 * max(abs(lo_hz), abs(hi_hz))  # absorb the rad/s round trip
        return (f >= lo_hz - tol) & (f <= hi_hz + tol)


NORMALIZATIONS = ("shot-noise", "symmetrized", "absolute")
KINDS = ("psd", "csd", "gain", "angle", "db")


@dataclass(frozen=True, eq=False)
class SpectrumSeries:
    """Values on a frequency grid.

    normalization:
      ``shot-noise``   relative to the vacuum level (vacuum = 1)
      ``symmetrized``  symmetrized quantum units (vacuum = 1/2)
      ``absolute``     one-sided density of the recorded samples, per Hz
    """

    grid: FrequencyGrid
    values: np.ndarray
    normalization: str = "shot-noise"
    kind: str = "psd"
    variance: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.normalization not in NORMALIZATIONS:
            raise ParameterError(f"unknown normalization {self.normalization!r}")
        if self.kind not in KINDS:
            raise ParameterError(f"unknown spectrum kind {self.kind!r}")
        vals = np.asarray(self.values)
        if vals.shape != (len(self.grid),):
            raise ParameterError(
                f"values length {vals.shape} does not match grid length {len(self.grid)}"
            )
        if self.kind == "psd":
            if np.iscomplexobj(vals):
                if np.any(vals.imag != 0):
                    raise ParameterError("PSD values must be real")
                vals = vals.real
            if np.any(vals < 0):
                raise ParameterError("PSD values must be non-negative")
        object.__setattr__(self, "values", vals)
        if self.variance is not None:
            var = np.asarray(self.variance, dtype=float)
            if var.shape != vals.shape:
                raise ParameterError("variance shape does not match values")
            object.__setattr__(self, "variance", var)

    def __len__(self):
        return len(self.grid)

    @property
    def hz(self) -> np.ndarray:
        return self.grid.hz

    def restrict(self, mask) -> "SpectrumSeries":
        mask = np.asarray(mask, dtype=bool)
        return SpectrumSeries(
            FrequencyGrid(self.grid.values[mask]),
            self.values[mask],
            self.normalization,
            self.kind,
            None if self.variance is None else self.variance[mask],
            dict(self.meta),
        )

    def band(self, lo_hz, hi_hz) -> "SpectrumSeries":
        return self.restrict(self.grid.band_mask(lo_hz, hi_hz))

    def in_shot_noise_units(self) -> "SpectrumSeries":
        if self.normalization == "shot-noise":
            return self
        if self.normalization == "symmetrized":
            var = None if self.variance is None else 4.0 * self.variance
            return SpectrumSeries(self.grid, 2.0 * self.values, "shot-noise", self.kind, var, dict(self.meta))
        raise ParameterError("absolute spectra need an explicit shot-noise reference")


def params_to_jsonable(obj: Any) -> Any:
    """Dataclass/ndarray tree -> plain JSON types."""
    if hasattr(obj, "__dataclass_fields__"):
        return {k: params_to_jsonable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): params_to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [params_to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj
