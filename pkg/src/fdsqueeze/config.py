"""Versioned JSON run configuration (human units: Hz, degrees, seconds)."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, ValidationInfo, model_validator

from .params import DetectionConfig, EprParams, ModelParams, RATE_PARAMS, SpinParams, TWO_PI
from .presets import PRESET_NAMES, preset

SCHEMA_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SpinSection(_Strict):
    larmor_hz: float
    readout_hz: float = Field(ge=0)
    decay_hz: float = Field(0.0, ge=0)
    bb_readout_hz: float = Field(0.0, ge=0)
    bb_decay_hz: float = Field(0.0, ge=0)
    n_th: float = Field(0.0, ge=0)
    n_bb: Optional[float] = Field(None, ge=0)


class EprSection(_Strict):
    r: float = Field(ge=0)
    eta_s: float = Field(1.0, gt=0, le=1)
    eta_i_in: float = Field(1.0, gt=0, le=1)
    eta_i_out: float = Field(1.0, gt=0, le=1)


class DetectionSection(_Strict):
    theta_s_deg: list[float] = Field(default_factory=lambda: [0.0], min_length=1)
    delta_theta_i_deg: float = 0.0


class SynthesisSection(_Strict):
    sample_rate_hz: float = Field(256e3, gt=0)
    duration_s: float = Field(1.0, gt=0)
    seed: int = Field(0, ge=0, le=2**64 - 1)


class WelchSection(_Strict):
    segment_length: Optional[int] = None  # None: ~100 Hz resolution
    overlap: float = Field(0.5, ge=0, lt=1)
    window: Literal["hann", "rect"] = "hann"
    detrend: bool = False


class AnalysisSection(_Strict):
    mode: Literal["in-sample", "unbiased"] = "in-sample"
    smooth: bool = False
    zero_gain: bool = False
    band_hz: tuple[float, float] = (3e3, 60e3)


class FitSection(_Strict):
    free: dict[str, tuple[float, float]] = Field(default_factory=dict)
    initial: dict[str, float] = Field(default_factory=dict)
    observables: list[Literal["idler_psd", "signal_psd", "csd", "conditional"]] = Field(
        default_factory=lambda: ["idler_psd", "csd"]
    )
    band_hz: tuple[float, float] = (3e3, 60e3)
    restarts: int = Field(5, ge=0)
    max_evals: int = Field(20000, gt=0)
    seed: Optional[int] = None
    window_kernel: bool = True


class ImprovementScenario(_Strict):
    n_th_divisor: float = Field(1.0, ge=1)
    bb_readout_divisor: float = Field(1.0, ge=1)


class PredictSection(_Strict):
    f_min_hz: float = Field(1e3, gt=0)
    f_max_hz: float = Field(100e3, gt=0)
    n_points: int = Field(991, ge=2)
    improvements: list[ImprovementScenario] = Field(
        default_factory=lambda: [ImprovementScenario(n_th_divisor=3, bb_readout_divisor=6)]
    )

    @model_validator(mode="after")
    def _order(self):
        if self.f_max_hz <= self.f_min_hz:
            raise ValueError("predict.f_max_hz must exceed predict.f_min_hz")
        return self


class CavitySection(_Strict):
    finesse: float = Field(6000.0, gt=0)
    band_hz: Optional[tuple[float, float]] = None


class OutputSection(_Strict):
    dir: str = "out"
    format: Literal["csv", "json"] = "csv"


class RunConfig(_Strict):
    """Top-level run configuration.

    Either ``preset`` or both ``spin`` and ``epr`` must be given. Explicit
    sections override the preset field by field.
    """

    schema_version: Literal[1] = SCHEMA_VERSION
    preset: Optional[Literal[PRESET_NAMES]] = None  # type: ignore[valid-type]
    spin: Optional[SpinSection] = None
    epr: Optional[EprSection] = None
    detection: DetectionSection = Field(default_factory=DetectionSection)
    synthesis: SynthesisSection = Field(default_factory=SynthesisSection)
    welch: WelchSection = Field(default_factory=WelchSection)
    analysis: AnalysisSection = Field(default_factory=AnalysisSection)
    fit: FitSection = Field(default_factory=FitSection)
    predict: PredictSection = Field(default_factory=PredictSection)
    cavity: CavitySection = Field(default_factory=CavitySection)
    output: OutputSection = Field(default_factory=OutputSection)

    @model_validator(mode="after")
    def _need_model(self, info: ValidationInfo):
        if (info.context or {}).get("model_optional"):
            return self
        if self.preset is None:
            missing = [k for k in ("spin", "epr") if getattr(self, k) is None]
            if missing:
                raise ValueError(f"missing required key(s) {', '.join(missing)} (or give 'preset')")
        return self

    # ---- conversion to domain objects

    @property
    def has_model(self) -> bool:
        return self.preset is not None or (self.spin is not None and self.epr is not None)

    def model_params(self) -> ModelParams:
        if not self.has_model:
            raise ValueError("missing required key(s) spin, epr (or give 'preset')")
        base = preset(self.preset) if self.preset else None
        if self.spin is not None:
            s = self.spin
            spin = SpinParams.from_hz(s.larmor_hz, s.readout_hz, s.decay_hz, s.bb_readout_hz,
                                      s.bb_decay_hz, s.n_th, s.n_bb)
        else:
            spin = base.spin
        epr = EprParams(**self.epr.model_dump()) if self.epr is not None else base.epr
        det = DetectionConfig(0.0, math.radians(self.detection.delta_theta_i_deg))
        return ModelParams(spin, epr, det)

    def thetas(self) -> tuple:
        return tuple(math.radians(t) for t in self.detection.theta_s_deg)

    def fit_bounds(self) -> dict:
        """Free-parameter bounds converted to internal units."""
        out = {}
        for name, (lo, hi) in self.fit.free.items():
            out[name] = _to_internal(name, lo), _to_internal(name, hi)
        return out

    def fit_initial(self) -> dict:
        return {k: _to_internal(k, v) for k, v in self.fit.initial.items()}


def _to_internal(name, value):
    if name in RATE_PARAMS:
        return TWO_PI * value
    if name == "delta_theta_i":
        return math.radians(value)
    return value


def load_config(path=None, data: Optional[dict] = None, require_model: bool = True) -> RunConfig:
    """Parse and validate; raises ValidationError or ValueError with key names.

    ``require_model=False`` accepts configs without spin/epr, for commands
    that never evaluate the model.
    """
    if data is None:
        if path is None:
            raise ValueError("no configuration given")
        text = Path(path).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None
    return RunConfig.model_validate(data, context={"model_optional": not require_model})


def describe_validation_error(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"  {loc}: {e['msg']}")
    return "configuration error:\n" + "\n".join(lines)
