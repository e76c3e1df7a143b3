"""Calibrated parameter sets for the three oscillator configurations."""

from __future__ import annotations

import math

from .params import DetectionConfig, EprParams, ModelParams, SpinParams

# idler wave-plate offset used for the virtual-rigidity runs
VR_OFFSET_DEG = 42.0

_EPR = dict(eta_s=0.92, eta_i_in=0.89, eta_i_out=0.90)

_TABLE = {
    # name: (r, larmor_hz, readout_hz, decay_hz, n_th, bb_readout_hz, bb_decay_hz)
    "positive-10k": (1.42, 10.7e3, 9.3e3, 240.0, 3.5, 140e3, 190e3),
    "negative-10k": (1.42, -10.5e3, 9.5e3, 240.0, 3.4, 130e3, 190e3),
    "positive-54k": (1.31, 54e3, 8.5e3, 200.0, 4.0, 5e3, 190e3),
}

PRESET_NAMES = tuple(_TABLE)


def preset(name: str, delta_theta_i_deg: float = 0.0, theta_s_deg: float = 0.0) -> ModelParams:
    try:
        r, larmor, readout, decay, n_th, bb_readout, bb_decay = _TABLE[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}") from None
    spin = SpinParams.from_hz(larmor, readout, decay, bb_readout, bb_decay, n_th=n_th)
    return ModelParams(
        spin,
        EprParams(r=r, **_EPR),
        DetectionConfig(math.radians(theta_s_deg), math.radians(delta_theta_i_deg)),
    )


def vr_offset_for(spin: SpinParams, magnitude_deg: float = VR_OFFSET_DEG) -> float:
    """Signed wave-plate offset (rad) that lowers the effective Larmor frequency."""
    a = math.radians(abs(magnitude_deg))
    return a if spin.larmor >= 0 else -a
