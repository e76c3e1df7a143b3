"""Closed-form response functions and noise spectra.

Conventions
-----------
* Internal units are rad/s.
* ``symmetrized`` spectra put vacuum at 1/2; ``shot-noise`` spectra put it at 1.
* Complex responses follow the physics Fourier convention (``exp(+i w t)`` for
  the forward transform), so a causal oscillator response carries ``-i*decay*w``
  in its denominator.

Every public function takes value objects and returns a :class:`SpectrumSeries`
or a scalar; the ``_*`` helpers work on bare arrays and are reused by the
synthesizer and the fitter's inner loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.constants import c as SPEED_OF_LIGHT

from .errors import DomainError, SingularEvaluationError, ZeroSpectrumError
from .params import (
    CavityParams,
    DetectionConfig,
    EprParams,
    FrequencyGrid,
    SpectrumSeries,
    SpinParams,
)

# ---------------------------------------------------------------- array level


def _lorentz_response(num, larmor, decay, w, what):
    """num / (larmor^2 + decay^2/4 - w^2 - i*decay*w), rejecting exact poles."""
    w = np.asarray(w, dtype=float)
    if num == 0.0:
        return np.zeros(w.shape, dtype=complex)
    den = (larmor * larmor + 0.25 * decay * decay - w * w) - 1j * decay * w
    bad = np.flatnonzero(den == 0)
    if bad.size:
        i = int(bad[0])
        raise SingularEvaluationError(what, i, w.flat[i])
    return num / den


def _backaction(larmor, readout, decay, w):
    return _lorentz_response(readout * larmor, larmor, decay, w, "atomic backaction")


def _thermal(larmor, readout, decay, w):
    return _lorentz_response(math.sqrt(2.0 * decay * readout) * larmor, larmor, decay, w, "thermal coupling")


def _broadband(larmor, bb_readout, bb_decay, w):
    return _lorentz_response(
        math.sqrt(2.0 * bb_decay * bb_readout) * larmor, larmor, bb_decay, w, "broadband coupling"
    )


def _vr_radicand(larmor, readout, delta_theta_i):
    s2 = math.sin(2.0 * delta_theta_i)
    if readout == 0.0 or s2 == 0.0:
        return 1.0
    if larmor == 0.0:
        raise DomainError("virtual-rigidity radicand undefined at zero Larmor frequency", None)
    return 1.0 - readout / (2.0 * larmor) * s2


def _effective(larmor, readout, delta_theta_i):
    rad = _vr_radicand(larmor, readout, delta_theta_i)
    if rad <= 0.0:
        raise DomainError(
            f"virtual-rigidity radicand 1 - (readout/2 larmor) sin(2 dtheta) = {rad:.6g} is not positive",
            rad,
        )
    root = math.sqrt(rad)
    cos2 = math.cos(delta_theta_i) ** 2
    return readout * cos2 / root, larmor * root


@dataclass(frozen=True)
class _Terms:
    """Per-bin ingredients shared by idler, cross and conditional spectra."""

    k_eff: np.ndarray
    g_vr: np.ndarray
    lam_in: np.ndarray
    lam_out: np.ndarray
    s_th: np.ndarray
    s_bb: np.ndarray

    @property
    def noise_sum(self):
        return self.lam_in + self.lam_out + self.s_th + self.s_bb


def _terms(spin: SpinParams, epr: EprParams, delta_theta_i: float, w) -> _Terms:
    w = np.asarray(w, dtype=float)
    s2 = math.sin(2.0 * delta_theta_i)
    cd = math.cos(delta_theta_i)
    k = _backaction(spin.larmor, spin.readout, spin.decay, w)
    g_vr = 1.0 - 0.5 * s2 * k
    if s2 == 0.0:
        k_eff = k * (cd * cd)
    else:
        ge, le = _effective(spin.larmor, spin.readout, delta_theta_i)
        k_eff = _backaction(le, ge, spin.decay, w)
    k_eff2 = (k_eff * np.conj(k_eff)).real
    g2 = (g_vr * np.conj(g_vr)).real
    kth = _thermal(spin.larmor, spin.readout, spin.decay, w)
    kbb = _broadband(spin.larmor, spin.bb_readout, spin.bb_decay, w)
    lam_in = 0.5 * (1.0 - epr.eta_i_in) * (1.0 + k_eff2)
    lam_out = (1.0 - epr.eta_i_out) / (2.0 * epr.eta_i_out * g2)
    s_th = np.abs(kth) ** 2 * (cd * cd) / g2 * (0.5 + spin.n_th)
    s_bb = np.abs(kbb) ** 2 * (cd * cd) / g2 * (0.5 + spin.n_bb_value)
    return _Terms(k_eff, g_vr, lam_in, lam_out, s_th, s_bb)


def _conditional(spin, epr, det, w, terms=None):
    t = _terms(spin, epr, det.delta_theta_i, w) if terms is None else terms
    c2, s2 = math.cosh(2.0 * epr.r), math.sinh(2.0 * epr.r)
    ct, st = math.cos(det.theta_s), math.sin(det.theta_s)
    k2 = (t.k_eff * np.conj(t.k_eff)).real
    corr = np.abs(ct - st * t.k_eff) ** 2
    den = 1.0 + k2 + 2.0 * t.noise_sum / (epr.eta_i_in * c2)
    return 1.0 - epr.eta_s + epr.eta_s / c2 * (c2 * c2 - s2 * s2 * corr / den)


def _replacement_factor(k):
    k2 = (k * np.conj(k)).real
    a = 1.0 + k2
    inner = 1.0 - 4.0 * k.imag ** 2 / (a * a)
    return 0.5 * a * (1.0 + np.sqrt(np.clip(inner, 0.0, None)))


def _angle(k):
    phi = 0.5 * np.arctan2(-2.0 * k.real, 1.0 - (k * np.conj(k)).real)
    return np.mod(phi, math.pi)


def _idler(spin, epr, det, w, terms=None):
    t = _terms(spin, epr, det.delta_theta_i, w) if terms is None else terms
    c2 = math.cosh(2.0 * epr.r)
    k2 = (t.k_eff * np.conj(t.k_eff)).real
    g2 = (t.g_vr * np.conj(t.g_vr)).real
    return epr.eta_i_out * g2 * (c2 * epr.eta_i_in * (1.0 + k2) / 2.0 + t.noise_sum)


def _cross(spin, epr, det, w, terms=None):
    t = _terms(spin, epr, det.delta_theta_i, w) if terms is None else terms
    amp = -math.sqrt(epr.eta_s * epr.eta_i_out * epr.eta_i_in) * math.sinh(2.0 * epr.r) / 2.0
    ct, st = math.cos(det.theta_s), math.sin(det.theta_s)
    return amp * np.conj(t.g_vr) * (ct - st * np.conj(t.k_eff))


def _signal(epr):
    return 0.5 * epr.eta_s * math.cosh(2.0 * epr.r) + 0.5 * (1.0 - epr.eta_s)


def _phi_f(detuning, bandwidth, w):
    w = np.asarray(w, dtype=float)
    num = 2.0 * detuning * bandwidth
    den = bandwidth * bandwidth - detuning * detuning + w * w
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.arctan(num / den)
    zero = den == 0
    if np.any(zero):
        out = np.where(zero, math.copysign(math.pi / 2, num) if num else 0.0, out)
    return out


# ---------------------------------------------------------------- public API


def _series(grid, values, kind, normalization="shot-noise", **meta):
    return SpectrumSeries(grid, values, normalization=normalization, kind=kind, meta=meta)


def atomic_backaction(spin: SpinParams, grid: FrequencyGrid) -> SpectrumSeries:
    """Complex backaction coefficient K_a(w)."""
    return _series(grid, _backaction(spin.larmor, spin.readout, spin.decay, grid.values), "gain")


def thermal_coupling(spin: SpinParams, grid: FrequencyGrid) -> SpectrumSeries:
    return _series(grid, _thermal(spin.larmor, spin.readout, spin.decay, grid.values), "gain")


def broadband_coupling(spin: SpinParams, grid: FrequencyGrid) -> SpectrumSeries:
    return _series(grid, _broadband(spin.larmor, spin.bb_readout, spin.bb_decay, grid.values), "gain")


def vr_effective_params(spin: SpinParams, det: DetectionConfig) -> tuple[float, float]:
    """(effective readout rate, effective signed Larmor frequency) in rad/s.

    Raises DomainError (with ``.value`` set to the radicand) when the
    wave-plate offset pushes the radicand to zero or below.
    """
    return _effective(spin.larmor, spin.readout, det.delta_theta_i)


def vr_gain(spin: SpinParams, det: DetectionConfig, grid: FrequencyGrid) -> SpectrumSeries:
    k = _backaction(spin.larmor, spin.readout, spin.decay, grid.values)
    return _series(grid, 1.0 - 0.5 * math.sin(2.0 * det.delta_theta_i) * k, "gain")


def effective_backaction(spin: SpinParams, det: DetectionConfig, grid: FrequencyGrid) -> SpectrumSeries:
    """K_a evaluated at the effective (readout, Larmor) pair."""
    ge, le = _effective(spin.larmor, spin.readout, det.delta_theta_i)
    return _series(grid, _backaction(le, ge, spin.decay, grid.values), "gain")


@dataclass(frozen=True)
class NoiseContributions:
    lambda_in: SpectrumSeries
    lambda_out: SpectrumSeries
    thermal: SpectrumSeries
    broadband: SpectrumSeries

    def total(self) -> np.ndarray:
        return self.lambda_in.values + self.lambda_out.values + self.thermal.values + self.broadband.values


def noise_contributions(
    spin: SpinParams, epr: EprParams, det: DetectionConfig, grid: FrequencyGrid
) -> NoiseContributions:
    """The four added-noise terms, in symmetrized units (vacuum = 1/2)."""
    t = _terms(spin, epr, det.delta_theta_i, grid.values)
    mk = lambda v, name: _series(grid, v, "psd", "symmetrized", term=name)  # noqa: E731
    return NoiseContributions(
        mk(t.lam_in, "lambda_in"),
        mk(t.lam_out, "lambda_out"),
        mk(t.s_th, "thermal"),
        mk(t.s_bb, "broadband"),
    )


def conditional_spectrum(
    spin: SpinParams, epr: EprParams, det: DetectionConfig, grid: FrequencyGrid
) -> SpectrumSeries:
    """Optimally conditioned signal noise in shot-noise units."""
    return _series(grid, _conditional(spin, epr, det, grid.values), "psd", theta_s=det.theta_s)


def optimal_conditional_spectrum(
    spin: SpinParams, epr: EprParams, det: DetectionConfig, grid: FrequencyGrid
) -> SpectrumSeries:
    """Conditional spectrum with the signal angle set to its per-bin optimum."""
    t = _terms(spin, epr, det.delta_theta_i, grid.values)
    c2, s2 = math.cosh(2.0 * epr.r), math.sinh(2.0 * epr.r)
    k2 = (t.k_eff * np.conj(t.k_eff)).real
    den = 1.0 + k2 + 2.0 * t.noise_sum / (epr.eta_i_in * c2)
    vals = 1.0 - epr.eta_s + epr.eta_s / c2 * (c2 * c2 - s2 * s2 * _replacement_factor(t.k_eff) / den)
    return _series(grid, vals, "psd", theta_s="optimal")


def squeezing_angle(
    spin: SpinParams, det: DetectionConfig, grid: FrequencyGrid, unwrap: bool = False
) -> SpectrumSeries:
    """Signal angle minimizing the conditional noise, folded into [0, pi).

    A bin where the effective backaction vanishes gets angle 0. With
    ``unwrap=True`` the curve is made continuous in frequency (period pi) and
    may leave [0, pi).
    """
    ge, le = _effective(spin.larmor, spin.readout, det.delta_theta_i)
    phi = _angle(_backaction(le, ge, spin.decay, grid.values))
    if unwrap:
        phi = np.unwrap(phi, period=math.pi)
    return _series(grid, phi, "angle")


def sql_bandwidth(spin: SpinParams, det: DetectionConfig) -> float:
    """SQL bandwidth in rad/s."""
    ge, le = _effective(spin.larmor, spin.readout, det.delta_theta_i)
    if ge == 0.0:
        return 0.0
    if le == 0.0:
        raise DomainError("SQL bandwidth needs a nonzero effective Larmor frequency", le)
    a = abs(le)
    return a * (math.sqrt(1.0 + ge / a) - 1.0)


def idler_spectrum(
    spin: SpinParams, epr: EprParams, det: DetectionConfig, grid: FrequencyGrid
) -> SpectrumSeries:
    """Detected idler quadrature spectrum, symmetrized units."""
    return _series(grid, _idler(spin, epr, det, grid.values), "psd", "symmetrized")


def cross_spectrum(
    spin: SpinParams, epr: EprParams, det: DetectionConfig, grid: FrequencyGrid
) -> SpectrumSeries:
    """Signal/idler cross spectrum S_{q_s,Q_i}, symmetrized units."""
    return _series(grid, _cross(spin, epr, det, grid.values), "csd", "symmetrized", theta_s=det.theta_s)


def signal_spectrum(epr: EprParams, grid: FrequencyGrid) -> SpectrumSeries:
    return _series(grid, np.full(len(grid), _signal(epr)), "psd", "symmetrized")


def analytical_wiener_gain(
    spin: SpinParams, epr: EprParams, det: DetectionConfig, grid: FrequencyGrid
) -> SpectrumSeries:
    """g = -S_{q_s,Q_i} / S_{Q_i}."""
    t = _terms(spin, epr, det.delta_theta_i, grid.values)
    s_i = _idler(spin, epr, det, grid.values, t)
    zero = np.flatnonzero(s_i == 0)
    if zero.size:
        i = int(zero[0])
        raise ZeroSpectrumError("idler spectrum", i, grid.values[i])
    return _series(grid, -_cross(spin, epr, det, grid.values, t) / s_i, "gain", theta_s=det.theta_s)


def cooperativity(spin: SpinParams) -> float:
    if spin.decay <= 0.0:
        raise DomainError("cooperativity needs a positive decay rate", spin.decay)
    return spin.readout / (spin.decay * (1.0 + 2.0 * spin.n_th))


def filter_cavity_phase(cav: CavityParams, grid: FrequencyGrid) -> SpectrumSeries:
    """Quadrature rotation of a detuned filter cavity, principal arctan branch."""
    return _series(grid, _phi_f(cav.detuning, cav.bandwidth, grid.values), "angle")


def equivalent_length(cav: CavityParams) -> float:
    """Cavity length in metres for the given linewidth (rad/s) and finesse."""
    return SPEED_OF_LIGHT / (2.0 * cav.bandwidth * cav.finesse)


def duan_simon_level(epr: EprParams) -> float:
    """(Var[x_s - x_i] + Var[p_s + p_i]) relative to the separability bound.

    Loss on each arm mixes in vacuum; the idler arm sees the combined
    efficiency eta_i_in * eta_i_out. Values below 1 certify entanglement.
    """
    c2, s2 = math.cosh(2.0 * epr.r), math.sinh(2.0 * epr.r)
    es, ei = epr.eta_s, epr.eta_i
    return 1.0 + 0.5 * (es + ei) * (c2 - 1.0) - math.sqrt(es * ei) * s2


def to_db(x):
    return 10.0 * np.log10(x)


__all__ = [
    "atomic_backaction",
    "thermal_coupling",
    "broadband_coupling",
    "vr_effective_params",
    "vr_gain",
    "effective_backaction",
    "NoiseContributions",
    "noise_contributions",
    "conditional_spectrum",
    "optimal_conditional_spectrum",
    "squeezing_angle",
    "sql_bandwidth",
    "idler_spectrum",
    "cross_spectrum",
    "signal_spectrum",
    "analytical_wiener_gain",
    "cooperativity",
    "filter_cavity_phase",
    "equivalent_length",
    "duan_simon_level",
    "to_db",
]
