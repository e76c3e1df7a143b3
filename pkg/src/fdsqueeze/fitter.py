"""Chi-squared parameter recovery and filter-cavity equivalence fits.

The minimizer is a bounded Nelder-Mead simplex working in unit-box
coordinates (each free parameter mapped linearly onto [0, 1]), so fits are
insensitive to the units the bounds are written in.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .errors import DegenerateFitError, ParameterError
from .estimator import angle_difference
from .params import (
    PARAM_NAMES,
    RATE_PARAMS,
    TWO_PI,
    CavityParams,
    DetectionConfig,
    FrequencyGrid,
    ModelParams,
    SpectrumSeries,
    params_to_jsonable,
)
from .spectral_model import (
    _conditional,
    _cross,
    _idler,
    _phi_f,
    _signal,
    _terms,
    equivalent_length,
    optimal_conditional_spectrum,
)

OBSERVABLES = ("idler_psd", "signal_psd", "csd", "conditional")
DEFAULT_BAND_HZ = (3e3, 60e3)
REL_TOL = 1e-9
DIAMETER_TOL = 1e-12


# ------------------------------------------------------------------ problem


@dataclass(frozen=True)
class Observation:
    """A measured spectrum in shot-noise units and what it observes.

    ``kernel`` is an optional (offsets_hz, weights) pair describing the
    spectral window the estimate was smeared with; the model is convolved
    with it before comparison.
    """

    kind: str
    series: SpectrumSeries
    theta_s: float = 0.0
    kernel: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in OBSERVABLES:
            raise ParameterError(f"observable must be one of {OBSERVABLES}, got {self.kind!r}")
        if self.series.normalization != "shot-noise":
            object.__setattr__(self, "series", self.series.in_shot_noise_units())


@dataclass(frozen=True)
class FitProblem:
    observations: tuple
    base: ModelParams
    free: Mapping[str, tuple]  # name -> (lo, hi), physical units (rad/s for rates)
    band_hz: tuple = DEFAULT_BAND_HZ
    initial: Optional[Mapping[str, float]] = None
    seed: int = 0
    restarts: int = 5
    max_evals: int = 20000
    relative_variance: float = 1e-2  # used only where an observation lacks variance

    def __post_init__(self):
        obs = tuple(self.observations)
        if not obs:
            raise ParameterError("a fit needs at least one observation")
        object.__setattr__(self, "observations", obs)
        for name, (lo, hi) in self.free.items():
            if name not in PARAM_NAMES:
                raise ParameterError(f"unknown parameter {name!r}; known: {', '.join(PARAM_NAMES)}")
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ParameterError(f"bounds for {name} must be finite with lo < hi, got ({lo}, {hi})")
        x0 = self.start_values()
        for name, (lo, hi) in self.free.items():
            if not (lo <= x0[name] <= hi):
                raise ParameterError(f"initial {name} = {x0[name]:g} outside bounds [{lo:g}, {hi:g}]")
        lo_hz, hi_hz = self.band_hz
        for o in obs:
            if not np.any(o.series.grid.band_mask(lo_hz, hi_hz)):
                raise ParameterError(f"band {self.band_hz} Hz holds no bins of the {o.kind} observation")

    @property
    def free_names(self) -> tuple:
        return tuple(self.free)

    def start_values(self) -> dict:
        flat = self.base.as_flat()
        out = {}
        for name in self.free:
            if self.initial and name in self.initial:
                out[name] = float(self.initial[name])
            else:
                v = flat[name]
                out[name] = float(v if v is not None else flat["n_th"])
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(params_to_jsonable(
            {"base": self.base, "free": dict(self.free), "band": self.band_hz, "seed": self.seed}
        ), sort_keys=True).encode())
        for o in self.observations:
            h.update(o.kind.encode())
            h.update(np.ascontiguousarray(o.series.grid.values).tobytes())
            h.update(np.ascontiguousarray(o.series.values).tobytes())
        return h.hexdigest()


@dataclass
class FitResult:
    estimates: dict
    chi2: float
    dof: int
    per_param_uncertainty: dict
    converged: bool
    evaluations: int
    free: tuple = ()
    restarts: list = field(default_factory=list)
    input_digest: str = ""
    notes: list = field(default_factory=list)
    params: Optional[ModelParams] = None

    def __post_init__(self):
        if self.chi2 < 0:
            raise ParameterError("chi2 must be non-negative")

    @property
    def reduced_chi2(self) -> float:
        return self.chi2 / self.dof if self.dof > 0 else float("nan")

    def estimates_hz(self) -> dict:
        return {k: (v / TWO_PI if k in RATE_PARAMS else v) for k, v in self.estimates.items()}

    def to_dict(self) -> dict:
        conv = lambda d: {  # noqa: E731
            (k + "_hz" if k in RATE_PARAMS else k): (v / TWO_PI if k in RATE_PARAMS else v) for k, v in d.items()
        }
        return {
            "estimates": conv(self.estimates),
            "uncertainties": conv(self.per_param_uncertainty),
            "chi2": self.chi2,
            "dof": self.dof,
            "reduced_chi2": self.reduced_chi2,
            "converged": self.converged,
            "evaluations": self.evaluations,
            "free": list(self.free),
            "restarts": self.restarts,
            "input_digest": self.input_digest,
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(_json_safe(self.to_dict()), indent=2, sort_keys=True)


def _json_safe(o):
    if isinstance(o, dict):
        return {k: _json_safe(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_json_safe(v) for v in o]
    if isinstance(o, float) and not math.isfinite(o):
        return None
    return o


# ------------------------------------------------------------------ model


def _eval_model(kind, params: ModelParams, theta_s, f_hz):
    """Model in shot-noise units at arbitrary (possibly non-positive) frequencies."""
    f = np.asarray(f_hz, dtype=float)
    w = TWO_PI * np.abs(f)
    det = DetectionConfig(theta_s, params.det.delta_theta_i)
    if kind == "signal_psd":
        return np.full(f.shape, 2.0 * _signal(params.epr))
    t = _terms(params.spin, params.epr, det.delta_theta_i, w)
    if kind == "idler_psd":
        return 2.0 * _idler(params.spin, params.epr, det, w, t)
    if kind == "conditional":
        return _conditional(params.spin, params.epr, det, w, t)
    c = 2.0 * _cross(params.spin, params.epr, det, w, t)
    return np.where(f < 0, np.conj(c), c)


class _Objective:
    """Weighted residual vector for a FitProblem, with evaluation counting."""

    def __init__(self, problem: FitProblem):
        self.problem = problem
        self.names = problem.free_names
        self.lo = np.array([problem.free[n][0] for n in self.names], float)
        self.hi = np.array([problem.free[n][1] for n in self.names], float)
        self.flat = problem.base.as_flat()
        self.evals = 0
        self.blocks = []
        self.notes = []
        lo_hz, hi_hz = problem.band_hz
        for o in problem.observations:
            s = o.series.band(lo_hz, hi_hz)
            f = s.hz
            if o.kernel is not None:
                off, wts = o.kernel
                f_eval = f[:, None] + np.asarray(off)[None, :]
                wts = np.asarray(wts, float)
            else:
                f_eval, wts = f[:, None], np.ones(1)
            if s.variance is not None:
                var = np.asarray(s.variance, float)
            else:
                var = (problem.relative_variance * np.abs(s.values)) ** 2
                self.notes.append(
                    f"{o.kind}: no per-bin variance supplied; assumed relative variance "
                    f"{problem.relative_variance:g}^2"
                )
            if np.any(var <= 0):
                raise DegenerateFitError(f"{o.kind}: non-positive variance in fit band")
            if o.kind == "csd":
                var = var / 2.0  # real and imaginary parts each carry half
            self.blocks.append((o.kind, o.theta_s, f_eval, wts, s.values, 1.0 / np.sqrt(var)))
        self.n_terms = sum(b[4].size * (2 if b[0] == "csd" else 1) for b in self.blocks)

    def to_physical(self, u):
        return self.lo + np.asarray(u) * (self.hi - self.lo)

    def to_unit(self, x):
        return (np.asarray(x) - self.lo) / (self.hi - self.lo)

    def params_at(self, x) -> ModelParams:
        flat = dict(self.flat)
        for n, v in zip(self.names, x):
            flat[n] = float(v)
        return ModelParams.from_flat(flat)

    def residuals(self, x) -> np.ndarray:
        self.evals += 1
        p = self.params_at(x)
        out = []
        for kind, theta, f_eval, wts, obs, iw in self.blocks:
            m = _eval_model(kind, p, theta, f_eval) @ wts
            r = (obs - m) * iw
            if kind == "csd":
                out.append(r.real)
                out.append(r.imag)
            else:
                out.append(np.real(r))
        return np.concatenate(out)

    def chi2(self, x) -> float:
        try:
            r = self.residuals(x)
        except (ParameterError, ArithmeticError, ValueError):
            return math.inf
        v = float(np.dot(r, r))
        return v if math.isfinite(v) else math.inf


# ------------------------------------------------------------------ simplex


@dataclass
class _RunResult:
    u: np.ndarray
    f: float
    converged: bool
    evals: int


def nelder_mead_box(func: Callable, u0, max_evals=20000, step=0.05, rel_tol=REL_TOL, diam_tol=DIAMETER_TOL):
    """Nelder-Mead on [0, 1]^d with trial points clipped into the box.

    Converged when one full cycle (d + 1 iterations) improves the best value
    by less than ``rel_tol`` (relative) while the simplex values agree to the
    same tolerance, or when the simplex collapses below ``diam_tol``.
    """
    u0 = np.clip(np.asarray(u0, float), 0.0, 1.0)
    d = u0.size
    pts = [u0]
    for i in range(d):
        e = u0.copy()
        e[i] = e[i] + step if e[i] + step <= 1.0 else e[i] - step
        pts.append(e)
    sim = np.array(pts)
    fv = np.array([func(p) for p in sim])
    evals = d + 1
    best_hist = [fv.min()]
    it = 0
    converged = False
    while evals < max_evals:
        order = np.argsort(fv, kind="stable")
        sim, fv = sim[order], fv[order]
        fb, fw = fv[0], fv[-1]
        diam = float(np.max(np.abs(sim[1:] - sim[0]))) if d else 0.0
        spread_ok = math.isfinite(fw) and (fw - fb) <= rel_tol * abs(fb)
        cycle_ok = len(best_hist) > d + 1 and (best_hist[-d - 2] - fb) <= rel_tol * abs(fb)
        if (spread_ok and cycle_ok) or diam < diam_tol or (fb == 0.0 and fw == 0.0):
            converged = True
            break
        it += 1
        cen = sim[:-1].mean(axis=0)
        xr = np.clip(cen + (cen - sim[-1]), 0, 1)
        fr = func(xr)
        evals += 1
        if fr < fv[0]:
            xe = np.clip(cen + 2.0 * (cen - sim[-1]), 0, 1)
            fe = func(xe)
            evals += 1
            sim[-1], fv[-1] = (xe, fe) if fe < fr else (xr, fr)
        elif fr < fv[-2]:
            sim[-1], fv[-1] = xr, fr
        else:
            if fr < fv[-1]:
                xc = np.clip(cen + 0.5 * (xr - cen), 0, 1)
            else:
                xc = np.clip(cen + 0.5 * (sim[-1] - cen), 0, 1)
            fc = func(xc)
            evals += 1
            if fc < min(fr, fv[-1]):
                sim[-1], fv[-1] = xc, fc
            else:
                for i in range(1, d + 1):
                    sim[i] = sim[0] + 0.5 * (sim[i] - sim[0])
                    fv[i] = func(sim[i])
                evals += d
        nb = float(fv.min())
        assert nb <= best_hist[-1], "best chi2 increased across a simplex step"
        best_hist.append(nb)
    i = int(np.argmin(fv))
    return _RunResult(sim[i].copy(), float(fv[i]), converged, evals)


# ------------------------------------------------------------------ fits


def _uncertainties(obj: _Objective, u_best) -> dict:
    """1-sigma errors from the Gauss-Newton curvature of chi2 at the optimum."""
    d = len(obj.names)
    if d == 0:
        return {}
    x_best = obj.to_physical(u_best)
    r0 = obj.residuals(x_best)
    J = np.empty((r0.size, d))
    for i in range(d):
        h = 1e-6
        up, dn = u_best.copy(), u_best.copy()
        up[i] += h
        dn[i] -= h
        J[:, i] = (obj.residuals(obj.to_physical(up)) - obj.residuals(obj.to_physical(dn))) / (2 * h)
    try:
        cov_u = np.linalg.inv(J.T @ J)
        sig = np.sqrt(np.clip(np.diag(cov_u), 0.0, None)) * (obj.hi - obj.lo)
    except np.linalg.LinAlgError:
        sig = np.full(d, math.nan)
    return {n: float(s) for n, s in zip(obj.names, sig)}


def fit_model(problem: FitProblem) -> FitResult:
    """Minimize chi2 over the free parameters of ``problem``.

    Restart policy: one run from the initial guess, then ``problem.restarts``
    runs from the best point so far jittered by N(0, 0.1) of each bound width.
    The best run is kept. Running out of evaluations yields
    ``converged=False`` rather than an exception.
    """
    obj = _Objective(problem)
    d = len(obj.names)
    dof = obj.n_terms - d
    if dof <= 0:
        raise ParameterError(f"degrees of freedom must be positive, got {dof}")
    x0 = problem.start_values()
    u0 = obj.to_unit([x0[n] for n in obj.names])
    if d == 0:
        r = obj.residuals([])
        return FitResult({}, float(np.dot(r, r)), dof, {}, True, obj.evals, (), [],
                         problem.digest(), obj.notes, problem.base)

    def f_unit(u):
        return obj.chi2(obj.to_physical(u))

    rng = np.random.Generator(np.random.PCG64(problem.seed))
    budget = problem.max_evals
    runs = []
    best = None
    for k in range(problem.restarts + 1):
        start = u0 if best is None else np.clip(best.u + rng.normal(0.0, 0.1, d), 0.0, 1.0)
        run = nelder_mead_box(f_unit, start, max_evals=budget)
        runs.append({"run": k, "chi2": run.f, "converged": run.converged, "evaluations": run.evals})
        if best is None or run.f < best.f:
            best = run
    x = obj.to_physical(best.u)
    est = {n: float(v) for n, v in zip(obj.names, x)}
    sig = _uncertainties(obj, best.u) if math.isfinite(best.f) else {n: math.nan for n in obj.names}
    at_bound = [n for n, u in zip(obj.names, best.u) if u <= 1e-9 or u >= 1 - 1e-9]
    notes = list(dict.fromkeys(obj.notes))
    if at_bound:
        notes.append("estimate at bound: " + ", ".join(at_bound))
    return FitResult(
        est, float(best.f) if math.isfinite(best.f) else math.inf, dof, sig, bool(best.converged),
        obj.evals, obj.names, runs, problem.digest(), notes, obj.params_at(x),
    )


def fit_cavity_equivalent(
    trajectory: SpectrumSeries,
    finesse: float = 6000.0,
    band_hz: Optional[tuple] = None,
    seed: int = 0,
) -> tuple[CavityParams, FitResult]:
    """Fit a detuned filter-cavity rotation to an angle trajectory.

    Residuals are folded modulo pi, so the trajectory may live on [0, pi)
    while the cavity phase uses the principal arctan branch. The detuning is
    signed and the linewidth positive.
    """
    tr = trajectory if band_hz is None else trajectory.band(*band_hz)
    if len(tr) < 3:
        raise DegenerateFitError("trajectory needs at least 3 bins")
    phi = np.asarray(tr.values, float)
    spread = np.ptp(np.unwrap(phi, period=math.pi))
    if spread < math.radians(1.0):
        raise DegenerateFitError(
            f"trajectory is flat (total rotation {math.degrees(spread):.3g} deg); cavity parameters are undetermined"
        )
    w = tr.grid.values
    wmax = float(w[-1])
    iw = 1.0 / np.sqrt(tr.variance) if tr.variance is not None else np.ones(len(tr))

    def chi2_of(det_, bw):
        r = angle_difference(phi, _phi_f(det_, bw, w)) * iw
        return float(np.dot(r, r))

    # coarse grid: signed detuning, log-spaced linewidth
    dets = np.linspace(-2 * wmax, 2 * wmax, 161)
    bws = np.geomspace(wmax * 1e-3, 2 * wmax, 121)
    best = min(((chi2_of(a, b), a, b) for a in dets for b in bws), key=lambda t: t[0])
    _, d0, b0 = best
    lo = np.array([d0 - 0.1 * wmax, max(b0 * 0.5, 1e-9)])
    hi = np.array([d0 + 0.1 * wmax, b0 * 2.0])

    def f_unit(u):
        x = lo + u * (hi - lo)
        return chi2_of(x[0], x[1])

    rng = np.random.Generator(np.random.PCG64(seed))
    run = nelder_mead_box(f_unit, np.array([0.5, 1.0 / 3.0]))
    total = run.evals + dets.size * bws.size
    for _ in range(5):
        cand = nelder_mead_box(f_unit, np.clip(run.u + rng.normal(0, 0.1, 2), 0, 1))
        total += cand.evals
        if cand.f < run.f:
            run = cand
    det_, bw = lo + run.u * (hi - lo)
    cav = CavityParams(float(det_), float(bw), float(finesse))
    length = equivalent_length(cav)
    res = FitResult(
        {"detuning": float(det_), "bandwidth": float(bw)},
        run.f,
        len(tr) - 2,
        {},
        run.converged,
        total,
        ("detuning", "bandwidth"),
        notes=([] if tr.variance is not None else ["uniform weights: trajectory carries no variance"])
        + [f"equivalent_length_m={length:.6g}"],
    )
    return cav, res


def project_improvement(
    base,
    grid: FrequencyGrid,
    n_th_divisor: float = 1.0,
    bb_readout_divisor: float = 1.0,
) -> SpectrumSeries:
    """Optimal-angle conditional spectrum after reducing n_th and the broadband readout.

    A broadband occupation tied to n_th (``n_bb=None``) follows the divided
    thermal occupation; an explicitly set n_bb is left unchanged.
    """
    if n_th_divisor < 1 or bb_readout_divisor < 1:
        raise ParameterError("improvement divisors must be >= 1")
    p = base.params if isinstance(base, FitResult) else base
    if p is None:
        raise ParameterError("fit result carries no parameter set")
    spin = p.spin
    spin = replace(
        spin,
        n_th=spin.n_th / n_th_divisor,
        bb_readout=spin.bb_readout / bb_readout_divisor,
    )
    out = optimal_conditional_spectrum(spin, p.epr, p.det, grid)
    out.meta.update(n_th_divisor=n_th_divisor, bb_readout_divisor=bb_readout_divisor)
    return out


def observations_from_welch(welch, theta_s: float, kinds: Sequence[str] = ("idler_psd", "csd"), kernel=None):
    """Wrap a WelchResult as fit observations."""
    table = {"idler_psd": welch.psd_idler, "signal_psd": welch.psd_signal, "csd": welch.csd}
    return tuple(Observation(k, table[k], theta_s, kernel) for k in kinds)


__all__ = [
    "Observation", "FitProblem", "FitResult", "fit_model", "fit_cavity_equivalent",
    "project_improvement", "nelder_mead_box", "observations_from_welch", "OBSERVABLES",
]
