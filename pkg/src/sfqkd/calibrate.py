"""Parameter extraction from filter scans, night measurements and coincidence
matrices.

Curve fits use a Nelder-Mead simplex in log-parameter space, so the
simplex-size stopping rule is a relative one and parameters stay positive.
Each fit runs from five deterministic starts derived from the data.
"""
from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq, minimize

from .model import (
    DomainError,
    LinkConditions,
    OperatingPoint,
    SystemConstants,
    accidental_rate,
    evaluate_point,
    noise_through_filter,
    secure_key_rate,
    window_efficiency,
)

CHANNELS = ("H", "V", "D", "A")

SIMPLEX_XATOL = 1e-8
SIMPLEX_MAXITER = 2000
START_FACTORS = ((1.0, 1.0), (0.7, 0.7), (1.4, 1.4), (0.7, 1.4), (1.4, 0.7))
DEFAULT_BOOTSTRAP = 200


class ScanKind(str, enum.Enum):
    NOISE = "NoiseRate"
    KEY = "KeyRate"
    SIGNAL = "SignalRate"


class DegenerateDataError(ValueError):
    """The scan cannot constrain the requested parameters."""


class EPolClampedWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ScanPoint:
    theta_sf: float  # urad
    value: float  # cps or bps
    kind: ScanKind = ScanKind.NOISE

    def __post_init__(self):
        object.__setattr__(self, "kind", ScanKind(self.kind))
        if not (self.theta_sf >= 0 and self.value >= 0):
            raise DomainError(f"scan point must be nonnegative: {self}")


@dataclass(frozen=True)
class CoincidenceMatrix:
    """Coincidence counts, rows = Alice channel, columns = Bob channel (H, V, D, A)."""

    counts: np.ndarray
    duration: float  # s

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.shape != (4, 4):
            raise DomainError("coincidence matrix must be 4x4")
        if np.any(counts < 0):
            raise DomainError("coincidence counts must be nonnegative")
        if not self.duration > 0:
            raise DomainError("duration must be positive")
        object.__setattr__(self, "counts", counts)

    @property
    def rates(self) -> np.ndarray:
        return self.counts / self.duration

    def right_wrong(self):
        """Sifted (right, wrong) counts; the source is anticorrelated in both bases."""
        c = self.counts
        right = c[0, 1] + c[1, 0] + c[2, 3] + c[3, 2]
        wrong = c[0, 0] + c[1, 1] + c[2, 2] + c[3, 3]
        return int(right), int(wrong)


@dataclass
class FitResult:
    params: dict
    residual_norm: float
    iterations: int
    converged: bool
    units: dict = field(default_factory=dict)
    uncertainties: dict = field(default_factory=dict)
    trace: list = field(default_factory=list, repr=False)
    message: str = ""

    def as_dict(self) -> dict:
        return {
            "params": dict(self.params),
            "units": dict(self.units),
            "uncertainties": dict(self.uncertainties),
            "residual_norm": self.residual_norm,
            "iterations": self.iterations,
            "converged": self.converged,
            "message": self.message,
        }


def _scan_arrays(points: Sequence[ScanPoint], kind: ScanKind | None = None):
    if kind is not None:
        bad = [p for p in points if p.kind is not kind]
        if bad:
            raise DomainError(f"expected {kind.value} points, got {bad[0].kind.value}")
    theta = np.array([p.theta_sf for p in points], dtype=float)
    value = np.array([p.value for p in points], dtype=float)
    return theta, value


def _simplex(objective: Callable, log_x0: np.ndarray):
    trace = []
    x0 = np.asarray(log_x0, dtype=float)
    initial = np.vstack([x0] + [x0 + 0.1 * e for e in np.eye(len(x0))])
    res = minimize(
        objective,
        x0,
        method="Nelder-Mead",
        callback=lambda intermediate_result: trace.append(float(intermediate_result.fun)),
        options={
            "xatol": SIMPLEX_XATOL,
            "fatol": np.inf,
            "maxiter": SIMPLEX_MAXITER,
            "maxfev": 10 * SIMPLEX_MAXITER,
            "initial_simplex": initial,
        },
    )
    return res, trace


def _multistart(objective: Callable, guess: np.ndarray, starts=START_FACTORS):
    """Run the simplex from each start; keep the lowest objective."""
    best = None
    for factors in starts:
        log_x0 = np.log(guess * np.asarray(factors[: len(guess)]))
        res, trace = _simplex(objective, log_x0)
        if best is None or res.fun < best[0].fun:
            best = (res, trace)
    return best


def _bootstrap(fitted, residuals, refit, n_boot, seed):
    """Residual bootstrap; each resample has its own seed so order does not matter."""
    if n_boot <= 0:
        return None
    children = np.random.SeedSequence(seed).spawn(n_boot)
    samples = []
    for child in children:
        rng = np.random.default_rng(child)
        resampled = fitted + rng.choice(residuals, size=residuals.size, replace=True)
        samples.append(refit(resampled))
    return np.std(np.array(samples), axis=0, ddof=1)


def _rms(residuals) -> float:
    return float(np.sqrt(np.mean(np.square(residuals))))


def fit_noise_scan(
    points: Sequence[ScanPoint],
    fix_gamma: float | None = None,
    n_boot: int = 0,
    seed: int = 0,
) -> FitResult:
    """Fit ``b0 * (1 - exp(-theta^2 / (2 gamma^2)))`` to a background-only scan.

    With ``fix_gamma`` only the amplitude is free and is solved exactly as a
    linear least-squares coefficient. An all-zero scan returns ``b0 = 0`` with
    ``gamma`` unidentified and ``converged=False``.
    """
    theta, value = _scan_arrays(points, ScanKind.NOISE)
    if theta.size == 0:
        raise DegenerateDataError("empty scan")
    units = {"b0": "cps", "gamma": "urad"}

    if fix_gamma is not None:
        if not fix_gamma > 0:
            raise DomainError("fixed gamma must be positive")
        if np.all(theta == 0):
            raise DegenerateDataError("all scan points at theta = 0")

        def solve(v):
            shape = noise_through_filter(theta, 1.0, fix_gamma)
            return float(np.dot(shape, v) / np.dot(shape, shape))

        b0 = solve(value)
        fitted = noise_through_filter(theta, b0, fix_gamma)
        unc = _bootstrap(fitted, value - fitted, lambda v: [solve(v)], n_boot, seed)
        return FitResult(
            params={"b0": b0, "gamma": float(fix_gamma)},
            residual_norm=_rms(value - fitted),
            iterations=1,
            converged=True,
            units=units,
            uncertainties={"b0": float(unc[0])} if unc is not None else {},
            message="gamma fixed",
        )

    if theta.size < 2 or np.ptp(theta) == 0:
        raise DegenerateDataError("noise scan needs at least two distinct theta values")
    if not np.any(value > 0):
        return FitResult(
            params={"b0": 0.0, "gamma": math.nan},
            residual_norm=0.0,
            iterations=0,
            converged=False,
            units=units,
            message="all values zero: gamma unidentifiable",
        )

    def objective_for(v):
        def objective(log_p):
            b0, gamma = np.exp(log_p)
            return float(np.mean((noise_through_filter(theta, b0, gamma) - v) ** 2))

        return objective

    b0_guess = float(value.max())
    above = theta[value >= 0.5 * b0_guess]
    gamma_guess = float(above.min()) if above.size and above.min() > 0 else float(np.median(theta[theta > 0]))
    res, trace = _multistart(objective_for(value), np.array([b0_guess, gamma_guess]))
    b0, gamma = np.exp(res.x)
    fitted = noise_through_filter(theta, b0, gamma)

    def refit(v):
        r, _ = _simplex(objective_for(v), res.x)
        return np.exp(r.x)

    unc = _bootstrap(fitted, value - fitted, refit, n_boot, seed)
    return FitResult(
        params={"b0": float(b0), "gamma": float(gamma)},
        residual_norm=_rms(value - fitted),
        iterations=int(res.nit),
        converged=bool(res.success),
        units=units,
        uncertainties=dict(zip(("b0", "gamma"), map(float, unc))) if unc is not None else {},
        trace=trace,
        message=str(res.message),
    )


def _key_rate_model(theta, b0, gamma, sys, op_template):
    def model(s0, delta):
        link = LinkConditions(s0=s0, delta=delta, b0=b0, gamma=gamma)
        op = OperatingPoint(theta, op_template.tau, op_template.fibre_model)
        return evaluate_point(link, sys, op).key_rate

    return model


def fit_key_rate_scan(
    points: Sequence[ScanPoint],
    b0: float,
    sys: SystemConstants,
    op_template: OperatingPoint,
    gamma: float = 36.8,
    n_boot: int = 0,
    seed: int = 0,
) -> FitResult:
    """Fit signal amplitude ``s0`` and spot size ``delta`` to a key-rate scan.

    ``b0`` comes from a separate background-only scan and stays fixed, as
    do ``gamma`` and the system constants. Only ``op_template.tau`` and
    ``op_template.fibre_model`` are used.
    """
    if b0 < 0:
        raise DomainError("b0 must be nonnegative")
    theta, value = _scan_arrays(points, ScanKind.KEY)
    if theta.size < 2 or np.ptp(theta) == 0:
        raise DegenerateDataError("key-rate scan needs at least two distinct theta values")
    units = {"s0": "cps", "delta": "urad"}
    if not np.any(value > 0):
        return FitResult(
            params={"s0": 0.0, "delta": math.nan},
            residual_norm=0.0,
            iterations=0,
            converged=False,
            units=units,
            message="no positive key rate in scan",
        )
    model = _key_rate_model(theta, b0, gamma, sys, op_template)

    def objective_for(v):
        def objective(log_p):
            s0, delta = np.exp(log_p)
            return float(np.mean((model(s0, delta) - v) ** 2))

        return objective

    peak = float(value.max())
    delta_guess = float(theta[np.argmax(value >= 0.58 * peak)])
    delta_guess = delta_guess if delta_guess > 0 else float(np.median(theta[theta > 0]))
    theta_peak = float(theta[np.argmax(value)])

    def rate_at_peak(log_s0):
        link = LinkConditions(math.exp(log_s0), delta_guess, b0, gamma)
        op = OperatingPoint(theta_peak, op_template.tau, op_template.fibre_model)
        return evaluate_point(link, sys, op).key_rate_raw - peak

    try:
        s0_guess = math.exp(brentq(rate_at_peak, math.log(1.0), math.log(1e9), xtol=1e-3))
    except ValueError:
        eta_c = float(window_efficiency(op_template.tau, sys.jitter_fwhm))
        s0_guess = 4.0 * peak / (sys.eta_a * eta_c)

    res, trace = _multistart(objective_for(value), np.array([s0_guess, delta_guess]))
    s0, delta = np.exp(res.x)
    fitted = model(s0, delta)

    def refit(v):
        r, _ = _simplex(objective_for(v), res.x)
        return np.exp(r.x)

    unc = _bootstrap(fitted, value - fitted, refit, n_boot, seed)
    return FitResult(
        params={"s0": float(s0), "delta": float(delta)},
        residual_norm=_rms(value - fitted),
        iterations=int(res.nit),
        converged=bool(res.success),
        units=units,
        uncertainties=dict(zip(("s0", "delta"), map(float, unc))) if unc is not None else {},
        trace=trace,
        message=str(res.message),
    )


def estimate_eta_a(c_measured, s_a, s_b, sys: SystemConstants, tau=800.0) -> float:
    """Alice-channel efficiency from a night measurement (background assumed zero)."""
    c_acc = float(accidental_rate(s_a, s_b, tau))
    if c_measured <= c_acc:
        raise DomainError("measured coincidences do not exceed the accidental floor")
    if s_b <= sys.dark_bob:
        raise DomainError("Bob singles do not exceed the dark count rate")
    eta_c = float(window_efficiency(tau, sys.jitter_fwhm))
    return (c_measured - c_acc) / (eta_c * (s_b - sys.dark_bob))


def estimate_e_pol(m: CoincidenceMatrix, c_acc: float, subtract_from_sift: bool = False) -> float:
    """Baseline polarization error from a coincidence matrix.

    ``c_acc`` is the total accidental rate (cps); a quarter of it lands in
    the wrong sifted channels. With ``subtract_from_sift`` the sifted
    accidentals (half of ``c_acc``) are also removed from the denominator,
    which removes the dilution by accidentals. Values outside [0, 0.5] are
    clamped with an :class:`EPolClampedWarning`.
    """
    right, wrong = m.right_wrong()
    sift = (right + wrong) / m.duration
    if sift <= 0:
        raise DomainError("no sifted coincidences")
    denom = sift - 0.5 * c_acc if subtract_from_sift else sift
    if denom <= 0:
        raise DomainError("accidentals exceed the sifted coincidences")
    raw = (wrong / m.duration - 0.25 * c_acc) / denom
    clamped = min(max(raw, 0.0), 0.5)
    if clamped != raw:
        warnings.warn(f"E_pol estimate {raw:.4g} clamped to {clamped}", EPolClampedWarning)
    return clamped


def synthetic_noise_scan(
    theta_values,
    b0: float,
    gamma: float,
    *,
    duration: float | None = None,
    scatter: float | None = None,
    rng: np.random.Generator | None = None,
) -> list[ScanPoint]:
    """Background-only scan from the fibre-limited noise model.

    ``duration`` adds Poisson counting noise for that acquisition time;
    ``scatter`` adds multiplicative Gaussian noise of that relative size.
    """
    theta = np.asarray(theta_values, dtype=float)
    value = noise_through_filter(theta, b0, gamma)
    if duration is not None:
        value = rng.poisson(value * duration) / duration
    if scatter is not None:
        value = value * (1.0 + scatter * rng.standard_normal(theta.size))
    return [ScanPoint(t, max(float(v), 0.0), ScanKind.NOISE) for t, v in zip(theta, value)]


def synthetic_key_rate_scan(
    theta_values,
    link: LinkConditions,
    sys: SystemConstants,
    op_template: OperatingPoint,
    *,
    duration: float | None = None,
    rng: np.random.Generator | None = None,
) -> list[ScanPoint]:
    """Key-rate scan from the analytic model, optionally with counting noise.

    With ``duration`` set, each point draws the sifted count from a Poisson
    distribution and the error count binomially from it, then recomputes the
    key rate from those counts.
    """
    theta = np.asarray(theta_values, dtype=float)
    br = evaluate_point(link, sys, OperatingPoint(theta, op_template.tau, op_template.fibre_model))
    if duration is None:
        value = np.asarray(br.key_rate)
    else:
        n_sift = rng.poisson(np.asarray(br.c_sift) * duration)
        n_err = rng.binomial(n_sift, np.asarray(br.qber))
        e = np.where(n_sift > 0, n_err / np.maximum(n_sift, 1), 0.5)
        _, value = secure_key_rate(n_sift / duration, e, e, sys.f_ec)
    return [ScanPoint(t, float(v), ScanKind.KEY) for t, v in zip(theta, value)]


__all__ = [
    "CHANNELS",
    "CoincidenceMatrix",
    "DegenerateDataError",
    "EPolClampedWarning",
    "FitResult",
    "ScanKind",
    "ScanPoint",
    "estimate_e_pol",
    "estimate_eta_a",
    "fit_key_rate_scan",
    "fit_noise_scan",
    "synthetic_key_rate_scan",
    "synthetic_noise_scan",
]
