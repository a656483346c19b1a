"""Closed-form key-rate model for a free-space entanglement link with an
adjustable square field stop at the receiver.

Every function here is pure and broadcasts over numpy arrays, so grids of
operating points can be evaluated in one call.

Units used throughout: rates in counts/s, angles in microradians, times in
picoseconds. Picoseconds are converted to seconds only inside the
accidental-coincidence expression.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, fields

import numpy as np
from scipy.special import erf, xlogy

SQRT_LN2 = math.sqrt(math.log(2.0))
PS = 1e-12

# Field-stop side length in the focal plane (um) -> FOV at the primary aperture (urad).
URAD_PER_FOCAL_MICRON = 0.344

# Saturation sentinel: erf^2 and the exponential are flat to double precision here.
OPEN_FILTER_FACTOR = 20.0


class DomainError(ValueError):
    """Raised when an input lies outside the physical domain of a formula."""


class FibreModel(str, enum.Enum):
    WITH_MM_FIBRE = "fibre"
    NO_FIBRE = "no-fibre"


@dataclass(frozen=True)
class LinkConditions:
    """Link-dependent parameters plus the noise-model turning point."""

    s0: float  # cps, signal at Bob with the filter fully open
    delta: float  # urad, long-term focal spot FWHM
    b0: float  # cps, background in the MM-fibre-coupling limit
    gamma: float = 36.8  # urad

    def __post_init__(self):
        if not (self.s0 >= 0 and self.b0 >= 0):
            raise DomainError(f"rates must be nonnegative: s0={self.s0}, b0={self.b0}")
        if not (self.delta > 0 and self.gamma > 0):
            raise DomainError(f"angles must be positive: delta={self.delta}, gamma={self.gamma}")


@dataclass(frozen=True)
class SystemConstants:
    """Instrument parameters measured ahead of the link experiments."""

    eta_a: float = 0.122
    s_a_measured: float = 1.4e6  # cps
    dark_bob: float = 761.0  # cps
    jitter_fwhm: float = 710.0  # ps
    e_pol: float = 0.026
    f_ec: float = 1.22

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) >= 0:
                raise DomainError(f"{f.name} must be nonnegative")
        if self.eta_a > 1:
            raise DomainError("eta_a must not exceed 1")
        if self.e_pol >= 0.5:
            raise DomainError("e_pol must be below 0.5")
        if self.f_ec < 1:
            raise DomainError("f_ec must be at least 1")
        if self.jitter_fwhm <= 0:
            raise DomainError("jitter_fwhm must be positive")


@dataclass(frozen=True)
class OperatingPoint:
    theta_sf: float  # urad; math.inf means fully open
    tau: float = 800.0  # ps
    fibre_model: FibreModel = FibreModel.WITH_MM_FIBRE

    def __post_init__(self):
        object.__setattr__(self, "fibre_model", FibreModel(self.fibre_model))
        if np.any(np.asarray(self.theta_sf) < 0):
            raise DomainError("theta_sf must be nonnegative")
        if np.any(np.asarray(self.tau) <= 0):
            raise DomainError("tau must be positive")


@dataclass(frozen=True)
class RateBreakdown:
    """Intermediate and final rates for one operating point (or a grid of them)."""

    c_true: float
    c_acc: float
    eta_c: float
    c_measured: float
    c_sift: float
    s_bob_true: float
    s_bob_background: float
    s_bob_total: float
    qber: float
    key_rate: float
    key_rate_raw: float

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _check_positive(name, x):
    if np.any(np.asarray(x) <= 0) or np.any(np.isnan(x)):
        raise DomainError(f"{name} must be positive, got {x}")


def _check_nonnegative(name, x):
    if np.any(np.asarray(x) < 0) or np.any(np.isnan(x)):
        raise DomainError(f"{name} must be nonnegative, got {x}")


def signal_through_filter(theta_sf, s0, delta):
    """Signal rate transmitted by a square field stop of side ``theta_sf``.

    The long-term focal spot is a circular Gaussian of FWHM ``delta``; the
    square aperture integrates it separably, hence the squared erf.
    """
    _check_positive("delta", delta)
    _check_nonnegative("s0", s0)
    _check_nonnegative("theta_sf", theta_sf)
    return s0 * erf(SQRT_LN2 * np.asarray(theta_sf, dtype=float) / delta) ** 2


def noise_through_filter(theta_sf, b0, gamma):
    """Background rate through the field stop followed by MM fibre coupling."""
    _check_positive("gamma", gamma)
    _check_nonnegative("b0", b0)
    theta = np.asarray(theta_sf, dtype=float)
    return b0 * -np.expm1(-(theta**2) / (2.0 * gamma**2))


def noise_no_fibre(theta_sf, b0, gamma):
    """Quadratic background growth when no fibre limits the FOV."""
    _check_positive("gamma", gamma)
    _check_nonnegative("b0", b0)
    theta = np.asarray(theta_sf, dtype=float)
    return b0 * theta**2 / (2.0 * gamma**2)


def window_efficiency(tau, jitter_fwhm):
    """Fraction of true pairs whose Gaussian timing spread falls in +-tau/2."""
    _check_positive("tau", tau)
    _check_positive("jitter_fwhm", jitter_fwhm)
    return erf(SQRT_LN2 * np.asarray(tau, dtype=float) / jitter_fwhm)


def accidental_rate(s_a, s_b, tau):
    """Accidental coincidence rate (cps) of two uncorrelated streams, tau in ps."""
    _check_positive("tau", tau)
    _check_nonnegative("s_a", s_a)
    _check_nonnegative("s_b", s_b)
    t = np.asarray(tau, dtype=float) * PS
    return np.expm1(-np.asarray(s_a) * t) * np.expm1(-np.asarray(s_b) * t) / t


def qber(c_true, c_acc, eta_c, e_pol):
    """Error rate of the sifted key; accidentals contribute errors with probability 1/2."""
    _check_nonnegative("c_true", c_true)
    _check_nonnegative("c_acc", c_acc)
    if np.any((np.asarray(e_pol) < 0) | (np.asarray(e_pol) > 0.5)):
        raise DomainError("e_pol must lie in [0, 0.5]")
    true_detected = np.asarray(eta_c) * c_true
    denom = true_detected + c_acc
    if np.any(denom <= 0):
        raise DomainError("error rate undefined without any coincidences")
    # (eta*C_t*e_pol + C_acc/2) / C_m written as a convex mix of e_pol and 1/2,
    # which stays inside [e_pol, 1/2] even when C_acc is subnormal
    w = np.clip(true_detected / denom, 0.0, 1.0)
    return 0.5 - w * (0.5 - np.asarray(e_pol))


def binary_entropy(x):
    x = np.asarray(x, dtype=float)
    if np.any((x < 0) | (x > 1)) or np.any(np.isnan(x)):
        raise DomainError("binary entropy is defined on [0, 1]")
    return -(xlogy(x, x) + xlogy(1.0 - x, 1.0 - x)) / math.log(2.0)


def secure_key_rate(c_sift, e_hv, e_da, f_ec):
    """Asymptotic secure key rate; returns ``(raw, clamped)`` in bits/s."""
    _check_nonnegative("c_sift", c_sift)
    if f_ec < 1:
        raise DomainError("f_ec must be at least 1")
    raw = c_sift * (1.0 - f_ec * binary_entropy(e_hv) - binary_entropy(e_da))
    return raw, np.maximum(raw, 0.0)


def open_filter_theta(link: LinkConditions) -> float:
    return OPEN_FILTER_FACTOR * max(link.delta, link.gamma)


def fov_angle_from_focal_micron(x):
    _check_nonnegative("focal-plane size", x)
    return URAD_PER_FOCAL_MICRON * np.asarray(x, dtype=float)


def focal_micron_from_fov_angle(theta):
    _check_nonnegative("FOV angle", theta)
    return np.asarray(theta, dtype=float) / URAD_PER_FOCAL_MICRON


def background_rate(theta_sf, link: LinkConditions, fibre_model) -> np.ndarray:
    if FibreModel(fibre_model) is FibreModel.WITH_MM_FIBRE:
        return noise_through_filter(theta_sf, link.b0, link.gamma)
    return noise_no_fibre(theta_sf, link.b0, link.gamma)


def evaluate_point(
    link: LinkConditions, sys: SystemConstants, op: OperatingPoint
) -> RateBreakdown:
    """Compose the full rate chain at one operating point.

    ``op.theta_sf`` and ``op.tau`` may be arrays (they broadcast against each
    other); ``theta_sf = inf`` is evaluated at :func:`open_filter_theta`.
    Sifting keeps half of all coincidences since both sites pick their basis
    50:50. Where no coincidences occur at all the error rate is reported as
    0.5; the key rate is zero there anyway.
    """
    theta = np.asarray(op.theta_sf, dtype=float)
    theta = np.where(np.isinf(theta), open_filter_theta(link), theta)
    tau = np.asarray(op.tau, dtype=float)

    s_true = signal_through_filter(theta, link.s0, link.delta)
    s_bg = background_rate(theta, link, op.fibre_model)
    s_total = s_true + s_bg + sys.dark_bob

    c_true = sys.eta_a * s_true
    c_acc = accidental_rate(sys.s_a_measured, s_total, tau)
    eta_c = window_efficiency(tau, sys.jitter_fwhm)
    detected = eta_c * c_true
    c_measured = detected + c_acc
    c_sift = 0.5 * c_measured

    denom = np.where(c_measured > 0, c_measured, 1.0)
    e = np.where(c_measured > 0, (detected * sys.e_pol + 0.5 * c_acc) / denom, 0.5)
    raw, clamped = secure_key_rate(c_sift, e, e, sys.f_ec)

    def out(x):
        x = np.asarray(x)
        return float(x) if x.ndim == 0 else x

    return RateBreakdown(
        c_true=out(c_true),
        c_acc=out(c_acc),
        eta_c=out(eta_c),
        c_measured=out(c_measured),
        c_sift=out(c_sift),
        s_bob_true=out(s_true),
        s_bob_background=out(s_bg),
        s_bob_total=out(s_total),
        qber=out(e),
        key_rate=out(clamped),
        key_rate_raw=out(raw),
    )


def key_rate(link, sys, theta_sf, tau=800.0, fibre_model=FibreModel.WITH_MM_FIBRE):
    """Clamped key rate only; a thin convenience wrapper for optimizers and fits."""
    return evaluate_point(link, sys, OperatingPoint(theta_sf, tau, fibre_model)).key_rate

