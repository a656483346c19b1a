"""Field-of-view and coincidence-window optimization, parameter sweeps, and
the fixed-versus-adjusted filter scenario."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .model import (
    DomainError,
    FibreModel,
    LinkConditions,
    OperatingPoint,
    RateBreakdown,
    SystemConstants,
    evaluate_point,
)

GRID_POINTS = 128
THETA_XTOL = 0.01  # urad
TAU_XTOL = 1.0  # ps
MAX_ROUNDS = 10
TIE_RTOL = 1e-12

OBSERVED_DELTA_RANGE = (11.4, 39.4)  # urad
OBSERVED_B0_RANGE = (0.0, 1.59e6)  # cps
OBSERVED_S0_RANGE = (0.0, 237000.0)  # cps


class NoPositiveKeyError(DomainError):
    """No operating point inside the bounds yields a positive key rate."""


class SweepParameter(str, enum.Enum):
    B0 = "b0"
    DELTA = "delta"
    S0 = "s0"

    @property
    def unit(self) -> str:
        return "urad" if self is SweepParameter.DELTA else "cps"


@dataclass(frozen=True)
class OptimizationRequest:
    link: LinkConditions
    sys: SystemConstants = field(default_factory=SystemConstants)
    fibre_model: FibreModel = FibreModel.NO_FIBRE
    optimize_tau: bool = False
    theta_bounds: tuple = (0.5, 140.0)  # urad
    tau_bounds: tuple = (50.0, 5000.0)  # ps
    tau: float = 800.0  # ps, used when tau is not optimized

    def __post_init__(self):
        object.__setattr__(self, "fibre_model", FibreModel(self.fibre_model))
        for name in ("theta_bounds", "tau_bounds"):
            lo, hi = getattr(self, name)
            if not 0 < lo < hi:
                raise DomainError(f"{name} must be positive and ordered, got {(lo, hi)}")


@dataclass(frozen=True)
class Optimum:
    theta: float
    tau: float
    key_rate: float
    boundary: bool
    breakdown: RateBreakdown

    @property
    def note(self) -> str:
        return "boundary optimum - fully open" if self.boundary else "interior optimum"


def _rate_fn(link, sys, fibre_model) -> Callable:
    def rate(theta, tau):
        return np.asarray(evaluate_point(link, sys, OperatingPoint(theta, tau, fibre_model)).key_rate)

    return rate


def _best_index(values: np.ndarray) -> int:
    """Index of the maximum; ties resolve to the last (widest) grid point."""
    top = values.max()
    near = np.flatnonzero(values >= top - TIE_RTOL * abs(top))
    return int(near[-1])


def maximize_1d(f: Callable, lo: float, hi: float, xtol: float, n_grid: int = GRID_POINTS):
    """Grid search over ``[lo, hi]`` followed by bounded Brent refinement.

    ``f`` must accept an array. Returns ``(x, f(x))``.
    """
    grid = np.linspace(lo, hi, n_grid)
    values = f(grid)
    i = _best_index(values)
    best_x, best_f = float(grid[i]), float(values[i])
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, n_grid - 1)]
    res = minimize_scalar(
        lambda x: -float(f(np.array(x))), bounds=(a, b), method="bounded", options={"xatol": xtol}
    )
    if -res.fun > best_f * (1 + TIE_RTOL):
        best_x, best_f = float(res.x), float(-res.fun)
    return best_x, best_f


def best_tau(link, sys, theta, fibre_model, tau_bounds=(50.0, 5000.0)):
    """Coincidence window maximizing the key rate at a fixed FOV; ``(tau, rate)``."""
    rate = _rate_fn(link, sys, fibre_model)
    return maximize_1d(lambda tau: rate(theta, tau), *tau_bounds, xtol=TAU_XTOL)


def optimize_fov(req: OptimizationRequest) -> Optimum:
    """Maximize the key rate over the FOV, and jointly over tau if requested.

    The joint search seeds from a coarse 2-D grid and then alternates 1-D
    passes until neither coordinate moves by more than its tolerance.
    """
    rate = _rate_fn(req.link, req.sys, req.fibre_model)
    t_lo, t_hi = req.theta_bounds

    if not req.optimize_tau:
        tau = float(req.tau)
        theta, r = maximize_1d(lambda th: rate(th, tau), t_lo, t_hi, THETA_XTOL)
    else:
        thetas = np.linspace(t_lo, t_hi, 64)
        taus = np.linspace(*req.tau_bounds, 64)
        grid = rate(thetas[:, None], taus[None, :])
        i, j = np.unravel_index(np.argmax(grid), grid.shape)
        theta, tau = float(thetas[i]), float(taus[j])
        for _ in range(MAX_ROUNDS):
            new_theta, _ = maximize_1d(lambda th: rate(th, tau), t_lo, t_hi, THETA_XTOL)
            new_tau, r = best_tau(req.link, req.sys, new_theta, req.fibre_model, req.tau_bounds)
            moved = abs(new_theta - theta) > THETA_XTOL or abs(new_tau - tau) > TAU_XTOL
            theta, tau = new_theta, new_tau
            if not moved:
                break

    if not r > 0:
        raise NoPositiveKeyError("key rate is zero everywhere inside the bounds")
    breakdown = evaluate_point(req.link, req.sys, OperatingPoint(theta, tau, req.fibre_model))
    return Optimum(
        theta=theta,
        tau=tau,
        key_rate=float(breakdown.key_rate),
        boundary=theta >= t_hi - THETA_XTOL,
        breakdown=breakdown,
    )


def evaluate_at_fov(
    link: LinkConditions,
    sys: SystemConstants,
    theta: float,
    fibre_model=FibreModel.NO_FIBRE,
    optimize_tau: bool = False,
    tau: float = 800.0,
    tau_bounds=(50.0, 5000.0),
) -> float:
    """Key rate at a fixed FOV, with tau either fixed or re-optimized there."""
    if link.s0 == 0:
        return 0.0
    if optimize_tau:
        return best_tau(link, sys, theta, fibre_model, tau_bounds)[1]
    return float(evaluate_point(link, sys, OperatingPoint(theta, tau, fibre_model)).key_rate)


@dataclass(frozen=True)
class SweepSpec:
    link: LinkConditions
    sys: SystemConstants
    varied: SweepParameter
    values: tuple
    fibre_model: FibreModel = FibreModel.NO_FIBRE

    def __post_init__(self):
        object.__setattr__(self, "varied", SweepParameter(self.varied))
        object.__setattr__(self, "fibre_model", FibreModel(self.fibre_model))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if not self.values:
            raise DomainError("sweep needs at least one value")
        for v in self.values:
            if v < 0 or (self.varied is SweepParameter.DELTA and v <= 0):
                raise DomainError(f"invalid {self.varied.value} value {v}")


def observed_sweep(varied, link: LinkConditions, sys: SystemConstants, num: int = 8) -> SweepSpec:
    """Evenly spaced sweep over the range of link conditions observed in the field."""
    varied = SweepParameter(varied)
    bounds = {
        SweepParameter.B0: OBSERVED_B0_RANGE,
        SweepParameter.DELTA: OBSERVED_DELTA_RANGE,
        SweepParameter.S0: OBSERVED_S0_RANGE,
    }[varied]
    return SweepSpec(link, sys, varied, tuple(np.linspace(*bounds, num)))


@dataclass(frozen=True)
class SweepRow:
    param_name: str
    param_value: float
    theta: float
    tau: float
    breakdown: RateBreakdown


def run_sweep(
    spec: SweepSpec,
    optimize_tau: bool,
    theta_grid: Sequence[float],
    tau: float = 800.0,
    tau_bounds=(50.0, 5000.0),
) -> list[SweepRow]:
    """Key-rate curves over ``theta_grid``, one per value of the varied parameter.

    Every grid point is computed independently of the others.
    """
    theta_grid = np.asarray(theta_grid, dtype=float)
    rows = []
    for value in spec.values:
        link = replace(spec.link, **{spec.varied.value: value})
        for theta in theta_grid:
            if optimize_tau and link.s0 > 0:
                t, _ = best_tau(link, spec.sys, float(theta), spec.fibre_model, tau_bounds)
            else:
                t = tau
            br = evaluate_point(link, spec.sys, OperatingPoint(float(theta), t, spec.fibre_model))
            rows.append(SweepRow(spec.varied.value, value, float(theta), float(t), br))
    return rows


def curve_peaks(rows: Sequence[SweepRow]) -> dict:
    """Per parameter value: ``(theta, tau, rate)`` of the best grid point."""
    peaks = {}
    for row in rows:
        rate = float(row.breakdown.key_rate)
        cur = peaks.get(row.param_value)
        if cur is None or rate > cur[2] * (1 + TIE_RTOL):
            peaks[row.param_value] = (row.theta, row.tau, rate)
    return peaks


@dataclass(frozen=True)
class ScenarioStep:
    label: str
    delta: float  # urad
    theta_used: float  # urad
    tau_used: float  # ps
    key_rate: float  # bps
    reoptimized: bool


@dataclass(frozen=True)
class ScenarioReport:
    steps: tuple
    factor_b_to_c: float
    factor_d_to_a: float

    def as_dict(self) -> dict:
        return {
            "steps": [s.__dict__.copy() for s in self.steps],
            "factor_b_to_c": self.factor_b_to_c,
            "factor_d_to_a": self.factor_d_to_a,
        }


def _ratio(num, den):
    if den > 0:
        return num / den
    return 1.0 if num == den else float("inf")


def scenario_walk(
    link: LinkConditions,
    sys: SystemConstants,
    delta_start: float = OBSERVED_DELTA_RANGE[0],
    delta_changed: float = OBSERVED_DELTA_RANGE[1],
    fibre_model=FibreModel.NO_FIBRE,
    optimize_tau: bool = True,
    theta_bounds=(0.5, 140.0),
    tau_bounds=(50.0, 5000.0),
    tau: float = 800.0,
) -> ScenarioReport:
    """Walk A -> B -> C -> D while only the spot size changes.

    A: optimum at ``delta_start``. B: A's settings (FOV and window) kept while
    the spot grows to ``delta_changed``. C: re-optimized there. D: C's
    settings kept after the spot shrinks back. Steps B and D hold the whole
    operating point, since the filter is only adjusted at A and C.
    """

    def optimum(delta):
        req = OptimizationRequest(
            replace(link, delta=delta), sys, fibre_model, optimize_tau, theta_bounds, tau_bounds, tau
        )
        return optimize_fov(req)

    def held(delta, opt):
        br = evaluate_point(
            replace(link, delta=delta), sys, OperatingPoint(opt.theta, opt.tau, fibre_model)
        )
        return float(br.key_rate)

    a = optimum(delta_start)
    c = optimum(delta_changed)
    b_rate = held(delta_changed, a)
    d_rate = held(delta_start, c)
    steps = (
        ScenarioStep("A", delta_start, a.theta, a.tau, a.key_rate, True),
        ScenarioStep("B", delta_changed, a.theta, a.tau, b_rate, False),
        ScenarioStep("C", delta_changed, c.theta, c.tau, c.key_rate, True),
        ScenarioStep("D", delta_start, c.theta, c.tau, d_rate, False),
    )
    return ScenarioReport(steps, _ratio(c.key_rate, b_rate), _ratio(a.key_rate, d_rate))
