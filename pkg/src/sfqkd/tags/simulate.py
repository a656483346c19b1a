"""Monte Carlo time tags for both sites of the link.

Alice's detections form one Poisson process at her measured singles rate.
A thinned subset of it (rate = true coincidence rate) has a partner
detection at Bob, delayed by a Gaussian of FWHM equal to the total system
jitter. Everything else Bob sees (unpaired signal, background, dark counts)
is an independent Poisson process. Bob's clock runs as
``t -> (1 + drift) * t + offset``.

Each random ingredient draws from its own child of the master seed, so a
stream is reproducible from the seed alone.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..model import (
    DomainError,
    LinkConditions,
    OperatingPoint,
    SystemConstants,
    evaluate_point,
)
from .stream import PS_PER_S, Site, TagStream

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))
MAX_DRIFT = 1e-4


@dataclass(frozen=True)
class SimConfig:
    link: LinkConditions
    sys: SystemConstants = field(default_factory=SystemConstants)
    op: OperatingPoint = field(default_factory=lambda: OperatingPoint(30.0))
    duration: float = 8.0  # s
    seed: int = 0
    clock_offset: float = 0.0  # ps
    clock_drift: float = 0.0

    def __post_init__(self):
        if not self.duration > 0:
            raise DomainError("duration must be positive")
        if not abs(self.clock_drift) < MAX_DRIFT:
            raise DomainError(f"|clock_drift| must be below {MAX_DRIFT}")
        if int(self.seed) != self.seed or self.seed < 0:
            raise DomainError("seed must be a nonnegative integer")

    def at_theta(self, theta: float, seed: int | None = None) -> "SimConfig":
        op = replace(self.op, theta_sf=theta)
        return replace(self, op=op, seed=self.seed if seed is None else seed)


def poisson_times(rng: np.random.Generator, rate: float, span_ps: float) -> np.ndarray:
    """Sorted event times (float ps) of a homogeneous Poisson process on [0, span)."""
    if rate <= 0:
        return np.empty(0)
    mean_gap = PS_PER_S / rate
    expected = rate * span_ps / PS_PER_S
    chunk = int(expected + 8.0 * math.sqrt(expected) + 16)
    times = np.cumsum(rng.exponential(mean_gap, size=chunk))
    while times[-1] < span_ps:
        more = np.cumsum(rng.exponential(mean_gap, size=chunk // 8 + 16)) + times[-1]
        times = np.concatenate([times, more])
    return times[: np.searchsorted(times, span_ps)]


def _merge_sorted(t1, c1, t2, c2):
    """Merge two sorted (time, channel) sequences in O(n)."""
    pos = np.searchsorted(t1, t2, side="right") + np.arange(t2.size)
    n = t1.size + t2.size
    times = np.empty(n, dtype=t1.dtype)
    channels = np.empty(n, dtype=np.uint8)
    mask = np.ones(n, dtype=bool)
    mask[pos] = False
    times[pos], channels[pos] = t2, c2
    times[mask], channels[mask] = t1, c1
    return times, channels


def simulate_tags(cfg: SimConfig) -> tuple[TagStream, TagStream]:
    """Generate Alice's and Bob's tag streams for one acquisition."""
    br = evaluate_point(cfg.link, cfg.sys, cfg.op)
    s_a = cfg.sys.s_a_measured
    pair_rate = float(br.c_true)
    if pair_rate > s_a:
        raise DomainError(
            f"true coincidence rate {pair_rate:.6g} exceeds Alice singles {s_a:.6g}"
        )
    bob_other_rate = float(br.s_bob_total) - pair_rate
    span_ps = cfg.duration * PS_PER_S

    g_alice, g_pair, g_jitter, g_bob, g_chan = (
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(5)
    )

    a_times = poisson_times(g_alice, s_a, span_ps)
    a_chan = g_chan.integers(0, 4, size=a_times.size, dtype=np.uint8)
    paired = g_pair.random(a_times.size) < (pair_rate / s_a if s_a > 0 else 0.0)

    sigma = cfg.sys.jitter_fwhm / FWHM_PER_SIGMA
    p_times = a_times[paired] + g_jitter.normal(0.0, sigma, size=int(paired.sum()))
    p_alice = a_chan[paired]
    same_basis = g_chan.random(p_times.size) < 0.5
    flip = g_chan.random(p_times.size) < cfg.sys.e_pol
    random_bit = g_chan.integers(0, 2, size=p_times.size, dtype=np.uint8)
    a_basis, a_bit = p_alice >> 1, p_alice & 1
    # anticorrelated outcomes in a shared basis, random outcome otherwise
    p_bit = np.where(same_basis, (1 - a_bit) ^ flip, random_bit).astype(np.uint8)
    p_basis = np.where(same_basis, a_basis, 1 - a_basis).astype(np.uint8)
    p_chan = (p_basis << 1) | p_bit
    order = np.argsort(p_times, kind="stable")
    p_times, p_chan = p_times[order], p_chan[order]

    o_times = poisson_times(g_bob, bob_other_rate, span_ps)
    o_chan = g_bob.integers(0, 4, size=o_times.size, dtype=np.uint8)
    b_times, b_chan = _merge_sorted(o_times, o_chan, p_times, p_chan)
    b_times = (1.0 + cfg.clock_drift) * b_times + cfg.clock_offset

    alice = TagStream(np.rint(a_times).astype(np.int64), a_chan, Site.ALICE, cfg.duration)
    bob = TagStream(np.rint(b_times).astype(np.int64), b_chan, Site.BOB, cfg.duration)
    return alice, bob
