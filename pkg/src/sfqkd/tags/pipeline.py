from __future__ import annotations

from typing import Sequence

import numpy as np

from ..calibrate import ScanKind, ScanPoint
from .coincidence import CoincidenceResult, extract_coincidences
from .simulate import SimConfig, simulate_tags
from .sync import synchronize


def derived_seeds(seed: int, n: int) -> list[int]:
    """Independent integer seeds for ``n`` sub-runs of one master seed."""
    return [int(s.generate_state(1, np.uint64)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def run_pipeline(cfg: SimConfig) -> CoincidenceResult:
    """Simulate, synchronize and extract coincidences for one configuration."""
    alice, bob = simulate_tags(cfg)
    synced = synchronize(alice, bob)
    return extract_coincidences(alice, synced.corrected, cfg.op.tau, cfg.duration, cfg.sys.f_ec)


def scan_pipeline(cfg: SimConfig, theta_values: Sequence[float]) -> list[ScanPoint]:
    """Synthetic key-rate scan over the field stop, one full pipeline run per setting."""
    seeds = derived_seeds(cfg.seed, len(theta_values))
    points = []
    for theta, seed in zip(theta_values, seeds):
        result = run_pipeline(cfg.at_theta(float(theta), seed))
        points.append(ScanPoint(float(theta), result.key_rate, ScanKind.KEY))
    return points
