from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..calibrate import CoincidenceMatrix
from ..model import DomainError, binary_entropy, secure_key_rate
from .stream import TagStream

ACCIDENTAL_SHIFT_PS = 1_000_000  # 1 us, far outside any coincidence window


@dataclass(frozen=True)
class CoincidenceResult:
    matrix: CoincidenceMatrix
    c_measured: float  # cps
    c_sift: float  # cps
    e_hv: float
    e_da: float
    key_rate: float  # bps, clamped
    key_rate_raw: float  # bps
    key_rate_stderr: float  # bps, counting statistics only
    tau: float  # ps

    @property
    def qber(self) -> float:
        """Error rate pooled over both bases."""
        right, wrong = self.matrix.right_wrong()
        return wrong / (right + wrong) if right + wrong else 0.5

    def as_dict(self) -> dict:
        return {
            "counts": self.matrix.counts.tolist(),
            "duration_s": self.matrix.duration,
            "tau_ps": self.tau,
            "c_measured_cps": self.c_measured,
            "c_sift_cps": self.c_sift,
            "e_hv": self.e_hv,
            "e_da": self.e_da,
            "qber": self.qber,
            "key_rate_bps": self.key_rate,
            "key_rate_raw_bps": self.key_rate_raw,
            "key_rate_stderr_bps": self.key_rate_stderr,
        }


def coincidence_pairs(a_times, b_times, tau: float):
    """Index pairs ``(i, j)`` with ``|b_times[j] - a_times[i]| <= tau / 2``.

    Every combination inside the window counts; a tag may appear in several
    pairs. Both inputs must be sorted.
    """
    half = math.floor(tau / 2.0)  # timestamps are integers, so the bound is inclusive
    lo = np.searchsorted(b_times, a_times - half, side="left")
    hi = np.searchsorted(b_times, a_times + half, side="right")
    counts = hi - lo
    hit = np.flatnonzero(counts)
    counts, lo = counts[hit], lo[hit]
    total = int(counts.sum())
    ai = np.repeat(hit, counts)
    starts = np.cumsum(counts) - counts
    bj = np.arange(total) - np.repeat(starts - lo, counts)
    return ai, bj


def _basis_error(counts: np.ndarray, basis: int):
    """(errors, sifted) for one basis; same-channel coincidences are errors."""
    lo = 2 * basis
    block = counts[lo : lo + 2, lo : lo + 2]
    wrong = int(block[0, 0] + block[1, 1])
    return wrong, int(block.sum())


def key_rate_stderr(n_sift: int, n_err: int, duration: float, f_ec: float) -> float:
    """Delta-method standard error of the key rate from Poisson/binomial counts."""
    if n_sift == 0:
        return 0.0
    e = min(max(n_err / n_sift, 1e-12), 1 - 1e-12)
    h = float(binary_entropy(e))
    dh = math.log2((1 - e) / e)
    var_n = n_sift * ((1 - (1 + f_ec) * h) / duration) ** 2
    var_e = (n_sift / duration) ** 2 * ((1 + f_ec) * dh) ** 2 * e * (1 - e) / n_sift
    return math.sqrt(var_n + var_e)


def extract_coincidences(
    alice: TagStream,
    bob: TagStream,
    tau: float = 800.0,
    duration: float | None = None,
    f_ec: float = 1.22,
) -> CoincidenceResult:
    """Count coincidences within +-tau/2 and derive sifted rates, errors and key rate.

    ``duration`` defaults to Alice's nominal span.
    """
    if not tau > 0:
        raise DomainError("tau must be positive")
    duration = alice.span if duration is None else duration
    ai, bj = coincidence_pairs(alice.times, bob.times, tau)
    codes = 4 * alice.channels[ai].astype(np.int64) + bob.channels[bj]
    counts = np.bincount(codes, minlength=16).reshape(4, 4)
    matrix = CoincidenceMatrix(counts, duration)

    err_hv, n_hv = _basis_error(counts, 0)
    err_da, n_da = _basis_error(counts, 1)
    e_hv = err_hv / n_hv if n_hv else 0.5
    e_da = err_da / n_da if n_da else 0.5
    n_sift = n_hv + n_da
    c_sift = n_sift / duration
    raw, clamped = secure_key_rate(c_sift, e_hv, e_da, f_ec)
    return CoincidenceResult(
        matrix=matrix,
        c_measured=float(counts.sum()) / duration,
        c_sift=c_sift,
        e_hv=e_hv,
        e_da=e_da,
        key_rate=float(clamped),
        key_rate_raw=float(raw),
        key_rate_stderr=key_rate_stderr(n_sift, err_hv + err_da, duration, f_ec),
        tau=float(tau),
    )


def estimate_accidentals(
    alice: TagStream, bob: TagStream, tau: float = 800.0, shift_ps: int = ACCIDENTAL_SHIFT_PS
) -> float:
    """Accidental coincidence rate (cps) from Bob's stream shifted well past the window."""
    ai, _ = coincidence_pairs(alice.times, bob.times + np.int64(shift_ps), tau)
    return ai.size / alice.span
