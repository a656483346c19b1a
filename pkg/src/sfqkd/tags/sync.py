"""Clock offset and drift recovery from the timing correlation of photon pairs.

The model is ``t_bob = (1 + drift) * t_alice + offset``. Recovery runs
coarse to fine:

1. FFT cross-correlation of ~2 us histograms in chunks of about a second
   (at least eight) over the full offset search range. Chunk correlations
   are stacked along a grid of drift hypotheses, so the peak stays sharp
   for any drift in range; this yields offset and drift to about one bin.
2. Tag differences within two coarse bins of the current model, binned
   at 128 ns in 64 time windows. The rows are sheared over a finer drift
   grid and summed, which repairs a coarse drift that slipped by a few
   hypothesis steps (likely under heavy background).
3. Direct difference histograms in narrowing windows (8 ns, 500 ps and
   100 ps bins). Peak centroids of 16 time windows are regressed linearly
   on time to update offset and drift.

Each stage measures the residual delay of Bob against the current model
of Alice's times on Bob's clock, so only Alice's (subsampled) tags are
ever remapped. A coarse peak must stand ``threshold`` robust noise units
above the median; a fine peak must exceed its local baseline by
``threshold`` Poisson standard deviations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.fft

from .stream import TagStream

MAX_OFFSET_PS = 1_000_000_000  # 1 ms
MAX_DRIFT = 2e-6
N_WINDOWS = 16
THRESHOLD = 5.0
MAX_PAIRS = 4_000_000
MAX_KEYS = 1_000_000
COARSE_CHUNKS = 8

COARSE_CHUNK_PS = 1_000_000_000_000  # at most ~1 s per coarse chunk

# stacked refinement: two coarse bins either side, drift searched over
# +-STACK_STEPS coarse hypothesis steps
STACK_BIN_PS = 128_000
STACK_WINDOWS = 64
STACK_STEPS = 4

# (half width, bin, centroid half width) in ps for the direct stages
DIRECT_STAGES = (
    (1_000_000, 8_000, 32_000),
    (80_000, 500, 3_000),
    (10_000, 100, 2_000),
)


class NoPeakError(ValueError):
    """No pair-correlation peak stands out of the accidental background."""


@dataclass(frozen=True)
class SyncResult:
    offset: float  # ps
    drift: float
    corrected: TagStream
    significance: float  # coarse peak height in noise units

    def __iter__(self):
        return iter((self.offset, self.drift, self.corrected))


def _robust_z(values: np.ndarray) -> np.ndarray:
    med = np.median(values)
    mad = 1.4826 * np.median(np.abs(values - med))
    if mad <= 0:
        mad = math.sqrt(max(med, 1.0))
    return (values - med) / mad


def _centroid(lags: np.ndarray, values: np.ndarray, k: int, half: int, baseline: float) -> float:
    lo, hi = max(k - half, 0), min(k + half + 1, values.size)
    excess = np.clip(values[lo:hi] - baseline, 0.0, None)
    if excess.sum() <= 0:
        return float(lags[k])
    return float(np.dot(lags[lo:hi], excess) / excess.sum())


def _coarse_offset(a, b, max_offset, max_drift, threshold):
    """Stacked chunk cross-correlation over offsets and a grid of drift hypotheses.

    Returns (offset, drift, significance, bin width).
    """
    span = max(float(a[-1] - a[0]), 1.0)
    n_chunks = max(COARSE_CHUNKS, math.ceil(span / COARSE_CHUNK_PS))
    chunk_span = span / n_chunks
    bin_w = 1 << max(20, math.ceil(math.log2(max(max_drift * chunk_span, 1.0))))
    step = bin_w / span
    n_hyp = math.ceil(max_drift / step)
    drifts = np.arange(-n_hyp, n_hyp + 1) * step
    max_shift = math.ceil(max_drift * span / 2 / bin_w) + 1
    # the delay at any tag time is offset + drift * t, so widen by the drift excursion
    t_far = max(abs(float(a[0])), abs(float(a[-1])))
    k_max = math.ceil((max_offset + max_drift * t_far) / bin_w) + 1
    k_ext = k_max + max_shift

    origin = a[0]
    ha = np.bincount((a - origin) // bin_w).astype(float)
    b_bins = (b - origin) // bin_w + k_ext
    keep = (b_bins >= 0) & (b_bins < ha.size + 2 * k_ext)
    hb = np.bincount(b_bins[keep], minlength=ha.size + 2 * k_ext).astype(float)
    b_lo = (b[0] - origin) // bin_w
    b_hi = (b[-1] - origin) // bin_w
    b_density = b.size / max(b_hi - b_lo + 1, 1)
    cum_a = np.concatenate([[0.0], np.cumsum(ha)])

    ext_lags = np.arange(-k_ext, k_ext + 1)
    edges = np.linspace(0, ha.size, n_chunks + 1).astype(np.int64)
    centres = 0.5 * (edges[:-1] + edges[1:])
    t_ref = float(centres.mean())
    resid = []
    for s, e in zip(edges[:-1], edges[1:]):
        x = ha[s:e]
        y = hb[s : e + 2 * k_ext]
        n = scipy.fft.next_fast_len(x.size + y.size)
        c = scipy.fft.irfft(np.conj(scipy.fft.rfft(x, n)) * scipy.fft.rfft(y, n), n)[: 2 * k_ext + 1]
        # accidental baseline: Alice counts whose shifted bin falls inside Bob's active range
        lo = np.clip(b_lo - ext_lags, s, e)
        hi = np.clip(b_hi - ext_lags + 1, s, e)
        resid.append(c - b_density * (cum_a[hi] - cum_a[lo]))
    resid = np.array(resid)

    lags = np.arange(-k_max, k_max + 1, dtype=float)
    best = (-np.inf, 0.0, 0.0)
    rows = np.arange(n_chunks)
    for d in drifts:
        shifts = np.rint(d * (centres - t_ref)).astype(np.int64)
        idx = (np.arange(-k_max, k_max + 1)[None, :] + shifts[:, None] + k_ext)
        stacked = resid[rows[:, None], idx].sum(axis=0)
        # bin splitting spreads the peak over two neighbouring lags
        z = _robust_z(stacked[:-1] + stacked[1:])
        k = int(np.argmax(z))
        if z[k] > best[0]:
            peak = k if stacked[k] >= stacked[k + 1] else k + 1
            lag = _centroid(lags, stacked, peak, 1, float(np.median(stacked)))
            best = (float(z[k]), lag, float(d))
    z_best, lag, drift = best
    if not z_best >= threshold:
        raise NoPeakError(f"no correlation peak (best {z_best:.2f} noise units, need {threshold})")
    # delay(t) = offset + drift * t, measured at the reference time
    t_abs = origin + t_ref * bin_w
    offset = lag * bin_w - drift * t_abs
    return offset, drift, z_best, bin_w


def _windows(a: np.ndarray, n_windows: int) -> np.ndarray:
    return np.linspace(a[0], a[-1] + 1, n_windows + 1)


def _regress(t, r, weights=None):
    if len(t) < 3:
        raise NoPeakError("too few time windows with a correlation peak")
    slope, intercept = np.polyfit(np.asarray(t), np.asarray(r), 1, w=weights)
    return intercept, slope


def _to_bob_clock(a, offset, drift):
    return np.rint(a * (1.0 + drift) + offset).astype(np.int64)


def _pair_histogram(a, b, offset, drift, half_width, bin_w, n_windows):
    """Histogram Bob-minus-predicted differences within +-half_width, one row per
    time window of Alice's stream. Returns (hist, window mid times, bin centres)."""
    density = b.size / max(float(b[-1] - b[0]), 1.0)
    stride = max(1, math.ceil(a.size * density * 2 * half_width / MAX_PAIRS), math.ceil(a.size / MAX_KEYS))
    a_s = a[::stride]
    am = _to_bob_clock(a_s, offset, drift)
    lo = np.searchsorted(b, am - half_width, side="left")
    hi = np.searchsorted(b, am + half_width, side="right")
    counts = hi - lo
    hit = np.flatnonzero(counts)
    counts, lo = counts[hit], lo[hit]
    ai = np.repeat(hit, counts)
    starts = np.cumsum(counts) - counts
    bj = np.arange(int(counts.sum())) - np.repeat(starts - lo, counts)
    diff = b[bj] - am[ai]

    edges = _windows(a, n_windows)
    win = np.clip(np.searchsorted(edges, a_s[ai], side="right") - 1, 0, n_windows - 1)
    nb = int(math.ceil(2 * half_width / bin_w))
    bins = np.clip(((diff + half_width) // bin_w).astype(np.int64), 0, nb - 1)
    hist = np.bincount(win * nb + bins, minlength=n_windows * nb).reshape(n_windows, nb).astype(float)
    centers = -half_width + (np.arange(nb) + 0.5) * bin_w
    return hist, 0.5 * (edges[:-1] + edges[1:]), centers


def _peak(h, centers, half, threshold):
    """Centroid and signal of the highest peak, or None if it is not significant."""
    nb = h.size
    k = int(np.argmax(h))
    outside = np.ones(nb, dtype=bool)
    outside[max(k - half, 0) : k + half + 1] = False
    baseline = float(h[outside].mean()) if outside.any() else float(np.median(h))
    excess = h[k] - baseline
    noise = math.sqrt(max(baseline, 1.0))
    if excess <= threshold * noise:
        return None
    bin_w = centers[1] - centers[0] if nb > 1 else 1.0
    c = _centroid(centers, h, k, half, baseline)
    # re-centre the window on the first estimate to remove edge bias
    k2 = int(np.clip(round((c - centers[0]) / bin_w), 0, nb - 1))
    c = _centroid(centers, h, k2, half, baseline)
    signal = np.clip(h[max(k2 - half, 0) : k2 + half + 1] - baseline, 0, None).sum()
    return c, float(signal), excess / noise


def _stacked_stage(a, b, offset, drift, half_width, bin_w, centroid_hw, max_dd, n_windows, threshold):
    """Shear the windowed difference histogram over a grid of residual drifts and
    sum the rows; the sharpest stacked peak gives the residual offset and drift."""
    hist, times, centers = _pair_histogram(a, b, offset, drift, half_width, bin_w, n_windows)
    nb = centers.size
    span = max(float(a[-1] - a[0]), 1.0)
    t_ref = float(times.mean())
    n_hyp = math.ceil(max_dd * span / bin_w)
    pad = math.ceil(max_dd * span / 2 / bin_w) + 1
    # pad with each row's mean so sheared edges look like background, not empty bins
    padded = np.repeat(hist.mean(axis=1, keepdims=True), nb + 2 * pad, axis=1)
    padded[:, pad : pad + nb] = hist
    cols = np.arange(nb)
    rows = np.arange(n_windows)[:, None]
    half = max(1, math.ceil(centroid_hw / bin_w))
    best = None
    for dd in np.arange(-n_hyp, n_hyp + 1) * (bin_w / span):
        shifts = np.rint(dd * (times - t_ref) / bin_w).astype(np.int64)
        stacked = padded[rows, cols[None, :] + shifts[:, None] + pad].sum(axis=0)
        found = _peak(stacked, centers, half, threshold)
        if found is not None and (best is None or found[2] > best[1][2]):
            best = (float(dd), found)
    if best is None:
        raise NoPeakError("no stacked correlation peak around the coarse estimate")
    dd, (c, _, _) = best
    return c - dd * t_ref, dd


def _direct_stage(a, b, offset, drift, half_width, bin_w, centroid_hw, n_windows, threshold):
    """Regress per-window peak centroids of the difference histogram on Alice time."""
    hist, mids, centers = _pair_histogram(a, b, offset, drift, half_width, bin_w, n_windows)
    half = max(1, math.ceil(centroid_hw / bin_w))
    times, delays, weights = [], [], []
    for j in range(n_windows):
        found = _peak(hist[j], centers, half, threshold)
        if found is None:
            continue
        c, signal, _ = found
        times.append(mids[j])
        delays.append(c)
        weights.append(math.sqrt(signal))
    return _regress(times, delays, weights)


def _correct(times: np.ndarray, offset: float, drift: float) -> np.ndarray:
    return np.rint((times - offset) / (1.0 + drift)).astype(np.int64)


def apply_clock_model(bob: TagStream, offset: float, drift: float) -> TagStream:
    """Map Bob's timestamps onto Alice's clock."""
    return TagStream(_correct(bob.times, offset, drift), bob.channels, bob.site, bob.span)


def synchronize(
    alice: TagStream,
    bob: TagStream,
    max_offset: float = MAX_OFFSET_PS,
    max_drift: float = MAX_DRIFT,
    n_windows: int = N_WINDOWS,
    threshold: float = THRESHOLD,
) -> SyncResult:
    """Recover Bob's clock offset (ps) and fractional drift relative to Alice.

    Raises :class:`NoPeakError` when the streams carry no detectable pair
    correlation.
    """
    a, b = alice.times, bob.times
    if a.size < 16 or b.size < 16:
        raise NoPeakError("streams too short to correlate")
    offset, drift, significance, coarse_bin = _coarse_offset(a, b, max_offset, max_drift, threshold)

    def update(intercept, slope):
        nonlocal offset, drift
        offset += intercept
        drift += slope

    # with heavy background the coarse drift can be off by a few hypothesis
    # steps, traded against the offset; a finer stacked search absorbs that
    span = max(float(a[-1] - a[0]), 1.0)
    half_width = 2 * coarse_bin
    max_dd = min(STACK_STEPS * coarse_bin / span, 1.5 * half_width / span)
    update(*_stacked_stage(a, b, offset, drift, half_width, STACK_BIN_PS, 3 * STACK_BIN_PS, max_dd,
                           STACK_WINDOWS, threshold))
    for half_width, bin_w, centroid_hw in DIRECT_STAGES:
        update(*_direct_stage(a, b, offset, drift, half_width, bin_w, centroid_hw, n_windows, threshold))

    return SyncResult(offset, drift, apply_clock_model(bob, offset, drift), significance)
