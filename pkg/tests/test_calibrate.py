import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfqkd.calibrate import (
    CoincidenceMatrix,
    DegenerateDataError,
    EPolClampedWarning,
    ScanKind,
    ScanPoint,
    estimate_e_pol,
    estimate_eta_a,
    fit_key_rate_scan,
    fit_noise_scan,
    synthetic_key_rate_scan,
    synthetic_noise_scan,
)
from sfqkd.model import DomainError, LinkConditions, OperatingPoint, SystemConstants, evaluate_point
from sfqkd.tags import SimConfig, estimate_accidentals, extract_coincidences, simulate_tags

SYS = SystemConstants()
OP = OperatingPoint(1.0, 800.0)
THETA = np.linspace(5.0, 140.0, 28)
CASES = settings(max_examples=100, deadline=None)


def test_noise_fit_noiseless_round_trip():
    fit = fit_noise_scan(synthetic_noise_scan(THETA, 1.59e6, 36.8))
    assert fit.converged
    assert fit.params["b0"] == pytest.approx(1.59e6, rel=1e-6)
    assert fit.params["gamma"] == pytest.approx(36.8, rel=1e-6)
    assert fit.units == {"b0": "cps", "gamma": "urad"}


def test_noise_fit_all_zero_is_flagged():
    fit = fit_noise_scan([ScanPoint(t, 0.0) for t in THETA])
    assert not fit.converged
    assert fit.params["b0"] == 0.0
    assert math.isnan(fit.params["gamma"])


def test_noise_fit_identical_theta_is_degenerate():
    with pytest.raises(DegenerateDataError):
        fit_noise_scan([ScanPoint(30.0, v) for v in (1.0, 2.0, 3.0)])


def test_noise_fit_rejects_wrong_kind():
    with pytest.raises(DomainError):
        fit_noise_scan([ScanPoint(t, 1.0, ScanKind.KEY) for t in THETA])


def test_noise_fit_fixed_gamma_is_exact():
    fit = fit_noise_scan(synthetic_noise_scan(THETA, 8e5, 30.0), fix_gamma=30.0)
    assert fit.params["b0"] == pytest.approx(8e5, rel=1e-12)
    assert fit.params["gamma"] == 30.0


def test_noise_fit_with_scatter_recovers_gamma():
    rng = np.random.default_rng(5)
    fit = fit_noise_scan(synthetic_noise_scan(THETA, 1.2e6, 36.8, scatter=0.02, rng=rng))
    assert abs(fit.params["gamma"] - 36.8) <= 1.5


def test_bootstrap_is_deterministic_and_positive():
    rng = np.random.default_rng(2)
    pts = synthetic_noise_scan(THETA, 1.59e6, 36.8, duration=8.0, rng=rng)
    a = fit_noise_scan(pts, n_boot=30, seed=11)
    b = fit_noise_scan(pts, n_boot=30, seed=11)
    assert a.uncertainties == b.uncertainties
    assert a.uncertainties["b0"] > 0 and a.uncertainties["gamma"] > 0


@pytest.mark.parametrize(
    "link",
    [LinkConditions(237000.0, 18.5, 1.59e6), LinkConditions(117000.0, 23.0, 0.0)],
    ids=["8pm", "11pm"],
)
def test_key_rate_fit_noiseless_round_trip(link):
    pts = synthetic_key_rate_scan(THETA, link, SYS, OP)
    fit = fit_key_rate_scan(pts, link.b0, SYS, OP)
    assert fit.converged
    assert fit.params["s0"] == pytest.approx(link.s0, rel=1e-4)
    assert fit.params["delta"] == pytest.approx(link.delta, rel=1e-4)


def test_key_rate_fit_with_counting_noise():
    link = LinkConditions(237000.0, 18.5, 1.59e6)
    pts = synthetic_key_rate_scan(THETA, link, SYS, OP, duration=8.0, rng=np.random.default_rng(3))
    fit = fit_key_rate_scan(pts, link.b0, SYS, OP)
    assert abs(fit.params["s0"] - 237000.0) <= 5000.0
    assert abs(fit.params["delta"] - 18.5) <= 0.7


def test_key_rate_fit_without_key_is_flagged():
    pts = [ScanPoint(t, 0.0, ScanKind.KEY) for t in THETA]
    fit = fit_key_rate_scan(pts, 1.59e6, SYS, OP)
    assert not fit.converged


def test_eta_a_round_trip():
    for eta_a, s0 in ((0.122, 237000.0), (0.2, 5e4)):
        sys = SystemConstants(eta_a=eta_a)
        br = evaluate_point(LinkConditions(s0, 18.5, 0.0), sys, OperatingPoint(math.inf))
        got = estimate_eta_a(br.c_measured, sys.s_a_measured, br.s_bob_total, sys)
        assert got == pytest.approx(eta_a, rel=1e-10)


def test_eta_a_degenerate():
    c_acc = 1.4e6 * 2e5 * 800e-12
    with pytest.raises(DomainError):
        estimate_eta_a(c_acc * 0.999, 1.4e6, 2e5, SYS)


def matrix(hv=0, vh=0, hh=0, vv=0, duration=1.0):
    counts = np.zeros((4, 4), dtype=np.int64)
    counts[0, 1], counts[1, 0], counts[0, 0], counts[1, 1] = hv, vh, hh, vv
    return CoincidenceMatrix(counts, duration)


def test_e_pol_examples():
    assert estimate_e_pol(matrix(hv=500, vh=500), 0.0) == 0.0
    assert estimate_e_pol(matrix(hv=250, vh=250, hh=250, vv=250), 0.0) == pytest.approx(0.5)
    with pytest.raises(DomainError):
        estimate_e_pol(matrix(), 0.0)


def test_e_pol_clamps_with_warning():
    with pytest.warns(EPolClampedWarning):
        assert estimate_e_pol(matrix(hv=500, vh=500, hh=1), 100.0) == 0.0


def test_e_pol_from_simulated_tags():
    # small field stop keeps accidentals low; accidentals are measured with a shifted stream
    cfg = SimConfig(LinkConditions(237000.0, 18.5, 1.59e6)).at_theta(15.0, 21)
    alice, bob = simulate_tags(cfg)
    res = extract_coincidences(alice, bob, 800.0)
    c_acc = estimate_accidentals(alice, bob, 800.0)
    right, wrong = res.matrix.right_wrong()
    sigma = math.sqrt(SYS.e_pol * (1 - SYS.e_pol) / (right + wrong))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        literal = estimate_e_pol(res.matrix, c_acc)
        corrected = estimate_e_pol(res.matrix, c_acc, subtract_from_sift=True)
    assert abs(literal - SYS.e_pol) <= 3 * sigma
    assert abs(corrected - SYS.e_pol) <= 3 * sigma


# --- invariants as randomized properties


@CASES
@given(b0=st.floats(1e3, 5e6), gamma=st.floats(10.0, 80.0))
def test_noise_fit_round_trip_property(b0, gamma):
    fit = fit_noise_scan(synthetic_noise_scan(THETA, b0, gamma))
    assert fit.params["b0"] == pytest.approx(b0, rel=1e-5)
    assert fit.params["gamma"] == pytest.approx(gamma, rel=1e-5)


@CASES
@given(s0=st.floats(5e4, 5e5), delta=st.floats(8.0, 45.0), b0=st.floats(0.0, 2e6))
def test_key_rate_fit_round_trip_property(s0, delta, b0):
    link = LinkConditions(s0, delta, b0)
    pts = synthetic_key_rate_scan(THETA, link, SYS, OP)
    if sum(p.value > 0 for p in pts) < 4:
        return  # too little key to constrain two parameters
    fit = fit_key_rate_scan(pts, b0, SYS, OP)
    assert fit.params["s0"] == pytest.approx(s0, rel=1e-4)
    assert fit.params["delta"] == pytest.approx(delta, rel=1e-4)


@CASES
@given(b0=st.floats(1e4, 3e6), gamma=st.floats(15.0, 70.0), seed=st.integers(0, 2**32 - 1))
def test_fit_trace_is_monotone(b0, gamma, seed):
    pts = synthetic_noise_scan(THETA, b0, gamma, scatter=0.05, rng=np.random.default_rng(seed))
    fit = fit_noise_scan(pts)
    trace = np.array(fit.trace)
    assert trace.size > 0
    assert np.all(np.diff(trace) <= 0)


@CASES
@given(b0=st.floats(1e4, 3e6), gamma=st.floats(15.0, 70.0), seed=st.integers(0, 2**32 - 1))
def test_fixed_and_free_gamma_agree(b0, gamma, seed):
    pts = synthetic_noise_scan(THETA, b0, gamma, scatter=0.03, rng=np.random.default_rng(seed))
    free = fit_noise_scan(pts)
    fixed = fit_noise_scan(pts, fix_gamma=free.params["gamma"])
    assert fixed.params["b0"] == pytest.approx(free.params["b0"], rel=1e-6)


@CASES
@given(
    counts=st.lists(st.integers(0, 10_000), min_size=16, max_size=16),
    c_acc=st.floats(0.0, 500.0),
    duration=st.floats(0.5, 20.0),
    k=st.integers(2, 50),
)
def test_e_pol_scale_invariance(counts, c_acc, duration, k):
    base = np.array(counts, dtype=np.int64).reshape(4, 4)
    m1 = CoincidenceMatrix(base, duration)
    if sum(m1.right_wrong()) == 0:
        return
    m2 = CoincidenceMatrix(base * k, duration * k)  # same rates
    m3 = CoincidenceMatrix(base * k, duration)  # all rates scaled by k
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EPolClampedWarning)
        e1 = estimate_e_pol(m1, c_acc)
        assert estimate_e_pol(m2, c_acc) == pytest.approx(e1, rel=1e-12, abs=1e-15)
        assert estimate_e_pol(m3, c_acc * k) == pytest.approx(e1, rel=1e-12, abs=1e-15)
