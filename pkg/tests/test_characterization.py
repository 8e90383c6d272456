import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.optimize import brentq
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from frontend_sim.channel_sim import ChannelSimulator, ChipConfig, NoiseSpec
from frontend_sim.characterization import (FitError, GainRegressor, RiceFit, RiceRateRegressor,
                                           SCurveFit, SCurveRegressor, ScanCurve,
                                           binomial_errors, calibrate_overdrive_delay,
                                           enc_from_noise, extract_gain, fit_report, fit_rice,
                                           fit_scurve, ideal_crossing_fraction, ideal_time_walk,
                                           measure_time_walk, poisson_rate_errors, rice_fit_range,
                                           rice_kappa, run_noise_occupancy, run_threshold_scan,
                                           scurve)
from frontend_sim.shaping import PulseShape

WALK_CHARGES = [1.2, 1.5, 2, 3, 4, 6, 8, 11]


def synthetic_scurve(median, sigma, n=10_000, x=None, rng=None):
    x = np.linspace(median - 4 * sigma, median + 4 * sigma, 21) if x is None else x
    p = scurve(x, median, sigma)
    k = p * n if rng is None else rng.binomial(n, p).astype(float)
    return ScanCurve("threshold_scan", x, k / n, binomial_errors(k, n), counts=k,
                     exposure=np.full(x.size, float(n)))


# --- S-curve ----------------------------------------------------------------

def test_scurve_function():
    assert scurve(60.0, 60.0, 2.9) == pytest.approx(0.5)
    assert scurve(60.0 + 2.9, 60.0, 2.9) == pytest.approx(0.15865525393145707)


@pytest.mark.parametrize("median,sigma", [(60.0, 2.9), (90.0, 1.0), (-5.0, 7.5)])
def test_scurve_fit_recovers_exact_curve(median, sigma):
    fit = fit_scurve(synthetic_scurve(median, sigma))
    assert isinstance(fit, SCurveFit)
    assert fit.median == pytest.approx(median, abs=1e-7)
    assert fit.sigma == pytest.approx(sigma, rel=1e-7)
    assert fit.chi2_ndf < 1e-12


def test_scurve_fit_pull_distribution():
    rng = np.random.default_rng(12)
    pulls = []
    for _ in range(200):
        fit = fit_scurve(synthetic_scurve(60.0, 2.9, n=2000, rng=rng))
        pulls.append((fit.median - 60.0) / fit.errors[0])
    pulls = np.array(pulls)
    assert abs(pulls.mean()) < 0.25
    assert 0.8 < pulls.std() < 1.2


def test_scurve_fit_rejects_bad_input():
    flat = ScanCurve("threshold_scan", [1, 2, 3], [0.2, 0.1, 0.0], [0.1] * 3)
    with pytest.raises(FitError):
        fit_scurve(flat)
    rev = ScanCurve("threshold_scan", [3, 2, 1], [0.0, 0.5, 1.0], [0.1] * 3)
    with pytest.raises(ValueError):
        fit_scurve(rev)
    noise = ScanCurve("noise_occupancy", [1, 2, 3], [1, 2, 1], [0.1] * 3)
    with pytest.raises(ValueError):
        fit_scurve(noise)


def test_scan_curve_validation():
    with pytest.raises(ValueError):
        ScanCurve("bogus", [1], [0.5], [0.1])
    with pytest.raises(ValueError):
        ScanCurve("threshold_scan", [1, 2], [0.5, 1.5], [0.1, 0.1])
    with pytest.raises(ValueError):
        ScanCurve("threshold_scan", [1, 1], [0.5, 0.4], [0.1, 0.1])
    with pytest.raises(ValueError):
        ScanCurve("threshold_scan", [1, 2], [0.5, 0.4], [0.1, -0.1])


def test_curve_digest_stable():
    a, b = synthetic_scurve(60.0, 2.9), synthetic_scurve(60.0, 2.9)
    assert a.digest() == b.digest()
    assert a.digest() != synthetic_scurve(60.1, 2.9).digest()


def test_estimators_follow_sklearn_conventions():
    for est in (SCurveRegressor(), RiceRateRegressor(fit_center=True), GainRegressor()):
        c = clone(est)
        assert c.get_params() == est.get_params()
        with pytest.raises(NotFittedError):
            c.predict([1.0, 2.0])
    x = np.linspace(50, 70, 21)
    est = SCurveRegressor().fit(x.reshape(-1, 1), scurve(x, 60, 2.9))
    np.testing.assert_allclose(est.predict(x), scurve(x, 60, 2.9), atol=1e-9)
    assert est.score(x, scurve(x, 60, 2.9)) == pytest.approx(1.0)


def test_sample_weight_validation():
    x = np.linspace(50, 70, 21)
    with pytest.raises(ValueError):
        SCurveRegressor().fit(x, scurve(x, 60, 2.9), sample_weight=np.zeros(21))


# --- gain and ENC -----------------------------------------------------------

def test_gain_regressor_exact_line():
    q = np.array([1.0, 1.5, 2.0])
    est = GainRegressor().fit(q, 60.0 * q + 0.7)
    assert est.gain_ == pytest.approx(60.0)
    assert est.offset_ == pytest.approx(0.7)
    with pytest.raises(ValueError):
        GainRegressor().fit([1.0, 1.0], [60.0, 61.0])


def test_extract_gain():
    fits = [(q, SCurveFit(59.0 * q + 1.0, 2.9, 1.0, ((0, 0), (0, 0)))) for q in (1.0, 2.0)]
    g, off = extract_gain(fits)
    assert g == pytest.approx(59.0) and off == pytest.approx(1.0)
    with pytest.raises(ValueError):
        extract_gain(fits[:1])


def test_enc_from_noise_frozen():
    # 2.9 mV / 60 mV/fC * 6241.5 e/fC
    assert enc_from_noise(2.9, 60.0) == pytest.approx(301.6725, rel=1e-9)
    assert enc_from_noise(0.0, 60.0) == 0.0
    with pytest.raises(ZeroDivisionError):
        enc_from_noise(2.9, 0.0)
    with pytest.raises(ValueError):
        enc_from_noise(2.9, -60.0)


@given(s=st.floats(0.01, 100), g=st.floats(1, 500), k=st.floats(0.1, 10))
def test_enc_from_noise_homogeneous(s, g, k):
    assert enc_from_noise(k * s, k * g) == pytest.approx(enc_from_noise(s, g), rel=1e-12)


def test_binomial_errors_floor():
    e = binomial_errors(np.array([0, 50, 100]), 100)
    assert e[0] == pytest.approx(math.sqrt(0.01 * 0.99 / 100))
    assert e[1] == pytest.approx(0.05)
    assert e[2] == pytest.approx(e[0])
    assert np.all(poisson_rate_errors([0, 100], 1000.0) == pytest.approx([1.0, 10.0]))


# --- Rice -------------------------------------------------------------------

@pytest.mark.parametrize("n", [2, 3, 4, 6])
def test_rice_kappa_closed_form(n):
    # m2/m0 of x^2/(1+x^2)^(n+1) gives nu0 tp = (n / 2 pi) sqrt(3 / (2n - 3))
    assert rice_kappa(n) == pytest.approx(n / (2 * np.pi) * math.sqrt(3 / (2 * n - 3)), rel=1e-8)


def test_rice_kappa_frozen_and_tp_independent():
    assert rice_kappa(3) == pytest.approx(0.477464829275686, rel=1e-9)
    assert rice_kappa(3, peaking_time=8.0) == pytest.approx(rice_kappa(3, peaking_time=2.0),
                                                            rel=1e-9)


def test_rice_kappa_from_autocorrelation():
    # nu0 = (1 / 2 pi) sqrt(-R''(0) / R(0)) with R the autocorrelation of the
    # impulse response h = dw/dt: -R''(0) = int h'^2, R(0) = int h^2
    n, tp = 3, 1.0
    tau = tp / n
    t = np.linspace(0, 40 * tp, 400_001)
    k = math.factorial(n) * math.e**n / n**n
    # h is the derivative of w; h' its second derivative, both in closed form
    u = t / tau
    w1 = k / math.factorial(n) / tau * (n * u ** (n - 1) - u**n) * np.exp(-u)
    w2 = k / math.factorial(n) / tau**2 * (
        n * (n - 1) * u ** (n - 2) - 2 * n * u ** (n - 1) + u**n) * np.exp(-u)
    ratio = integrate.trapezoid(w2**2, t) / integrate.trapezoid(w1**2, t)
    kappa = math.sqrt(ratio) / (2 * np.pi) * tp
    assert rice_kappa(n) == pytest.approx(kappa, rel=1e-6)


def test_rice_kappa_flat_table():
    # flat spectrum on [0, F]: nu0 = F / sqrt 3
    flat = lambda f: np.ones_like(np.asarray(f, dtype=float))
    assert rice_kappa(psd=flat, f_max=0.2, peaking_time=5.0) == pytest.approx(
        0.2 / math.sqrt(3) * 5.0, rel=1e-9)
    with pytest.raises(ValueError):
        rice_kappa(1)


def rice_curve(f0, sigma, x=None, live=1e6):
    x = np.linspace(-12, 12, 25) if x is None else x
    rate = f0 * np.exp(-x**2 / (2 * sigma**2))
    counts = rate * live * 1e-3
    return ScanCurve("noise_occupancy", x, rate, poisson_rate_errors(counts, live),
                     counts=counts, exposure=np.full(x.size, live))


def test_rice_fit_recovers_exact_curve():
    kappa = rice_kappa(3)
    fit = fit_rice(rice_curve(kappa / 5.3 * 1e3, 2.9))
    assert isinstance(fit, RiceFit)
    assert fit.f0 == pytest.approx(kappa / 5.3 * 1e3, rel=1e-7)
    assert fit.sigma == pytest.approx(2.9, rel=1e-7)
    assert fit.peaking_time_est == pytest.approx(5.3, rel=1e-7)
    assert fit.r2_log == pytest.approx(1.0)


def test_rice_fit_with_center():
    x = np.linspace(-10, 14, 25)
    rate = 90.0 * np.exp(-(x - 2.0) ** 2 / (2 * 2.9**2))
    curve = ScanCurve("noise_occupancy", x, rate, 0.01 * rate + 1e-3, counts=rate * 1e3)
    est = RiceRateRegressor(fit_center=True).fit(curve.x, curve.y, 1.0 / curve.y_err**2)
    assert est.center_ == pytest.approx(2.0, abs=1e-6)
    assert est.sigma_ == pytest.approx(2.9, rel=1e-6)


def test_rice_fit_range_contiguous():
    c = rice_curve(90.0, 2.9, live=1e5)
    idx = rice_fit_range(c, min_counts=10)
    assert np.all(np.diff(idx) == 1)
    assert np.all(c.counts[idx] >= 10)
    lo, hi = idx[0], idx[-1]
    assert lo == 0 or c.counts[lo - 1] < 10
    assert hi == c.x.size - 1 or c.counts[hi + 1] < 10


def test_rice_fit_guards():
    with pytest.raises(FitError):
        fit_rice(rice_curve(90.0, 2.9, x=np.linspace(3, 12, 10)))
    with pytest.raises(FitError):
        fit_rice(rice_curve(90.0, 2.9, x=np.linspace(-3, 3, 7)))
    with pytest.raises(FitError):
        fit_rice(rice_curve(90.0, 2.9, live=1.0))
    with pytest.raises(ValueError):
        fit_rice(synthetic_scurve(60.0, 2.9))


def test_noise_occupancy_scan_and_fit():
    sim = ChannelSimulator(ChipConfig())
    curve = run_noise_occupancy(sim, np.linspace(-9, 9, 13), 5.3e5)
    fit = fit_rice(curve)
    assert fit.peaking_time_est == pytest.approx(5.3, rel=0.05)
    assert fit.sigma == pytest.approx(2.9, rel=0.05)
    assert curve.meta["low_statistics"] == [bool(c < 100) for c in curve.counts]


def test_noise_occupancy_warns_on_starved_centre():
    sim = ChannelSimulator(ChipConfig())
    with pytest.warns(RuntimeWarning):
        run_noise_occupancy(sim, [-1.0, 0.0, 1.0], 100.0)


# --- time walk --------------------------------------------------------------

def _walk_oracle(tp, charges, thr):
    g = lambda x, r: x**3 * math.exp(3 * (1 - x)) - r
    lo = brentq(g, 1e-9, 1.0, args=(thr / min(charges),))
    hi = brentq(g, 1e-9, 1.0, args=(thr / max(charges),))
    return tp * (lo - hi)


def test_ideal_walk_frozen_values():
    assert ideal_time_walk(PulseShape.crrc(5.3), WALK_CHARGES, 1.0) == pytest.approx(
        2.5868823, abs=1e-6)
    assert ideal_time_walk(PulseShape.crrc(8.0), WALK_CHARGES, 1.0) == pytest.approx(
        3.904728, abs=1e-6)
    assert ideal_crossing_fraction(PulseShape.crrc(1.0), 1 / 1.2) == pytest.approx(0.6906465,
                                                                                  abs=1e-6)


@settings(max_examples=30)
@given(tp=st.floats(3, 12), thr=st.floats(0.2, 2), spread=st.floats(1.1, 20))
def test_ideal_walk_matches_root_oracle(tp, thr, spread):
    charges = [thr * 1.05, thr * 1.05 * spread]
    assert ideal_time_walk(PulseShape.crrc(tp), charges, thr) == pytest.approx(
        _walk_oracle(tp, charges, thr), abs=1e-8)


def test_ideal_walk_guards():
    with pytest.raises(ValueError):
        ideal_time_walk(PulseShape.crrc(5.3), [1.0, 2.0], 1.0)
    with pytest.raises(ValueError):
        ideal_crossing_fraction(PulseShape.crrc(5.3), 1.0)


def test_measured_walk_matches_ideal_when_noiseless():
    sim = ChannelSimulator(ChipConfig().with_all_channels(noise_sigma=0.0))
    res = measure_time_walk(sim, WALK_CHARGES, 1.0, 100)
    assert res.walk == pytest.approx(2.5868823, abs=0.01)
    assert np.all(np.diff(res.curve.y) < 0)
    assert np.all(np.diff(res.tot) > 0)


def test_measured_walk_sorts_charges():
    sim = ChannelSimulator(ChipConfig().with_all_channels(noise_sigma=0.0))
    res = measure_time_walk(sim, WALK_CHARGES[::-1], 1.0, 100)
    np.testing.assert_array_equal(res.curve.x, sorted(WALK_CHARGES))
    with pytest.raises(ValueError):
        measure_time_walk(sim, [0.5, 2.0], 1.0, 100)


def test_calibrated_overdrive_delay_hits_target():
    chip = ChipConfig().with_all_channels(noise_sigma=0.0)
    sim = ChannelSimulator(chip)
    od = calibrate_overdrive_delay(sim, WALK_CHARGES, 1.0, 4.5, p=0.5, v_ovd0=10.0)
    slow = ChannelSimulator(ChipConfig(overdrive_delay=od).with_all_channels(noise_sigma=0.0))
    assert measure_time_walk(slow, WALK_CHARGES, 1.0, 100).walk == pytest.approx(4.5, abs=0.01)
    with pytest.raises(ValueError):
        calibrate_overdrive_delay(sim, WALK_CHARGES, 1.0, 1.0)


# --- scans and reports ------------------------------------------------------

def test_threshold_scan_parallel_equals_serial():
    sim = ChannelSimulator(ChipConfig(rng_seed=3))
    v = np.linspace(55, 65, 5)
    a = run_threshold_scan(sim, 1.0, v, 300, jobs=1)
    b = run_threshold_scan(sim, 1.0, v, 300, jobs=3)
    np.testing.assert_array_equal(a.y, b.y)
    with pytest.raises(ValueError):
        run_threshold_scan(sim, 1.0, v, 50)


def test_threshold_scan_keeps_hits():
    sim = ChannelSimulator(ChipConfig())
    c = run_threshold_scan(sim, 1.0, [50.0, 60.0], 200, keep_hits=True)
    assert len(c.meta["hits"]) == int(c.counts.sum())


def test_fit_report_shapes():
    curve = synthetic_scurve(60.0, 2.9)
    rep = fit_report("threshold_scan", fit_scurve(curve), curve)
    assert set(rep) == {"kind", "params", "errors", "chi2_ndf", "inputs_digest"}
    assert rep["inputs_digest"] == curve.digest()
    assert rep["params"]["median"] == pytest.approx(60.0)
    rc = rice_curve(90.0, 2.9)
    rr = fit_report("noise_occupancy", fit_rice(rc), rc)
    assert rr["params"]["peaking_time_est"] == pytest.approx(rice_kappa(3) / 0.09)
    other = fit_report("gain", {"gain": 60.0}, inputs={"a": 1})
    assert other["chi2_ndf"] is None and len(other["inputs_digest"]) == 64


def test_rice_kappa_with_noise_spec_table():
    spec = NoiseSpec(1.0, ((0.0, 0.5), (1.0, 1.0)))
    shape = PulseShape.crrc(5.3)
    k = rice_kappa(psd=lambda f: spec.psd(f, shape), f_max=0.5)
    assert k == pytest.approx(0.5 / math.sqrt(3), rel=1e-9)
