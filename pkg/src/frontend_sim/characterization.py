"""Bench-test procedures: threshold scans, S-curve and Rice fits, gain, ENC,
time walk.

The fitters follow the scikit-learn estimator protocol (``fit`` returns
``self``, fitted attributes end in ``_``, ``predict`` evaluates the model),
so they compose with ``sklearn`` utilities such as ``clone`` and
``get_params``. The procedural functions (``fit_scurve``, ``fit_rice``,
``extract_gain``) wrap them for :class:`ScanCurve` inputs.
"""

import hashlib
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize
from scipy.special import erfc
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import constants as C
from .channel_sim import OverdriveDelay
from ._validation import check_positive, check_strictly_monotone
from .shaping import PulseShape

SCAN_KINDS = ("threshold_scan", "noise_occupancy", "time_walk")

# stream identifiers under the simulator's injection / noise streams
_KIND_ID = {"threshold_scan": 1, "noise_occupancy": 2, "time_walk": 3}


class FitError(RuntimeError):
    """A fit could not be set up or did not converge."""


@dataclass
class ScanCurve:
    kind: str
    x: np.ndarray
    y: np.ndarray
    y_err: np.ndarray
    counts: np.ndarray | None = None  # fired injections or noise crossings
    exposure: np.ndarray | None = None  # injections per point, or live time in ns
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SCAN_KINDS:
            raise ValueError(f"unknown scan kind {self.kind!r}")
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.y_err = np.asarray(self.y_err, dtype=float)
        if not (self.x.shape == self.y.shape == self.y_err.shape) or self.x.ndim != 1:
            raise ValueError("x, y, y_err must be 1-D and equal length")
        check_strictly_monotone(self.x)
        if np.any(self.y_err < 0):
            raise ValueError("y_err must be >= 0")
        if self.kind == "threshold_scan" and np.any((self.y < 0) | (self.y > 1)):
            raise ValueError("occupancy must lie in [0, 1]")
        for name in ("counts", "exposure"):
            val = getattr(self, name)
            if val is not None:
                setattr(self, name, np.asarray(val, dtype=float))

    def digest(self):
        payload = json.dumps({"kind": self.kind, "x": self.x.tolist(), "y": self.y.tolist(),
                              "y_err": self.y_err.tolist()}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass(frozen=True)
class SCurveFit:
    median: float
    sigma: float
    chi2_ndf: float
    covariance: tuple  # 2x2 over (median, sigma)

    @property
    def errors(self):
        cov = np.asarray(self.covariance)
        return float(np.sqrt(cov[0, 0])), float(np.sqrt(cov[1, 1]))


@dataclass(frozen=True)
class RiceFit:
    f0: float  # MHz
    sigma: float  # mV
    peaking_time_est: float  # ns
    chi2_ndf: float = float("nan")
    r2_log: float = float("nan")
    covariance: tuple = ()
    n_points: int = 0


def _column(X):
    X = check_array(X, ensure_2d=False, dtype=float)
    if X.ndim == 2:
        if X.shape[1] != 1:
            raise ValueError("expected a single feature column")
        X = X[:, 0]
    return X


def _sigma_from_weight(sample_weight, n):
    if sample_weight is None:
        return None
    w = np.asarray(sample_weight, dtype=float)
    if w.shape != (n,) or np.any(w <= 0):
        raise ValueError("sample_weight must be positive, one per sample")
    return 1.0 / np.sqrt(w)


def scurve(v, median, sigma):
    """Falling S-curve occupancy at threshold ``v``."""
    return 0.5 * erfc((np.asarray(v, dtype=float) - median) / (np.sqrt(2) * sigma))


def _crossing(x, y, level):
    """Threshold where a falling curve first drops through ``level`` (linear interp)."""
    below = np.flatnonzero(y <= level)
    if below.size == 0 or below[0] == 0:
        raise FitError(f"curve does not cross occupancy {level}")
    i = below[0]
    x0, x1, y0, y1 = x[i - 1], x[i], y[i - 1], y[i]
    return x0 if y1 == y0 else x0 + (level - y0) * (x1 - x0) / (y1 - y0)


class SCurveRegressor(RegressorMixin, BaseEstimator):
    """Weighted least-squares fit of ``0.5 * erfc((v - median) / (sqrt(2) sigma))``.

    ``X`` holds thresholds (strictly increasing), ``y`` occupancies and
    ``sample_weight`` the inverse variances.

    Attributes
    ----------
    median_, sigma_ : float
    covariance_ : ndarray of shape (2, 2)
    chi2_ndf_ : float
    """

    def __init__(self, max_nfev=2000, tol=1e-12):
        self.max_nfev = max_nfev
        self.tol = tol

    def fit(self, X, y, sample_weight=None):
        x = _column(X)
        x, y = check_X_y(x.reshape(-1, 1), y, y_numeric=True)
        x = x[:, 0]
        if x.size < 3:
            raise FitError("need at least 3 scan points")
        if np.any(np.diff(x) <= 0):
            raise ValueError("thresholds must be strictly increasing")
        if not (y[0] > 0.5 > y[-1]):
            raise FitError("scan does not bracket 50% occupancy from above")
        err = _sigma_from_weight(sample_weight, x.size)

        med0 = _crossing(x, y, 0.5)
        try:
            width = 0.5 * (_crossing(x, y, 0.1587) - _crossing(x, y, 0.8413))
        except FitError:
            width = 0.0
        if not width > 0:
            width = max(np.min(np.diff(x)), 1e-6 * max(1.0, abs(med0)))

        try:
            popt, pcov = optimize.curve_fit(
                scurve, x, y, p0=(med0, width), sigma=err, absolute_sigma=err is not None,
                bounds=((-np.inf, 1e-12), (np.inf, np.inf)), method="trf",
                xtol=self.tol, ftol=self.tol, gtol=self.tol, max_nfev=self.max_nfev)
        except (RuntimeError, optimize.OptimizeWarning) as exc:
            raise FitError(f"S-curve fit did not converge: {exc}") from exc
        resid = (y - scurve(x, *popt)) / (1.0 if err is None else err)
        ndf = max(x.size - 2, 1)
        self.median_, self.sigma_ = float(popt[0]), float(popt[1])
        self.covariance_ = pcov
        self.chi2_ndf_ = float(np.sum(resid**2) / ndf)
        return self

    def predict(self, X):
        check_is_fitted(self, "median_")
        return scurve(_column(X), self.median_, self.sigma_)


def rice_kappa(order=3, psd=None, peaking_time=1.0, f_max=None):
    """Dimensionless ``nu0 * tp`` for noise with spectrum ``psd(f)``.

    ``nu0 = sqrt(m2 / m0)`` with ``m_k = int f^k psd(f) df`` (f in GHz) is the
    Rice zero-crossing rate. Without ``psd`` the CR-RC^``order`` shaper
    spectrum is used, which needs ``order >= 2`` for a finite ``m2``.
    """
    shape = PulseShape.crrc(peaking_time, order)
    if psd is None:
        if order < 2:
            raise ValueError("second spectral moment diverges for order 1")
        psd = shape.magnitude_sq
    upper = np.inf if f_max is None else f_max
    # put the bulk of the spectrum inside the first quadrature panel
    f_c = 1.0 / (2 * np.pi * shape.tau)

    def moment(k):
        a, _ = integrate.quad(lambda f: f**k * psd(f), 0.0, 20 * f_c, limit=400,
                              epsabs=0, epsrel=1e-12)
        b, _ = integrate.quad(lambda f: f**k * psd(f), 20 * f_c, upper, limit=400,
                              epsabs=0, epsrel=1e-12)
        return a + b

    return float(np.sqrt(moment(2) / moment(0)) * peaking_time)


def _rice_model(v, f0, sigma, center=0.0):
    return f0 * np.exp(-((np.asarray(v, dtype=float) - center) ** 2) / (2 * sigma**2))


class RiceRateRegressor(RegressorMixin, BaseEstimator):
    """Weighted fit of a noise-occupancy curve to ``f0 * exp(-(v-c)^2 / 2 sigma^2)``.

    The peaking time follows from the zero-threshold rate as
    ``kappa / f0`` where ``kappa = nu0 * tp`` of the shaper (``order``) or is
    given directly.

    Attributes
    ----------
    f0_ : float, MHz
    sigma_ : float, mV
    center_ : float, mV
    peaking_time_ : float, ns
    r2_log_ : float
        R^2 of log(rate) against v^2 (a straight line for Gaussian noise).
    """

    def __init__(self, order=3, kappa=None, fit_center=False, tol=1e-12, max_nfev=2000):
        self.order = order
        self.kappa = kappa
        self.fit_center = fit_center
        self.tol = tol
        self.max_nfev = max_nfev

    def fit(self, X, y, sample_weight=None):
        x = _column(X)
        x, y = check_X_y(x.reshape(-1, 1), y, y_numeric=True)
        x = x[:, 0]
        if x.size < 3:
            raise FitError("need at least 3 points")
        if np.any(y <= 0):
            raise FitError("rates must be positive")
        err = _sigma_from_weight(sample_weight, x.size)

        # log-parabola gives the starting point
        coef = np.polyfit(x, np.log(y), 2)
        if coef[0] >= 0:
            raise FitError("rate curve is not peaked")
        s0 = np.sqrt(-1.0 / (2 * coef[0]))
        c0 = -coef[1] / (2 * coef[0]) if self.fit_center else 0.0
        f00 = float(np.max(y))
        p0 = (f00, s0, c0) if self.fit_center else (f00, s0)
        model = _rice_model if self.fit_center else (lambda v, f0, s: _rice_model(v, f0, s))
        lower = (0.0, 1e-12, -np.inf) if self.fit_center else (0.0, 1e-12)
        try:
            popt, pcov = optimize.curve_fit(
                model, x, y, p0=p0, sigma=err, absolute_sigma=err is not None,
                bounds=(lower, np.inf), method="trf",
                xtol=self.tol, ftol=self.tol, gtol=self.tol, max_nfev=self.max_nfev)
        except (RuntimeError, optimize.OptimizeWarning) as exc:
            raise FitError(f"Rice fit did not converge: {exc}") from exc
        if not popt[1] > 0:
            raise FitError("non-positive fitted sigma")
        self.f0_, self.sigma_ = float(popt[0]), float(popt[1])
        self.center_ = float(popt[2]) if self.fit_center else 0.0
        self.covariance_ = pcov
        resid = (y - model(x, *popt)) / (1.0 if err is None else err)
        self.chi2_ndf_ = float(np.sum(resid**2) / max(x.size - len(popt), 1))

        u = (x - self.center_) ** 2
        lin = np.polyfit(u, np.log(y), 1)
        ss_res = np.sum((np.log(y) - np.polyval(lin, u)) ** 2)
        ss_tot = np.sum((np.log(y) - np.mean(np.log(y))) ** 2)
        self.r2_log_ = float(1.0 - ss_res / ss_tot) if ss_tot > 0 else 1.0

        kappa = self.kappa if self.kappa is not None else rice_kappa(self.order)
        self.kappa_ = float(kappa)
        # f0 is in MHz, kappa is nu0 * tp with nu0 in GHz
        self.peaking_time_ = self.kappa_ / (self.f0_ * 1e-3)
        return self

    def predict(self, X):
        check_is_fitted(self, "f0_")
        return _rice_model(_column(X), self.f0_, self.sigma_, self.center_)


class GainRegressor(RegressorMixin, BaseEstimator):
    """Straight line through S-curve medians versus injected charge.

    Attributes
    ----------
    gain_ : float
        Slope, mV/fC.
    offset_ : float
        Intercept, mV.
    """

    def fit(self, X, y, sample_weight=None):
        q = _column(X)
        q, y = check_X_y(q.reshape(-1, 1), y, y_numeric=True)
        q = q[:, 0]
        if q.size < 2:
            raise ValueError("need at least 2 charges")
        if np.unique(q).size < 2:
            raise ValueError("charges are all identical")
        w = None if sample_weight is None else np.sqrt(np.asarray(sample_weight, dtype=float))
        self.gain_, self.offset_ = (float(c) for c in np.polyfit(q, y, 1, w=w))
        return self

    def predict(self, X):
        check_is_fitted(self, "gain_")
        return self.gain_ * _column(X) + self.offset_


def _weights(curve):
    return 1.0 / curve.y_err**2


def binomial_errors(k, n):
    """Occupancy errors with a one-count floor at 0% and 100%."""
    k = np.clip(np.asarray(k, dtype=float), 1.0, np.asarray(n, dtype=float) - 1.0)
    p = k / n
    return np.sqrt(p * (1.0 - p) / n)


def poisson_rate_errors(counts, live_ns):
    """Rate errors in MHz with a one-count floor."""
    return np.sqrt(np.maximum(np.asarray(counts, dtype=float), 1.0)) / live_ns * 1e3


def fit_scurve(curve, estimator=None):
    """Fit a threshold scan; returns :class:`SCurveFit`."""
    if curve.kind != "threshold_scan":
        raise ValueError("fit_scurve needs a threshold_scan curve")
    if np.any(np.diff(curve.x) <= 0):
        raise ValueError("threshold axis is reversed; scans must be increasing in threshold")
    est = estimator if estimator is not None else SCurveRegressor()
    est.fit(curve.x, curve.y, sample_weight=_weights(curve))
    return SCurveFit(est.median_, est.sigma_, est.chi2_ndf_,
                     tuple(map(tuple, np.asarray(est.covariance_))))


def rice_fit_range(curve, min_counts=10):
    """Indices used by the Rice fit: the run around the rate maximum out to the
    last points on each side with at least ``min_counts`` crossings."""
    counts = curve.counts
    if counts is None:
        counts = (curve.y / np.where(curve.y_err > 0, curve.y_err, np.inf)) ** 2
    ok = counts >= min_counts
    if not ok.any():
        raise FitError("no point has enough counts")
    peak = int(np.argmax(np.where(ok, curve.y, -np.inf)))
    lo = peak
    while lo > 0 and ok[lo - 1]:
        lo -= 1
    hi = peak
    while hi < ok.size - 1 and ok[hi + 1]:
        hi += 1
    return np.arange(lo, hi + 1)


def fit_rice(curve, order=3, kappa=None, min_counts=10, fit_center=False):
    """Fit a noise-occupancy scan; returns :class:`RiceFit`."""
    if curve.kind != "noise_occupancy":
        raise ValueError("fit_rice needs a noise_occupancy curve")
    idx = rice_fit_range(curve, min_counts)
    x, y, err = curve.x[idx], curve.y[idx], curve.y_err[idx]
    est = RiceRateRegressor(order=order, kappa=kappa, fit_center=fit_center)
    est.fit(x, y, sample_weight=1.0 / err**2)
    near = np.min(np.abs(x - est.center_))
    far = np.max(np.abs(x - est.center_))
    if near > 0.5 * est.sigma_:
        raise FitError("scan has no point near zero threshold")
    if far < 2.0 * est.sigma_:
        raise FitError("scan does not extend beyond 2 sigma")
    return RiceFit(est.f0_, est.sigma_, est.peaking_time_, est.chi2_ndf_, est.r2_log_,
                   tuple(map(tuple, np.asarray(est.covariance_))), int(idx.size))


def extract_gain(fits):
    """Gain (mV/fC) and offset (mV) from ``[(q_fc, SCurveFit), ...]``."""
    fits = list(fits)
    if len(fits) < 2:
        raise ValueError("need at least 2 charges")
    q = np.array([f[0] for f in fits], dtype=float)
    med = np.array([f[1].median for f in fits])
    est = GainRegressor().fit(q, med)
    return est.gain_, est.offset_


def enc_from_noise(sigma, gain):
    """Input-referred ENC in electrons from output noise (mV) and gain (mV/fC)."""
    check_positive(sigma, "sigma", strict=False)
    if gain == 0:
        raise ZeroDivisionError("gain is zero")
    check_positive(gain, "gain")
    return sigma / gain * C.ELECTRONS_PER_FC


def _map(fn, items, jobs=1):
    items = list(items)
    if jobs is None or jobs <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _qkey(q):
    return int(round(q * 1e4))


def run_threshold_scan(sim, q, thresholds, n_inj, jobs=1, keep_hits=False):
    """Occupancy versus threshold (mV) for ``n_inj`` injections of ``q`` fC."""
    if n_inj < 100:
        raise ValueError("n_inj must be >= 100")
    thresholds = np.asarray(thresholds, dtype=float)

    def point(item):
        i, v = item
        return sim.simulate_injections(q, n_inj, v, key=(_KIND_ID["threshold_scan"], _qkey(q), i))

    results = _map(point, enumerate(thresholds), jobs)
    k = np.array([r.n_fired for r in results], dtype=float)
    curve = ScanCurve("threshold_scan", thresholds, k / n_inj, binomial_errors(k, n_inj),
                      counts=k, exposure=np.full(k.size, float(n_inj)),
                      meta={"q_fc": float(q), "channel": sim.channel,
                            "peaking_time": sim.peaking_time})
    if keep_hits:
        curve.meta["hits"] = [h for r in results for h in r.hits]
    return curve


def run_noise_occupancy(sim, thresholds, duration, jobs=1, min_counts=100):
    """Noise crossing rate (MHz) versus threshold (mV) without injection."""
    thresholds = np.asarray(thresholds, dtype=float)

    def point(item):
        i, v = item
        return sim.noise_counts(v, duration, key=(_KIND_ID["noise_occupancy"], i))

    results = _map(point, enumerate(thresholds), jobs)
    counts = np.array([r[0] for r in results], dtype=float)
    live = np.array([r[1] for r in results])
    flags = [bool(c < min_counts) for c in counts]
    i0 = int(np.argmin(np.abs(thresholds)))
    if sim.noise.output_sigma > 0 and flags[i0]:
        warnings.warn(f"only {int(counts[i0])} counts at the lowest |threshold|; "
                      "increase duration", RuntimeWarning, stacklevel=2)
    return ScanCurve("noise_occupancy", thresholds, counts / live * 1e3,
                     poisson_rate_errors(counts, live), counts=counts, exposure=live,
                     meta={"channel": sim.channel, "low_statistics": flags,
                           "peaking_time": sim.peaking_time})


@dataclass
class TimeWalkResult:
    curve: ScanCurve  # x: charge fC, y: mean delay ns
    walk: float  # ns
    tot: np.ndarray  # mean ToT per charge, ns
    tot_err: np.ndarray


def measure_time_walk(sim, charges, threshold, n_inj, jobs=1):
    """Mean discriminator delay versus charge at a threshold given in fC.

    Delays are measured from the injection strobe. ``walk`` is the delay at
    the smallest charge minus the delay at the largest.
    """
    charges = np.asarray(charges, dtype=float)
    if np.any(charges <= threshold):
        raise ValueError("every charge must exceed the threshold charge")
    order = np.argsort(charges)
    charges = charges[order]
    v_th = sim.gain * threshold

    def point(item):
        i, q = item
        return sim.simulate_injections(q, n_inj, v_th, key=(_KIND_ID["time_walk"], _qkey(q), i))

    results = _map(point, enumerate(charges), jobs)
    delay, derr, tot, terr = [], [], [], []
    for q, r in zip(charges, results):
        if r.n_fired == 0:
            raise FitError(f"no hits at {q} fC")
        ct, tt = r.crossing_times, r.tots
        delay.append(ct.mean())
        derr.append(ct.std(ddof=1) / np.sqrt(ct.size) if ct.size > 1 else 0.0)
        tot.append(tt.mean())
        terr.append(tt.std(ddof=1) / np.sqrt(tt.size) if tt.size > 1 else 0.0)
    curve = ScanCurve("time_walk", charges, delay, derr,
                      meta={"threshold_fc": float(threshold), "channel": sim.channel,
                            "peaking_time": sim.peaking_time})
    return TimeWalkResult(curve, float(delay[0] - delay[-1]), np.array(tot), np.array(terr))


def ideal_crossing_fraction(shape, ratio):
    """Rising-edge solution ``x = t/tp`` of ``w(x tp) = ratio`` for 0 < ratio < 1."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must be in (0, 1)")
    f = lambda x: shape.response(x * shape.peaking_time) - ratio
    return optimize.brentq(f, 0.0, 1.0, xtol=1e-14)


def ideal_time_walk(shape, charges, threshold):
    """Noiseless LED walk (ns) between the smallest and largest charge."""
    lo, hi = min(charges), max(charges)
    if lo <= threshold:
        raise ValueError("every charge must exceed the threshold charge")
    x_lo = ideal_crossing_fraction(shape, threshold / lo)
    x_hi = ideal_crossing_fraction(shape, threshold / hi)
    return shape.peaking_time * (x_lo - x_hi)


def calibrate_overdrive_delay(sim, charges, threshold, target_walk, p=1.0, v_ovd0=1.0):
    """Scale ``d0`` of the comparator delay hook so the noiseless walk equals
    ``target_walk``. Returns an :class:`~frontend_sim.channel_sim.OverdriveDelay`."""
    base = ideal_time_walk(sim.shape, charges, threshold)
    unit = OverdriveDelay(1.0, v_ovd0, p)
    v_lo = sim.gain * (min(charges) - threshold)
    v_hi = sim.gain * (max(charges) - threshold)
    spread = float(unit(v_lo) - unit(v_hi))
    d0 = (target_walk - base) / spread
    if d0 < 0:
        raise ValueError(f"target walk {target_walk} ns is below the ideal {base:.3f} ns")
    return OverdriveDelay(d0, v_ovd0, p)


def fit_report(kind, fit, curve=None, inputs=None):
    """JSON-ready fit report ``{kind, params, errors, chi2_ndf, inputs_digest}``."""
    if isinstance(fit, SCurveFit):
        params = {"median": fit.median, "sigma": fit.sigma}
        e_med, e_sig = fit.errors
        errors = {"median": e_med, "sigma": e_sig}
        chi2 = fit.chi2_ndf
    elif isinstance(fit, RiceFit):
        params = {"f0_mhz": fit.f0, "sigma": fit.sigma, "peaking_time_est": fit.peaking_time_est,
                  "r2_log": fit.r2_log}
        cov = np.asarray(fit.covariance)
        errors = {"f0_mhz": float(np.sqrt(cov[0, 0])), "sigma": float(np.sqrt(cov[1, 1]))}
        chi2 = fit.chi2_ndf
    else:
        params = dict(fit)
        errors = {}
        chi2 = None
    if curve is not None:
        digest = curve.digest()
    else:
        digest = hashlib.sha256(json.dumps(inputs, sort_keys=True, default=str).encode()).hexdigest()
    return {"kind": kind, "params": params, "errors": errors,
            "chi2_ndf": None if chi2 is None or not np.isfinite(chi2) else chi2,
            "inputs_digest": digest}

