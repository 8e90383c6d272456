"""CR-RC^n pulse shapes.

The shaper is one CR differentiator followed by ``n`` RC integrators, all
with the same time constant ``tau = tp / n``. For a charge delta at the
preamplifier input the output is the semi-Gaussian

    w(t) = (t / tp)**n * exp(n * (1 - t / tp)),

scaled so that the peak at ``t = tp`` is exactly 1. Times are in ns and
frequencies in GHz throughout.
"""

from dataclasses import dataclass, field
from functools import cached_property
from math import e, factorial

import numpy as np
from scipy import integrate

from ._validation import check_int_range, check_positive

RC_CODE_MIN = 0
RC_CODE_MAX = 6

#: Anchor points (rc_code, peaking time in ns) of the default code map.
DEFAULT_RC_ANCHORS = ((0, 5.0), (3, 5.3), (6, 9.0))


@dataclass(frozen=True)
class RCMap:
    """Monotone piecewise-linear map from RC filter code to peaking time."""

    anchors: tuple = DEFAULT_RC_ANCHORS

    def __post_init__(self):
        anchors = tuple(sorted((int(c), float(t)) for c, t in self.anchors))
        codes = [c for c, _ in anchors]
        times = [t for _, t in anchors]
        if codes[0] != RC_CODE_MIN or codes[-1] != RC_CODE_MAX:
            raise ValueError("RC map anchors must cover codes 0 and 6")
        if len(set(codes)) != len(codes):
            raise ValueError("duplicate RC codes in anchors")
        if np.any(np.diff(times) < 0):
            raise ValueError("RC map must be non-decreasing")
        check_positive(times, "anchor peaking times")
        object.__setattr__(self, "anchors", anchors)

    def __call__(self, code):
        check_int_range(code, "rc_code", RC_CODE_MIN, RC_CODE_MAX)
        codes, times = zip(*self.anchors)
        return float(np.interp(code, codes, times))


DEFAULT_RC_MAP = RCMap()


def peaking_time_from_rc(code, rc_map=None):
    """Peaking time in ns for an RC filter code in [0, 6]."""
    return (rc_map or DEFAULT_RC_MAP)(code)


@dataclass(frozen=True)
class ShaperConfig:
    peaking_time: float = 8.0
    order: int = 3
    rc_code: int | None = None

    def __post_init__(self):
        check_int_range(self.order, "order", 1, 64)
        check_positive(self.peaking_time, "peaking_time")
        if self.rc_code is not None:
            check_int_range(self.rc_code, "rc_code", RC_CODE_MIN, RC_CODE_MAX)

    @classmethod
    def from_rc(cls, code, order=3, rc_map=None):
        return cls(peaking_time=peaking_time_from_rc(code, rc_map), order=order, rc_code=code)

    @property
    def tau(self):
        return self.peaking_time / self.order


@dataclass(frozen=True)
class PulseShape:
    """Unit-peak CR-RC^n response. Immutable, safe to share between workers."""

    config: ShaperConfig = field(default_factory=ShaperConfig)

    @classmethod
    def crrc(cls, peaking_time, order=3):
        return cls(ShaperConfig(peaking_time=peaking_time, order=order))

    @property
    def order(self):
        return self.config.order

    @property
    def peaking_time(self):
        return self.config.peaking_time

    @property
    def tau(self):
        return self.config.tau

    @cached_property
    def norm(self):
        # scales tau / (1 + s tau)^(n+1) so its inverse transform peaks at 1
        n = self.order
        return factorial(n) * e**n / n**n

    def response(self, t):
        """w(t) for any real t, zero before the charge arrives."""
        t = np.asarray(t, dtype=float)
        x = np.clip(t, 0.0, None) / self.peaking_time
        n = self.order
        out = x**n * np.exp(n * (1.0 - x))
        return np.where(t >= 0, out, 0.0)

    def derivative(self, t):
        """dw/dt in 1/ns, zero before the charge arrives."""
        t = np.asarray(t, dtype=float)
        n, tp = self.order, self.peaking_time
        x = np.clip(t, 0.0, None) / tp
        out = (n / tp) * x ** (n - 1) * (1.0 - x) * np.exp(n * (1.0 - x))
        return np.where(t >= 0, out, 0.0)

    def transfer(self, f):
        """Complex voltage transfer of the CR-RC^n shaper at ``f`` GHz.

        Its step response is ``w``; equivalently ``transfer(f) / (2j*pi*f)``
        is the Fourier transform of ``w`` (in ns).
        """
        s_tau = 2j * np.pi * np.asarray(f, dtype=float) * self.tau
        return self.norm * s_tau / (1.0 + s_tau) ** (self.order + 1)

    def magnitude_sq(self, f):
        x2 = (2 * np.pi * np.asarray(f, dtype=float) * self.tau) ** 2
        return self.norm**2 * x2 / (1.0 + x2) ** (self.order + 1)

    def integral(self, func, upper_factor=20.0):
        """Integrate ``func(t)`` over [0, upper_factor * tp] adaptively.

        Truncating at 20 tp leaves a tail below exp(-19 n) of the envelope.
        """
        tp = self.peaking_time
        val, _ = integrate.quad(func, 0.0, upper_factor * tp, points=[tp],
                                epsabs=1e-9, epsrel=1e-12, limit=200)
        return val


def _check_time(t):
    if np.any(np.asarray(t) < 0):
        raise ValueError("t must be >= 0")


def weighting(shape, t):
    """Unit-peak delta response ``w(t)``; ``t`` in ns, must be >= 0."""
    _check_time(t)
    out = shape.response(t)
    return float(out) if out.ndim == 0 else out


def weighting_derivative(shape, t):
    """Exact ``dw/dt`` in 1/ns; ``t`` in ns, must be >= 0."""
    _check_time(t)
    out = shape.derivative(t)
    return float(out) if out.ndim == 0 else out


def transfer_magnitude_sq(shape, f):
    """``|H(f)|^2`` of the CR-RC^n shaper, ``f`` in GHz, ``f >= 0``."""
    if np.any(np.asarray(f) < 0):
        raise ValueError("f must be >= 0")
    out = shape.magnitude_sq(f)
    return float(out) if out.ndim == 0 else out
