"""Equivalent noise charge of a CR-RC^n front-end.

Two noise sources are modelled at the preamplifier input:

* parallel shot noise of the sensor leakage current, white current PSD
  ``2 q I`` (one-sided);
* series channel-thermal noise of the input transistor, white voltage PSD
  ``4 k T gamma / gm`` (one-sided), seen through the total input capacitance.

Their ENC follows from the time-domain weighting function by Parseval:

    ENC_p^2 = q I * A_p * tp
    ENC_s^2 = (e_n^2 / 2) * C^2 * A_s / tp

with the dimensionless shape factors ``A_p = (1/tp) int w^2 dt`` and
``A_s = tp int (dw/dt)^2 dt``. 1/f noise and the feedback resistor are not
included.
"""

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import constants as C
from ._validation import check_positive
from .shaping import PulseShape

#: Leakage current damage constant at +20 C, A/cm.
DEFAULT_ALPHA = 4.0e-17
#: Effective band gap for leakage temperature scaling, eV.
DEFAULT_EG_EFF = 1.21
T_REF_LEAKAGE = C.celsius(20.0)

PAD_AREA_CM2 = 0.17 * 0.17


@dataclass(frozen=True)
class ProcessParams:
    """Input-device process constants.

    Defaults are plausible for a 65 nm NMOS; they are not measured values
    and every field can be overridden.
    """

    cox_per_area: float = 15.0  # fF/um^2
    subthreshold_slope_factor: float = 1.3
    tech_current: float = 0.6  # uA, specific current per square
    excess_noise_gamma: float = 0.6
    temperature: float = C.celsius(-20.0)  # K
    overlap_cap_per_width: float = 0.4  # fF/um
    include_gate_capacitance: bool = True
    # reserved hook; no 1/f term is evaluated yet
    flicker_coefficient: float = 0.0

    def __post_init__(self):
        for name in ("cox_per_area", "subthreshold_slope_factor", "tech_current",
                     "excess_noise_gamma", "temperature"):
            check_positive(getattr(self, name), name)
        check_positive(self.overlap_cap_per_width, "overlap_cap_per_width", strict=False)
        if self.flicker_coefficient:
            raise NotImplementedError("1/f noise is not modelled")


@dataclass(frozen=True)
class InputTransistor:
    width: float = 2000.0  # um
    length: float = 0.2  # um
    drain_current: float = 2.0  # mA
    process: ProcessParams = field(default_factory=ProcessParams)

    def __post_init__(self):
        check_positive(self.width, "width")
        check_positive(self.length, "length")
        check_positive(self.drain_current, "drain_current")

    @property
    def inversion_coefficient(self):
        i_spec_ma = self.process.tech_current * 1e-3 * self.width / self.length
        return self.drain_current / i_spec_ma

    def gate_capacitance(self):
        """Gate capacitance seen at the input, pF."""
        p = self.process
        if not p.include_gate_capacitance:
            return 0.0
        c_gs = 2.0 / 3.0 * self.width * self.length * p.cox_per_area
        c_ov = self.width * p.overlap_cap_per_width
        return (c_gs + c_ov) * 1e-3

    def noise_voltage_sq(self):
        """One-sided white series noise, V^2/Hz."""
        p = self.process
        gm_s = gm_ekv(self) * 1e-3
        return 4.0 * C.K_B * p.temperature * p.excess_noise_gamma / gm_s


@dataclass(frozen=True)
class SensorModel:
    thickness: float = 150.0  # um
    capacitance: float = 4.0  # pF
    fluence: float = 0.0  # n_eq/cm^2
    cce: float = 1.0
    active_area: float = PAD_AREA_CM2  # cm^2
    leakage_ref: float = 0.0  # uA at temperature_ref
    temperature_ref: float = T_REF_LEAKAGE  # K

    def __post_init__(self):
        check_positive(self.thickness, "thickness")
        check_positive(self.capacitance, "capacitance", strict=False)
        check_positive(self.fluence, "fluence", strict=False)
        check_positive(self.active_area, "active_area")
        check_positive(self.leakage_ref, "leakage_ref", strict=False)
        check_positive(self.temperature_ref, "temperature_ref")
        if not 0.0 < self.cce <= 1.0:
            raise ValueError(f"cce must be in (0, 1], got {self.cce}")

    @property
    def volume(self):
        """Depleted volume, cm^3."""
        return self.active_area * self.thickness * 1e-4

    def leakage_at(self, temperature, eg_eff=DEFAULT_EG_EFF):
        return scale_leakage_temperature(self.leakage_ref, self.temperature_ref,
                                         temperature, eg_eff)

    def irradiated(self, fluence, alpha=DEFAULT_ALPHA, cce=None):
        """Copy with ``fluence`` applied and ``leakage_ref`` filled from it."""
        s = replace(self, fluence=fluence, cce=self.cce if cce is None else cce)
        return replace(s, leakage_ref=leakage_from_fluence(s, alpha))


# 1.7 x 1.7 mm pads; capacitances as quoted for the two wafer options.
SENSOR_150UM = SensorModel(thickness=150.0, capacitance=4.0)
SENSOR_290UM = SensorModel(thickness=290.0, capacitance=2.0)


@dataclass(frozen=True)
class NoiseBudget:
    enc_parallel: float
    enc_series: float
    enc_total: float
    operating_point: tuple  # (c_pf, i_ua, tp_ns)

    def as_row(self):
        c_pf, i_ua, tp_ns = self.operating_point
        return {"tp_ns": tp_ns, "c_pf": c_pf, "i_ua": i_ua, "enc_p": self.enc_parallel,
                "enc_s": self.enc_series, "enc_tot": self.enc_total}


@lru_cache(maxsize=256)
def _shape_factors(order, peaking_time):
    shape = PulseShape.crrc(peaking_time, order)
    a_p = shape.integral(lambda t: shape.response(t) ** 2) / peaking_time
    a_s = shape.integral(lambda t: shape.derivative(t) ** 2) * peaking_time
    return a_p, a_s


def shape_factor_parallel(shape):
    """A_p = (1/tp) * integral of w(t)^2; independent of tp."""
    return _shape_factors(shape.order, shape.peaking_time)[0]


def shape_factor_series(shape):
    """A_s = tp * integral of (dw/dt)^2; independent of tp."""
    return _shape_factors(shape.order, shape.peaking_time)[1]


def leakage_from_fluence(sensor, alpha=DEFAULT_ALPHA):
    """Bulk leakage ``alpha * fluence * volume`` in uA at +20 C."""
    check_positive(sensor.fluence, "fluence", strict=False)
    return alpha * sensor.fluence * sensor.volume * 1e6


def scale_leakage_temperature(i_ref, t_ref, t, eg_eff=DEFAULT_EG_EFF):
    """Scale a leakage current from ``t_ref`` to ``t`` (kelvin)."""
    check_positive(t_ref, "t_ref")
    check_positive(t, "t")
    t = np.asarray(t, dtype=float)
    factor = (t / t_ref) ** 2 * np.exp(-eg_eff / (2 * C.K_B_EV) * (1.0 / t - 1.0 / t_ref))
    out = i_ref * factor
    return float(out) if out.ndim == 0 else out


def gm_ekv(tr):
    """Transconductance in mS from the inversion-coefficient interpolation."""
    p = tr.process
    u_t = C.thermal_voltage(p.temperature)
    ic = tr.inversion_coefficient
    return tr.drain_current / (p.subthreshold_slope_factor * u_t * (0.5 + np.sqrt(0.25 + ic)))


def enc_parallel(i_leak, shape):
    """Shot-noise ENC in electrons for leakage ``i_leak`` uA."""
    check_positive(i_leak, "i_leak", strict=False)
    var = C.Q_E * i_leak * 1e-6 * shape_factor_parallel(shape) * shape.peaking_time * 1e-9
    return float(np.sqrt(var) / C.Q_E)


def enc_series(c_in, tr, shape):
    """Series-noise ENC in electrons for detector capacitance ``c_in`` pF."""
    check_positive(c_in, "c_in", strict=False)
    c_tot = (c_in + tr.gate_capacitance()) * 1e-12
    var = 0.5 * tr.noise_voltage_sq() * c_tot**2 * shape_factor_series(shape) / (
        shape.peaking_time * 1e-9)
    return float(np.sqrt(var) / C.Q_E)


def enc_total(sensor, tr, shape, i_leak=None):
    """Quadrature sum of parallel and series ENC at one operating point.

    ``i_leak`` defaults to the sensor leakage scaled to the transistor's
    operating temperature.
    """
    if i_leak is None:
        i_leak = sensor.leakage_at(tr.process.temperature)
    p = enc_parallel(i_leak, shape)
    s = enc_series(sensor.capacitance, tr, shape)
    return NoiseBudget(p, s, float(np.hypot(p, s)),
                       (sensor.capacitance, float(i_leak), shape.peaking_time))


def optimal_peaking_time(sensor, tr, tp_grid, i_leak=None, order=3):
    """Grid argmin of total ENC; ties go to the faster (smaller) tp."""
    tp_grid = np.asarray(tp_grid, dtype=float)
    if tp_grid.size == 0:
        raise ValueError("tp_grid is empty")
    if np.any(np.diff(tp_grid) < 0):
        raise ValueError("tp_grid must be sorted ascending")
    budgets = [enc_total(sensor, tr, PulseShape.crrc(tp, order), i_leak) for tp in tp_grid]
    i = int(np.argmin([b.enc_total for b in budgets]))
    return float(tp_grid[i]), budgets[i]


def snr(signal_charge, cce, budget):
    """Signal-to-noise ratio for ``signal_charge`` fC collected with ``cce``."""
    check_positive(signal_charge, "signal_charge")
    if budget.enc_total <= 0:
        raise ZeroDivisionError("SNR undefined for zero noise")
    return C.fc_to_electrons(signal_charge * cce) / budget.enc_total


def enc_grid(tp_values, c_values, i_values, tr=None, order=3):
    """ENC decomposition over the full (C, I, tp) grid, in grid order.

    Returns a list of row dicts with keys tp_ns, c_pf, i_ua, enc_p, enc_s,
    enc_tot (plus w_um, id_ma of the transistor).
    """
    tr = tr or InputTransistor()
    rows = []
    for c in c_values:
        for i in i_values:
            for tp in tp_values:
                shape = PulseShape.crrc(float(tp), order)
                p = enc_parallel(float(i), shape)
                s = enc_series(float(c), tr, shape)
                rows.append({"tp_ns": float(tp), "c_pf": float(c), "i_ua": float(i),
                             "enc_p": p, "enc_s": s, "enc_tot": float(np.hypot(p, s)),
                             "w_um": tr.width, "id_ma": tr.drain_current})
    return rows
