"""Physical constants and unit conversions.

Internal unit canon: ns, pF, uA, mV, fC. Electrons appear only at the
ENC / SNR boundary.
"""

from scipy import constants as _c

Q_E = _c.elementary_charge  # C
K_B = _c.Boltzmann  # J/K
K_B_EV = _c.Boltzmann / _c.elementary_charge  # eV/K

ELECTRONS_PER_FC = 6241.5

ZERO_CELSIUS = 273.15


def celsius(t_c):
    """Convert degrees Celsius to kelvin."""
    return t_c + ZERO_CELSIUS


def fc_to_electrons(q_fc):
    return q_fc * ELECTRONS_PER_FC


def electrons_to_fc(n_e):
    return n_e / ELECTRONS_PER_FC


def thermal_voltage(temperature):
    """kT/q in volts."""
    return K_B * temperature / Q_E
