"""Simulation and characterization of binary silicon-sensor front-ends.

Modules
-------
shaping           CR-RC^n weighting functions and the RC-code map
noise_model       leakage, shot/series ENC, optimal peaking time, SNR
channel_sim       Monte Carlo six-channel chip with LED and 800 ps sampling
characterization  threshold / noise-occupancy / time-walk procedures and fitters
"""

from .channel_sim import (ChannelConfig, ChannelSimulator, ChipConfig, HitRecord, NoiseSpec,
                          OverdriveDelay, injected_charge, sample_slvs, synth_noise,
                          threshold_voltage)
from .characterization import (GainRegressor, RiceFit, RiceRateRegressor, SCurveFit,
                               SCurveRegressor, ScanCurve, enc_from_noise, extract_gain,
                               fit_rice, fit_scurve, measure_time_walk, run_noise_occupancy,
                               run_threshold_scan)
from .noise_model import (InputTransistor, NoiseBudget, ProcessParams, SensorModel, enc_parallel,
                          enc_series, enc_total, gm_ekv, leakage_from_fluence,
                          optimal_peaking_time, scale_leakage_temperature, snr)
from .shaping import (PulseShape, ShaperConfig, peaking_time_from_rc, transfer_magnitude_sq,
                      weighting, weighting_derivative)

__version__ = "0.1.0"
