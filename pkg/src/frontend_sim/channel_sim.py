"""Monte Carlo model of a six-channel binary front-end chip.

Each channel is a linear chain of gain ``G`` (mV/fC) and a CR-RC^n shaper
feeding an ideal leading-edge discriminator. Noise is added at the
discriminator input as a stationary Gaussian process with the shaper's
spectrum and a configured RMS. The discriminator output is sampled by the
downstream serializer on an 800 ps grid.

All randomness comes from ``numpy.random.default_rng`` seeded with a key
``(chip seed, channel, stream...)`` so results do not depend on the order
in which scan points or channels are evaluated.
"""

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.fft import next_fast_len
from scipy.special import erfc

from ._validation import check_int_range, check_positive
from .shaping import DEFAULT_RC_ANCHORS, PulseShape, RCMap, ShaperConfig

N_CHANNELS = 6
DAC_MAX = 255
SAMPLING_PITCH = 0.8  # ns
FEEDBACK_OPTIONS = (50, 25)  # kOhm

# random stream identifiers, part of the seed key
STREAM_OFFSETS = 0
STREAM_INJECTION = 1
STREAM_NOISE_RATE = 2


@dataclass(frozen=True)
class OverdriveDelay:
    """Optional comparator delay ``d0 * (v_ovd0 / v_over) ** p`` in ns.

    ``v_over`` is the noiseless pulse amplitude above threshold, mV.
    """

    d0: float = 0.0
    v_ovd0: float = 1.0
    p: float = 1.0

    def __call__(self, v_over):
        v_over = np.maximum(np.asarray(v_over, dtype=float), 1e-12)
        return self.d0 * (self.v_ovd0 / v_over) ** self.p


@dataclass(frozen=True)
class ChannelConfig:
    gain: float = 60.0  # mV/fC
    rc_code: int = 3
    feedback_resistor: int = 50  # kOhm; gain is given explicitly for the selected value
    threshold_dac_a: int = 0
    threshold_dac_b: int = 0
    dc_offset: float = 0.0  # mV at discriminator input
    channel_index: int = 0
    noise_sigma: float = 2.9  # mV RMS at discriminator input

    def __post_init__(self):
        check_positive(self.gain, "gain")
        check_int_range(self.rc_code, "rc_code", 0, 6)
        if self.feedback_resistor not in FEEDBACK_OPTIONS:
            raise ValueError(f"feedback_resistor must be one of {FEEDBACK_OPTIONS}")
        check_int_range(self.threshold_dac_a, "threshold_dac_a", 0, DAC_MAX)
        check_int_range(self.threshold_dac_b, "threshold_dac_b", 0, DAC_MAX)
        check_int_range(self.channel_index, "channel_index", 0, N_CHANNELS - 1)
        check_positive(self.noise_sigma, "noise_sigma", strict=False)


def _default_channels():
    return tuple(ChannelConfig(channel_index=i) for i in range(N_CHANNELS))


@dataclass(frozen=True)
class ChipConfig:
    channels: tuple = field(default_factory=_default_channels)
    global_offset_dac: int = 0
    calibration_cap: float = 52.0  # fF
    injection_dac_fullscale: float = 5.1  # fC at code 255
    offset_spread_pkpk: float = 100.0  # mV
    rng_seed: int = 0
    threshold_lsb_a: float = 1.0  # mV per code, raises threshold
    threshold_lsb_b: float = 0.5  # mV per code, lowers threshold
    global_lsb: float = 0.5  # mV per code
    shaper_order: int = 3
    rc_anchors: tuple = DEFAULT_RC_ANCHORS
    dt: float = 0.1  # ns
    window_tp: float = 20.0  # trace length in peaking times
    sampling_phase: float = 0.0  # ns
    overdrive_delay: OverdriveDelay | None = None

    def __post_init__(self):
        channels = tuple(self.channels)
        if len(channels) != N_CHANNELS:
            raise ValueError(f"a chip has exactly {N_CHANNELS} channels, got {len(channels)}")
        for i, ch in enumerate(channels):
            if ch.channel_index != i:
                raise ValueError(f"channel at position {i} has channel_index {ch.channel_index}")
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "rc_anchors", RCMap(self.rc_anchors).anchors)
        check_int_range(self.global_offset_dac, "global_offset_dac", 0, DAC_MAX)
        check_int_range(self.shaper_order, "shaper_order", 1, 64)
        check_int_range(self.rng_seed, "rng_seed", 0, 2**63 - 1)
        for name in ("calibration_cap", "injection_dac_fullscale", "threshold_lsb_a",
                     "threshold_lsb_b", "global_lsb", "dt", "window_tp"):
            check_positive(getattr(self, name), name)
        check_positive(self.offset_spread_pkpk, "offset_spread_pkpk", strict=False)
        if not 0.0 <= self.sampling_phase < SAMPLING_PITCH:
            raise ValueError("sampling_phase must be in [0, 0.8) ns")

    @property
    def rc_map(self):
        return RCMap(self.rc_anchors)

    def with_channel(self, index, **changes):
        channels = list(self.channels)
        channels[index] = replace(channels[index], **changes)
        return replace(self, channels=tuple(channels))

    def with_all_channels(self, **changes):
        return replace(self, channels=tuple(replace(ch, **changes) for ch in self.channels))

    def with_drawn_offsets(self):
        """Copy with per-channel DC offsets drawn uniformly within the spread."""
        half = self.offset_spread_pkpk / 2
        offsets = []
        for i in range(N_CHANNELS):
            rng = np.random.default_rng([self.rng_seed, i, STREAM_OFFSETS])
            offsets.append(float(rng.uniform(-half, half)))
        return replace(self, channels=tuple(
            replace(ch, dc_offset=o) for ch, o in zip(self.channels, offsets)))


@dataclass(frozen=True)
class NoiseSpec:
    """Output-referred noise at the discriminator input.

    Without ``psd_table`` the spectrum is the shaper's ``|H(f)|^2`` (white
    noise at the shaper input). ``psd_table`` is ``(f_ghz, psd)`` with any
    scale; only its shape matters since the RMS is fixed by ``output_sigma``.
    """

    output_sigma: float = 2.9  # mV
    psd_table: tuple | None = None

    def __post_init__(self):
        check_positive(self.output_sigma, "output_sigma", strict=False)
        if self.psd_table is not None:
            f, p = (np.asarray(a, dtype=float) for a in self.psd_table)
            if f.shape != p.shape or f.ndim != 1 or f.size < 2:
                raise ValueError("psd_table must be two equal-length 1-D sequences")
            if np.any(p < 0):
                raise ValueError("psd must be non-negative")
            if np.any(np.diff(f) <= 0):
                raise ValueError("psd_table frequencies must be increasing")
            object.__setattr__(self, "psd_table", (tuple(f), tuple(p)))

    def psd(self, f, shape):
        if self.psd_table is None:
            return shape.magnitude_sq(f)
        f_tab, p_tab = self.psd_table
        return np.interp(f, f_tab, p_tab, left=p_tab[0], right=0.0)


@dataclass(frozen=True)
class HitRecord:
    channel: int
    trial: int
    q_fc: float
    vth_mv: float
    crossing_time: float  # ns after the injection strobe
    time_over_threshold: float  # ns
    sampled_bins: str  # '0'/'1' per 800 ps bin, see sample_slvs

    def as_row(self):
        return {"channel": self.channel, "trial": self.trial, "q_fc": self.q_fc,
                "vth_mv": self.vth_mv, "crossing_ns": self.crossing_time,
                "tot_ns": self.time_over_threshold, "bits": self.sampled_bins}


@dataclass
class InjectionResult:
    """Outcome of a batch of injections at one (charge, threshold) point."""

    occupancy: float
    n_fired: int
    n_trials: int
    q_fc: float
    vth_mv: float
    channel: int
    trials: np.ndarray  # indices of fired trials
    crossing_times: np.ndarray  # ns after strobe, per fired trial
    tots: np.ndarray  # ns, per fired trial
    sampling_phase: float = 0.0

    @property
    def hits(self):
        out = []
        for trial, ct, tot in zip(self.trials, self.crossing_times, self.tots):
            rec = HitRecord(self.channel, int(trial), self.q_fc, self.vth_mv,
                            float(ct), float(tot), "")
            bits = sample_slvs(rec, self.sampling_phase)
            out.append(replace(rec, sampled_bins=_bits_str(bits)))
        return out


def injected_charge(dac_code, chip):
    """Calibration charge in fC for injection DAC code 0..255."""
    check_int_range(dac_code, "dac_code", 0, DAC_MAX)
    return dac_code / DAC_MAX * chip.injection_dac_fullscale


def injection_dac_code(q_fc, chip):
    """Nearest injection DAC code for ``q_fc``."""
    code = round(q_fc / chip.injection_dac_fullscale * DAC_MAX)
    return check_int_range(code, "dac_code", 0, DAC_MAX)


def injection_step_voltage(q_fc, chip):
    """Voltage step in mV across the calibration capacitor for ``q_fc``."""
    return q_fc / chip.calibration_cap * 1e3


def threshold_voltage(ch, chip):
    """Effective threshold in mV above the channel baseline."""
    return (chip.threshold_lsb_a * ch.threshold_dac_a
            - chip.threshold_lsb_b * ch.threshold_dac_b
            + chip.global_lsb * chip.global_offset_dac
            - ch.dc_offset)


def threshold_codes(ch, chip, v_target):
    """DAC codes ``(a, b)`` whose effective threshold is closest to ``v_target``."""
    need = v_target + ch.dc_offset - chip.global_lsb * chip.global_offset_dac
    if need >= 0:
        # coarse DAC rounds up, fine subtractive DAC trims back down
        a = math.ceil(need / chip.threshold_lsb_a - 1e-12)
        b = round((a * chip.threshold_lsb_a - need) / chip.threshold_lsb_b)
    else:
        a, b = 0, round(-need / chip.threshold_lsb_b)
    if a > DAC_MAX or b > DAC_MAX:
        raise ValueError(f"threshold {v_target} mV not reachable with 8-bit DACs")
    return a, b


def _as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _spectral_amplitude(spec, shape, n, dt):
    f = np.fft.rfftfreq(n, dt)
    amp = np.sqrt(spec.psd(f, shape))
    # variance of irfft(white_spectrum * amp) is mean of |amp|^2 over the full spectrum
    weights = np.full(f.size, 2.0)
    weights[0] = 1.0
    if n % 2 == 0:
        weights[-1] = 1.0
    var = np.sum(weights * amp**2) / n
    if var <= 0:
        return np.zeros_like(amp)
    return amp * (spec.output_sigma / np.sqrt(var))


def _coloured(rng, amp, size, n):
    """irfft of a white Gaussian spectrum shaped by ``amp``.

    Real and imaginary parts are unit normals scaled to the spectrum of
    unit-variance white noise. irfft ignores the imaginary parts at DC and
    Nyquist, whose real parts therefore carry the full ``sqrt(n)`` scale.
    """
    scale = np.full(amp.size, np.sqrt(n / 2))
    scale[0] = np.sqrt(n)
    if n % 2 == 0:
        scale[-1] = np.sqrt(n)
    z = rng.standard_normal(size[:-1] + (2 * amp.size,)).view(np.complex128)
    z *= amp * scale
    return np.fft.irfft(z, n=n, axis=-1)


def synth_noise(spec, shape, duration, dt, seed=None, n_traces=None):
    """Gaussian noise trace(s) of ``duration`` ns sampled every ``dt`` ns.

    A white Gaussian spectrum is coloured by ``sqrt(psd)`` and scaled to the
    exact process RMS. Each trace is one period of a stationary circular
    process. ``n_traces`` gives a 2-D ``(n_traces, n)`` batch of
    independent traces.
    """
    check_positive(dt, "dt")
    if dt > shape.peaking_time / 20:
        raise ValueError(f"dt={dt} ns too coarse for tp={shape.peaking_time} ns (need <= tp/20)")
    n = int(round(duration / dt))
    if n < 2:
        raise ValueError("duration must span at least two samples")
    size = (n,) if n_traces is None else (n_traces, n)
    if spec.output_sigma == 0:
        return np.zeros(size)
    rng = _as_rng(seed)
    amp = _spectral_amplitude(spec, shape, n, dt)
    return _coloured(rng, amp, size, n)


def sample_slvs(hit, phase=0.0, pitch=SAMPLING_PITCH):
    """Quantize a discriminator pulse onto the 800 ps sampling grid.

    Returns bits for bins ``k0..k1`` where ``k0`` holds the rising edge and
    ``k1`` the falling edge; bin ``k`` is 1 iff the output is high at
    ``phase + pitch * k`` (high on ``[crossing, crossing + ToT)``).
    """
    if not 0.0 <= phase < pitch:
        raise ValueError("phase must be in [0, pitch)")
    tot = hit.time_over_threshold
    if tot <= 0:
        return np.zeros(0, dtype=np.uint8)
    start = hit.crossing_time
    stop = start + tot
    k0 = math.floor((start - phase) / pitch)
    k1 = math.floor((stop - phase) / pitch)
    t = phase + pitch * np.arange(k0, k1 + 1)
    return ((t >= start) & (t < stop)).astype(np.uint8)


def _edges(x, v_th, t):
    """First rising edge of ``x > v_th`` per row and the falling edge after it.

    Returns fired-row indices and interpolated edge times. A row already
    above threshold at the first sample rises at ``t[0]``; one still high at
    the end falls at ``t[-1]``.
    """
    above = x > v_th
    fired = np.flatnonzero(above.any(axis=1))
    if fired.size == 0:
        return fired, np.zeros(0), np.zeros(0)
    a = above[fired]
    xf = x[fired]
    rows = np.arange(fired.size)
    i = np.argmax(a, axis=1)
    t_up = _interp_edge(xf, rows, i, v_th, t)
    after = ~a
    after[np.arange(a.shape[1])[None, :] <= i[:, None]] = False
    has_fall = after.any(axis=1)
    k = np.where(has_fall, np.argmax(after, axis=1), 1)
    t_down = np.where(has_fall, _interp_edge(xf, rows, k, v_th, t), t[-1])
    return fired, t_up, t_down


def _interp_edge(x, rows, i, v_th, t):
    """Crossing time between samples ``i-1`` and ``i``; ``t[0]`` where ``i == 0``."""
    j = np.maximum(i - 1, 0)
    x0, x1 = x[rows, j], x[rows, i]
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(x1 != x0, (v_th - x0) / (x1 - x0), 0.0)
    return np.where(i == 0, t[0], t[j] + (t[i] - t[j]) * frac)


def _bits_str(bits):
    return "".join("1" if b else "0" for b in bits)


class ChannelSimulator:
    """Simulated bench access to one channel of a chip.

    Parameters
    ----------
    chip : ChipConfig
    channel : int
        Channel index 0..5.
    noise : NoiseSpec, optional
        Overrides the channel's ``noise_sigma`` with a full noise spec.
    """

    batch_size = 2000

    def __init__(self, chip, channel=0, noise=None):
        check_int_range(channel, "channel", 0, N_CHANNELS - 1)
        self.chip = chip
        self.channel = channel
        self.config = chip.channels[channel]
        self.shape = PulseShape(ShaperConfig.from_rc(self.config.rc_code, chip.shaper_order,
                                                     chip.rc_map))
        self.noise = noise if noise is not None else NoiseSpec(self.config.noise_sigma)
        if chip.dt > self.shape.peaking_time / 20:
            raise ValueError("chip dt too coarse for the configured peaking time")

    @property
    def gain(self):
        return self.config.gain

    @property
    def peaking_time(self):
        return self.shape.peaking_time

    def rng(self, *key):
        return np.random.default_rng([self.chip.rng_seed, self.channel, *key])

    def analog_pulse(self, q, t0, t):
        """Noiseless shaper output in mV above baseline."""
        check_positive(q, "q", strict=False)
        return self.gain * q * self.shape.response(np.asarray(t, dtype=float) - t0)

    def waveform(self, q, t0, t):
        """Discriminator input including the channel's DC offset, mV."""
        return self.config.dc_offset + self.analog_pulse(q, t0, t)

    def analytic_occupancy(self, v_th, q):
        """Occupancy predicted by the erfc S-curve for this channel."""
        sigma = self.noise.output_sigma
        v = np.asarray(v_th, dtype=float)
        if sigma == 0:
            return np.where(v < self.gain * q, 1.0, 0.0)
        return 0.5 * erfc((v - self.gain * q) / (np.sqrt(2) * sigma))

    def threshold_voltage(self):
        return threshold_voltage(self.config, self.chip)

    def simulate_injections(self, q, n, v_th, key=(0,)):
        """Inject ``q`` fC ``n`` times and discriminate at ``v_th`` mV.

        ``v_th`` is relative to the baseline. ``key`` selects the random
        stream (e.g. the scan point) so repeated calls are reproducible.
        A trial fires when pulse plus noise exceeds the threshold anywhere
        in the trace; its crossing time is the first rising edge.
        """
        check_positive(q, "q", strict=False)
        if n < 1:
            raise ValueError("n must be >= 1")
        chip, tp, dt = self.chip, self.peaking_time, self.chip.dt
        n_samp = next_fast_len(int(math.ceil(chip.window_tp * tp / dt)), real=True)
        t = np.arange(n_samp) * dt
        pre = tp
        rng = self.rng(STREAM_INJECTION, *key)
        delay = chip.overdrive_delay
        amp = self.gain * q
        extra = float(delay(amp - v_th)) if delay is not None and amp > v_th else 0.0

        trials, crossings, tots = [], [], []
        for start in range(0, n, self.batch_size):
            m = min(self.batch_size, n - start)
            t0 = pre + rng.uniform(0.0, dt, size=m)
            x = self._pulses(amp, t, t0)
            if self.noise.output_sigma > 0:
                x += synth_noise(self.noise, self.shape, n_samp * dt, dt, rng, n_traces=m)
            idx, t_up, t_down = _edges(x, v_th, t)
            trials.append(start + idx)
            crossings.append(t_up - t0[idx] + extra)
            tots.append(np.maximum(t_down - t_up, 0.0))
        trials = np.concatenate(trials)
        return InjectionResult(trials.size / n, int(trials.size), n, float(q), float(v_th),
                               self.channel, trials, np.concatenate(crossings),
                               np.concatenate(tots), chip.sampling_phase)

    def _pulses(self, amp, t, t0):
        """``amp * w(t - t0)`` per row, with the exponential split into outer factors."""
        n, tp = self.shape.order, self.peaking_time
        u = (t[None, :] - t0[:, None]) / tp
        causal = u > 0
        np.maximum(u, 0.0, out=u)
        x = u.copy()
        for _ in range(n - 1):
            x *= u
        x *= np.exp(-n * t / tp)[None, :]
        x *= (amp * np.exp(n * (1.0 + t0 / tp)))[:, None]
        x[~causal] = 0.0
        return x

    def noise_rate(self, v_th, duration, key=(0,), segment=2**20):
        """Rate of upward crossings of ``v_th`` by pure noise, in MHz."""
        counts, live = self.noise_counts(v_th, duration, key, segment)
        return counts / live * 1e3

    def noise_counts(self, v_th, duration, key=(0,), segment=2**20):
        """Upward crossing count of ``v_th`` and the live time (ns) it covers."""
        tp, dt = self.peaking_time, self.chip.dt
        if duration < 1e5 * tp:
            warnings.warn(f"noise_rate duration {duration} ns < 1e5 tp; statistics are poor",
                          RuntimeWarning, stacklevel=2)
        n_total = int(round(duration / dt))
        rng = self.rng(STREAM_NOISE_RATE, *key)
        count = 0
        live = 0.0
        done = 0
        while done < n_total:
            n = min(segment, n_total - done)
            if n < 2:
                break
            x = synth_noise(self.noise, self.shape, n * dt, dt, rng)
            count += int(np.count_nonzero((x[:-1] <= v_th) & (x[1:] > v_th)))
            live += (n - 1) * dt
            done += n
        return count, live
