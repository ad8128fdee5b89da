"""Signal front-end: band-pass filtering, decimation, and windowing.

Filters are linear-phase FIR (windowed sinc, Hamming window) applied
zero-phase: the signal is edge-padded by half the kernel, convolved, and
cropped, which compensates the group delay exactly and keeps constants
constant at the boundaries.  Filter order is chosen from the Hamming
transition-width rule (about 3.3 / N of the sample rate) so that

* the band-pass reaches its stopband by band_lo/4 below and 2*band_hi
  above (>= 40 dB there), with <= 1 dB passband ripple, and
* the decimation low-pass passes 0.9x and stops 1.0x the new Nyquist.

All arithmetic runs in float64; records are stored back as float32.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.signal import fftconvolve, firwin

_HAMMING_TRANSITION = 3.3  # normalized transition width multiplier


@dataclass(frozen=True)
class PreprocessConfig:
    band_lo: float = 0.5
    band_hi: float = 12.8
    target_rate: float = 32.0
    window_len: float = 8.0   # seconds
    window_shift: float = 1.0  # seconds

    def validate(self):
        if not (0 < self.band_lo < self.band_hi < self.target_rate / 2):
            raise ValueError(f"need 0 < band_lo < band_hi < target_rate/2, got "
                             f"{self.band_lo}/{self.band_hi}/{self.target_rate}")
        if self.window_len <= 0 or self.window_shift <= 0:
            raise ValueError("window_len and window_shift must be positive")
        return self


def _odd_taps(fs, transition_hz):
    n = int(np.ceil(_HAMMING_TRANSITION * fs / transition_hz))
    return n + 1 if n % 2 == 0 else n


def design_bandpass(fs, lo, hi) -> np.ndarray:
    """FIR taps: passband (lo, hi), stopbands below lo/4 and above 2*hi."""
    if not (0 < lo < hi < fs / 2):
        raise ValueError(f"band ({lo}, {hi}) outside (0, {fs / 2}) Nyquist range")
    if 2 * hi >= fs / 2:
        raise ValueError(f"stopband edge 2*hi = {2 * hi} must stay below Nyquist {fs / 2}")
    width = min(lo - lo / 4, hi)  # the narrower edge dictates the order
    cut_lo = (lo / 4 + lo) / 2
    cut_hi = (hi + 2 * hi) / 2
    return firwin(_odd_taps(fs, width), [cut_lo, cut_hi], window="hamming",
                  pass_zero=False, fs=fs)


def design_decimation_lowpass(fs, target_rate) -> np.ndarray:
    """FIR taps passing 0.9x and stopping 1.0x the target Nyquist."""
    nyq = target_rate / 2
    return firwin(_odd_taps(fs, 0.2 * nyq), 0.9 * nyq, window="hamming", fs=fs)


def _zero_phase(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Delay-compensated FIR along the last axis; length preserved."""
    half = (len(taps) - 1) // 2
    xp = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(half, half)], mode="edge")
    return fftconvolve(xp, taps.reshape((1,) * (x.ndim - 1) + (-1,)), mode="valid", axes=-1)


def bandpass_array(x, fs, lo, hi) -> np.ndarray:
    """Zero-phase band-pass of [..., n] data; float64 output."""
    return _zero_phase(np.asarray(x, dtype=np.float64), design_bandpass(fs, lo, hi))


def decimate_array(x, fs, target_rate):
    """Anti-aliased integer-factor decimation; returns (y, target_rate)."""
    factor = fs / target_rate
    if abs(factor - round(factor)) > 1e-9 or factor < 1:
        raise ValueError(f"sample rate {fs} is not an integer multiple of {target_rate}")
    factor = int(round(factor))
    x = np.asarray(x, dtype=np.float64)
    if factor == 1:
        return x.copy(), target_rate
    y = _zero_phase(x, design_decimation_lowpass(fs, target_rate))
    n_out = x.shape[-1] // factor
    return y[..., : n_out * factor : factor], target_rate


def bandpass_filter(record, lo=0.5, hi=12.8):
    """Band-pass a record in place of its samples; rate unchanged."""
    filtered = bandpass_array(record.samples, record.sample_rate, lo, hi)
    return replace(record, samples=filtered.astype(np.float32))


def resample(record, target_rate=32.0):
    """Decimate a record to target_rate (integer factor of its rate)."""
    y, rate = decimate_array(record.samples, record.sample_rate, target_rate)
    return replace(record, sample_rate=float(rate), samples=y.astype(np.float32))


def preprocess_record(record, config: PreprocessConfig | None = None):
    """Band-pass then decimate, the fixed front-end order."""
    cfg = (config or PreprocessConfig()).validate()
    return resample(bandpass_filter(record, cfg.band_lo, cfg.band_hi), cfg.target_rate)


def segment_windows(record, window_len=8.0, window_shift=1.0):
    """Sliding windows over a record.

    Returns a list of (start_time_s, window [n_channels, L]) in time
    order, L = window_len * rate; windows are views into the record.
    """
    fs = record.sample_rate
    length = int(round(window_len * fs))
    shift = int(round(window_shift * fs))
    if shift < 1 or length < 1:
        raise ValueError("window_len and window_shift must cover at least one sample")
    n = record.n_samples
    if n < length:
        raise ValueError(f"record has {n} samples, shorter than one {length}-sample window")
    count = (n - length) // shift + 1
    return [(k * shift / fs, record.samples[:, k * shift:k * shift + length])
            for k in range(count)]
