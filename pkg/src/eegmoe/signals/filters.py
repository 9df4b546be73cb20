"""Linear-phase FIR band-pass filtering."""

from __future__ import annotations

import math

import numpy as np

from ..tensor.linalg import fft, ifft

STOP_ATTEN_DB = 65.0


def _kaiser_beta(atten_db: float) -> float:
    if atten_db > 50:
        return 0.1102 * (atten_db - 8.7)
    if atten_db >= 21:
        return 0.5842 * (atten_db - 21) ** 0.4 + 0.07886 * (atten_db - 21)
    return 0.0


def _lowpass(cutoff: float, fs: float, n: np.ndarray) -> np.ndarray:
    w = 2.0 * cutoff / fs
    return w * np.sinc(w * n)


def design_bandpass(low_hz: float, high_hz: float, sample_rate: float,
                    atten_db: float = STOP_ATTEN_DB) -> np.ndarray:
    """Kaiser-windowed sinc band-pass taps (odd length, symmetric).

    Stop-band edges sit at ``0.5 * low`` and ``high + min(0.2 * high, nyquist - high)``.
    """
    nyq = sample_rate / 2.0
    if not 0.0 < low_hz < high_hz < nyq:
        raise ValueError(f"band edges must satisfy 0 < low < high < {nyq}: got ({low_hz}, {high_hz})")
    tw_low = 0.5 * low_hz
    tw_high = min(0.2 * high_hz, nyq - high_hz)
    width = min(tw_low, tw_high)
    ntaps = int(math.ceil((atten_db - 7.95) / (2.285 * 2.0 * math.pi * width / sample_rate))) + 1
    ntaps += 1 - ntaps % 2
    n = np.arange(ntaps) - (ntaps - 1) / 2
    h = _lowpass(high_hz + tw_high / 2, sample_rate, n) - _lowpass(low_hz - tw_low / 2, sample_rate, n)
    return h * np.kaiser(ntaps, _kaiser_beta(atten_db))


def frequency_response(taps: np.ndarray, freqs_hz, sample_rate: float) -> np.ndarray:
    n = np.arange(len(taps)) - (len(taps) - 1) / 2
    return np.array([np.abs(np.sum(taps * np.exp(-2j * np.pi * f * n / sample_rate))) for f in np.atleast_1d(freqs_hz)])


def fft_convolve_same(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Zero-phase ('same' length, delay-compensated) convolution along the last axis."""
    length = x.shape[-1]
    full = length + len(taps) - 1
    nfft = 1 << (full - 1).bit_length()
    xp = np.zeros(x.shape[:-1] + (nfft,))
    xp[..., :length] = x
    hp = np.zeros(nfft)
    hp[: len(taps)] = taps
    y = ifft(fft(xp) * fft(hp)).real
    delay = (len(taps) - 1) // 2
    return y[..., delay:delay + length]


def fir_bandpass(signal: np.ndarray, low_hz: float, high_hz: float, sample_rate: float = 256.0) -> np.ndarray:
    """Band-pass filter along the last axis.

    The first and last ``len(taps) // 2`` samples carry edge transients; callers
    that need steady-state output should pad and crop.
    """
    taps = design_bandpass(low_hz, high_hz, sample_rate)
    return fft_convolve_same(np.asarray(signal, dtype=np.float64), taps)
