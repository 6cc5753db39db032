"""Measurement helpers shared by the unit and acceptance tests."""

import numpy as np


def fit_tone(y, freq, fs):
    """Least-squares fit of DC + sine + cosine at a known frequency."""
    t = np.arange(y.size) / fs
    basis = np.stack([np.sin(2 * np.pi * freq * t), np.cos(2 * np.pi * freq * t),
                      np.ones_like(t)], axis=1)
    coef, *_ = np.linalg.lstsq(basis, y, rcond=None)
    return coef, basis @ coef


def in_band_snr(y, freq, fs, band):
    """SNR in dB of a tone against the residual power inside [0, band] Hz.

    The fitted tone (and DC) is removed; the residual is Hann-windowed and
    its periodogram summed over the band.
    """
    coef, fitted = fit_tone(y, freq, fs)
    signal = (coef[0] ** 2 + coef[1] ** 2) / 2
    r = y - fitted
    w = np.hanning(r.size)
    spec = np.abs(np.fft.rfft(r * w)) ** 2
    f = np.fft.rfftfreq(r.size, 1 / fs)
    # one-sided periodogram normalised so that its sum is the mean power
    psd = 2 * spec / (r.size * np.sum(w ** 2)) * r.size
    psd[0] /= 2
    noise = psd[f <= band].sum() / r.size
    return 10 * np.log10(signal / noise)
