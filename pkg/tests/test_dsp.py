import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sonarnet import dsp
from sonarnet.dsp import (ChirpParams, DecimatingFir, DemodConfig, PdmBitMatrix, SignalMatrix,
                          decimate, design_lowpass, envelope, fft_convolve, generate_chirp,
                          matched_filter, pdm_demodulate, unpack_pdm)
from sonarnet.errors import ArgumentError, ConfigError, DecodeError
from sonarnet.synth import pack_pdm


def rel_rms(a, b):
    return np.sqrt(np.mean((a - b) ** 2) / np.mean(b ** 2))


# fft_convolve

def test_identity_kernel(rng):
    x = SignalMatrix(rng.standard_normal((3, 500)), 1e3)
    y = fft_convolve(x, [1.0])
    assert np.allclose(y.data, x.data, atol=1e-12)


def test_impulse_reproduces_centered_kernel():
    k = np.array([0.1, 0.2, 0.4, 0.2, 0.1])
    x = np.zeros(64)
    x[20] = 1.0
    y = fft_convolve(SignalMatrix(x, 1.0), k, compensate_delay=True).data[0]
    assert np.allclose(y[18:23], k, atol=1e-12)
    assert np.allclose(np.delete(y, range(18, 23)), 0, atol=1e-12)


def test_matches_direct_convolution(rng):
    x = rng.standard_normal(1024)
    k = rng.standard_normal(63)
    y = fft_convolve(SignalMatrix(x, 1.0), k).data[0]
    assert rel_rms(y, np.convolve(x, k)) < 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3000), st.integers(1, 200), st.integers(0, 2**32 - 1))
def test_matches_direct_convolution_property(n, k, seed):
    k = min(k, n)
    r = np.random.default_rng(seed)
    x, h = r.standard_normal(n), r.standard_normal(k)
    y = fft_convolve(SignalMatrix(x, 1.0), h).data[0]
    assert rel_rms(y, np.convolve(x, h)) < 1e-9


def test_channels_are_independent(rng):
    x = rng.standard_normal((4, 777))
    k = rng.standard_normal(31)
    full = fft_convolve(SignalMatrix(x, 1.0), k, compensate_delay=True).data
    for i in range(4):
        one = fft_convolve(SignalMatrix(x[i], 1.0), k, compensate_delay=True).data[0]
        assert np.abs(full[i] - one).max() <= 1e-12


def test_fft_convolve_errors():
    with pytest.raises(ArgumentError):
        fft_convolve(SignalMatrix(np.zeros((1, 4)), 1.0), np.ones(5))
    with pytest.raises(ArgumentError):
        fft_convolve(SignalMatrix(np.zeros((1, 4)), 1.0), [])


def test_signal_matrix_validation():
    with pytest.raises(ArgumentError):
        SignalMatrix(np.array([[np.nan, 0.0]]), 1.0)
    with pytest.raises(ArgumentError):
        SignalMatrix(np.zeros((2, 2, 2)), 1.0)
    with pytest.raises(ArgumentError):
        SignalMatrix(np.zeros(3), 0.0)


def test_signal_matrix_codec(rng):
    x = SignalMatrix(rng.standard_normal((2, 10)).astype(np.float32), 450e3)
    back = SignalMatrix.from_bytes(x.to_bytes())
    assert back.sample_rate == 450e3 and np.array_equal(back.data, x.data)
    with pytest.raises(DecodeError):
        SignalMatrix.from_bytes(x.to_bytes()[:-1])


# filters

def test_lowpass_has_unit_dc_gain_and_linear_phase():
    h = design_lowpass(120e3, 4.5e6, 255).taps
    assert h.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.array_equal(h, h[::-1])


def test_lowpass_stopband():
    fs, fc = 4.5e6, 120e3
    h = design_lowpass(fc, fs, 255).taps
    f = np.linspace(0, fs / 2, 8001)
    mag = 20 * np.log10(np.abs(dsp.frequency_response(h, f, fs)) + 1e-300)
    # Hamming window: sidelobes near -53 dB, 60 dB reached from twice the cutoff
    assert mag[f >= 1.5 * fc].max() < -55
    assert mag[f >= 2 * fc].max() < -60
    assert np.abs(mag[f <= 0.5 * fc]).max() < 0.05


def test_lowpass_rejects_bad_args():
    with pytest.raises(ConfigError):
        design_lowpass(3e6, 4.5e6)
    with pytest.raises(ConfigError):
        design_lowpass(1e3, 4.5e6, taps=0)


def test_decimate_identity_and_length(rng):
    x = SignalMatrix(rng.standard_normal((2, 1000)), 1e3)
    assert decimate(x, 1) is x
    y = decimate(x, 4)
    assert y.samples == 250 and y.sample_rate == 250.0
    with pytest.raises(ConfigError):
        decimate(x, 0)


def test_decimate_preserves_passband_tone():
    fs = 100e3
    t = np.arange(20000) / fs
    y = decimate(SignalMatrix(np.sin(2 * np.pi * 1e3 * t), fs), 10).data[0]
    # least-squares sine fit away from the edges
    tt = np.arange(y.size)[50:-50] / 10e3
    basis = np.stack([np.sin(2 * np.pi * 1e3 * tt), np.cos(2 * np.pi * 1e3 * tt)], axis=1)
    coef, *_ = np.linalg.lstsq(basis, y[50:-50], rcond=None)
    assert np.hypot(*coef) == pytest.approx(1.0, rel=0.01)


@pytest.mark.parametrize("factor,taps", [(10, 255), (2, 127), (10, 253)])
def test_decimating_fir_matches_reference(rng, factor, taps):
    h = design_lowpass(0.4 / factor, 1.0, taps).taps
    n_out = 301
    n = n_out * factor
    x = rng.standard_normal((n, 3))
    fir = DecimatingFir(h, factor, dtype=np.float64)
    padded = np.zeros((fir.padded_length(n_out), 3))
    padded[fir.half:fir.half + n] = x
    got = fir.apply(padded, n_out)
    ref = fft_convolve(SignalMatrix(x.T, 1.0), h, compensate_delay=True).data[:, ::factor]
    assert np.abs(got - ref.T).max() < 1e-12


def test_decimating_fir_rows_window(rng):
    h = design_lowpass(0.04, 1.0, 127).taps
    fir = DecimatingFir(h, 10, dtype=np.float64)
    x = rng.standard_normal((2, 4000))
    got = fir.apply_rows(x, 10, 200)
    ref = fft_convolve(SignalMatrix(x, 1.0), h, compensate_delay=True).data[:, ::10][:, 10:210]
    assert np.abs(got - ref).max() < 1e-12
    with pytest.raises(ArgumentError):
        fir.apply_rows(x, 0, 10)


# PDM

def test_unpack_layout_example():
    # frame-major, MSB first: one channel, bits + - + + - - - -
    bits = unpack_pdm(bytes([0b10110000]), channels=1, frames=8)
    assert bits.values.tolist() == [[1, -1, 1, 1, -1, -1, -1, -1]]


def test_unpack_interleaves_channels():
    # two channels: byte 0 holds frames 0-3 of ch0/ch1 interleaved
    bits = unpack_pdm(bytes([0b10000000, 0]), channels=2, frames=8)
    assert bits.values[0, 0] == 1 and bits.values[1, 0] == -1
    assert np.all(bits.values[:, 1:] == -1)


def test_pack_unpack_round_trip(rng):
    v = rng.choice(np.array([-1, 1], dtype=np.int8), size=(32, 800))
    b = PdmBitMatrix(v, 4.5e6)
    back = unpack_pdm(pack_pdm(b), 32, 800)
    assert np.array_equal(back.values, v)


def test_unpack_errors():
    with pytest.raises(DecodeError, match="expected 4"):
        unpack_pdm(b"\x00" * 3, channels=4, frames=8)
    with pytest.raises(DecodeError):
        unpack_pdm(b"\x00", channels=1, frames=7)


def test_demodulate_constant():
    bits = PdmBitMatrix(np.ones((2, 8000), dtype=np.int8), 4.5e6)
    y = pdm_demodulate(bits, DemodConfig())
    assert y.samples == 800 and y.sample_rate == 450e3
    core = y.data[:, 20:-20]
    assert np.abs(core - 1).max() < 1e-3


def test_demodulate_requires_divisible_frames():
    bits = PdmBitMatrix(np.ones((1, 8005), dtype=np.int8), 4.5e6)
    with pytest.raises(ConfigError):
        pdm_demodulate(bits, DemodConfig())


# chirp / matched filter

def test_chirp_length_and_bounds():
    c = generate_chirp(ChirpParams(90e3, 25e3, 0.003, 450e3)).data[0]
    assert c.size == 1350
    assert np.abs(c).max() <= 1.0


def test_chirp_instantaneous_frequency():
    p = ChirpParams(90e3, 25e3, 0.003, 450e3)
    c = generate_chirp(p).data[0]
    # independent oracle: unwrap the phase of the analytic signal numerically
    import scipy.signal

    phase = np.unwrap(np.angle(scipy.signal.hilbert(c)))
    f = np.diff(phase) * p.sample_rate / (2 * np.pi)
    # fit a line away from the Hilbert edge effects, extrapolate to both ends
    t = (np.arange(f.size) + 0.5) / p.sample_rate
    mid = slice(100, -100)
    slope, icept = np.polyfit(t[mid], f[mid], 1)
    assert icept == pytest.approx(90e3, rel=0.01)
    assert slope * p.duration + icept == pytest.approx(25e3, rel=0.01)


def test_chirp_params_validation():
    with pytest.raises(ConfigError):
        ChirpParams(300e3, 25e3, 0.003, 450e3)
    with pytest.raises(ConfigError):
        ChirpParams(90e3, 25e3, 0.0, 450e3)


def test_matched_filter_autocorrelation_peak():
    ref = generate_chirp(ChirpParams()).data[0]
    y = matched_filter(SignalMatrix(np.concatenate([ref, np.zeros(500)]), 450e3), ref).data[0]
    assert np.argmax(y) == 0


def test_matched_filter_two_echoes():
    ref = generate_chirp(ChirpParams()).data[0]
    x = np.zeros(4000)
    x[500:500 + ref.size] += ref
    x[900:900 + ref.size] += 0.5 * ref
    y = np.abs(matched_filter(SignalMatrix(x, 450e3), ref).data[0])
    top = np.argsort(y)[::-1]
    assert top[0] == 500
    second = next(i for i in top if abs(i - 500) > 20)
    assert second == 900


def test_matched_filter_linearity_and_shift(rng):
    ref = generate_chirp(ChirpParams()).data[0]
    x = rng.standard_normal(3000)
    x[700:700 + ref.size] += 3 * ref
    a = matched_filter(SignalMatrix(x, 450e3), ref).data[0]
    b = matched_filter(SignalMatrix(2.5 * x, 450e3), ref).data[0]
    assert np.allclose(b, 2.5 * a, rtol=1e-10, atol=1e-9)
    shifted = np.concatenate([np.zeros(37), x[:-37]])
    c = matched_filter(SignalMatrix(shifted, 450e3), ref).data[0]
    assert np.argmax(c) == np.argmax(a) + 37


def test_matched_filter_rejects_long_reference():
    with pytest.raises(ArgumentError):
        matched_filter(SignalMatrix(np.zeros(10), 1.0), np.ones(11))


# envelope

def test_envelope_of_zero():
    assert np.all(envelope(SignalMatrix(np.zeros((2, 64)), 1.0)).data == 0)


def test_envelope_of_tone():
    fs = 450e3
    t = np.arange(4096) / fs
    e = envelope(SignalMatrix(0.8 * np.sin(2 * np.pi * 30e3 * t), fs)).data[0]
    assert np.all(np.abs(e[200:-200] - 0.8) <= 0.016)


def test_envelope_nonnegative(rng):
    x = SignalMatrix(rng.standard_normal((3, 1000)), 450e3)
    raw = envelope(x).data
    assert raw.min() >= 0
    smooth = envelope(x, design_lowpass(20e3, 450e3, 127)).data
    assert smooth.min() >= -1e-9


def test_envelope_needs_two_samples():
    with pytest.raises(ArgumentError):
        envelope(SignalMatrix(np.zeros((1, 1)), 1.0))


def test_analytic_magnitude_matches_scipy(rng):
    import scipy.signal

    x = rng.standard_normal(1024)
    assert np.allclose(dsp.analytic_magnitude(x)[0], np.abs(scipy.signal.hilbert(x)), atol=1e-10)


def test_edge_taper_and_dc():
    x = SignalMatrix(np.ones((1, 100)) + 2.0, 1.0)
    assert np.allclose(dsp.remove_dc(x).data, 0)
    t = dsp.edge_taper(x, 10, 10).data[0]
    assert t[0] == 0 and t[-1] == 0
    assert t[-2] == pytest.approx(3 * dsp.taper_weights(10)[1])
    assert np.all(t[10:90] == 3.0)
