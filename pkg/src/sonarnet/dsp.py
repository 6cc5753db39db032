"""Signal kernels: PDM unpacking and demodulation, FIR design, FFT
convolution, chirp generation, matched filtering, envelope detection and
decimation.

All functions are pure.  Multi-channel data is stored channel-major:
``data[channel, sample]``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, ConfigError, DecodeError


@dataclass(eq=False)
class SignalMatrix:
    data: np.ndarray
    sample_rate: float

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 1:
            data = data[None, :]
        if data.ndim != 2:
            raise ArgumentError(f"signal matrix must be 2-D, got {data.ndim}-D")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise ArgumentError("signal matrix contains non-finite samples")
        self.data = data
        if self.sample_rate <= 0:
            raise ArgumentError("sample rate must be positive")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def samples(self) -> int:
        return self.data.shape[1]

    def __len__(self):
        return self.samples

    # SGMX debug dump: magic, channels u32, samples u64, rate f64, f32 samples
    _HEADER = struct.Struct("<IIQd")
    MAGIC = 0x53474D58

    def to_bytes(self) -> bytes:
        head = self._HEADER.pack(self.MAGIC, self.channels, self.samples, float(self.sample_rate))
        return head + self.data.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, buf) -> "SignalMatrix":
        buf = memoryview(buf)
        if len(buf) < cls._HEADER.size:
            raise DecodeError(f"SGMX header needs {cls._HEADER.size} bytes, got {len(buf)}")
        magic, ch, n, rate = cls._HEADER.unpack_from(buf)
        if magic != cls.MAGIC:
            raise DecodeError(f"bad SGMX magic 0x{magic:08x}")
        expected = cls._HEADER.size + 4 * ch * n
        if len(buf) != expected:
            raise DecodeError(f"SGMX payload: expected {expected} bytes, got {len(buf)}")
        data = np.frombuffer(buf, dtype="<f4", offset=cls._HEADER.size).reshape(ch, n)
        return cls(data.astype(np.float32), rate)


@dataclass(eq=False)
class PdmBitMatrix:
    """Bipolar 1-bit samples, int8 values in {-1, +1}, shape (channels, frames)."""

    values: np.ndarray
    pdm_rate: float
    clipped_samples: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.int8)
        if v.ndim != 2:
            raise ArgumentError("PDM bit matrix must be 2-D (channels, frames)")
        self.values = v

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]

    def check(self):
        if not np.all(np.abs(self.values) == 1):
            raise ArgumentError("PDM values must be exactly -1 or +1")


@dataclass(frozen=True)
class ChirpParams:
    f_start: float = 90e3
    f_end: float = 25e3
    duration: float = 3e-3
    sample_rate: float = 450e3

    def __post_init__(self):
        nyq = self.sample_rate / 2
        if not (0 < self.f_start < nyq and 0 < self.f_end < nyq):
            raise ConfigError(f"chirp band {self.f_start}-{self.f_end} Hz outside (0, {nyq}) Hz")
        if self.duration <= 0:
            raise ConfigError("chirp duration must be positive")

    def at_rate(self, sample_rate: float) -> "ChirpParams":
        return ChirpParams(self.f_start, self.f_end, self.duration, sample_rate)


@dataclass(frozen=True, eq=False)
class FirKernel:
    taps: np.ndarray
    cutoff: float = math.nan

    @property
    def delay(self) -> int:
        return (len(self.taps) - 1) // 2


@dataclass(frozen=True)
class DemodConfig:
    cutoff: float = 120e3
    taps: int = 255
    decimation: int = 10


def unpack_pdm(packed, channels: int, frames: int, pdm_rate: float = 4.5e6) -> PdmBitMatrix:
    """Expand frame-major, MSB-first packed bits into a bipolar matrix.

    Frame ``n`` occupies bits ``n*channels .. n*channels + channels - 1`` of
    the stream, one bit per channel in channel order.
    """
    if frames % 8:
        raise DecodeError(f"frame count {frames} is not a multiple of 8")
    buf = np.frombuffer(packed, dtype=np.uint8)
    expected = channels * frames // 8
    if buf.size != expected:
        raise DecodeError(f"packed PDM payload: expected {expected} bytes, got {buf.size}")
    bits = np.unpackbits(buf).reshape(frames, channels).T.astype(np.int8)
    return PdmBitMatrix(2 * bits - 1, pdm_rate)


def design_lowpass(cutoff: float, sample_rate: float, taps: int = 255) -> FirKernel:
    """Hamming-windowed sinc low-pass with unit DC gain."""
    if not 0 < cutoff < sample_rate / 2:
        raise ConfigError(f"cutoff {cutoff} Hz outside (0, {sample_rate / 2}) Hz")
    if taps < 1 or taps % 2 == 0:
        raise ConfigError(f"tap count must be odd and positive, got {taps}")
    n = np.arange(taps) - (taps - 1) / 2
    fc = cutoff / sample_rate
    h = 2 * fc * np.sinc(2 * fc * n) * np.hamming(taps)
    h /= h.sum()
    # enforce exact symmetry against rounding in sinc/hamming
    h = 0.5 * (h + h[::-1])
    return FirKernel(h, cutoff)


def _next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def convolve_array(x: np.ndarray, kernel: np.ndarray, nfft: int | None = None) -> np.ndarray:
    """Full linear convolution of each row of ``x`` with ``kernel`` via real FFTs."""
    x = np.atleast_2d(x)
    k = np.asarray(kernel).ravel()
    n_out = x.shape[-1] + k.size - 1
    if nfft is None:
        nfft = _next_pow2(n_out)
    spec = np.fft.rfft(x, nfft, axis=-1) * np.fft.rfft(k, nfft)
    return np.fft.irfft(spec, nfft, axis=-1)[..., :n_out]


def fft_convolve(signals: SignalMatrix, kernel, compensate_delay: bool = False) -> SignalMatrix:
    """Per-channel linear convolution computed in the frequency domain.

    Without delay compensation the full ``L + K - 1`` output is returned.
    With it the output is advanced by ``(K - 1) // 2`` samples and cut to the
    input length, so a symmetric kernel adds no net delay.
    """
    taps = kernel.taps if isinstance(kernel, FirKernel) else np.asarray(kernel, dtype=np.float64)
    taps = np.atleast_1d(taps)
    if signals.samples == 0 or taps.size == 0:
        raise ArgumentError("empty signal or kernel")
    if taps.size > signals.samples:
        raise ArgumentError(f"kernel ({taps.size}) longer than signal ({signals.samples})")
    y = convolve_array(signals.data.astype(np.float64, copy=False), taps)
    if compensate_delay:
        d = (taps.size - 1) // 2
        y = y[:, d:d + signals.samples]
    return SignalMatrix(y, signals.sample_rate)


def pdm_demodulate(bits: PdmBitMatrix, cfg: DemodConfig = DemodConfig()) -> SignalMatrix:
    if cfg.decimation < 1 or bits.frames % cfg.decimation:
        raise ConfigError(f"decimation {cfg.decimation} must divide frame count {bits.frames}")
    lp = design_lowpass(cfg.cutoff, bits.pdm_rate, cfg.taps)
    x = SignalMatrix(bits.values.astype(np.float64), bits.pdm_rate)
    y = fft_convolve(x, lp, compensate_delay=True)
    return SignalMatrix(y.data[:, ::cfg.decimation], bits.pdm_rate / cfg.decimation)


def generate_chirp(p: ChirpParams) -> SignalMatrix:
    """Linear FM sweep from ``f_start`` to ``f_end`` over ``duration``."""
    n = int(round(p.duration * p.sample_rate))
    t = np.arange(n) / p.sample_rate
    rate = (p.f_end - p.f_start) / (2 * p.duration)
    return SignalMatrix(np.sin(2 * np.pi * (p.f_start * t + rate * t * t)), p.sample_rate)


def matched_filter(signals: SignalMatrix, reference) -> SignalMatrix:
    """Cross-correlate every channel with ``reference``.

    An echo that starts at sample ``n`` gives its correlation peak at ``n``.
    """
    ref = reference.data[0] if isinstance(reference, SignalMatrix) else np.ravel(reference)
    k = ref.size
    if k > signals.samples:
        raise ArgumentError(f"reference ({k}) longer than signal ({signals.samples})")
    full = fft_convolve(signals, ref[::-1])
    return SignalMatrix(full.data[:, k - 1:k - 1 + signals.samples], signals.sample_rate)


def analytic_magnitude(x: np.ndarray, nfft: int | None = None) -> np.ndarray:
    """|analytic signal| of each row, built in the frequency domain."""
    x = np.atleast_2d(x)
    n = x.shape[-1]
    if nfft is None:
        nfft = _next_pow2(n)
    spec = np.fft.fft(x, nfft, axis=-1)
    weights = np.zeros(nfft)
    weights[0] = 1.0
    if nfft % 2 == 0:
        weights[nfft // 2] = 1.0
        weights[1:nfft // 2] = 2.0
    else:
        weights[1:(nfft + 1) // 2] = 2.0
    return np.abs(np.fft.ifft(spec * weights, axis=-1)[..., :n])


def envelope(signals: SignalMatrix, smoothing: FirKernel | None = None) -> SignalMatrix:
    """Envelope via the analytic signal, optionally followed by a low-pass."""
    if signals.samples < 2:
        raise ArgumentError("envelope needs at least 2 samples per channel")
    env = SignalMatrix(analytic_magnitude(signals.data), signals.sample_rate)
    if smoothing is not None:
        env = fft_convolve(env, smoothing, compensate_delay=True)
        # low-pass ringing can dip below zero next to sharp peaks
        np.maximum(env.data, 0.0, out=env.data)
    return env


def decimate(signals: SignalMatrix, factor: int, taps: int = 127) -> SignalMatrix:
    """Anti-alias low-pass at 0.45 * fs / factor, then keep every factor-th sample."""
    if factor < 1:
        raise ConfigError(f"decimation factor must be >= 1, got {factor}")
    if factor == 1:
        return signals
    lp = design_lowpass(0.45 * signals.sample_rate / factor, signals.sample_rate, taps)
    y = fft_convolve(signals, lp, compensate_delay=True)
    return SignalMatrix(y.data[:, ::factor], signals.sample_rate / factor)


def remove_dc(signals: SignalMatrix) -> SignalMatrix:
    """Subtract each channel's mean."""
    return SignalMatrix(signals.data - signals.data.mean(axis=1, keepdims=True), signals.sample_rate)


def taper_weights(n: int) -> np.ndarray:
    """Raised-cosine fade-in of length ``n`` (0 at the first sample, towards 1)."""
    return 0.5 - 0.5 * np.cos(np.pi * np.arange(n) / n) if n > 0 else np.zeros(0)


def edge_taper(signals: SignalMatrix, head: int, tail: int) -> SignalMatrix:
    """Fade the first ``head`` samples in and the last ``tail`` samples out."""
    x = signals.data.copy()
    if head:
        x[:, :head] *= taper_weights(head)
    if tail:
        x[:, -tail:] *= taper_weights(tail)[::-1]
    return SignalMatrix(x, signals.sample_rate)


def frequency_response(taps: np.ndarray, freqs: np.ndarray, sample_rate: float) -> np.ndarray:
    """Complex response of an FIR at the given frequencies (direct DTFT sum)."""
    n = np.arange(len(taps))
    w = 2 * np.pi * np.asarray(freqs)[:, None] / sample_rate
    return (np.asarray(taps)[None, :] * np.exp(-1j * w * n)).sum(axis=1)


@dataclass
class DecimatingFir:
    """Polyphase FIR + downsampler evaluated as batched block-Toeplitz products.

    Equivalent to ``fft_convolve(x, taps, compensate_delay=True)`` followed by
    keeping every ``factor``-th sample, but only the kept outputs are
    computed.  Input is frame-major, ``x[sample, channel]``; ``block`` kept
    outputs are produced per matrix product.
    """

    taps: np.ndarray
    factor: int
    block: int = 8
    dtype: type = np.float32
    _toeplitz: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        self.taps = taps
        k = taps.size
        span = (self.block - 1) * self.factor + k
        t = np.zeros((self.block, span), dtype=self.dtype)
        rev = taps[::-1].astype(self.dtype)
        for b in range(self.block):
            t[b, b * self.factor:b * self.factor + k] = rev
        self._toeplitz = t

    @property
    def half(self) -> int:
        return (self.taps.size - 1) // 2

    def blocks_for(self, n_out: int) -> int:
        return -(-n_out // self.block)

    def padded_length(self, n_out: int) -> int:
        """Rows the zero-padded input buffer needs for ``n_out`` outputs."""
        return self.blocks_for(n_out) * self.block * self.factor + self.taps.size

    def apply(self, padded: np.ndarray, n_out: int, out: np.ndarray | None = None) -> np.ndarray:
        """Run on a buffer laid out as ``[half zeros | signal | zeros]`` along axis 0.

        ``padded`` must be C-contiguous with at least ``padded_length(n_out)`` rows.
        """
        nb = self.blocks_for(n_out)
        span = self._toeplitz.shape[1]
        rows = padded.shape[1]
        step = padded.strides[0]
        windows = np.lib.stride_tricks.as_strided(
            padded, (nb, span, rows), (self.block * self.factor * step, step, padded.strides[1]),
            writeable=False)
        res = np.matmul(self._toeplitz, windows)
        res = res.reshape(nb * self.block, rows)[:n_out]
        if out is None:
            return res
        out[...] = res
        return out

    def apply_rows(self, x: np.ndarray, first: int, n_out: int) -> np.ndarray:
        """Channel-major variant without padding: outputs ``first .. first + n_out``.

        Output ``m`` reads ``x[:, m*factor - half : m*factor + half + 1]``; the
        caller guarantees that range (rounded up to whole blocks) is inside ``x``.
        """
        x = np.ascontiguousarray(x)
        rows, length = x.shape
        nb = self.blocks_for(n_out)
        span = self._toeplitz.shape[1]
        start = first * self.factor - self.half
        if start < 0 or start + (nb - 1) * self.block * self.factor + span > length:
            raise ArgumentError("decimating FIR window runs past the signal edges")
        item = x.strides[1]
        windows = np.lib.stride_tricks.as_strided(
            x[:, start:], (nb, rows, span), (self.block * self.factor * item, x.strides[0], item),
            writeable=False)
        res = np.matmul(windows, self._toeplitz.T)
        return res.transpose(1, 0, 2).reshape(rows, nb * self.block)[:, :n_out]
