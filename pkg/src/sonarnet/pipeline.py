"""Per-measurement processing: demodulation, matched filter, delay-and-sum
beamforming and envelope detection, run out of a preallocated workspace.

The hot path (``Workspace.process``) uses float32 buffers and polyphase
block-Toeplitz filters that only compute the samples kept after each
downsampling step.  ``process_reference`` chains the generic ``dsp``
functions in float64 and is the yardstick the fast path is tested against.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numba
import numpy as np
import scipy.fft

from . import dsp
from .dsp import ChirpParams, DecimatingFir, SignalMatrix
from .errors import ArgumentError, ConfigError, DecodeError
from .geometry import ArrayGeometry, DirectionSet, default_array, direction_grid, steering_table


@dataclass(frozen=True, eq=False)
class PipelineConfig:
    geometry: ArrayGeometry = field(default_factory=default_array)
    directions: DirectionSet = field(default_factory=lambda: direction_grid("horizontal90"))
    chirp: ChirpParams = ChirpParams()
    pdm_rate: float = 4.5e6
    demod_decimation: int = 10
    demod_cutoff: float = 120e3
    demod_taps: int = 255
    pre_mf_decimation: int = 2
    post_envelope_decimation: int = 10
    decimation_taps: int = 127
    envelope_taps: int = 127
    envelope_cutoff: float | None = None
    speed_of_sound: float = 343.0
    max_range: float = 5.0
    preroll: float = 1e-3
    postroll: float = 1e-3

    def __post_init__(self):
        for name in ("demod_decimation", "pre_mf_decimation", "post_envelope_decimation"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.max_range <= 0:
            raise ConfigError("max_range must be positive")
        if self.speed_of_sound <= 0 or self.pdm_rate <= 0:
            raise ConfigError("speed of sound and PDM rate must be positive")
        if self.preroll < 0 or self.postroll < 0:
            raise ConfigError("preroll/postroll must be >= 0")
        # the matched-filter reference lives at the post-decimation rate
        object.__setattr__(self, "chirp", self.chirp.at_rate(self.mf_rate))
        if self.range_bins < 1:
            raise ConfigError("configuration yields zero range bins")

    @classmethod
    def for_grid(cls, kind: str, **kw) -> "PipelineConfig":
        return cls(directions=direction_grid(kind), **kw)

    def with_directions(self, directions) -> "PipelineConfig":
        if isinstance(directions, str):
            directions = direction_grid(directions)
        return replace(self, directions=directions)

    # derived rates and sizes

    @property
    def demod_rate(self) -> float:
        return self.pdm_rate / self.demod_decimation

    @property
    def mf_rate(self) -> float:
        return self.demod_rate / self.pre_mf_decimation

    @property
    def final_rate(self) -> float:
        return self.mf_rate / self.post_envelope_decimation

    @property
    def total_decimation(self) -> int:
        return self.demod_decimation * self.pre_mf_decimation * self.post_envelope_decimation

    @property
    def range_bins(self) -> int:
        return int(math.floor(2 * self.max_range / self.speed_of_sound * self.final_rate))

    @property
    def range_bin_size(self) -> float:
        return self.speed_of_sound / (2 * self.final_rate)

    @property
    def preroll_bins(self) -> int:
        return int(math.ceil(self.preroll * self.final_rate - 1e-9))

    @property
    def capture_bins(self) -> int:
        """Length of the recording in final-rate samples, pre-roll included."""
        listen = 2 * self.max_range / self.speed_of_sound + self.chirp.duration + self.postroll
        return self.preroll_bins + int(math.ceil(listen * self.final_rate - 1e-9))

    @property
    def frames(self) -> int:
        per_bin = self.total_decimation
        frames = self.capture_bins * per_bin
        while frames % 8:
            frames += per_bin
        return frames

    @property
    def preroll_time(self) -> float:
        """Exact time of PDM frame 0 before the emission, seconds."""
        return self.preroll_bins / self.final_rate

    @property
    def smoothing_cutoff(self) -> float:
        if self.envelope_cutoff is not None:
            return self.envelope_cutoff
        return 0.45 * self.mf_rate / self.post_envelope_decimation

    def range_for_bin(self, k):
        return np.asarray(k) * self.range_bin_size

    # JSON

    def to_json(self) -> dict:
        d = self.directions
        doc = {
            "geometry": self.geometry.positions.tolist(),
            "directions": d.kind if d.kind != "custom" else {
                "azimuth": d.azimuth.tolist(), "elevation": d.elevation.tolist()},
            "chirp": {"f_start": self.chirp.f_start, "f_end": self.chirp.f_end,
                      "duration": self.chirp.duration},
        }
        for name in ("pdm_rate", "demod_decimation", "demod_cutoff", "demod_taps",
                     "pre_mf_decimation", "post_envelope_decimation", "decimation_taps",
                     "envelope_taps", "envelope_cutoff", "speed_of_sound", "max_range",
                     "preroll", "postroll"):
            doc[name] = getattr(self, name)
        return doc

    @classmethod
    def from_json(cls, doc: dict, base_dir: Path | None = None) -> "PipelineConfig":
        doc = dict(doc)
        kw = {}
        try:
            if "geometry_file" in doc:
                path = Path(doc.pop("geometry_file"))
                kw["geometry"] = ArrayGeometry.load(base_dir / path if base_dir else path)
            elif "geometry" in doc:
                kw["geometry"] = ArrayGeometry(np.array(doc.pop("geometry"), dtype=float))
            else:
                kw["geometry"] = default_array(int(doc.pop("geometry_seed", 42)))
            dirs = doc.pop("directions", "horizontal90")
            if "directions_file" in doc:
                path = Path(doc.pop("directions_file"))
                kw["directions"] = DirectionSet.from_csv(base_dir / path if base_dir else path)
            elif isinstance(dirs, str):
                kw["directions"] = direction_grid(dirs)
            else:
                kw["directions"] = DirectionSet(dirs["azimuth"], dirs["elevation"])
            if "chirp" in doc:
                c = doc.pop("chirp")
                kw["chirp"] = ChirpParams(float(c.get("f_start", 90e3)), float(c.get("f_end", 25e3)),
                                          float(c.get("duration", 3e-3)), float("inf"))
            known = {f for f in cls.__dataclass_fields__}
            unknown = set(doc) - known
            if unknown:
                raise ConfigError(f"unknown pipeline config keys: {sorted(unknown)}")
            kw.update(doc)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid pipeline config: {exc}") from None
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_json(doc, base_dir=path.parent)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")


@dataclass(eq=False)
class AcousticImage:
    """Directions x range-bins energy map for one measurement."""

    sensor_serial: int
    timestamp_us: int
    directions: DirectionSet
    range_bin_size: float
    energies: np.ndarray
    seq: int = 0

    MAGIC = 0x41494D47
    VERSION = 1
    _HEADER = struct.Struct("<IHIQIId")

    def __post_init__(self):
        e = np.asarray(self.energies, dtype=np.float32)
        if e.ndim != 2 or e.shape[0] != len(self.directions):
            raise ArgumentError(f"energies shape {e.shape} does not match {len(self.directions)} directions")
        self.energies = e

    @property
    def range_bins(self) -> int:
        return self.energies.shape[1]

    def range_for_bin(self, k):
        return np.asarray(k) * self.range_bin_size

    def peak(self) -> tuple:
        """(direction index, range bin) of the global maximum."""
        return tuple(int(i) for i in np.unravel_index(np.argmax(self.energies), self.energies.shape))

    def to_bytes(self) -> bytes:
        d = self.directions
        head = self._HEADER.pack(self.MAGIC, self.VERSION, self.sensor_serial, self.timestamp_us,
                                 len(d), self.range_bins, self.range_bin_size)
        angles = np.stack([d.azimuth, d.elevation], axis=1).astype("<f4")
        return head + angles.tobytes() + self.energies.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, buf, seq: int = 0) -> "AcousticImage":
        buf = memoryview(buf)
        hs = cls._HEADER.size
        if len(buf) < hs:
            raise DecodeError(f"AIMG header truncated: need {hs} bytes, got {len(buf)} "
                              f"({hs - len(buf)} missing)")
        magic, version, serial, ts, n_dir, n_bins, bin_size = cls._HEADER.unpack_from(buf)
        if magic != cls.MAGIC:
            raise DecodeError(f"bad AIMG magic 0x{magic:08x}")
        if version != cls.VERSION:
            raise DecodeError(f"unsupported AIMG version {version}")
        expected = hs + 8 * n_dir + 4 * n_dir * n_bins
        if len(buf) != expected:
            missing = expected - len(buf)
            what = f"{missing} bytes missing" if missing > 0 else f"{-missing} trailing bytes"
            raise DecodeError(f"AIMG payload: expected {expected} bytes, got {len(buf)} ({what})")
        if n_dir == 0:
            raise DecodeError("AIMG image has no directions")
        angles = np.frombuffer(buf, "<f4", 2 * n_dir, hs).reshape(n_dir, 2)
        energies = np.frombuffer(buf, "<f4", n_dir * n_bins, hs + 8 * n_dir).reshape(n_dir, n_bins)
        dirs = DirectionSet(angles[:, 0].astype(np.float64), angles[:, 1].astype(np.float64))
        return cls(serial, ts, dirs, bin_size, energies.astype(np.float32), seq)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "AcousticImage":
        return cls.from_bytes(Path(path).read_bytes())

    def to_csv(self, path):
        d = self.directions
        ranges = self.range_for_bin(np.arange(self.range_bins))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["direction_index", "azimuth_rad", "elevation_rad", "range_m", "energy"])
            for i in range(len(d)):
                az, el = float(d.azimuth[i]), float(d.elevation[i])
                for r, e in zip(ranges, self.energies[i]):
                    w.writerow([i, f"{az:.6f}", f"{el:.6f}", f"{r:.5f}", f"{e:.7g}"])


def same_image(a: AcousticImage, b: AcousticImage) -> bool:
    """Field-wise equality, angles compared at the stored float32 precision."""
    return (a.sensor_serial == b.sensor_serial and a.timestamp_us == b.timestamp_us
            and a.range_bin_size == b.range_bin_size
            and np.array_equal(a.energies, b.energies)
            and np.array_equal(a.directions.azimuth.astype(np.float32),
                               b.directions.azimuth.astype(np.float32))
            and np.array_equal(a.directions.elevation.astype(np.float32),
                               b.directions.elevation.astype(np.float32)))


@numba.njit(cache=True, nogil=True, boundscheck=False)
def _delay_and_sum(x, shifts, pad, out):
    n_dir, n = out.shape
    n_ch = x.shape[0]
    scale = np.float32(1.0 / n_ch)
    for d in range(n_dir):
        row = out[d]
        for k in range(n):
            row[k] = 0
        for i in range(n_ch):
            s = pad + shifts[d, i]
            src = x[i, s:s + n]
            for k in range(n):
                row[k] += src[k]
        for k in range(n):
            row[k] *= scale


def delay_and_sum(x: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """Plain numpy delay-and-sum: ``y[d, n] = mean_i x[i, n + shifts[d, i]]`` with zero fill."""
    n_ch, n = x.shape
    out = np.zeros((shifts.shape[0], n), dtype=np.float64)
    for d in range(shifts.shape[0]):
        for i in range(n_ch):
            s = int(shifts[d, i])
            lo, hi = max(0, -s), min(n, n - s)
            if lo < hi:
                out[d, lo:hi] += x[i, lo + s:hi + s]
    return out / n_ch


def _lut_bipolar() -> np.ndarray:
    bits = np.unpackbits(np.arange(256, dtype=np.uint8)[:, None], axis=1)
    return (2.0 * bits - 1.0).astype(np.float32)


class Workspace:
    """Every buffer one worker needs to process measurements of one config.

    A workspace serves one ``process`` call at a time.  Buffers are created
    once in ``__init__``; ``allocations`` counts them so tests can confirm
    that processing never grows the set.
    """

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.allocations = 0
        self.n_channels = len(cfg.geometry.positions)
        n_ch = self.n_channels
        frames = cfg.frames
        self.frames = frames
        self.payload_size = n_ch * frames // 8

        demod_taps = dsp.design_lowpass(cfg.demod_cutoff, cfg.pdm_rate, cfg.demod_taps).taps
        self.demod_fir = DecimatingFir(demod_taps, cfg.demod_decimation)
        self.n_demod = frames // cfg.demod_decimation
        self.pdm = self._alloc((self.demod_fir.padded_length(self.n_demod), n_ch))
        self.lut = _lut_bipolar()

        if cfg.pre_mf_decimation > 1:
            pre_taps = dsp.design_lowpass(0.45 * cfg.demod_rate / cfg.pre_mf_decimation,
                                          cfg.demod_rate, cfg.decimation_taps).taps
            self.pre_fir = DecimatingFir(pre_taps, cfg.pre_mf_decimation)
            self.n_mf = self.n_demod // cfg.pre_mf_decimation
            self.demod = self._alloc((self.pre_fir.padded_length(self.n_mf), n_ch))
        else:
            self.pre_fir = None
            self.n_mf = self.n_demod
            self.demod = self._alloc((self.n_demod, n_ch))
        if self.n_mf == 0 or cfg.range_bins == 0:
            raise ConfigError("derived buffer sizes are zero")

        fs = cfg.mf_rate
        ref = dsp.generate_chirp(cfg.chirp).data[0]
        self.reference = ref - ref.mean()
        if self.reference.size > self.n_mf:
            raise ConfigError("chirp longer than the capture window")
        self.nfft_mf = scipy.fft.next_fast_len(self.n_mf + self.reference.size - 1, real=True)
        self.ref_spectrum = np.conj(scipy.fft.rfft(self.reference, self.nfft_mf)).astype(np.complex64)
        self.n_head = cfg.preroll_bins * cfg.post_envelope_decimation
        self.n_tail = min(self.n_mf - self.n_head,
                          int(round(cfg.postroll * fs)))
        self.head_taper = dsp.taper_weights(self.n_head).astype(np.float32)[:, None]
        self.tail_taper = dsp.taper_weights(self.n_tail)[::-1].astype(np.float32)[:, None]

        self.delays, self.reference_offsets = steering_table(
            cfg.geometry, cfg.directions, cfg.speed_of_sound, fs)
        self.shifts = self.delays + self.reference_offsets[:, None]
        self.pad = int(np.abs(self.shifts).max())
        self.filtered = self._alloc((n_ch, self.n_mf + 2 * self.pad))
        n_dir = len(cfg.directions)

        self.nfft_env = dsp._next_pow2(self.n_mf)
        k = np.arange(self.nfft_env // 2 + 1)
        self.hilbert_weights = np.where((k > 0) & (k < self.nfft_env // 2), -1j, 0).astype(np.complex64)

        post = cfg.post_envelope_decimation
        smooth = dsp.design_lowpass(cfg.smoothing_cutoff, fs, cfg.envelope_taps).taps
        if post > 1:
            anti = dsp.design_lowpass(0.45 * fs / post, fs, cfg.decimation_taps).taps
            combined = np.convolve(smooth, anti)
        else:
            combined = smooth
        self.post_fir = DecimatingFir(combined, post)
        self.first_bin = cfg.preroll_bins
        self.n_bins = cfg.range_bins
        # beamforming and envelope run over blocks of directions to keep the
        # working set (and the FFT temporaries) small
        self.block = min(n_dir, 64)
        self.beams = self._alloc((self.block, self.n_mf))
        self.env = self._alloc((self.block, self.n_mf))
        self.energies = self._alloc((n_dir, self.n_bins))
        if (self.first_bin * post < self.post_fir.half
                or (self.first_bin + self.post_fir.blocks_for(self.n_bins) * self.post_fir.block - 1) * post
                + self.post_fir.half >= self.n_mf):
            raise ConfigError("pre-roll/post-roll too short for the envelope filters")

    def _alloc(self, shape, dtype=np.float32) -> np.ndarray:
        self.allocations += 1
        return np.zeros(shape, dtype=dtype)

    # stages

    def _demodulate(self, payload):
        buf = np.frombuffer(payload, dtype=np.uint8)
        if buf.size != self.payload_size:
            raise DecodeError(f"packed PDM payload: expected {self.payload_size} bytes, got {buf.size}")
        half = self.demod_fir.half
        region = self.pdm[half:half + self.frames].reshape(-1, 8)
        np.take(self.lut, buf, axis=0, out=region, mode="clip")
        if self.pre_fir is None:
            self.demod_fir.apply(self.pdm, self.n_demod, out=self.demod)
            x = self.demod
        else:
            h2 = self.pre_fir.half
            self.demod_fir.apply(self.pdm, self.n_demod, out=self.demod[h2:h2 + self.n_demod])
            x = self.pre_fir.apply(self.demod, self.n_mf)
        x -= x.mean(axis=0, dtype=np.float64).astype(np.float32)
        if self.n_head:
            x[:self.n_head] *= self.head_taper
        if self.n_tail:
            x[self.n_mf - self.n_tail:] *= self.tail_taper
        return x

    def _matched_filter(self, x):
        spec = scipy.fft.rfft(np.ascontiguousarray(x.T), self.nfft_mf, axis=1)
        spec *= self.ref_spectrum
        y = scipy.fft.irfft(spec, self.nfft_mf, axis=1)
        self.filtered[:, self.pad:self.pad + self.n_mf] = y[:, :self.n_mf]

    def _beamform_and_envelope(self):
        for a in range(0, len(self.shifts), self.block):
            shifts = self.shifts[a:a + self.block]
            n = len(shifts)
            beams = self.beams[:n]
            _delay_and_sum(self.filtered, shifts, self.pad, beams)
            spec = scipy.fft.rfft(beams, self.nfft_env, axis=1)
            spec *= self.hilbert_weights
            quad = scipy.fft.irfft(spec, self.nfft_env, axis=1)[:, :self.n_mf]
            quad *= quad
            env = self.env[:n]
            np.multiply(beams, beams, out=env)
            env += quad
            np.sqrt(env, out=env)
            self.energies[a:a + n] = self.post_fir.apply_rows(env, self.first_bin, self.n_bins)
        return self.energies

    def beamform(self, filtered: SignalMatrix) -> SignalMatrix:
        """Delay-and-sum a (channels, samples) matched-filter output.

        ``y[d, n] = mean_i x[i, n + delay[d, i] + ref[d]]``: each channel is
        advanced by its arrival offset so that echoes from direction ``d``
        line up at their time of arrival at the array origin.
        """
        if filtered.data.shape != (self.n_channels, self.n_mf):
            raise ArgumentError(f"expected ({self.n_channels}, {self.n_mf}) samples, "
                                f"got {filtered.data.shape}")
        self.filtered[:, self.pad:self.pad + self.n_mf] = filtered.data
        out = np.empty((len(self.shifts), self.n_mf), dtype=np.float32)
        _delay_and_sum(self.filtered, self.shifts, self.pad, out)
        return SignalMatrix(out, self.cfg.mf_rate)

    def process(self, m) -> AcousticImage:
        """Raw measurement -> acoustic image (all-or-error)."""
        if m.channels != self.n_channels or m.frames != self.frames:
            raise DecodeError(f"measurement is {m.channels}x{m.frames}, "
                              f"workspace expects {self.n_channels}x{self.frames}")
        if m.pdm_rate != self.cfg.pdm_rate:
            raise DecodeError(f"measurement PDM rate {m.pdm_rate} != configured {self.cfg.pdm_rate}")
        x = self._demodulate(m.payload)
        self._matched_filter(x)
        energies = self._beamform_and_envelope()
        # the image owns its copy; the workspace buffer is reused by the next call
        return AcousticImage(m.sensor_serial, m.timestamp_us, self.cfg.directions,
                             self.cfg.range_bin_size, np.maximum(energies, 0), m.seq)


def new_workspace(cfg: PipelineConfig) -> Workspace:
    return Workspace(cfg)


def beamform(ws: Workspace, filtered: SignalMatrix) -> SignalMatrix:
    return ws.beamform(filtered)


def process(ws: Workspace, m) -> AcousticImage:
    return ws.process(m)


def process_reference(cfg: PipelineConfig, m) -> AcousticImage:
    """Float64 chain of the generic dsp kernels; slow, for validation."""
    bits = dsp.unpack_pdm(m.payload, m.channels, m.frames, m.pdm_rate)
    x = dsp.pdm_demodulate(bits, dsp.DemodConfig(cfg.demod_cutoff, cfg.demod_taps, cfg.demod_decimation))
    x = dsp.decimate(x, cfg.pre_mf_decimation, cfg.decimation_taps)
    x = dsp.remove_dc(x)
    n_head = cfg.preroll_bins * cfg.post_envelope_decimation
    x = dsp.edge_taper(x, n_head, min(x.samples - n_head, int(round(cfg.postroll * x.sample_rate))))
    ref = dsp.generate_chirp(cfg.chirp).data[0]
    x = dsp.matched_filter(x, ref - ref.mean())
    delays, offsets = steering_table(cfg.geometry, cfg.directions, cfg.speed_of_sound, x.sample_rate)
    beams = SignalMatrix(delay_and_sum(x.data, delays + offsets[:, None]), x.sample_rate)
    smooth = dsp.design_lowpass(cfg.smoothing_cutoff, x.sample_rate, cfg.envelope_taps)
    # smooth without the intermediate clamp so both paths stay linear up to the final one
    env = dsp.fft_convolve(dsp.envelope(beams), smooth, compensate_delay=True)
    env = dsp.decimate(env, cfg.post_envelope_decimation, cfg.decimation_taps)
    first = cfg.preroll_bins
    energies = np.maximum(env.data[:, first:first + cfg.range_bins], 0)
    return AcousticImage(m.sensor_serial, m.timestamp_us, cfg.directions, cfg.range_bin_size,
                         energies, m.seq)
