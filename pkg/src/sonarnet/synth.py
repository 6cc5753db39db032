"""Synthetic echo scenes and first-order sigma-delta PDM modulation.

This is the data source for the sensor emulator and the ground truth the
processing pipeline is checked against.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .dsp import ChirpParams, PdmBitMatrix, SignalMatrix, generate_chirp
from .errors import ArgumentError, ConfigError
from .geometry import ArrayGeometry, arrival_offsets, unit_vectors

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Reflector:
    range: float
    azimuth: float
    elevation: float = 0.0
    reflectivity: float = 0.2

    def __post_init__(self):
        if not self.range > 0:
            raise ConfigError(f"reflector range must be positive, got {self.range}")
        if not (self.reflectivity >= 0 and math.isfinite(self.reflectivity)):
            raise ConfigError(f"bad reflectivity {self.reflectivity}")


@dataclass(frozen=True)
class Scene:
    reflectors: tuple = ()
    noise_rms: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "reflectors", tuple(self.reflectors))
        if self.noise_rms < 0:
            raise ConfigError("noise_rms must be >= 0")

    def with_seed(self, seed: int) -> "Scene":
        return Scene(self.reflectors, self.noise_rms, seed)

    def to_json(self) -> dict:
        return {
            "noise_rms": self.noise_rms,
            "seed": self.seed,
            "reflectors": [
                {"range_m": r.range, "azimuth_deg": math.degrees(r.azimuth),
                 "elevation_deg": math.degrees(r.elevation), "reflectivity": r.reflectivity}
                for r in self.reflectors
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Scene":
        try:
            refl = [
                Reflector(float(r["range_m"]), math.radians(float(r.get("azimuth_deg", 0.0))),
                          math.radians(float(r.get("elevation_deg", 0.0))),
                          float(r.get("reflectivity", 0.2)))
                for r in doc.get("reflectors", [])
            ]
            return cls(tuple(refl), float(doc.get("noise_rms", 0.0)), int(doc.get("seed", 0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid scene description: {exc}") from None

    @classmethod
    def load(cls, path) -> "Scene":
        try:
            return cls.from_json(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")


@dataclass(frozen=True)
class Capture:
    sample_rate: float
    length: int
    start_time: float = 0.0  # time of sample 0 relative to the emission, seconds


def synthesize_scene(geometry: ArrayGeometry, chirp: ChirpParams, scene: Scene,
                     capture: Capture, c: float = 343.0) -> SignalMatrix:
    """Microphone signals for a scene under a far-field, 1/r^2 echo model.

    Each reflector adds ``reflectivity / range**2`` times the chirp, delayed
    by the round trip plus the plane-wave offset of the microphone, rounded
    to whole samples at the capture rate.
    """
    fs = capture.sample_rate
    ref = generate_chirp(chirp.at_rate(fs)).data[0]
    n_mic = len(geometry.positions)
    out = np.zeros((n_mic, capture.length), dtype=np.float64)
    for r in scene.reflectors:
        amp = r.reflectivity / r.range ** 2
        if amp == 0:
            continue
        u = unit_vectors(np.array([r.azimuth]), np.array([r.elevation]))
        tau = arrival_offsets(geometry, u, c)[0]
        onsets = np.rint((2 * r.range / c + tau - capture.start_time) * fs).astype(np.int64)
        if onsets.min() < 0 or onsets.max() + ref.size > capture.length:
            raise ArgumentError(
                f"echo of reflector at {r.range} m does not fit the {capture.length}-sample window")
        for i, n0 in enumerate(onsets):
            out[i, n0:n0 + ref.size] += amp * ref
    if scene.noise_rms > 0:
        rng = np.random.default_rng(scene.seed)
        out += scene.noise_rms * rng.standard_normal(out.shape)
    return SignalMatrix(out, fs)


@numba.njit(cache=True, nogil=True)
def _sigma_delta(x, out):
    n_ch, n = x.shape
    for ch in range(n_ch):
        e = 0.0
        for i in range(n):
            v = e + x[ch, i]
            b = 1 if v >= 0.0 else -1
            out[ch, i] = b
            e = v - b


def sigma_delta_modulate(signal: SignalMatrix) -> PdmBitMatrix:
    """First-order 1-bit sigma-delta loop, one independent loop per channel.

    Inputs beyond [-1, 1] are clipped; the number of clipped samples is
    logged and stored on the result.
    """
    x = np.ascontiguousarray(signal.data, dtype=np.float64)
    clipped = int(np.count_nonzero(np.abs(x) > 1.0))
    if clipped:
        log.warning("sigma-delta input clipped on %d samples", clipped)
        x = np.clip(x, -1.0, 1.0)
    out = np.empty(x.shape, dtype=np.int8)
    _sigma_delta(x, out)
    return PdmBitMatrix(out, signal.sample_rate, clipped)


def pack_pdm(bits: PdmBitMatrix) -> bytes:
    """Inverse of ``unpack_pdm``: frame-major, MSB-first."""
    if bits.frames % 8:
        raise ArgumentError(f"frame count {bits.frames} is not a multiple of 8")
    return np.packbits(bits.values.T > 0).tobytes()


def synthesize_measurement(cfg, scene: Scene, serial: int = 0, timestamp_us: int = 0, seq: int = 0):
    """Scene -> PDM bitstream -> packed RawMeasurement for a pipeline config."""
    from .wire import RawMeasurement

    for r in scene.reflectors:
        if r.range > cfg.max_range:
            raise ConfigError(f"reflector at {r.range} m beyond max_range {cfg.max_range} m")
    capture = Capture(cfg.pdm_rate, cfg.frames, -cfg.preroll_time)
    analog = synthesize_scene(cfg.geometry, cfg.chirp, scene, capture, cfg.speed_of_sound)
    bits = sigma_delta_modulate(analog)
    return RawMeasurement(
        sensor_serial=serial, timestamp_us=timestamp_us, seq=seq,
        channels=bits.channels, frames=bits.frames, pdm_rate=cfg.pdm_rate,
        payload=pack_pdm(bits))
