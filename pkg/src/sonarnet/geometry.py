"""Microphone-array geometry, direction grids and steering delays.

Coordinates are in the sensor frame: x points forward along boresight,
y to the left and z up.  The microphones sit in (or very close to) the
x = 0 plane.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

N_MICS = 32
APERTURE_RADIUS = 0.05
MIN_SPACING = 0.004
MAX_DEPTH = 0.005

GRID_KINDS = ("horizontal90", "box1850", "hemisphere3000")


@dataclass(frozen=True, eq=False)
class ArrayGeometry:
    """Positions of the 32 microphones of one sensor, in meters."""

    positions: np.ndarray

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64, copy=True)
        if pos.shape != (N_MICS, 3):
            raise ConfigError(f"array geometry needs {N_MICS}x3 positions, got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise ConfigError("array geometry contains non-finite coordinates")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    def __eq__(self, other):
        if not isinstance(other, ArrayGeometry):
            return NotImplemented
        return np.array_equal(self.positions, other.positions)

    def __hash__(self):
        return hash(self.positions.tobytes())

    @property
    def diameter(self) -> float:
        diff = self.positions[:, None, :] - self.positions[None, :, :]
        return float(np.sqrt((diff ** 2).sum(-1)).max())

    def min_spacing(self) -> float:
        diff = self.positions[:, None, :] - self.positions[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        dist[np.diag_indices(len(dist))] = np.inf
        return float(dist.min())

    def check_layout(self):
        """Raise ConfigError unless the physical layout constraints hold."""
        yz = np.hypot(self.positions[:, 1], self.positions[:, 2])
        if np.any(yz > APERTURE_RADIUS + 1e-12):
            raise ConfigError("microphone outside the 0.05 m aperture disk")
        if np.any(np.abs(self.positions[:, 0]) > MAX_DEPTH + 1e-12):
            raise ConfigError("microphone further than 5 mm from the array plane")
        if self.min_spacing() < MIN_SPACING - 1e-12:
            raise ConfigError("microphones closer than 4 mm")

    def save(self, path):
        lines = ["# x y z (meters), one microphone per line"]
        lines += [f"{x:.9f} {y:.9f} {z:.9f}" for x, y, z in self.positions]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "ArrayGeometry":
        rows = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ConfigError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
        return cls(np.array(rows).reshape(-1, 3))


@dataclass(frozen=True)
class Direction:
    azimuth: float
    elevation: float

    @property
    def unit_vector(self) -> np.ndarray:
        return unit_vectors(np.array([self.azimuth]), np.array([self.elevation]))[0]


def unit_vectors(azimuth, elevation) -> np.ndarray:
    """(n, 3) unit vectors for arrays of azimuth/elevation angles in radians."""
    az = np.asarray(azimuth, dtype=np.float64)
    el = np.asarray(elevation, dtype=np.float64)
    ce = np.cos(el)
    return np.stack([ce * np.cos(az), ce * np.sin(az), np.sin(el)], axis=-1)


@dataclass(frozen=True, eq=False)
class DirectionSet:
    """Ordered directions of interest.

    ``shape`` is the (rows, cols) layout of the grid when the set is a
    regular grid (used to define neighbouring bins), else ``(len,)``.
    """

    azimuth: np.ndarray
    elevation: np.ndarray
    kind: str = "custom"
    shape: tuple = field(default=())

    def __post_init__(self):
        az = np.array(self.azimuth, dtype=np.float64).ravel()
        el = np.array(self.elevation, dtype=np.float64).ravel()
        if az.shape != el.shape:
            raise ConfigError("azimuth and elevation arrays differ in length")
        if len(az) == 0:
            raise ConfigError("empty direction set")
        if np.any(np.abs(az) > math.pi + 1e-12) or np.any(np.abs(el) > math.pi / 2 + 1e-12):
            raise ConfigError("direction angles out of range")
        az.setflags(write=False)
        el.setflags(write=False)
        object.__setattr__(self, "azimuth", az)
        object.__setattr__(self, "elevation", el)
        if not self.shape:
            object.__setattr__(self, "shape", (len(az),))
        elif int(np.prod(self.shape)) != len(az):
            raise ConfigError(f"grid shape {self.shape} does not match {len(az)} directions")

    def __len__(self):
        return len(self.azimuth)

    def __getitem__(self, i) -> Direction:
        return Direction(float(self.azimuth[i]), float(self.elevation[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def __eq__(self, other):
        if not isinstance(other, DirectionSet):
            return NotImplemented
        return (self.kind == other.kind and np.array_equal(self.azimuth, other.azimuth)
                and np.array_equal(self.elevation, other.elevation))

    @property
    def directions(self) -> list:
        return list(self)

    @property
    def unit_vectors(self) -> np.ndarray:
        return unit_vectors(self.azimuth, self.elevation)

    def grid_index(self, i: int) -> tuple:
        return np.unravel_index(i, self.shape)

    def nearest(self, azimuth: float, elevation: float) -> int:
        """Index of the direction with the largest cosine to the given one."""
        u = unit_vectors(np.array([azimuth]), np.array([elevation]))[0]
        return int(np.argmax(self.unit_vectors @ u))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["azimuth_rad", "elevation_rad"])
            for az, el in zip(self.azimuth, self.elevation):
                w.writerow([repr(float(az)), repr(float(el))])

    @classmethod
    def from_csv(cls, path) -> "DirectionSet":
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
        if rows and rows[0][0].strip() == "azimuth_rad":
            rows = rows[1:]
        data = np.array([[float(a), float(e)] for a, e in rows])
        return cls(data[:, 0], data[:, 1], kind="custom")


def default_array(seed: int = 42) -> ArrayGeometry:
    """Seeded pseudo-random planar layout of 32 microphones.

    Candidates are drawn uniformly over the aperture disk and rejected when
    closer than ``MIN_SPACING`` to an accepted microphone.  The disk is more
    than ten times larger than the area the spacing rule consumes, so the
    loop terminates quickly for every seed.
    """
    rng = np.random.default_rng(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))
    accepted = []
    while len(accepted) < N_MICS:
        r = APERTURE_RADIUS * math.sqrt(rng.random())
        phi = 2 * math.pi * rng.random()
        cand = np.array([0.0, r * math.cos(phi), r * math.sin(phi)])
        if all(np.linalg.norm(cand - p) >= MIN_SPACING for p in accepted):
            accepted.append(cand)
    return ArrayGeometry(np.array(accepted))


def _fibonacci_hemisphere(n: int):
    # x is sampled uniformly in (0, 1]: equal-area bands on the forward hemisphere
    i = np.arange(n, dtype=np.float64)
    x = 1.0 - (i + 0.5) / n
    golden = math.pi * (3.0 - math.sqrt(5.0))
    phi = golden * i
    rho = np.sqrt(1.0 - x * x)
    y = rho * np.cos(phi)
    z = rho * np.sin(phi)
    el = np.arcsin(np.clip(z, -1.0, 1.0))
    az = np.arctan2(y, x)
    order = np.lexsort((az, el))
    return az[order], el[order]


def direction_grid(kind: str) -> DirectionSet:
    """Build one of the three standard direction sets.

    ``horizontal90``: 90 azimuths over [-90, 90] degrees at zero elevation.
    ``box1850``: 37 elevations x 50 azimuths over [-45, 45] degrees, row-major
    in elevation.  ``hemisphere3000``: Fibonacci lattice on the forward
    hemisphere sorted by (elevation, azimuth).
    """
    if kind == "horizontal90":
        az = np.linspace(-math.pi / 2, math.pi / 2, 90)
        return DirectionSet(az, np.zeros_like(az), kind=kind, shape=(90,))
    if kind == "box1850":
        az = np.linspace(-math.pi / 4, math.pi / 4, 50)
        el = np.linspace(-math.pi / 4, math.pi / 4, 37)
        ee, aa = np.meshgrid(el, az, indexing="ij")
        return DirectionSet(aa.ravel(), ee.ravel(), kind=kind, shape=(37, 50))
    if kind == "hemisphere3000":
        az, el = _fibonacci_hemisphere(3000)
        return DirectionSet(az, el, kind=kind, shape=(3000,))
    raise ConfigError(f"unknown direction grid kind {kind!r}; expected one of {GRID_KINDS}")


def arrival_offsets(geometry: ArrayGeometry, directions, speed_of_sound: float) -> np.ndarray:
    """Plane-wave arrival time of each microphone relative to the array origin.

    Returns seconds with shape (n_directions, 32).  A microphone displaced
    towards the source hears the wavefront first, hence the minus sign.
    """
    if isinstance(directions, Direction):
        u = directions.unit_vector[None, :]
    elif isinstance(directions, DirectionSet):
        u = directions.unit_vectors
    else:
        u = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    return -(u @ geometry.positions.T) / speed_of_sound


def steering_delays(geometry: ArrayGeometry, direction: Direction,
                    speed_of_sound: float, sample_rate: float) -> np.ndarray:
    """Per-microphone arrival delays in whole samples, shifted so the minimum is 0."""
    if speed_of_sound <= 0 or sample_rate <= 0:
        raise ConfigError("speed of sound and sample rate must be positive")
    return steering_table(geometry, direction, speed_of_sound, sample_rate)[0][0]


def steering_table(geometry: ArrayGeometry, directions, speed_of_sound: float,
                   sample_rate: float):
    """Delay table for many directions at once.

    Returns ``(delays, reference)``: ``delays`` is an int64 (n_dir, 32) array
    of nonnegative sample delays with a zero minimum per row; ``reference``
    holds, per direction, the rounded arrival time (samples) of the earliest
    microphone relative to the array origin.  ``delays + reference`` is the
    rounded arrival offset of each microphone.
    """
    offsets = arrival_offsets(geometry, directions, speed_of_sound)
    earliest = offsets.min(axis=1, keepdims=True)
    delays = np.rint((offsets - earliest) * sample_rate).astype(np.int64)
    reference = np.rint(earliest[:, 0] * sample_rate).astype(np.int64)
    return delays, reference
