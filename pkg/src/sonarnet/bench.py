"""Timing harness: per-measurement process() time for the standard direction
grids, and a loopback soak of the full node stack."""

from __future__ import annotations

import csv
import datetime as dt
import io
import logging
import os
import platform
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError
from .geometry import GRID_KINDS
from .pipeline import PipelineConfig, Workspace
from .synth import Reflector, Scene, synthesize_measurement

log = logging.getLogger(__name__)

BENCH_COLUMNS = ("config", "directions", "n", "mean_ms", "std_ms", "min_ms", "max_ms",
                 "hardware", "workers", "timestamp")


def hardware_description() -> str:
    model = platform.processor() or platform.machine()
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.startswith("model name"):
                    model = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    cores = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count()
    return f"{model}, {cores} core(s), Python {platform.python_version()}, numpy {np.__version__}"


def bench_scene(seed: int = 2024) -> Scene:
    return Scene((Reflector(1.2, 0.35, 0.0, 0.5), Reflector(2.7, -0.4, 0.1, 0.5)),
                 noise_rms=0.01, seed=seed)


@dataclass(frozen=True)
class BenchRow:
    config: str
    directions: int
    n: int
    mean_ms: float
    std_ms: float
    min_ms: float
    max_ms: float

    @classmethod
    def from_samples(cls, config: str, directions: int, samples_ms) -> "BenchRow":
        s = list(samples_ms)
        if not s:
            raise ArgumentError("no timing samples")
        std = statistics.stdev(s) if len(s) > 1 else 0.0
        return cls(config, directions, len(s), statistics.fmean(s), std, min(s), max(s))


@dataclass
class BenchReport:
    rows: list
    hardware: str = field(default_factory=hardware_description)
    workers: int = 1
    timestamp: str = field(default_factory=lambda: dt.datetime.now().isoformat(timespec="seconds"))

    def row(self, config: str) -> BenchRow:
        for r in self.rows:
            if r.config == config:
                return r
        raise KeyError(config)

    def to_table(self) -> str:
        """Plain-text table: one column per configuration, one row per platform."""
        heads = ["Platform"] + [f"{r.config} ({r.directions})" for r in self.rows]
        cells = [self.hardware] + [f"{r.mean_ms:.2f} ms ({r.std_ms:.2f})" for r in self.rows]
        widths = [max(len(h), len(c)) for h, c in zip(heads, cells)]
        line = lambda vals: " | ".join(v.ljust(w) for v, w in zip(vals, widths))  # noqa: E731
        n = self.rows[0].n if self.rows else 0
        title = f"Computing time per measurement, mean (standard deviation), n = {n}"
        return "\n".join([title, line(heads), "-+-".join("-" * w for w in widths), line(cells)])

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        for r in self.rows:
            w.writerow([r.config, r.directions, r.n, f"{r.mean_ms:.4f}", f"{r.std_ms:.4f}",
                        f"{r.min_ms:.4f}", f"{r.max_ms:.4f}", self.hardware, self.workers,
                        self.timestamp])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "BenchReport":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ArgumentError(f"{path}: empty benchmark report")
        out = [BenchRow(r["config"], int(r["directions"]), int(r["n"]), float(r["mean_ms"]),
                        float(r["std_ms"]), float(r["min_ms"]), float(r["max_ms"])) for r in rows]
        head = rows[0]
        return cls(out, head["hardware"], int(head["workers"]), head["timestamp"])


def time_process(ws: Workspace, measurements, warmup: int = 1) -> list:
    """Wall time of ``ws.process`` per measurement in ms; warm-up runs discarded."""
    for m in measurements[:warmup]:
        ws.process(m)
    samples = []
    for m in measurements[warmup:]:
        t0 = time.perf_counter()
        ws.process(m)
        samples.append((time.perf_counter() - t0) * 1e3)
    return samples


def run_benchmark(kinds=GRID_KINDS, n: int = 100, scene: Scene | None = None,
                  base: PipelineConfig | None = None, warmup: int = 1,
                  progress=None) -> BenchReport:
    """Time the full process() call (PDM payload in, image out) per configuration.

    The captures do not depend on the direction grid, so one set of
    ``n + warmup`` measurements is synthesized up front and shared.
    Workspace construction and synthesis are outside the timed region.
    """
    if n < 1:
        raise ArgumentError("n must be >= 1")
    base = base or PipelineConfig()
    scene = scene or bench_scene()
    measurements = [synthesize_measurement(base, scene.with_seed(scene.seed + i), seq=i)
                    for i in range(n + warmup)]
    rows = []
    for kind in kinds:
        cfg = base.with_directions(kind)
        ws = Workspace(cfg)
        samples = time_process(ws, measurements, warmup)
        rows.append(BenchRow.from_samples(kind, len(cfg.directions), samples))
        if progress:
            progress(rows[-1])
    return BenchReport(rows)


# soak


@dataclass
class SoakReport:
    sensors: int
    rate: float
    duration: float
    workers: int
    grid: str
    expected: int
    delivered: int
    elapsed_s: float
    dropped: int
    sensor_drops: int
    gaps: int
    reconnects: int
    max_backlog: int
    reader_blocked_s: float
    max_jitter_us: float
    latencies_ms: list = field(default_factory=list, repr=False)
    trigger_s: list = field(default_factory=list, repr=False)
    serials: list = field(default_factory=list, repr=False)

    @property
    def images_per_s(self) -> float:
        return self.delivered / self.elapsed_s if self.elapsed_s > 0 else 0.0

    def latency_percentiles(self) -> dict:
        if not self.latencies_ms:
            return {"p50": float("nan"), "p90": float("nan"), "p99": float("nan"),
                    "max": float("nan")}
        lat = np.asarray(self.latencies_ms)
        p50, p90, p99 = np.percentile(lat, [50, 90, 99])
        return {"p50": float(p50), "p90": float(p90), "p99": float(p99), "max": float(lat.max())}

    def summary(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "sensors", "rate", "duration", "workers", "grid", "expected", "delivered", "dropped",
            "sensor_drops", "gaps", "reconnects", "max_backlog")}
        d["images_per_s"] = round(self.images_per_s, 3)
        d["reader_blocked_s"] = round(self.reader_blocked_s, 4)
        d["max_jitter_ms"] = round(self.max_jitter_us / 1e3, 3)
        d.update({f"latency_{k}_ms": round(v, 2) for k, v in self.latency_percentiles().items()})
        return d

    def to_text(self) -> str:
        return "\n".join(f"{k:>18}: {v}" for k, v in self.summary().items())

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in self.summary().items():
            w.writerow([k, v])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def latencies_to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["serial", "trigger_s", "latency_ms"])
            for s, t, lat in zip(self.serials, self.trigger_s, self.latencies_ms):
                w.writerow([s, f"{t:.6f}", f"{lat:.3f}"])


def run_soak(sensors: int = 3, rate: float = 5.0, duration: float = 30.0, workers: int = 4,
             grid: str = "horizontal90", variants: int = 4, base: PipelineConfig | None = None,
             drain_timeout: float = 30.0) -> SoakReport:
    """Loopback run of S sensor emulators, a processing central node and one subscriber.

    Sensors cycle through ``variants`` pre-synthesized captures so the
    emulators do not compete with the workers for CPU.  Latency runs from
    the trigger timestamp to the moment the subscriber has decoded the image.
    """
    from .nodes import AppSubscriber, CentralConfig, CentralNode, SensorConfig, SensorNode, SyncScheduler

    if sensors < 1 or rate <= 0 or duration <= 0:
        raise ArgumentError("sensors >= 1, rate > 0 and duration > 0 required")
    cfg = (base or PipelineConfig()).with_directions(grid)
    triggers = max(1, round(rate * duration))
    expected = sensors * triggers
    central = CentralNode(CentralConfig(port=0, workers=workers, pipeline=cfg)).start()
    try:
        app = AppSubscriber(central.address, reconnect=False).connect()
        sched = SyncScheduler(rate, max_triggers=triggers)
        scene = bench_scene()
        nodes = [SensorNode(SensorConfig(i + 1, central.address, scene.with_seed(100 * i), rate,
                                         cfg, variants=max(1, variants)), sched)
                 for i in range(sensors)]
        for node in nodes:
            node.start()
        sched.start()
        t_start = time.time()
        report_lat, report_t, report_serial = [], [], []
        idle = max(5.0, 5.0 / rate)
        deadline = time.monotonic() + duration + drain_timeout
        while len(report_lat) < expected and time.monotonic() < deadline:
            img = app.next_image(idle)
            if img is None:
                break
            now_us = time.time() * 1e6
            report_lat.append((now_us - img.timestamp_us) / 1e3)
            report_t.append(img.timestamp_us / 1e6 - t_start)
            report_serial.append(img.sensor_serial)
        elapsed = time.time() - t_start
        sched.stop()
        for node in nodes:
            node.join(5.0)
            node.stop()
        app.close()
        sensor_drops = sum(n.dropped for n in nodes)
        delivered = len(report_lat)
        return SoakReport(
            sensors=sensors, rate=rate, duration=duration, workers=workers, grid=grid,
            expected=expected, delivered=delivered, elapsed_s=elapsed,
            dropped=expected - delivered, sensor_drops=sensor_drops, gaps=len(app.gaps),
            reconnects=sum(n.reconnects for n in nodes),
            max_backlog=max(n.max_backlog for n in nodes),
            reader_blocked_s=float(central.stats["reader_blocked_s"]),
            max_jitter_us=sched.max_jitter_us,
            latencies_ms=report_lat, trigger_s=report_t, serials=report_serial)
    finally:
        central.stop()
