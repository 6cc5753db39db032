"""Figures for reports and images.  Renders off-screen to files."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

golden = (math.sqrt(5) - 1) / 2
width = 6.0

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _figure(scale=1.0, aspect=golden):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width * scale, width * scale * aspect))
    return fig, ax


def _save(fig, path):
    with plt.rc_context(STYLE):
        fig.savefig(path)
    plt.close(fig)
    return path


def bench_figure(report, path):
    """Mean processing time per configuration, with +-1 std error bars."""
    fig, ax = _figure(0.8)
    labels = [f"{r.config}\n({r.directions} dirs)" for r in report.rows]
    means = [r.mean_ms for r in report.rows]
    stds = [r.std_ms for r in report.rows]
    x = np.arange(len(report.rows))
    ax.bar(x, means, yerr=stds, capsize=4, color="#4eb3d3", edgecolor="#08589e")
    for xi, m in zip(x, means):
        ax.annotate(f"{m:.1f}", (xi, m), textcoords="offset points", xytext=(0, 4),
                    ha="center", fontsize=8)
    ax.set_xticks(x, labels)
    ax.set_ylabel("process() time per measurement [ms]")
    ax.set_title(f"n = {report.rows[0].n if report.rows else 0} measurements, {report.hardware}",
                 fontsize=8)
    return _save(fig, path)


def soak_figure(report, path):
    """End-to-end latency of every delivered image against its trigger time."""
    fig, ax = _figure(0.8)
    t = np.asarray(report.trigger_s)
    lat = np.asarray(report.latencies_ms)
    serials = np.asarray(report.serials)
    for s in sorted(set(serials.tolist())):
        sel = serials == s
        ax.plot(t[sel], lat[sel], ".", ms=3, label=f"sensor {s}")
    ax.axhline(1000.0 / report.rate, color="0.5", lw=0.8, ls="--", label="trigger period")
    ax.set_xlabel("trigger time [s]")
    ax.set_ylabel("trigger to delivery latency [ms]")
    ax.legend(frameon=False, loc="upper right")
    return _save(fig, path)


def image_figure(img, path, max_range: float | None = None):
    """Energy map: azimuth x range for a single row of directions, else the
    strongest echo per direction as a scatter over (azimuth, elevation)."""
    az = np.degrees(img.directions.azimuth)
    el = np.degrees(img.directions.elevation)
    e = img.energies
    if np.ptp(el) < 1e-9:
        fig, ax = _figure(0.8)
        ranges = img.range_for_bin(np.arange(img.range_bins))
        mesh = ax.pcolormesh(az, ranges, e.T, shading="nearest", cmap="magma")
        ax.set_xlabel("azimuth [deg]")
        ax.set_ylabel("range [m]")
        if max_range:
            ax.set_ylim(0, max_range)
    else:
        fig, ax = _figure(0.8, aspect=0.8)
        mesh = ax.scatter(az, el, c=e.max(axis=1), s=8, cmap="magma")
        ax.set_xlabel("azimuth [deg]")
        ax.set_ylabel("elevation [deg]")
    fig.colorbar(mesh, ax=ax, label="energy")
    ax.set_title(f"sensor {img.sensor_serial}, seq {img.seq}", fontsize=8)
    return _save(fig, path)
