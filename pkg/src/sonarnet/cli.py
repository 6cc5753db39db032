"""Command-line entry point: ``sonarnet <command> ...``.

Exit codes: 0 ok, 1 configuration error, 2 I/O error, 3 protocol error.
Set SONARNET_LOG (debug, info, warning, error) for log verbosity.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import threading
from pathlib import Path

from . import wire
from .errors import ArgumentError, ConfigError, DecodeError, ProtocolError
from .pipeline import PipelineConfig, Workspace

log = logging.getLogger("sonarnet")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_PROTOCOL = 0, 1, 2, 3


def _address(text: str) -> tuple:
    host, sep, port = text.rpartition(":")
    if not sep:
        host, port = "127.0.0.1", text
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}") from None


def _serials(text: str) -> list:
    try:
        return [int(s, 0) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated serials, got {text!r}") from None


def _pipeline(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    grid = getattr(args, "grid", None)
    return cfg.with_directions(grid) if grid else cfg


def _scene(args):
    from .nodes.sensor import default_scene
    from .synth import Scene

    scene = Scene.load(args.scene) if args.scene else default_scene()
    if getattr(args, "seed", None) is not None:
        scene = scene.with_seed(args.seed)
    return scene


def _wait_forever(stop: threading.Event):
    try:
        while not stop.wait(0.5):
            pass
    except KeyboardInterrupt:
        log.info("interrupted")


# commands

def cmd_central(args) -> int:
    from .nodes import CentralConfig, CentralNode

    cfg = CentralConfig(
        mode=args.mode, host=args.host, port=args.port, workers=args.workers,
        pipeline=_pipeline(args) if args.mode == "processing" else None,
        storage_dir=Path(args.out) if args.out else None,
        input_capacity=args.input_capacity, output_capacity=args.output_capacity)
    node = CentralNode(cfg).start()
    print(f"central node ({cfg.mode}) listening on {node.address[0]}:{node.address[1]}", flush=True)
    _wait_forever(threading.Event())
    node.stop()
    log.info("central stats: %s", node.stats)
    return EXIT_OK


def cmd_sensor(args) -> int:
    from .nodes import SensorConfig, SensorNode, SyncScheduler

    pipeline = _pipeline(args)
    scene = _scene(args)
    sched = SyncScheduler(args.rate, max_triggers=args.count)
    nodes = []
    for i, serial in enumerate(args.serial):
        cfg = SensorConfig(serial, args.central, scene.with_seed(scene.seed + 1000 * i), args.rate,
                           pipeline, buffer_size=args.buffer, variants=args.variants)
        nodes.append(SensorNode(cfg, sched).start())
    sched.start()
    try:
        for n in nodes:
            n.join()
    except KeyboardInterrupt:
        sched.stop()
        for n in nodes:
            n.stop()
    for n in nodes:
        print("\t".join(f"{k}={v}" for k, v in n.stats().items()))
    return EXIT_OK


def cmd_app(args) -> int:
    from .nodes import AppSubscriber

    out = Path(args.dump_dir) if args.dump_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    sub = AppSubscriber(args.central, args.serials or (), reconnect=not args.once)
    sub.connect()
    try:
        for img in sub.images(limit=args.count, idle_timeout=args.idle_timeout):
            peak_dir, peak_bin = img.peak()
            d = img.directions[peak_dir]
            print(f"serial={img.sensor_serial} seq={img.seq} ts={img.timestamp_us} "
                  f"peak_az={d.azimuth:.4f} peak_el={d.elevation:.4f} "
                  f"peak_range={img.range_for_bin(peak_bin):.3f}", flush=True)
            if out:
                stem = out / f"{img.sensor_serial:08x}_{img.seq:012}"
                img.save(stem.with_suffix(".aimg"))
                if args.csv:
                    img.to_csv(stem.with_suffix(".csv"))
    except KeyboardInterrupt:
        pass
    finally:
        sub.close()
    for serial, first, nxt in sub.gaps:
        print(f"gap: serial={serial} missing seq {first}..{nxt - 1}", file=sys.stderr)
    return EXIT_OK


def cmd_process(args) -> int:
    m = wire.decode_raw_measurement(Path(args.input).read_bytes())
    img = Workspace(_pipeline(args)).process(m)
    img.save(args.out)
    if args.csv:
        img.to_csv(args.csv)
    if args.png:
        from .plot import image_figure

        image_figure(img, args.png)
    pd, pb = img.peak()
    print(f"peak direction {pd} ({img.directions[pd].azimuth:.4f} rad az), "
          f"range bin {pb} ({img.range_for_bin(pb):.3f} m)")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synth import synthesize_measurement

    m = synthesize_measurement(_pipeline(args), _scene(args), args.serial, args.timestamp, args.seq)
    Path(args.out).write_bytes(wire.encode_raw_measurement(m))
    print(f"wrote {args.out}: {m.channels} channels x {m.frames} frames")
    return EXIT_OK


def cmd_bench_pipeline(args) -> int:
    from .bench import run_benchmark
    from .plot import bench_figure

    base = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    report = run_benchmark(args.grids, n=args.n, base=base,
                           progress=lambda r: log.info("%s: %.2f ms", r.config, r.mean_ms))
    print(report.to_table())
    if args.out:
        out = Path(args.out)
        report.to_csv(out)
        bench_figure(report, out.with_suffix(".png"))
        print(f"wrote {out} and {out.with_suffix('.png')}")
    return EXIT_OK


def cmd_bench_soak(args) -> int:
    from .bench import run_soak
    from .plot import soak_figure

    base = PipelineConfig.load(args.config) if args.config else None
    report = run_soak(args.sensors, args.rate, args.duration, args.workers, args.grid,
                      variants=args.variants, base=base)
    print(report.to_text())
    if args.out:
        out = Path(args.out)
        report.to_csv(out)
        report.latencies_to_csv(out.with_name(out.stem + "_latency.csv"))
        soak_figure(report, out.with_suffix(".png"))
        print(f"wrote {out}, {out.stem}_latency.csv and {out.with_suffix('.png')}")
    return EXIT_OK if report.dropped == 0 else EXIT_PROTOCOL


def build_parser() -> argparse.ArgumentParser:
    from .geometry import GRID_KINDS

    p = argparse.ArgumentParser(prog="sonarnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def config_opts(sp, grid=True):
        sp.add_argument("--config", help="pipeline config JSON (default: built-in defaults)")
        if grid:
            sp.add_argument("--grid", choices=GRID_KINDS, help="override the direction set")

    sp = sub.add_parser("central", help="run the central node")
    sp.add_argument("--mode", choices=("storage", "processing"), default="processing")
    sp.add_argument("--host", default="0.0.0.0")
    sp.add_argument("--port", type=int, default=7500)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--out", help="storage directory (storage mode)")
    sp.add_argument("--input-capacity", type=int, default=16)
    sp.add_argument("--output-capacity", type=int, default=16)
    config_opts(sp)
    sp.set_defaults(func=cmd_central)

    sp = sub.add_parser("sensor", help="run one or more emulated sensors on a shared trigger")
    sp.add_argument("--serial", type=_serials, required=True, help="serial or comma list")
    sp.add_argument("--central", type=_address, default=("127.0.0.1", 7500))
    sp.add_argument("--scene", help="scene JSON (default: one reflector at 1.5 m)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--rate", type=float, default=20.0)
    sp.add_argument("--count", type=int, help="stop after this many triggers")
    sp.add_argument("--buffer", type=int, default=64)
    sp.add_argument("--variants", type=int, default=0,
                    help="pre-synthesize N captures and cycle through them")
    config_opts(sp, grid=False)
    sp.set_defaults(func=cmd_sensor)

    sp = sub.add_parser("app", help="subscribe to processed images")
    sp.add_argument("--central", type=_address, default=("127.0.0.1", 7500))
    sp.add_argument("--serials", type=_serials)
    sp.add_argument("--dump-dir")
    sp.add_argument("--csv", action="store_true", help="also write CSV next to each image")
    sp.add_argument("--count", type=int)
    sp.add_argument("--idle-timeout", type=float)
    sp.add_argument("--once", action="store_true", help="do not re-subscribe after a disconnect")
    sp.set_defaults(func=cmd_app)

    sp = sub.add_parser("process", help="offline: measurement file -> image file")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--csv")
    sp.add_argument("--png")
    config_opts(sp)
    sp.set_defaults(func=cmd_process)

    sp = sub.add_parser("synth", help="synthesize one measurement file from a scene")
    sp.add_argument("--scene")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.add_argument("--serial", type=int, default=0)
    sp.add_argument("--seq", type=int, default=0)
    sp.add_argument("--timestamp", type=int, default=0)
    config_opts(sp, grid=False)
    sp.set_defaults(func=cmd_synth)

    bp = sub.add_parser("bench", help="benchmarks").add_subparsers(dest="bench", required=True)
    sp = bp.add_parser("pipeline", help="process() timing for the direction grids")
    sp.add_argument("--n", type=int, default=100)
    sp.add_argument("--out", help="CSV report path; a PNG figure is written next to it")
    sp.add_argument("--grids", nargs="+", choices=GRID_KINDS, default=list(GRID_KINDS))
    sp.add_argument("--config")
    sp.set_defaults(func=cmd_bench_pipeline)
    sp = bp.add_parser("soak", help="loopback throughput and latency of the node stack")
    sp.add_argument("--sensors", type=int, default=3)
    sp.add_argument("--rate", type=float, default=5.0)
    sp.add_argument("--duration", type=float, default=30.0)
    sp.add_argument("--workers", type=int, default=4)
    sp.add_argument("--grid", choices=GRID_KINDS, default="horizontal90")
    sp.add_argument("--variants", type=int, default=4)
    sp.add_argument("--out", help="CSV summary path; latency CSV and PNG are written next to it")
    sp.add_argument("--config")
    sp.set_defaults(func=cmd_bench_soak)
    return p


def setup_logging():
    level = os.environ.get("SONARNET_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ArgumentError) as exc:
        print(f"sonarnet: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ProtocolError, DecodeError) as exc:
        print(f"sonarnet: protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except OSError as exc:
        print(f"sonarnet: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
