"""Sensor-node emulator: on each trigger, synthesize a PDM capture and ship it
to the central node.

Two threads per sensor: a producer that turns triggers into encoded frames
and a sender that owns the TCP connection.  Frames wait in a bounded local
buffer; when it overflows the oldest frame is dropped and counted.  Frames
stay in flight until the central node acknowledges that it has finished
them, and are resent after a reconnect.
"""

from __future__ import annotations

import collections
import logging
import select
import socket
import threading
import time
from dataclasses import dataclass, field, replace

from .. import wire
from ..errors import ConfigError, ProtocolError
from ..pipeline import PipelineConfig
from ..synth import Reflector, Scene, synthesize_measurement
from .sync import SyncScheduler

log = logging.getLogger(__name__)


def default_scene() -> Scene:
    return Scene((Reflector(1.5, 0.0, 0.0, 0.5),), noise_rms=0.01, seed=0)


@dataclass(frozen=True)
class SensorConfig:
    serial: int
    central: tuple = ("127.0.0.1", 7500)
    scene: Scene = field(default_factory=default_scene)
    rate: float = 20.0
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    buffer_size: int = 64
    window: int = 8
    # >0: pre-synthesize this many noise realisations and cycle through them
    variants: int = 0
    backoff_initial: float = 0.05
    backoff_max: float = 2.0

    def __post_init__(self):
        if not 0 <= self.serial < 2 ** 32:
            raise ConfigError(f"serial {self.serial} does not fit in u32")
        if not self.rate > 0:
            raise ConfigError(f"trigger rate must be > 0, got {self.rate}")
        if self.buffer_size < 1 or self.window < 1:
            raise ConfigError("buffer_size and window must be >= 1")
        if self.variants < 0:
            raise ConfigError("variants must be >= 0")


class SensorNode:
    def __init__(self, cfg: SensorConfig, scheduler: SyncScheduler | None = None):
        self.cfg = cfg
        self.scheduler = scheduler
        self._own_scheduler = scheduler is None
        if self._own_scheduler:
            self.scheduler = SyncScheduler(cfg.rate)
        self._triggers = self.scheduler.subscribe()
        self._buffer = collections.deque()
        self._inflight = collections.deque()
        self._cond = threading.Condition()
        self._stop = threading.Event()
        self._produced_all = False
        self._sock = None
        self._threads = []
        self._templates = []
        self.synthesized = 0
        self.sent = 0
        self.acked = 0
        self.dropped = 0
        self.reconnects = 0
        self.max_backlog = 0
        self.send_wait_s = 0.0
        if cfg.variants:
            self._prepare_variants()

    def _prepare_variants(self):
        cfg = self.cfg
        for v in range(cfg.variants):
            scene = cfg.scene.with_seed(cfg.scene.seed + v)
            self._templates.append(synthesize_measurement(cfg.pipeline, scene, cfg.serial))

    def measurement(self, timestamp_us: int, seq: int) -> wire.RawMeasurement:
        cfg = self.cfg
        if self._templates:
            tpl = self._templates[seq % len(self._templates)]
            return replace(tpl, timestamp_us=timestamp_us, seq=seq)
        scene = cfg.scene.with_seed(cfg.scene.seed + seq)
        return synthesize_measurement(cfg.pipeline, scene, cfg.serial, timestamp_us, seq)

    # lifecycle

    def start(self):
        for target, name in ((self._produce, "producer"), (self._send_loop, "sender")):
            t = threading.Thread(target=target, name=f"sensor-{self.cfg.serial}-{name}", daemon=True)
            t.start()
            self._threads.append(t)
        if self._own_scheduler:
            self.scheduler.start()
        return self

    def stop(self):
        """Stop immediately; buffered frames are abandoned."""
        self._stop.set()
        if self._own_scheduler:
            self.scheduler.stop()
        self._triggers.put(None)
        with self._cond:
            self._cond.notify_all()
        self._close()

    def join(self, timeout: float | None = None) -> bool:
        """Wait until every trigger has been delivered (or ``stop``)."""
        deadline = None if timeout is None else time.monotonic() + timeout
        for t in self._threads:
            left = None if deadline is None else max(0.0, deadline - time.monotonic())
            t.join(left)
        return not any(t.is_alive() for t in self._threads)

    @property
    def backlog(self) -> int:
        with self._cond:
            return len(self._buffer) + len(self._inflight)

    def stats(self) -> dict:
        return {"serial": self.cfg.serial, "synthesized": self.synthesized, "sent": self.sent,
                "acked": self.acked, "dropped": self.dropped, "reconnects": self.reconnects,
                "max_backlog": self.max_backlog, "send_wait_s": self.send_wait_s}

    # producer

    def _produce(self):
        try:
            while not self._stop.is_set():
                trig = self._triggers.get()
                if trig is None:
                    break
                m = self.measurement(trig.timestamp_us, trig.seq)
                frame = wire.encode_packet(wire.measurement_packet(m))
                self.synthesized += 1
                self._enqueue(trig.seq, frame)
        except Exception:
            log.exception("sensor %d: producer failed", self.cfg.serial)
            raise
        finally:
            with self._cond:
                self._produced_all = True
                self._cond.notify_all()

    def _enqueue(self, seq: int, frame: bytes):
        with self._cond:
            self._buffer.append((seq, frame))
            excess = len(self._buffer) + len(self._inflight) - self.cfg.buffer_size
            while excess > 0 and self._buffer:
                lost, _ = self._buffer.popleft()
                self.dropped += 1
                excess -= 1
                log.warning("sensor %d: buffer full, dropped seq %d (%d dropped so far)",
                            self.cfg.serial, lost, self.dropped)
            self.max_backlog = max(self.max_backlog, len(self._buffer) + len(self._inflight))
            self._cond.notify_all()

    # sender

    def _send_loop(self):
        backoff = self.cfg.backoff_initial
        while not self._stop.is_set():
            with self._cond:
                while not self._buffer and not self._stop.is_set():
                    if self._produced_all and not self._inflight:
                        break
                    if self._inflight and self._sock is not None:
                        break
                    self._cond.wait(0.1)
                if self._stop.is_set():
                    break
                if not self._buffer and not self._inflight and self._produced_all:
                    break
            if self._sock is None:
                if not self._connect():
                    self._stop.wait(backoff)
                    backoff = min(backoff * 2, self.cfg.backoff_max)
                    continue
                backoff = self.cfg.backoff_initial
            try:
                self._pump()
            except (OSError, ProtocolError) as exc:
                if self._stop.is_set():
                    break
                log.warning("sensor %d: connection lost (%s), reconnecting", self.cfg.serial, exc)
                self._requeue_inflight()
                self._close()
                self.reconnects += 1
        self._close()

    def _connect(self) -> bool:
        try:
            sock = socket.create_connection(self.cfg.central, timeout=5.0)
        except OSError as exc:
            log.debug("sensor %d: connect to %s:%d failed: %s", self.cfg.serial, *self.cfg.central, exc)
            return False
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self._decoder = wire.FrameDecoder(max_payload=1 << 16)
        log.info("sensor %d: connected to %s:%d", self.cfg.serial, *self.cfg.central)
        return True

    def _pump(self):
        """Send what the window allows, then wait briefly for acknowledgements."""
        while True:
            with self._cond:
                if not self._buffer or len(self._inflight) >= self.cfg.window:
                    break
                seq, frame = self._buffer.popleft()
                self._inflight.append((seq, frame))
            t0 = time.monotonic()
            self._sock.sendall(frame)
            self.send_wait_s += time.monotonic() - t0
            self.sent += 1
        with self._cond:
            waiting = bool(self._inflight)
        if waiting:
            self._read_acks(0.05)

    def _read_acks(self, timeout: float):
        ready, _, _ = select.select([self._sock], [], [], timeout)
        if not ready:
            return
        data = self._sock.recv(65536)
        if not data:
            raise ConnectionResetError("central closed the connection")
        self._decoder.feed(data)
        for ev in self._decoder.events():
            if isinstance(ev, ProtocolError):
                log.warning("sensor %d: bad frame from central: %s", self.cfg.serial, ev)
                continue
            if ev.msg_type == wire.MsgType.ACK:
                self._ack(ev.seq)
            elif ev.msg_type == wire.MsgType.ERROR:
                log.warning("sensor %d: central reported: %s", self.cfg.serial,
                            ev.payload.decode("utf-8", "replace"))

    def _ack(self, seq: int):
        # storage workers finish out of order, so match the exact seq
        with self._cond:
            for i, (s, _) in enumerate(self._inflight):
                if s == seq:
                    del self._inflight[i]
                    self.acked += 1
                    self._cond.notify_all()
                    break

    def _requeue_inflight(self):
        with self._cond:
            while self._inflight:
                self._buffer.appendleft(self._inflight.pop())

    def _close(self):
        sock, self._sock = self._sock, None
        if sock is not None:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                sock.close()
            except OSError:
                pass
