"""Central node: accepts sensor and application connections, queues incoming
measurements and either stores them or processes them with a worker pool.

Threads: one accept loop, one reader per connection, K workers with a
workspace each, and (processing mode) one dispatcher that restores arrival
order and fans images out to subscribers.  Queues are bounded and full
queues block the producer, so overload propagates back to the sensors.

A measurement is acknowledged to its sensor only once it is finished (file
written, or image handed to the subscribers), on whichever connection
currently serves that sensor.  Anything a dying node had queued is therefore
still unacknowledged and gets resent to its successor.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import os
import queue
import socket
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .. import wire
from ..errors import ConfigError, DecodeError, ProtocolError, SonarNetError
from ..pipeline import PipelineConfig, Workspace

log = logging.getLogger(__name__)

MODES = ("storage", "processing")
MANIFEST = "manifest.tsv"
MANIFEST_HEADER = "file\tserial\tseq\ttimestamp_us\tbytes\n"
NO_STREAM = "no processed stream"


@dataclass(frozen=True)
class CentralConfig:
    mode: str = "processing"
    host: str = "127.0.0.1"
    port: int = 7500
    workers: int = 1
    pipeline: PipelineConfig | None = None
    storage_dir: Path | None = None
    input_capacity: int = 16
    output_capacity: int = 16

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.workers < 1:
            raise ConfigError("worker count must be >= 1")
        if self.input_capacity < 1 or self.output_capacity < 1:
            raise ConfigError("queue capacities must be >= 1")
        if self.mode == "storage" and self.storage_dir is None:
            raise ConfigError("storage mode needs a storage directory")
        if self.mode == "processing" and self.pipeline is None:
            object.__setattr__(self, "pipeline", PipelineConfig())


def storage_name(m: wire.RawMeasurement) -> str:
    return f"{m.sensor_serial:08x}_{m.seq:012}_{m.timestamp_us}.pdm"


def read_manifest(directory) -> list:
    """Rows of the storage manifest as dicts (header line skipped)."""
    rows = []
    lines = (Path(directory) / MANIFEST).read_text().splitlines()
    keys = lines[0].split("\t")
    for line in lines[1:]:
        if line:
            rows.append(dict(zip(keys, line.split("\t"))))
    return rows


@dataclass
class _Subscriber:
    sock: socket.socket
    serials: frozenset
    lock: threading.Lock = field(default_factory=threading.Lock)
    delivered: int = 0
    alive: bool = True

    def wants(self, serial: int) -> bool:
        return not self.serials or serial in self.serials

    def send(self, frame: bytes) -> bool:
        with self.lock:
            if not self.alive:
                return False
            try:
                self.sock.sendall(frame)
                return True
            except OSError:
                self.alive = False
                return False


@dataclass
class _Route:
    sock: socket.socket
    lock: threading.Lock = field(default_factory=threading.Lock)

    def send(self, frame: bytes):
        with self.lock:
            try:
                self.sock.sendall(frame)
            except OSError:
                pass  # the sensor resends after reconnecting


class CentralNode:
    def __init__(self, cfg: CentralConfig):
        self.cfg = cfg
        self.inbox = queue.Queue(cfg.input_capacity)
        self.outbox = queue.Queue(cfg.output_capacity)
        self._arrivals = itertools.count()
        self._arrival_lock = threading.Lock()
        self._stats_lock = threading.Lock()
        self._idle = threading.Condition(self._stats_lock)
        self._stop = threading.Event()
        self._subscribers: list = []
        self._sub_lock = threading.Lock()
        self._conns: set = set()
        self._threads: list = []
        self._last_seen: dict = {}
        # serial -> route for ACKs, serial -> seqs accepted but not finished
        self._routes: dict = {}
        self._pending: dict = {}
        self._pending_lock = threading.Lock()
        self._manifest_lock = threading.Lock()
        self.stats = dict.fromkeys(
            ("connections", "received", "duplicates", "malformed", "completed", "stored",
             "processed", "failed", "delivered", "discarded", "reader_blocked_s"), 0)
        self.sock = None
        if cfg.mode == "processing":
            # built up front so connection setup never pays for it
            self.workspaces = [Workspace(cfg.pipeline) for _ in range(cfg.workers)]
        else:
            Path(cfg.storage_dir).mkdir(parents=True, exist_ok=True)
            manifest = Path(cfg.storage_dir) / MANIFEST
            if not manifest.exists():
                manifest.write_text(MANIFEST_HEADER)

    # lifecycle

    @property
    def address(self) -> tuple:
        return self.sock.getsockname()[:2]

    def start(self):
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((self.cfg.host, self.cfg.port))
        except OSError:
            sock.close()
            raise
        sock.listen(64)
        # accept() is not woken by close() on Linux; poll the stop flag instead
        sock.settimeout(0.2)
        self.sock = sock
        self._spawn(self._accept_loop, "central-accept")
        for k in range(self.cfg.workers):
            self._spawn(self._worker, f"central-worker-{k}", k)
        if self.cfg.mode == "processing":
            self._spawn(self._dispatch, "central-dispatch")
        log.info("central node (%s, %d workers) listening on %s:%d",
                 self.cfg.mode, self.cfg.workers, *self.address)
        return self

    def _spawn(self, target, name, *args):
        t = threading.Thread(target=target, args=args, name=name, daemon=True)
        t.start()
        self._threads.append(t)

    def stop(self, timeout: float = 5.0):
        """Close every connection and stop the threads; queued work is abandoned."""
        self._stop.set()
        if self.sock is not None:
            try:
                self.sock.close()
            except OSError:
                pass
        for conn in list(self._conns):
            _shutdown(conn)
        for _ in range(self.cfg.workers):
            _put_nowait_or_drop(self.inbox, None)
        _put_nowait_or_drop(self.outbox, None)
        deadline = time.monotonic() + timeout
        for t in self._threads:
            t.join(max(0.0, deadline - time.monotonic()))

    def wait_idle(self, timeout: float | None = None, expected: int | None = None) -> bool:
        """Block until every accepted measurement has been stored or dispatched.

        With ``expected``, also wait until that many measurements were received.
        """
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._idle:
            while True:
                s = self.stats
                done = s["completed"] == s["received"]
                if done and (expected is None or s["received"] >= expected):
                    return True
                left = None if deadline is None else deadline - time.monotonic()
                if left is not None and left <= 0:
                    return False
                self._idle.wait(0.1 if left is None else min(left, 0.1))

    def _count(self, key: str, n=1):
        with self._stats_lock:
            self.stats[key] += n
            if key == "completed":
                self._idle.notify_all()

    @property
    def subscriber_count(self) -> int:
        with self._sub_lock:
            return sum(1 for s in self._subscribers if s.alive)

    # connections

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                conn, peer = self.sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            conn.settimeout(None)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._conns.add(conn)
            self._count("connections")
            self._spawn(self._read_connection, f"central-conn-{peer[1]}", conn, peer)

    def _read_connection(self, conn, peer):
        decoder = wire.FrameDecoder()
        buf = bytearray(1 << 20)
        role = None
        sub = None
        route = _Route(conn)
        try:
            while not self._stop.is_set():
                n = conn.recv_into(buf)
                if n == 0:
                    break
                decoder.feed(memoryview(buf)[:n])
                for ev in decoder.events():
                    if isinstance(ev, ProtocolError):
                        self._count("malformed")
                        log.warning("malformed frame from %s:%d: %s", *peer[:2], ev)
                        continue
                    if role is None:
                        role = {wire.MsgType.RAW_MEASUREMENT: "sensor",
                                wire.MsgType.SUBSCRIBE: "app"}.get(ev.msg_type)
                    if role == "sensor" and ev.msg_type == wire.MsgType.RAW_MEASUREMENT:
                        self._on_measurement(route, ev)
                    elif role == "app" and ev.msg_type == wire.MsgType.SUBSCRIBE:
                        sub = self._on_subscribe(conn, ev, sub)
                        if sub is None:
                            return
                    else:
                        self._count("malformed")
                        log.warning("unexpected %s frame from %s:%d", ev.msg_type.name, *peer[:2])
        except OSError as exc:
            if not self._stop.is_set():
                log.info("connection %s:%d dropped: %s", *peer[:2], exc)
        finally:
            if sub is not None:
                sub.alive = False
                with self._sub_lock:
                    self._subscribers.remove(sub)
            self._conns.discard(conn)
            _shutdown(conn)

    def _on_measurement(self, route, pkt: wire.Packet):
        try:
            m = wire.decode_raw_measurement(pkt.payload)
        except DecodeError as exc:
            self._count("malformed")
            log.warning("undecodable measurement from sensor %d: %s", pkt.sensor_serial, exc)
            return
        key = m.sensor_serial
        with self._pending_lock:
            self._routes[key] = route
            pending = self._pending.setdefault(key, set())
            last = self._last_seen.get(key)
            duplicate = last is not None and m.timestamp_us <= last[0] and m.seq <= last[1]
            if duplicate:
                # a resend after reconnect; ACK it now unless it is still queued
                ack_now = m.seq not in pending
            else:
                self._last_seen[key] = (m.timestamp_us, m.seq)
                pending.add(m.seq)
        if duplicate:
            self._count("duplicates")
            if ack_now:
                route.send(_ack_frame(key, m.timestamp_us, m.seq))
            return
        with self._arrival_lock:
            idx = next(self._arrivals)
            self._count("received")
        t0 = time.monotonic()
        self.inbox.put((idx, m))
        blocked = time.monotonic() - t0
        if blocked > 1e-3:
            self._count("reader_blocked_s", blocked)

    def _finished(self, serial: int, timestamp_us: int, seq: int):
        with self._pending_lock:
            self._pending.get(serial, set()).discard(seq)
            route = self._routes.get(serial)
        if route is not None:
            route.send(_ack_frame(serial, timestamp_us, seq))

    def _on_subscribe(self, conn, pkt: wire.Packet, sub):
        if self.cfg.mode != "processing":
            conn.sendall(wire.encode_packet(wire.error_packet(NO_STREAM)))
            return None
        try:
            serials = wire.parse_subscribe(pkt)
        except DecodeError as exc:
            conn.sendall(wire.encode_packet(wire.error_packet(str(exc))))
            return sub
        if sub is None:
            sub = _Subscriber(conn, serials)
            with self._sub_lock:
                self._subscribers.append(sub)
        else:
            sub.serials = serials
        sub.send(wire.encode_packet(wire.Packet(wire.MsgType.ACK)))
        log.info("subscriber registered, filter=%s", sorted(serials) or "all")
        return sub

    # workers

    def _worker(self, k: int):
        store = self.cfg.mode == "storage"
        ws = None if store else self.workspaces[k]
        while True:
            item = self.inbox.get()
            if item is None or self._stop.is_set():
                break
            idx, m = item
            if store:
                try:
                    self._store(m)
                    self._count("stored")
                except OSError as exc:
                    self._count("failed")
                    log.error("could not store seq %d of sensor %d: %s", m.seq, m.sensor_serial, exc)
                self._finished(m.sensor_serial, m.timestamp_us, m.seq)
                self._count("completed")
                continue
            try:
                result = ws.process(m)
                self._count("processed")
            except SonarNetError as exc:
                result = exc
            except Exception as exc:
                log.exception("worker %d failed on seq %d of sensor %d", k, m.seq, m.sensor_serial)
                result = exc
            if isinstance(result, Exception):
                self._count("failed")
                result = wire.error_packet(f"processing failed: {result}", m.sensor_serial,
                                           m.timestamp_us, m.seq)
            self.outbox.put((idx, result))

    def _store(self, m: wire.RawMeasurement):
        root = Path(self.cfg.storage_dir)
        name = storage_name(m)
        data = wire.encode_raw_measurement(m)
        tmp = root / (name + ".part")
        tmp.write_bytes(data)
        os.replace(tmp, root / name)
        row = f"{name}\t{m.sensor_serial}\t{m.seq}\t{m.timestamp_us}\t{len(data)}\n"
        with self._manifest_lock, open(root / MANIFEST, "a") as fh:
            fh.write(row)

    # dispatch

    def _dispatch(self):
        pending = []
        next_idx = 0
        while True:
            item = self.outbox.get()
            if item is None:
                break
            heapq.heappush(pending, item)  # arrival indices are unique
            while pending and pending[0][0] == next_idx:
                _, result = heapq.heappop(pending)
                self._deliver(result)
                self._finished(result.sensor_serial, result.timestamp_us, result.seq)
                next_idx += 1
                self._count("completed")

    def _deliver(self, result):
        if isinstance(result, wire.Packet):
            frame = wire.encode_packet(result)
        else:
            frame = wire.encode_packet(wire.image_packet(result))
        serial = result.sensor_serial
        with self._sub_lock:
            subs = [s for s in self._subscribers if s.alive and s.wants(serial)]
        if not subs:
            self._count("discarded")
            return
        for s in subs:
            if s.send(frame):
                s.delivered += 1
                self._count("delivered")
            else:
                _shutdown(s.sock)


def _ack_frame(serial: int, timestamp_us: int, seq: int) -> bytes:
    return wire.encode_packet(wire.Packet(wire.MsgType.ACK, serial, timestamp_us, seq))


def _shutdown(sock):
    try:
        sock.shutdown(socket.SHUT_RDWR)
    except OSError:
        pass
    try:
        sock.close()
    except OSError:
        pass


def _put_nowait_or_drop(q: queue.Queue, item):
    try:
        q.put_nowait(item)
    except queue.Full:
        # a stopping node does not care about the queued work
        try:
            q.get_nowait()
        except queue.Empty:
            pass
        try:
            q.put_nowait(item)
        except queue.Full:
            pass
