"""Application-node subscriber: a sequential client for the processed stream."""

from __future__ import annotations

import logging
import socket
import time

from .. import wire
from ..errors import ConfigError, ProtocolError, SubscriptionError

log = logging.getLogger(__name__)


class AppSubscriber:
    """Subscribe to a processing central node and read images in order.

    ``serials`` restricts the stream to those sensors (empty = all).  After a
    disconnect the subscriber reconnects and re-subscribes when
    ``reconnect`` is set; any hole in a sensor's seq numbers is appended to
    ``gaps`` as ``(serial, first_missing, next_received)``.  ERROR frames sent
    in place of an image are kept in ``errors``.  A frame whose seq was
    already seen (a restarted central node replaying work) is skipped and
    counted in ``duplicates``.
    """

    def __init__(self, central: tuple, serials=(), reconnect: bool = True,
                 backoff_initial: float = 0.05, backoff_max: float = 2.0):
        self.central = tuple(central)
        self.serials = frozenset(int(s) for s in serials)
        if any(not 0 <= s < 2 ** 32 for s in self.serials):
            raise ConfigError("serial filter values must fit in u32")
        self.reconnect = reconnect
        self.backoff_initial = backoff_initial
        self.backoff_max = backoff_max
        self.last_seq: dict = {}
        self.gaps: list = []
        self.errors: list = []
        self.received = 0
        self.duplicates = 0
        self.resubscriptions = 0
        self._sock = None
        self._decoder = None
        self._ready: list = []

    def connect(self, timeout: float = 10.0):
        """Open the connection and wait for the central node's answer.

        Raises SubscriptionError when the central node refuses (storage mode).
        """
        sock = socket.create_connection(self.central, timeout=timeout)
        sock.sendall(wire.encode_packet(wire.subscribe_packet(self.serials)))
        self._sock = sock
        self._decoder = wire.FrameDecoder()
        deadline = time.monotonic() + timeout
        while True:
            pkt = self._read_packet(max(0.0, deadline - time.monotonic()))
            if pkt is None:
                self.close()
                raise TimeoutError("no answer to SUBSCRIBE")
            if pkt.msg_type == wire.MsgType.ACK:
                return self
            if pkt.msg_type == wire.MsgType.ERROR:
                self.close()
                raise SubscriptionError(pkt.payload.decode("utf-8", "replace"))
            # an image racing the ACK; keep it
            self._ready.append(pkt)

    def close(self):
        sock, self._sock = self._sock, None
        if sock is not None:
            try:
                sock.close()
            except OSError:
                pass

    def __enter__(self):
        if self._sock is None:
            self.connect()
        return self

    def __exit__(self, *exc):
        self.close()

    def _read_packet(self, timeout):
        """Next frame, None on timeout.  Raises ConnectionError on EOF."""
        while True:
            if self._ready:
                return self._ready.pop(0)
            for ev in self._decoder.events():
                if isinstance(ev, ProtocolError):
                    log.warning("bad frame from central: %s", ev)
                    continue
                self._ready.append(ev)
            if self._ready:
                continue
            self._sock.settimeout(timeout)
            try:
                data = self._sock.recv(1 << 20)
            except socket.timeout:
                return None
            if not data:
                raise ConnectionResetError("central node closed the connection")
            self._decoder.feed(data)

    def _resubscribe(self):
        self.close()
        backoff = self.backoff_initial
        while True:
            try:
                self.connect()
                self.resubscriptions += 1
                log.info("re-subscribed to %s:%d", *self.central)
                return
            except OSError:
                time.sleep(backoff)
                backoff = min(backoff * 2, self.backoff_max)

    def next_image(self, timeout: float | None = None):
        """Next AcousticImage, or None if nothing arrived within ``timeout``."""
        if self._sock is None:
            self.connect()
        while True:
            try:
                pkt = self._read_packet(timeout)
            except OSError:
                if not self.reconnect:
                    raise
                log.warning("lost connection to central node, re-subscribing")
                self._resubscribe()
                continue
            if pkt is None:
                return None
            if pkt.msg_type == wire.MsgType.ERROR:
                msg = pkt.payload.decode("utf-8", "replace")
                if not self._track(pkt.sensor_serial, pkt.seq):
                    continue
                self.errors.append((pkt.sensor_serial, pkt.seq, msg))
                log.warning("central error for sensor %d seq %d: %s", pkt.sensor_serial, pkt.seq, msg)
                continue
            if pkt.msg_type != wire.MsgType.PROCESSED_IMAGE:
                continue
            if not self._track(pkt.sensor_serial, pkt.seq):
                continue
            img = wire.decode_image(pkt.payload, pkt.seq)
            self.received += 1
            return img

    def _track(self, serial: int, seq: int) -> bool:
        """Record ``seq``; False if it is not newer than the last one seen."""
        last = self.last_seq.get(serial)
        if last is not None:
            if seq <= last:
                self.duplicates += 1
                log.info("sensor %d: seq %d already seen (last %d), skipped", serial, seq, last)
                return False
            if seq > last + 1:
                self.gaps.append((serial, last + 1, seq))
                log.warning("sensor %d: seq %d..%d missing", serial, last + 1, seq - 1)
        self.last_seq[serial] = seq
        return True

    def images(self, limit: int | None = None, idle_timeout: float | None = None):
        """Yield images until ``limit`` is reached or ``idle_timeout`` passes without one."""
        n = 0
        while limit is None or n < limit:
            img = self.next_image(idle_timeout)
            if img is None:
                return
            n += 1
            yield img
