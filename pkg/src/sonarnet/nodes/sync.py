"""Shared trigger clock: every subscribed sensor fires on the same pulse."""

from __future__ import annotations

import logging
import queue
import threading
import time
from typing import NamedTuple

from ..errors import ConfigError

log = logging.getLogger(__name__)


class Trigger(NamedTuple):
    timestamp_us: int
    seq: int


class SyncScheduler:
    """Emit ``Trigger(timestamp_us, seq)`` at a fixed rate to every subscriber.

    Timestamps are the nominal pulse times ``start + seq * period`` on the
    wall clock, so they are identical for all subscribers and evenly spaced.
    How late each pulse was actually delivered is recorded in
    ``lateness_us`` (the scheduler's jitter).  Subscribers get an unbounded
    queue; ``None`` marks the end of the stream.
    """

    def __init__(self, rate: float, max_triggers: int | None = None, start_us: int | None = None):
        if not rate > 0:
            raise ConfigError(f"trigger rate must be > 0, got {rate}")
        if max_triggers is not None and max_triggers < 0:
            raise ConfigError("max_triggers must be >= 0")
        self.rate = float(rate)
        self.max_triggers = max_triggers
        self.start_us = start_us
        self.emitted = 0
        self.lateness_us: list = []
        self._subscribers: list = []
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread = None

    @property
    def period_us(self) -> float:
        return 1e6 / self.rate

    def timestamp_for(self, seq: int) -> int:
        return self.start_us + round(seq * self.period_us)

    def subscribe(self) -> queue.Queue:
        q = queue.Queue()
        with self._lock:
            self._subscribers.append(q)
        return q

    def start(self):
        if self._thread is not None:
            raise RuntimeError("scheduler already started")
        self._thread = threading.Thread(target=self.run, name="sync-scheduler", daemon=True)
        self._thread.start()
        return self

    def run(self):
        wall_us = int(time.time() * 1e6)
        mono0 = time.monotonic()
        if self.start_us is None:
            self.start_us = wall_us
        offset = (self.start_us - wall_us) / 1e6
        seq = 0
        try:
            while not self._stop.is_set():
                if self.max_triggers is not None and seq >= self.max_triggers:
                    break
                due = mono0 + offset + seq / self.rate
                delay = due - time.monotonic()
                if delay > 0 and self._stop.wait(delay):
                    break
                self.lateness_us.append(max(0.0, (time.monotonic() - due) * 1e6))
                trig = Trigger(self.timestamp_for(seq), seq)
                with self._lock:
                    subs = list(self._subscribers)
                for q in subs:
                    q.put(trig)
                self.emitted = seq = seq + 1
        finally:
            with self._lock:
                for q in self._subscribers:
                    q.put(None)
            log.debug("scheduler stopped after %d triggers, max lateness %.0f us",
                      self.emitted, self.max_jitter_us)

    @property
    def max_jitter_us(self) -> float:
        return max(self.lateness_us, default=0.0)

    def stop(self):
        self._stop.set()

    def join(self, timeout: float | None = None) -> bool:
        if self._thread is not None:
            self._thread.join(timeout)
            return not self._thread.is_alive()
        return True
