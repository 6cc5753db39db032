import logging
import re
import socket
import threading
import time

import pytest

from sonarnet import wire
from sonarnet.errors import ConfigError, SubscriptionError
from sonarnet.nodes import (AppSubscriber, CentralConfig, CentralNode, SensorConfig, SensorNode,
                            SyncScheduler)
from sonarnet.nodes.central import NO_STREAM, read_manifest, storage_name
from sonarnet.synth import Reflector, Scene


@pytest.fixture
def nodes():
    started = []

    def track(node):
        started.append(node)
        return node

    yield track
    for n in reversed(started):
        n.stop()


def central(track, **kw):
    kw.setdefault("port", 0)
    return track(CentralNode(CentralConfig(**kw)).start())


def sensors(track, addr, serials, rate, count, **kw):
    kw.setdefault("variants", 2)
    sched = SyncScheduler(rate, max_triggers=count)
    out = [track(SensorNode(SensorConfig(s, addr, rate=rate, **kw), sched)) for s in serials]
    for n in out:
        n.start()
    return sched, out


def collect(sub, n, timeout=60):
    images = []
    deadline = time.monotonic() + timeout
    while len(images) < n and time.monotonic() < deadline:
        img = sub.next_image(timeout=1.0)
        if img is not None:
            images.append(img)
    return images


# scheduler

def test_scheduler_spacing_and_shared_triggers():
    sched = SyncScheduler(20, max_triggers=10)
    a, b = sched.subscribe(), sched.subscribe()
    sched.start()
    assert sched.join(5)
    ta = [a.get() for _ in range(10)]
    tb = [b.get() for _ in range(10)]
    assert a.get() is None and b.get() is None
    assert ta == tb
    assert [t.seq for t in ta] == list(range(10))
    assert {y.timestamp_us - x.timestamp_us for x, y in zip(ta, ta[1:])} == {50_000}
    assert len(sched.lateness_us) == 10
    assert sched.max_jitter_us < 50_000


def test_scheduler_explicit_start_and_validation():
    sched = SyncScheduler(4, max_triggers=3, start_us=10**15)
    assert [sched.timestamp_for(k) for k in range(3)] == [10**15, 10**15 + 250_000, 10**15 + 500_000]
    with pytest.raises(ConfigError):
        SyncScheduler(0)


def test_scheduler_stop_ends_stream():
    sched = SyncScheduler(1000)
    q = sched.subscribe()
    sched.start()
    time.sleep(0.05)
    sched.stop()
    assert sched.join(2)
    items = []
    while True:
        t = q.get(timeout=1)
        if t is None:
            break
        items.append(t)
    assert len(items) == sched.emitted > 0


# configs

def test_config_validation():
    with pytest.raises(ConfigError):
        SensorConfig(1, rate=0)
    with pytest.raises(ConfigError):
        SensorConfig(2 ** 32)
    with pytest.raises(ConfigError):
        CentralConfig(workers=0)
    with pytest.raises(ConfigError):
        CentralConfig(input_capacity=0)
    with pytest.raises(ConfigError):
        CentralConfig(mode="storage")
    with pytest.raises(ConfigError):
        CentralConfig(mode="archive")


def test_sensor_measurement_carries_identity():
    node = SensorNode(SensorConfig(0xBEEF, variants=1))
    m = node.measurement(777, 3)
    assert (m.sensor_serial, m.timestamp_us, m.seq) == (0xBEEF, 777, 3)


# storage mode

def test_storage_two_sensors_ten_each(nodes, tmp_path):
    c = central(nodes, mode="storage", storage_dir=tmp_path, workers=2)
    sched, ss = sensors(nodes, c.address, [1, 2], rate=20, count=10)
    sched.start()
    for s in ss:
        assert s.join(30)
    assert c.wait_idle(10, expected=20)
    files = sorted(p.name for p in tmp_path.glob("*.pdm"))
    assert len(files) == 20
    assert not list(tmp_path.glob("*.part"))
    rows = read_manifest(tmp_path)
    assert len(rows) == 20
    assert sorted(r["file"] for r in rows) == files
    pattern = re.compile(r"^([0-9a-f]{8})_(\d{12})_(\d+)\.pdm$")
    ts_by_seq = {}
    for name in files:
        serial, seq, ts = pattern.match(name).groups()
        assert int(serial, 16) in (1, 2) and int(seq) < 10
        ts_by_seq.setdefault(int(seq), set()).add(int(ts))
    # both sensors share each trigger's timestamp
    assert all(len(v) == 1 for v in ts_by_seq.values())
    m = wire.decode_raw_measurement((tmp_path / files[0]).read_bytes())
    assert storage_name(m) == files[0]
    assert m == ss[0].measurement(m.timestamp_us, m.seq)
    assert all(s.stats()["acked"] == 10 and s.dropped == 0 for s in ss)


def test_storage_mode_refuses_subscribers(nodes, tmp_path):
    c = central(nodes, mode="storage", storage_dir=tmp_path)
    with pytest.raises(SubscriptionError, match=NO_STREAM):
        AppSubscriber(c.address).connect()


# processing mode

def test_processing_k4_hundred_images_in_order(nodes):
    c = central(nodes, workers=4)
    sub = AppSubscriber(c.address).connect()
    sched, _ = sensors(nodes, c.address, [5, 6], rate=20, count=50)
    sched.start()
    images = collect(sub, 100)
    sub.close()
    assert len(images) == 100
    for serial in (5, 6):
        seqs = [img.seq for img in images if img.sensor_serial == serial]
        assert seqs == list(range(50))
    assert sub.gaps == [] and sub.duplicates == 0
    assert c.stats["processed"] == 100 and c.stats["failed"] == 0


def test_zero_subscribers_discards(nodes):
    c = central(nodes)
    sched, (s,) = sensors(nodes, c.address, [3], rate=20, count=5)
    sched.start()
    assert s.join(30)
    assert c.wait_idle(10, expected=5)
    assert c.stats["discarded"] == 5
    # still healthy: a late subscriber gets the next sensor's images
    sub = AppSubscriber(c.address).connect()
    sched, _ = sensors(nodes, c.address, [4], rate=20, count=2)
    sched.start()
    assert [i.seq for i in collect(sub, 2)] == [0, 1]
    sub.close()


def test_filter_and_fan_out(nodes):
    c = central(nodes, workers=2)
    only7 = AppSubscriber(c.address, serials=[7]).connect()
    all_a = AppSubscriber(c.address).connect()
    all_b = AppSubscriber(c.address).connect()
    sched, _ = sensors(nodes, c.address, [7, 9], rate=20, count=6)
    sched.start()
    a, b = collect(all_a, 12), collect(all_b, 12)
    assert [(i.sensor_serial, i.seq) for i in a] == [(i.sensor_serial, i.seq) for i in b]
    assert len(a) == 12
    filtered = collect(only7, 6)
    assert [i.sensor_serial for i in filtered] == [7] * 6
    assert only7.next_image(timeout=0.5) is None
    for sub in (only7, all_a, all_b):
        sub.close()


def raw_connection(addr):
    sock = socket.create_connection(addr, timeout=10)
    return sock, wire.FrameDecoder()


def read_frames(sock, dec, n):
    out = []
    while len(out) < n:
        dec.feed(sock.recv(65536))
        out.extend(dec.packets())
    return out


def test_malformed_frames_counted_connection_kept(nodes, tmp_path):
    c = central(nodes, mode="storage", storage_dir=tmp_path)
    m = SensorNode(SensorConfig(11, variants=1)).measurement(5, 0)
    good = wire.encode_packet(wire.measurement_packet(m))
    bad = bytearray(good)
    bad[100] ^= 1
    sock, dec = raw_connection(c.address)
    sock.sendall(b"noise" + bytes(bad) + good)
    (ack,) = read_frames(sock, dec, 1)
    assert ack.msg_type == wire.MsgType.ACK and (ack.sensor_serial, ack.seq) == (11, 0)
    sock.close()
    assert c.stats["malformed"] == 2
    assert len(read_manifest(tmp_path)) == 1


def test_worker_failure_sends_error_and_continues(nodes):
    c = central(nodes)
    sub = AppSubscriber(c.address).connect()
    node = SensorNode(SensorConfig(12, variants=1))
    good = node.measurement(10, 1)
    # decodable on the wire but the wrong shape for the pipeline
    bad = wire.RawMeasurement(12, 5, 0, 32, 8, 4.5e6, bytes(32))
    sock, dec = raw_connection(c.address)
    for m in (bad, good):
        sock.sendall(wire.encode_packet(wire.measurement_packet(m)))
    acks = read_frames(sock, dec, 2)
    assert sorted(a.seq for a in acks) == [0, 1]
    img = sub.next_image(timeout=10)
    assert img.seq == 1
    assert sub.errors and sub.errors[0][:2] == (12, 0)
    assert "processing failed" in sub.errors[0][2]
    assert c.stats["failed"] == 1
    sock.close()
    sub.close()


def test_duplicate_resend_is_acked_not_requeued(nodes, tmp_path):
    c = central(nodes, mode="storage", storage_dir=tmp_path)
    m = SensorNode(SensorConfig(13, variants=1)).measurement(5, 0)
    frame = wire.encode_packet(wire.measurement_packet(m))
    sock, dec = raw_connection(c.address)
    sock.sendall(frame)
    read_frames(sock, dec, 1)
    sock.sendall(frame)
    (ack,) = read_frames(sock, dec, 1)
    assert ack.seq == 0
    assert c.stats["duplicates"] == 1 and c.stats["received"] == 1
    sock.close()


def test_kill_and_restart_central(nodes, tmp_path, caplog):
    first = central(nodes, mode="storage", storage_dir=tmp_path)
    port = first.address[1]
    sched, (s,) = sensors(nodes, first.address, [21], rate=10, count=30, backoff_max=0.2)
    sched.start()
    while first.stats["stored"] < 8:
        time.sleep(0.02)
    first.stop()
    time.sleep(0.5)
    central(nodes, mode="storage", storage_dir=tmp_path, port=port)
    assert s.join(30)
    seqs = sorted({int(p.name.split("_")[1]) for p in tmp_path.glob("*.pdm")})
    lost = set(range(30)) - set(seqs)
    assert s.reconnects >= 1
    # anything missing must have been dropped (and logged) by the sensor
    assert len(lost) == s.dropped == 0
    assert seqs == list(range(30))


def test_backpressure_blocks_instead_of_losing(nodes):
    c = central(nodes, workers=1, input_capacity=1, output_capacity=1)
    ws = c.workspaces[0]
    fast = ws.process
    ws.process = lambda m: (time.sleep(0.15), fast(m))[1]
    sub = AppSubscriber(c.address).connect()
    sched, (s,) = sensors(nodes, c.address, [31], rate=50, count=20, window=4)
    sched.start()
    images = collect(sub, 20)
    assert s.join(30)
    assert [i.seq for i in images] == list(range(20))
    assert s.dropped == 0 and s.acked == 20
    assert s.max_backlog > 4  # the sensor saw the stall
    sub.close()


def test_overflow_drops_are_counted_and_logged(nodes, caplog):
    c = central(nodes, workers=1, input_capacity=1, output_capacity=1)
    ws = c.workspaces[0]
    fast = ws.process
    ws.process = lambda m: (time.sleep(0.2), fast(m))[1]
    sub = AppSubscriber(c.address).connect()
    with caplog.at_level(logging.WARNING, logger="sonarnet.nodes.sensor"):
        sched, (s,) = sensors(nodes, c.address, [32], rate=100, count=30, window=2, buffer_size=4)
        sched.start()
        assert s.join(60)
    images = collect(sub, 30 - s.dropped, timeout=30)
    assert s.dropped > 0
    assert len(images) + s.dropped == 30
    assert caplog.text.count("dropped seq") == s.dropped
    missing = sum(nxt - first for _, first, nxt in sub.gaps)
    if images and images[0].seq > 0:
        missing += images[0].seq
    assert missing + (29 - images[-1].seq) == s.dropped
    sub.close()


# subscriber bookkeeping

def test_track_reports_gaps_and_skips_repeats():
    sub = AppSubscriber(("127.0.0.1", 1))
    assert sub._track(1, 0) and sub._track(1, 1)
    assert sub._track(1, 4)
    assert sub._track(2, 7)
    assert not sub._track(1, 4)
    assert not sub._track(1, 2)
    assert sub.gaps == [(1, 2, 4)]
    assert sub.duplicates == 2
    assert sub.last_seq == {1: 4, 2: 7}


def test_subscriber_reconnects_after_restart(nodes):
    first = central(nodes)
    port = first.address[1]
    sub = AppSubscriber(first.address, backoff_max=0.2).connect()
    sched, _ = sensors(nodes, first.address, [41], rate=10, count=3)
    sched.start()
    assert [i.seq for i in collect(sub, 3)] == [0, 1, 2]
    first.stop()
    second = central(nodes, port=port)
    got = []
    reader = threading.Thread(target=lambda: got.extend(collect(sub, 2, timeout=30)))
    reader.start()
    while second.subscriber_count == 0 and reader.is_alive():
        time.sleep(0.05)
    sched, _ = sensors(nodes, second.address, [42], rate=10, count=2)
    sched.start()
    reader.join(30)
    assert [(i.sensor_serial, i.seq) for i in got] == [(42, 0), (42, 1)]
    assert sub.resubscriptions == 1
    sub.close()
