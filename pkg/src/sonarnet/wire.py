"""Frame codec shared by sensor, central and application nodes.

Frame layout (little-endian)::

    off  size  field
      0     4  magic        0x45525449  (bytes 49 54 52 45)
      4     1  version      1
      5     1  msg_type     1..5
      6     4  sensor_serial
     10     8  timestamp_us
     18     8  seq
     26     8  payload_len
     34     n  payload
   34+n     4  crc32 of bytes [0, 34+n)

An empty frame is 38 bytes.  See protocol.md for the payload codecs.
"""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass

from .errors import DecodeError, FramingError, IntegrityError, NeedMoreData, ProtocolError

MAGIC = 0x45525449
MAGIC_BYTES = struct.pack("<I", MAGIC)
VERSION = 1
HEADER = struct.Struct("<IBBIQQQ")
CRC = struct.Struct("<I")
HEADER_SIZE = HEADER.size
FRAME_OVERHEAD = HEADER_SIZE + CRC.size
MAX_PAYLOAD = 1 << 32
# decoders refuse to buffer more than this for one frame
DEFAULT_MAX_FRAME_PAYLOAD = 256 << 20


class MsgType(enum.IntEnum):
    RAW_MEASUREMENT = 1
    PROCESSED_IMAGE = 2
    SUBSCRIBE = 3
    ACK = 4
    ERROR = 5


@dataclass(frozen=True)
class Packet:
    msg_type: MsgType
    sensor_serial: int = 0
    timestamp_us: int = 0
    seq: int = 0
    payload: bytes = b""
    version: int = VERSION

    @property
    def payload_len(self) -> int:
        return len(self.payload)


def encode_packet(p: Packet) -> bytes:
    n = len(p.payload)
    if n > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {n} bytes exceeds the 2^32 byte limit")
    head = HEADER.pack(MAGIC, p.version, int(p.msg_type), p.sensor_serial, p.timestamp_us, p.seq, n)
    crc = zlib.crc32(p.payload, zlib.crc32(head))
    return b"".join((head, p.payload, CRC.pack(crc)))


def decode_packet(buf, max_payload: int = DEFAULT_MAX_FRAME_PAYLOAD) -> tuple:
    """Decode the frame at the start of ``buf``.

    Returns ``(packet, consumed)``.  Raises NeedMoreData (nothing consumed)
    if the frame is incomplete, FramingError if ``buf`` does not start with a
    plausible header, IntegrityError if the CRC fails.
    """
    view = memoryview(buf)
    if len(view) < 4:
        if MAGIC_BYTES.startswith(bytes(view)):
            raise NeedMoreData(f"need {HEADER_SIZE - len(view)} more header bytes")
        raise FramingError("bad magic")
    if bytes(view[:4]) != MAGIC_BYTES:
        raise FramingError("bad magic")
    if len(view) < HEADER_SIZE:
        raise NeedMoreData(f"need {HEADER_SIZE - len(view)} more header bytes")
    _, version, msg_type, serial, ts, seq, n = HEADER.unpack_from(view)
    if version != VERSION:
        raise FramingError(f"unsupported protocol version {version}")
    if msg_type not in MsgType._value2member_map_:
        raise FramingError(f"unknown message type {msg_type}")
    if n > max_payload:
        raise FramingError(f"payload length {n} above limit {max_payload}")
    total = HEADER_SIZE + n + CRC.size
    if len(view) < total:
        raise NeedMoreData(f"need {total - len(view)} more bytes")
    body = view[:HEADER_SIZE + n]
    (crc,) = CRC.unpack_from(view, HEADER_SIZE + n)
    if zlib.crc32(body) != crc:
        raise IntegrityError(f"crc mismatch in {MsgType(msg_type).name} frame seq={seq}")
    payload = bytes(view[HEADER_SIZE:HEADER_SIZE + n])
    return Packet(MsgType(msg_type), serial, ts, seq, payload, version), total


class FrameDecoder:
    """Incremental decoder for one byte stream.

    ``feed`` bytes, then iterate ``events()``: each event is a Packet or a
    ProtocolError instance (FramingError / IntegrityError).  After an error
    the decoder scans forward for the next magic and resumes.
    """

    def __init__(self, max_payload: int = DEFAULT_MAX_FRAME_PAYLOAD):
        self.buf = bytearray()
        self.max_payload = max_payload
        self.framing_errors = 0
        self.integrity_errors = 0

    def feed(self, data):
        self.buf += data

    def _resync(self, start: int):
        idx = self.buf.find(MAGIC_BYTES, start)
        if idx < 0:
            # keep a tail that may be the beginning of a magic
            keep = 0
            for k in range(3, 0, -1):
                if self.buf.endswith(MAGIC_BYTES[:k]):
                    keep = k
                    break
            del self.buf[:len(self.buf) - keep]
        else:
            del self.buf[:idx]

    def next_event(self):
        """Next Packet or error, or None when more bytes are needed."""
        if not self.buf:
            return None
        try:
            pkt, used = decode_packet(self.buf, self.max_payload)
        except NeedMoreData:
            return None
        except (FramingError, IntegrityError) as exc:
            # the traceback pins a memoryview of buf, which would block resizing it
            err = exc.with_traceback(None)
        else:
            del self.buf[:used]
            return pkt
        if isinstance(err, IntegrityError):
            self.integrity_errors += 1
        else:
            self.framing_errors += 1
        self._resync(1)
        return err

    def events(self):
        while True:
            ev = self.next_event()
            if ev is None:
                return
            yield ev

    def packets(self):
        return [ev for ev in self.events() if isinstance(ev, Packet)]

    def close(self):
        """End of stream: drop a pending partial frame and rescan what follows it."""
        out = []
        while self.buf:
            out.extend(self.events())
            if not self.buf:
                break
            # the head is a header whose declared length runs past the end
            self.framing_errors += 1
            out.append(FramingError(f"stream ended inside a frame ({len(self.buf)} bytes pending)"))
            self._resync(1)
        return out


def read_packet(sock_file, max_payload: int = DEFAULT_MAX_FRAME_PAYLOAD) -> Packet:
    """Blocking read of one frame from a binary file-like object.

    Raises EOFError on a clean end of stream, ProtocolError on bad frames.
    """
    head = _read_exact(sock_file, HEADER_SIZE)
    if head is None:
        raise EOFError
    if head[:4] != MAGIC_BYTES:
        raise FramingError("bad magic")
    n = HEADER.unpack_from(head)[6]
    if n > max_payload:
        raise FramingError(f"payload length {n} above limit {max_payload}")
    rest = _read_exact(sock_file, n + CRC.size)
    if rest is None:
        raise FramingError("stream ended inside a frame")
    pkt, _ = decode_packet(head + rest, max_payload)
    return pkt


def _read_exact(f, n: int):
    chunks = []
    got = 0
    while got < n:
        chunk = f.read(n - got)
        if not chunk:
            if got == 0:
                return None
            raise FramingError(f"stream ended {n - got} bytes short")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


@dataclass(frozen=True, eq=True)
class RawMeasurement:
    sensor_serial: int
    timestamp_us: int
    seq: int
    channels: int
    frames: int
    pdm_rate: float
    payload: bytes

    _HEAD = struct.Struct("<IQQHQd")

    def __post_init__(self):
        if self.frames % 8 or len(self.payload) != self.channels * self.frames // 8:
            raise DecodeError(f"packed bits: expected {self.channels * self.frames // 8} bytes for "
                              f"{self.channels}x{self.frames}, got {len(self.payload)}")


def encode_raw_measurement(m: RawMeasurement) -> bytes:
    head = RawMeasurement._HEAD.pack(m.sensor_serial, m.timestamp_us, m.seq, m.channels,
                                     m.frames, m.pdm_rate)
    return head + m.payload


def decode_raw_measurement(buf) -> RawMeasurement:
    view = memoryview(buf)
    hs = RawMeasurement._HEAD.size
    if len(view) < hs:
        raise DecodeError(f"raw measurement header truncated: {hs - len(view)} bytes missing")
    serial, ts, seq, ch, frames, rate = RawMeasurement._HEAD.unpack_from(view)
    if frames % 8:
        raise DecodeError(f"frame count {frames} is not a multiple of 8")
    expected = hs + ch * frames // 8
    if len(view) != expected:
        missing = expected - len(view)
        what = f"{missing} bytes missing" if missing > 0 else f"{-missing} trailing bytes"
        raise DecodeError(f"raw measurement: expected {expected} bytes, got {len(view)} ({what})")
    return RawMeasurement(serial, ts, seq, ch, frames, rate, bytes(view[hs:]))


def encode_image(img) -> bytes:
    return img.to_bytes()


def decode_image(buf, seq: int = 0):
    from .pipeline import AcousticImage

    return AcousticImage.from_bytes(buf, seq)


def measurement_packet(m: RawMeasurement) -> Packet:
    return Packet(MsgType.RAW_MEASUREMENT, m.sensor_serial, m.timestamp_us, m.seq,
                  encode_raw_measurement(m))


def image_packet(img) -> Packet:
    return Packet(MsgType.PROCESSED_IMAGE, img.sensor_serial, img.timestamp_us, img.seq,
                  encode_image(img))


def subscribe_packet(serials=()) -> Packet:
    payload = b"".join(struct.pack("<I", s) for s in sorted(set(serials)))
    return Packet(MsgType.SUBSCRIBE, payload=payload)


def parse_subscribe(p: Packet) -> frozenset:
    if len(p.payload) % 4:
        raise DecodeError(f"SUBSCRIBE payload of {len(p.payload)} bytes is not a u32 list")
    return frozenset(s for (s,) in struct.iter_unpack("<I", p.payload))


def error_packet(message: str, serial: int = 0, timestamp_us: int = 0, seq: int = 0) -> Packet:
    return Packet(MsgType.ERROR, serial, timestamp_us, seq, message.encode("utf-8"))
