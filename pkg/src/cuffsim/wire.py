"""
Framed master/slave link between the belt device (master) and the hand
(slave), plus a 1 kHz exchange loop.

Frame layout (all multi-byte fields little-endian)::

    0x55 0xAA | id | cmd | len | payload (len bytes, int32 fields) | crc16

The CRC is CRC-16/CCITT-FALSE (poly 0x1021, init 0xFFFF, no reflection,
no final xor) over id..payload.
"""

from __future__ import annotations

import binascii
import enum
import json
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass

import numpy as np

__all__ = [
    "SYNC",
    "MAX_PAYLOAD",
    "Command",
    "Frame",
    "FrameError",
    "DecodeStatus",
    "DecodeResult",
    "LinkStats",
    "LinkTimeout",
    "crc16",
    "encode_frame",
    "decode_frame",
    "FrameDecoder",
    "DuplexChannel",
    "SocketEndpoint",
    "socket_pair",
    "Master",
    "Slave",
    "run_link",
]

SYNC = b"\x55\xaa"
MAX_PAYLOAD = 32
HEADER_LEN = 5
CRC_LEN = 2


class Command(enum.IntEnum):
    GET_MEASUREMENT = 0x01
    SET_POSITION = 0x02
    GET_CURRENT = 0x03

    @staticmethod
    def ack(cmd: int) -> int:
        return 0x80 | int(cmd)


class FrameError(ValueError):
    pass


class LinkTimeout(RuntimeError):
    pass


def crc16(data: bytes) -> int:
    """CRC-16/CCITT-FALSE."""
    return binascii.crc_hqx(bytes(data), 0xFFFF)


@dataclass(frozen=True)
class Frame:
    device_id: int
    command: int
    payload: bytes = b""

    def __post_init__(self):
        if not 0 <= self.device_id <= 0xFF:
            raise FrameError("device_id must fit one byte")
        if not 0 <= self.command <= 0xFF:
            raise FrameError("command must fit one byte")
        object.__setattr__(self, "payload", bytes(self.payload))
        if len(self.payload) > MAX_PAYLOAD:
            raise FrameError(f"payload of {len(self.payload)} bytes exceeds {MAX_PAYLOAD}")

    @classmethod
    def with_values(cls, device_id: int, command: int, values=()) -> "Frame":
        vals = [int(v) for v in values]
        return cls(device_id, command, struct.pack(f"<{len(vals)}i", *vals))

    def values(self) -> tuple[int, ...]:
        if len(self.payload) % 4:
            raise FrameError("payload is not a whole number of int32 fields")
        return struct.unpack(f"<{len(self.payload) // 4}i", self.payload)


def encode_frame(f: Frame) -> bytes:
    if len(f.payload) > MAX_PAYLOAD:
        raise FrameError(f"payload of {len(f.payload)} bytes exceeds {MAX_PAYLOAD}")
    body = bytes([f.device_id, f.command, len(f.payload)]) + f.payload
    return SYNC + body + struct.pack("<H", crc16(body))


class DecodeStatus(enum.Enum):
    FRAME = "frame"
    NEED_MORE = "need_more"
    RESYNC = "resync"  # bad candidate (CRC or length); skip ``consumed`` bytes and retry


@dataclass(frozen=True)
class DecodeResult:
    status: DecodeStatus
    consumed: int
    frame: Frame | None = None
    crc_fail: bool = False
    discarded: int = 0  # bytes skipped before a sync candidate


def decode_frame(stream: bytes) -> DecodeResult:
    """Decode at most one frame from the front of ``stream``.

    Bytes before the first sync pattern are consumed as garbage. A sync
    candidate whose length or CRC is wrong is dropped one byte at a time.
    A complete valid frame is either consumed whole or not at all.
    """
    buf = bytes(stream)
    i = buf.find(SYNC)
    if i < 0:
        keep = 1 if buf.endswith(SYNC[:1]) else 0
        return DecodeResult(DecodeStatus.NEED_MORE, len(buf) - keep, discarded=len(buf) - keep)
    if len(buf) < i + HEADER_LEN:
        return DecodeResult(DecodeStatus.NEED_MORE, i, discarded=i)
    n = buf[i + 4]
    if n > MAX_PAYLOAD:
        return DecodeResult(DecodeStatus.RESYNC, i + 1, discarded=i)
    end = i + HEADER_LEN + n + CRC_LEN
    if len(buf) < end:
        return DecodeResult(DecodeStatus.NEED_MORE, i, discarded=i)
    body = buf[i + 2:i + HEADER_LEN + n]
    (crc,) = struct.unpack("<H", buf[end - 2:end])
    if crc != crc16(body):
        return DecodeResult(DecodeStatus.RESYNC, i + 1, crc_fail=True, discarded=i)
    return DecodeResult(DecodeStatus.FRAME, end, Frame(body[0], body[1], body[3:]), discarded=i)


@dataclass
class LinkStats:
    frames_ok: int = 0
    frames_crc_fail: int = 0
    frames_resync: int = 0
    deadline_misses: int = 0
    bytes_discarded: int = 0
    frames_sent: int = 0
    frames_corrupted: int = 0
    exchanges: int = 0
    loop_period_target: float = 0.001

    def merge(self, other: "LinkStats") -> "LinkStats":
        out = LinkStats(loop_period_target=self.loop_period_target)
        for k, v in asdict(self).items():
            if k != "loop_period_target":
                setattr(out, k, v + getattr(other, k))
        return out

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


class FrameDecoder:
    """Incremental decoder. The internal buffer never exceeds one partial frame."""

    def __init__(self, stats: LinkStats | None = None):
        self.buf = bytearray()
        self.stats = stats if stats is not None else LinkStats()

    def feed(self, data: bytes) -> list[Frame]:
        self.buf.extend(data)
        frames = []
        while self.buf:
            r = decode_frame(self.buf)
            self.stats.bytes_discarded += r.discarded
            if r.status is DecodeStatus.FRAME:
                frames.append(r.frame)
                self.stats.frames_ok += 1
            elif r.status is DecodeStatus.RESYNC:
                self.stats.frames_resync += 1
                self.stats.frames_crc_fail += int(r.crc_fail)
            del self.buf[:r.consumed]
            if r.status is DecodeStatus.NEED_MORE:
                break
        return frames


# ---------------------------------------------------------------------------
# transports


class _Endpoint:
    def __init__(self, inbox: deque, outbox: deque, lock: threading.Lock, channel: "DuplexChannel"):
        self._in, self._out, self._lock, self._ch = inbox, outbox, lock, channel

    def write(self, data: bytes) -> None:
        data = self._ch._maybe_corrupt(bytes(data))
        with self._lock:
            self._out.append(data)

    def read(self) -> bytes:
        with self._lock:
            chunks = list(self._in)
            self._in.clear()
        return b"".join(chunks)


class DuplexChannel:
    """In-process byte pipe between two endpoints, ``a`` and ``b``.

    With ``corrupt_prob`` > 0 each written chunk (one frame) has, with that
    probability, one bit flipped somewhere after the sync bytes.
    """

    def __init__(self, corrupt_prob: float = 0.0, seed: int | np.random.Generator | None = 0):
        if not 0.0 <= corrupt_prob <= 1.0:
            raise ValueError("corrupt_prob must be in [0, 1]")
        self.corrupt_prob = corrupt_prob
        self.rng = np.random.default_rng(seed)
        self.corrupted = 0
        self._lock = threading.Lock()
        ab, ba = deque(), deque()
        self.a = _Endpoint(ba, ab, self._lock, self)
        self.b = _Endpoint(ab, ba, self._lock, self)

    def _maybe_corrupt(self, data: bytes) -> bytes:
        if self.corrupt_prob <= 0 or len(data) <= len(SYNC):
            return data
        with self._lock:
            if self.rng.random() >= self.corrupt_prob:
                return data
            pos = int(self.rng.integers(len(SYNC), len(data)))
            bit = int(self.rng.integers(8))
            self.corrupted += 1
        out = bytearray(data)
        out[pos] ^= 1 << bit
        return bytes(out)


class SocketEndpoint:
    """Byte-stream endpoint over a connected socket (no extra envelope)."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.sock.setblocking(False)

    def write(self, data: bytes) -> None:
        self.sock.setblocking(True)
        try:
            self.sock.sendall(data)
        finally:
            self.sock.setblocking(False)

    def read(self) -> bytes:
        chunks = []
        while True:
            try:
                chunk = self.sock.recv(4096)
            except (BlockingIOError, InterruptedError):
                break
            if not chunk:
                break
            chunks.append(chunk)
        return b"".join(chunks)

    def close(self) -> None:
        self.sock.close()


def socket_pair() -> tuple[SocketEndpoint, SocketEndpoint]:
    a, b = socket.socketpair()
    return SocketEndpoint(a), SocketEndpoint(b)


# ---------------------------------------------------------------------------
# endpoints


class Slave:
    """Hand side: answers measurement requests and accepts closure commands.

    ``source`` is any object with ``step(closure_cmd) -> (p, rc)``.
    """

    def __init__(self, endpoint, source, device_id: int = 1, closure_cmd: float = 0.0):
        self.ep = endpoint
        self.source = source
        self.device_id = device_id
        self.closure_cmd = float(closure_cmd)
        self.stats = LinkStats()
        self.decoder = FrameDecoder(self.stats)
        self.halted = False
        self.last = (0, 0)

    def service(self) -> int:
        """Handle every pending request; returns how many were answered."""
        data = self.ep.read()
        if self.halted:
            return 0
        answered = 0
        for f in self.decoder.feed(data):
            if f.device_id != self.device_id:
                continue
            if f.command == Command.GET_MEASUREMENT:
                p, rc = self.source.step(self.closure_cmd)
                self.last = (int(round(p)), int(round(rc)))
                reply = Frame.with_values(self.device_id, Command.ack(f.command), self.last)
            elif f.command == Command.GET_CURRENT:
                reply = Frame.with_values(self.device_id, Command.ack(f.command), self.last[1:])
            elif f.command == Command.SET_POSITION:
                self.closure_cmd = float(f.values()[0])
                reply = Frame(self.device_id, Command.ack(f.command))
            else:
                continue
            self.ep.write(encode_frame(reply))
            self.stats.frames_sent += 1
            answered += 1
        return answered


class Master:
    """Belt side: polls the hand each tick and forwards the closure command."""

    def __init__(self, endpoint, slave_id: int = 1, timeout_ticks: int = 10):
        self.ep = endpoint
        self.slave_id = slave_id
        self.timeout_ticks = timeout_ticks
        self.stats = LinkStats()
        self.decoder = FrameDecoder(self.stats)
        self.measurement: tuple[int, int] | None = None
        self.silent_ticks = 0

    def request(self, closure_cmd: float) -> None:
        self.ep.write(encode_frame(Frame(self.slave_id, Command.GET_MEASUREMENT)))
        self.ep.write(encode_frame(Frame.with_values(self.slave_id, Command.SET_POSITION,
                                                     [int(round(closure_cmd))])))
        self.stats.frames_sent += 2

    def collect(self) -> bool:
        """Read replies; True if a fresh measurement arrived."""
        fresh = False
        for f in self.decoder.feed(self.ep.read()):
            if f.device_id == self.slave_id and f.command == Command.ack(Command.GET_MEASUREMENT):
                p, rc = f.values()
                self.measurement = (p, rc)
                fresh = True
        return fresh

    def end_tick(self, fresh: bool, tick: int) -> None:
        self.silent_ticks = 0 if fresh else self.silent_ticks + 1
        if self.silent_ticks > self.timeout_ticks:
            raise LinkTimeout(f"no reply from device {self.slave_id} for {self.silent_ticks} ticks "
                              f"(tick {tick})")


def run_link(master: Master, slave: Slave, mode: str = "lockstep", duration: float = 1.0,
             period: float = 0.001, closure=None, on_tick=None) -> LinkStats:
    """Exchange loop. ``closure(tick)`` gives the hand closure command and
    ``on_tick(tick, measurement, fresh)`` receives every tick's data.
    """
    n = int(round(duration / period))
    closure = closure or (lambda k: 0.0)
    if mode == "lockstep":
        for k in range(n):
            master.request(closure(k))
            slave.service()
            fresh = master.collect()
            master.stats.exchanges += int(fresh)
            if on_tick is not None:
                on_tick(k, master.measurement, fresh)
            master.end_tick(fresh, k)
    elif mode == "realtime":
        _run_realtime(master, slave, n, period, closure, on_tick)
    else:
        raise ValueError(f"unknown link mode {mode!r}")
    stats = master.stats.merge(slave.stats)
    stats.loop_period_target = period
    stats.exchanges = master.stats.exchanges
    return stats


def _run_realtime(master: Master, slave: Slave, n: int, period: float, closure, on_tick) -> None:
    stop = threading.Event()

    def slave_loop():
        while not stop.is_set():
            if not slave.service():
                time.sleep(period / 20)

    th = threading.Thread(target=slave_loop, daemon=True)
    th.start()
    try:
        t0 = time.perf_counter()
        for k in range(n):
            deadline = t0 + (k + 1) * period
            master.request(closure(k))
            fresh = False
            while not fresh and time.perf_counter() < deadline:
                fresh = master.collect()
                if not fresh:
                    time.sleep(period / 50)
            master.stats.exchanges += int(fresh)
            if on_tick is not None:
                on_tick(k, master.measurement, fresh)
            if time.perf_counter() > deadline:
                master.stats.deadline_misses += 1
            else:
                time.sleep(max(0.0, deadline - time.perf_counter()))
            master.end_tick(fresh, k)
    finally:
        stop.set()
        th.join(timeout=1.0)
