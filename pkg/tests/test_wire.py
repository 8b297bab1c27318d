import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cuffsim.wire import (
    MAX_PAYLOAD,
    Command,
    DecodeStatus,
    DuplexChannel,
    Frame,
    FrameDecoder,
    FrameError,
    LinkStats,
    LinkTimeout,
    Master,
    Slave,
    crc16,
    decode_frame,
    encode_frame,
    run_link,
    socket_pair,
)


def _table():
    out = []
    for byte in range(256):
        c = byte << 8
        for _ in range(8):
            c = ((c << 1) ^ 0x1021) if c & 0x8000 else (c << 1)
        out.append(c & 0xFFFF)
    return out


_TABLE = _table()


def crc_oracle(data: bytes) -> int:
    """Table-driven CRC-16/CCITT-FALSE, written from the parameter set."""
    crc = 0xFFFF
    for b in data:
        crc = ((crc << 8) & 0xFFFF) ^ _TABLE[((crc >> 8) ^ b) & 0xFF]
    return crc


class Counter:
    def __init__(self):
        self.k = 0

    def step(self, closure):
        self.k += 1
        return float(self.k), closure / 10


def test_crc_check_value():
    assert crc_oracle(b"123456789") == 0x29B1
    assert crc16(b"123456789") == 0x29B1


@given(st.binary(max_size=64))
def test_crc_matches_oracle(data):
    assert crc16(data) == crc_oracle(data)


def test_encode_example():
    raw = encode_frame(Frame(1, 0x01))
    crc = crc_oracle(bytes([0x01, 0x01, 0x00]))
    assert raw == bytes([0x55, 0xAA, 0x01, 0x01, 0x00]) + struct.pack("<H", crc)


def test_oversize_payload():
    with pytest.raises(FrameError):
        Frame(1, 1, bytes(MAX_PAYLOAD + 1))
    Frame(1, 1, bytes(MAX_PAYLOAD))


frames = st.builds(Frame, st.integers(0, 255), st.integers(0, 255), st.binary(max_size=MAX_PAYLOAD))


@settings(max_examples=2000)
@given(frames)
def test_round_trip(f):
    raw = encode_frame(f)
    r = decode_frame(raw)
    assert r.status is DecodeStatus.FRAME
    assert r.frame == f and r.consumed == len(raw)


def test_values_round_trip():
    f = Frame.with_values(3, Command.ack(Command.GET_MEASUREMENT), (18000, -7))
    assert decode_frame(encode_frame(f)).frame.values() == (18000, -7)


def test_garbage_prefix_without_candidates():
    dec = FrameDecoder()
    f = Frame(2, 1, b"\x01\x02")
    out = dec.feed(b"\x00\x13\x37" + encode_frame(f))
    assert out == [f]
    assert dec.stats.frames_resync == 0 and dec.stats.bytes_discarded == 3


def test_garbage_prefix_with_fake_sync():
    dec = FrameDecoder()
    f = Frame(2, 1, b"\x01\x02")
    # two fake candidates: bad length, then bad crc
    junk = b"\x55\xaa\x01\x01\xff" + b"\x55\xaa\x01\x01\x00\x00\x00"
    out = dec.feed(junk + encode_frame(f))
    assert out == [f]
    assert dec.stats.frames_resync == 2
    assert dec.stats.frames_crc_fail == 1


def test_truncated_needs_more():
    raw = encode_frame(Frame(1, 2, b"abcd"))
    for cut in range(len(raw)):
        assert decode_frame(raw[:cut]).status is DecodeStatus.NEED_MORE


def test_incremental_byte_by_byte():
    fs = [Frame(1, i, bytes([i] * i)) for i in range(6)]
    stream = b"".join(encode_frame(f) for f in fs)
    dec = FrameDecoder()
    got = []
    for b in stream:
        got += dec.feed(bytes([b]))
    assert got == fs


def test_fuzz_smoke():
    rng = np.random.default_rng(1)
    for _ in range(500):
        data = rng.integers(0, 256, int(rng.integers(0, 300))).astype(np.uint8).tobytes()
        dec = FrameDecoder()
        dec.feed(data)
        assert len(dec.buf) <= 5 + MAX_PAYLOAD + 2


def test_lockstep_exchanges():
    ch = DuplexChannel()
    stats = run_link(Master(ch.a), Slave(ch.b, Counter()), "lockstep", 1.0)
    assert stats.exchanges == 1000
    assert stats.deadline_misses == 0
    assert stats.frames_crc_fail == 0


def test_closure_reaches_slave():
    ch = DuplexChannel()
    slave = Slave(ch.b, Counter())
    seen = []
    run_link(Master(ch.a), slave, "lockstep", 0.01, closure=lambda k: 100 * k,
             on_tick=lambda k, m, fresh: seen.append(m))
    assert slave.closure_cmd == 900
    # replies carry the closure of the previous tick (measurement first, then the command)
    assert seen[5] == (6, 40)


def test_corruption_rate():
    rates = []
    for seed in range(5):
        ch = DuplexChannel(corrupt_prob=0.01, seed=seed)
        stats = run_link(Master(ch.a), Slave(ch.b, Counter()), "lockstep", 1.0)
        rates.append(stats.frames_resync / stats.frames_sent)
        assert stats.exchanges > 950
    assert 0.005 < np.mean(rates) < 0.015


def test_slave_halted_timeout():
    ch = DuplexChannel()
    slave = Slave(ch.b, Counter())
    slave.halted = True
    ticks = []
    with pytest.raises(LinkTimeout):
        run_link(Master(ch.a), slave, "lockstep", 1.0, on_tick=lambda k, m, f: ticks.append(k))
    assert len(ticks) == 11  # ten silent ticks tolerated, the eleventh raises


def test_unknown_mode():
    ch = DuplexChannel()
    with pytest.raises(ValueError):
        run_link(Master(ch.a), Slave(ch.b, Counter()), "turbo", 0.01)


def test_realtime_runs():
    ch = DuplexChannel()
    stats = run_link(Master(ch.a), Slave(ch.b, Counter()), "realtime", 0.2, period=0.002)
    assert stats.exchanges >= 90
    assert stats.loop_period_target == 0.002


def test_socket_transport():
    a, b = socket_pair()
    try:
        stats = run_link(Master(a), Slave(b, Counter()), "lockstep", 0.05)
        assert stats.exchanges == 50
    finally:
        a.close()
        b.close()


def test_stats_json():
    s = LinkStats(frames_ok=3).merge(LinkStats(frames_ok=4, exchanges=2))
    assert s.frames_ok == 7 and '"exchanges": 2' in s.to_json()
