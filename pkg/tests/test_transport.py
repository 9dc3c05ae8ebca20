from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from soldertree.transport import (
    ROLES, Frame, Plaintext, ProtocolAbort, TaintError, TransportError, decode_frame,
    encode_frame, frame_bits, frame_size, make_transport, pack_bits, pack_words, unpack_words,
)


def test_frame_layout_is_bit_exact():
    f = Frame("u0-1", 2, 5, "mac", b"\x01\x02", items=3, part=1)
    raw = encode_frame(f)
    assert raw[:2] == b"SF"
    assert raw[2] == 1
    assert raw[3] == ROLES["mac"]
    assert raw[4] == 1
    assert int.from_bytes(raw[5:7], "little") == 2
    assert int.from_bytes(raw[7:9], "little") == 5
    assert int.from_bytes(raw[9:11], "little") == 4
    assert raw[11:15] == b"u0-1"
    assert int.from_bytes(raw[15:19], "little") == 3
    assert int.from_bytes(raw[19:23], "little") == 2
    assert raw[23:] == b"\x01\x02"
    assert frame_size(f) == len(raw)


@settings(max_examples=50, deadline=None)
@given(st.text(min_size=1, max_size=12), st.integers(0, 7), st.integers(0, 7),
       st.sampled_from(sorted(ROLES)), st.binary(max_size=40), st.integers(0, 1000), st.integers(0, 1))
def test_frame_roundtrip(edge, s, r, role, payload, items, part):
    f = Frame(edge, s, r, role, payload, items, part)
    g = decode_frame(encode_frame(f))
    assert (g.edge, g.sender, g.receiver, g.role, g.payload, g.items, g.part) == \
        (edge, s, r, role, payload, items, part)


def test_bad_header_rejected():
    raw = bytearray(encode_frame(Frame("e", 0, 1, "mac", b"x")))
    raw[0] = ord("X")
    with pytest.raises(TransportError):
        decode_frame(bytes(raw))


def test_bits_and_words_codecs():
    bits = np.array([1, 0, 1, 1, 0, 0, 0, 0, 1], dtype=np.uint8)
    f = Frame("e", 0, 1, "bhat-share", pack_bits(bits), len(bits))
    assert np.array_equal(frame_bits(f, 9), bits)
    w = np.array([[1, 2], [3, 2**64 - 1]], dtype=np.uint64)
    assert np.array_equal(unpack_words(pack_words(w), (2, 2)), w)


def test_strict_bit_decoding():
    f = Frame("e", 0, 1, "bhat-share", bytes([0b1000_0001]), 3)
    with pytest.raises(ProtocolAbort):
        frame_bits(f, 3)
    with pytest.raises(ProtocolAbort):
        frame_bits(Frame("e", 0, 1, "bhat-share", b"\x00\x00", 3), 3)


@pytest.mark.parametrize("kind", ["inprocess", "socket"])
def test_fifo_and_counters(kind):
    t = make_transport(kind, 3)
    for k in range(5):
        t.send(Frame("e", 0, 1, "mac", bytes([k]), 1))
    got = [t.recv(1, 0).payload[0] for _ in range(5)]
    assert got == list(range(5))
    assert t.messages[(0, 1)] == 5
    assert t.bytes[(0, 1)] == 5 * frame_size(Frame("e", 0, 1, "mac", b"\x00"))
    if hasattr(t, "close"):
        t.close()


@pytest.mark.parametrize("kind", ["inprocess", "socket"])
def test_role_matching_keeps_order(kind):
    t = make_transport(kind, 2)
    t.send(Frame("a", 0, 1, "delta", b"1", 1))
    t.send(Frame("b", 0, 1, "mac", b"2", 1))
    t.send(Frame("a", 0, 1, "mac", b"3", 1))
    assert t.recv(1, 0, "mac", "a").payload == b"3"
    assert t.recv(1, 0, "mac").payload == b"2"
    assert t.recv(1, 0).payload == b"1"
    assert t.pending() == 0
    if hasattr(t, "close"):
        t.close()


def test_abort_frame_wins():
    t = make_transport("inprocess", 2)
    t.send(Frame("x", 0, 1, "mac", b"1", 1))
    t.send(Frame("x", 0, 1, "abort", b""))
    with pytest.raises(ProtocolAbort):
        t.recv(1, 0, "delta", "x")


def test_taint_and_self_send():
    t = make_transport("inprocess", 2)
    with pytest.raises(TaintError):
        t.send(Frame("e", 0, 1, "mac", Plaintext(b"secret")))
    with pytest.raises(TaintError):
        t.send(Frame("e", 0, 1, "mac", [1, 2, 3]))
    with pytest.raises(TransportError):
        t.send(Frame("e", 1, 1, "mac", b""))
    assert "secret" not in repr(Plaintext("secret"))


def test_recv_on_empty_channel():
    t = make_transport("inprocess", 2)
    with pytest.raises(TransportError):
        t.recv(1, 0)


def test_unknown_transport():
    with pytest.raises(TransportError):
        make_transport("carrier-pigeon", 2)


def test_simulated_clock():
    L = [[0, 2, 5], [2, 0, 1], [5, 1, 0]]
    t = make_transport("inprocess", 3, L, Fraction(1, 4))
    t.send(Frame("e", 0, 1, "mac", b"", 0, units=10))      # busy 0..20
    t.send(Frame("e", 0, 2, "mac", b"", 0, units=2))       # serialised: 20..30
    t.recv(1, 0)
    t.recv(2, 0)
    assert t.clock[1] == 20
    assert t.clock[2] == 30
    t.compute(1, 8)
    assert t.clock[1] == 22
    assert t.elapsed() == 30
    assert t.sync_clocks([0, 1]) == 30      # party 0 is still transmitting until 30
    assert t.clock[1] == 30


def test_socket_bytes_match_inprocess():
    frames = [Frame(f"e{k}", k % 3, (k + 1) % 3, "bhat-share", bytes(range(k)), k) for k in range(12)]
    totals = []
    for kind in ("inprocess", "socket"):
        t = make_transport(kind, 3)
        for f in frames:
            t.send(Frame(f.edge, f.sender, f.receiver, f.role, f.payload, f.items))
        for f in frames:
            assert t.recv(f.receiver, f.sender, f.role, f.edge).payload == f.payload
        totals.append((t.total_bytes, dict(t.messages)))
        if hasattr(t, "close"):
            t.close()
    assert totals[0] == totals[1]
