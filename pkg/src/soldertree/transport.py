"""Point-to-point FIFO channels between simulated parties.

Every message is a :class:`Frame`.  Frames have a bit-exact byte encoding
(:func:`encode_frame`), which the socket transport actually puts on the
wire and which the byte counters measure in both modes.

Layout, all integers little-endian::

    offset  size  field
    0       2     magic  b"SF"
    2       1     version (1)
    3       1     role code (see ROLES)
    4       1     part (0 primary, 1 auxiliary)
    5       2     sender party id
    7       2     receiver party id
    9       2     edge id length L
    11      L     edge id, UTF-8
    11+L    4     item count (bits or MAC tags carried)
    15+L    4     payload length P
    19+L    P     payload

Bit vectors are packed LSB-first (``numpy.packbits(bitorder="little")``).
MAC tags and key deltas are little-endian 64-bit words, ``kappa/64`` words
per tag, tags in item order.

Simulated time: each party has a clock.  Sending ``units`` payload units
from i to j occupies i's link for ``units * L[i][j]``; the frame arrives at
the end of that interval and the receiver's clock advances to at least the
arrival time.  Local work is charged through :meth:`Transport.compute`.
"""

from __future__ import annotations

import socket
import struct
import threading
from collections import deque
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

ROLES = {
    "bhat-share": 1, "delta": 2, "lambda-reveal": 3, "mac": 4, "abort": 5,
    "masked-input": 6, "lambda-open": 7, "gc-material": 8, "probe": 9,
}
ROLE_NAMES = {v: k for k, v in ROLES.items()}
_HEAD = struct.Struct("<2sBBBHHH")
_TAIL = struct.Struct("<II")


class TransportError(RuntimeError):
    pass


class ProtocolAbort(RuntimeError):
    """An honest party saw a failed check and output ⊥."""

    def __init__(self, edge: str, party, role: str, reason: str):
        super().__init__(f"abort on {edge}: party {party} rejected {role} ({reason})")
        self.edge = edge
        self.party = party
        self.role = role
        self.reason = reason


class TaintError(TransportError):
    """Raised when a plaintext-carrying object is handed to the transport."""


class Plaintext:
    """Taint wrapper for private cleartext values (party inputs, results).

    The transport refuses to carry anything wrapped in this class.
    """
    __slots__ = ("value",)

    def __init__(self, value):
        self.value = value

    def __repr__(self) -> str:
        return "Plaintext(<hidden>)"


@dataclass
class Frame:
    edge: str
    sender: int
    receiver: int
    role: str
    payload: bytes
    items: int = 0
    part: int = 0
    units: int = 0          # simulated size; defaults to ``items``
    arrival: Fraction = Fraction(0)
    round: int = 0


def encode_frame(f: Frame) -> bytes:
    edge = f.edge.encode()
    return (_HEAD.pack(b"SF", 1, ROLES[f.role], f.part, f.sender, f.receiver, len(edge))
            + edge + _TAIL.pack(f.items, len(f.payload)) + f.payload)


def decode_frame(data: bytes) -> Frame:
    magic, ver, role, part, snd, rcv, elen = _HEAD.unpack_from(data, 0)
    if magic != b"SF" or ver != 1:
        raise TransportError("bad frame header")
    off = _HEAD.size
    edge = data[off:off + elen].decode()
    off += elen
    items, plen = _TAIL.unpack_from(data, off)
    off += _TAIL.size
    payload = bytes(data[off:off + plen])
    if len(payload) != plen:
        raise TransportError("truncated frame")
    return Frame(edge, snd, rcv, ROLE_NAMES[role], payload, items, part)


def frame_size(f: Frame) -> int:
    return _HEAD.size + len(f.edge.encode()) + _TAIL.size + len(f.payload)


# -- payload codecs -----------------------------------------------------------

def pack_bits(bits: np.ndarray) -> bytes:
    return np.packbits(np.asarray(bits, dtype=np.uint8), bitorder="little").tobytes()


def unpack_bits(data: bytes, n: int) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")[:n].copy()


def frame_bits(f: Frame, n: int) -> np.ndarray:
    """Strict decode of a bit-vector payload; the receiver rejects bad padding."""
    if len(f.payload) != (n + 7) // 8:
        raise ProtocolAbort(f.edge, f.receiver, f.role, "payload length mismatch")
    bits = np.unpackbits(np.frombuffer(f.payload, dtype=np.uint8), bitorder="little")
    if bits[n:].any():
        raise ProtocolAbort(f.edge, f.receiver, f.role, "nonzero padding bits")
    return bits[:n].copy()


def frame_words(f: Frame, shape) -> np.ndarray:
    if len(f.payload) != 8 * int(np.prod(shape)):
        raise ProtocolAbort(f.edge, f.receiver, f.role, "payload length mismatch")
    return unpack_words(f.payload, shape)


def pack_words(words: np.ndarray) -> bytes:
    return np.ascontiguousarray(words, dtype="<u8").tobytes()


def unpack_words(data: bytes, shape) -> np.ndarray:
    return np.frombuffer(data, dtype="<u8").astype(np.uint64).reshape(shape).copy()


# -- transport --------------------------------------------------------------------

class Transport:
    """In-process FIFO channels with counters and a simulated clock."""

    mode = "inprocess"

    def __init__(self, m: int, latency=None, ls=Fraction(0)):
        self.m = m
        if latency is None:
            latency = [[Fraction(0) if i == j else Fraction(1) for j in range(m)] for i in range(m)]
        self.latency = [[Fraction(x) for x in row] for row in latency]
        self.ls = Fraction(ls)
        self._queues: dict[tuple[int, int], deque] = {}
        self.bytes: dict[tuple[int, int], int] = {}
        self.messages: dict[tuple[int, int], int] = {}
        self.clock = [Fraction(0)] * m
        self._tx_free = [Fraction(0)] * m
        self.round = 0
        self.rounds_used: set[int] = set()
        self._stash: dict[tuple[int, int], deque] = {}
        self.tamper = None          # optional callable(Frame) -> Frame
        self.log: list[Frame] | None = None
        self._lock = threading.RLock()

    # -- rounds and clocks ------------------------------------------------------
    def next_round(self) -> int:
        with self._lock:
            self.round += 1
            return self.round

    def compute(self, party: int, ops) -> None:
        with self._lock:
            self.clock[party] += self.ls * ops

    def elapsed(self) -> Fraction:
        return max(self.clock) if self.clock else Fraction(0)

    # -- messaging -------------------------------------------------------------
    def send(self, frame: Frame) -> None:
        if isinstance(frame, Plaintext) or isinstance(frame.payload, Plaintext):
            raise TaintError("refusing to send a plaintext-tainted value")
        if not isinstance(frame.payload, (bytes, bytearray)):
            raise TaintError(f"payload must be bytes, got {type(frame.payload).__name__}")
        if frame.sender == frame.receiver:
            raise TransportError("self-send")
        with self._lock:
            if self.tamper is not None:
                frame = self.tamper(frame)
            s, r = frame.sender, frame.receiver
            units = frame.units or frame.items
            depart = max(self.clock[s], self._tx_free[s])
            self._tx_free[s] = depart + units * self.latency[s][r]
            frame.arrival = self._tx_free[s]
            frame.round = self.round
            key = (s, r)
            self.bytes[key] = self.bytes.get(key, 0) + frame_size(frame)
            self.messages[key] = self.messages.get(key, 0) + 1
            self.rounds_used.add(self.round)
            if self.log is not None:
                self.log.append(frame)
            self._deliver(frame)

    def _deliver(self, frame: Frame) -> None:
        self._queues.setdefault((frame.sender, frame.receiver), deque()).append(frame)

    def _take(self, sender: int, receiver: int) -> Frame:
        q = self._queues.get((sender, receiver))
        if not q:
            raise TransportError(f"no message waiting on channel {sender}->{receiver}")
        return q.popleft()

    def recv(self, receiver: int, sender: int, role: str | None = None,
             edge: str | None = None) -> Frame:
        """Next frame on sender->receiver matching ``role`` and ``edge``.

        Frames are kept in arrival order per channel; non-matching frames
        stay queued for later calls, except that a pending abort always wins.
        """
        with self._lock:
            key = (sender, receiver)
            stash = self._stash.setdefault(key, deque())
            while True:
                for k, f in enumerate(stash):
                    if f.role == "abort":
                        raise ProtocolAbort(f.edge, f.sender, "abort", "peer aborted")
                    if (role is None or f.role == role) and (edge is None or f.edge == edge):
                        del stash[k]
                        self.clock[receiver] = max(self.clock[receiver], f.arrival)
                        return f
                stash.append(self._take(sender, receiver))

    def broadcast(self, sender: int, receivers, make) -> None:
        """Reliable broadcast modeled as identical point-to-point sends."""
        for r in receivers:
            if r != sender:
                self.send(make(r))

    def pending(self) -> int:
        return sum(len(q) for q in self._queues.values()) + sum(len(q) for q in self._stash.values())

    def drain(self) -> None:
        self._queues.clear()
        self._stash.clear()

    # -- metrics ----------------------------------------------------------------
    @property
    def total_bytes(self) -> int:
        return sum(self.bytes.values())

    @property
    def total_rounds(self) -> int:
        return len(self.rounds_used)

    def sync_clocks(self, parties) -> Fraction:
        """Barrier: wait for outstanding sends, then align ``parties``."""
        with self._lock:
            t = max(max(self.clock[p], self._tx_free[p]) for p in parties)
            for p in parties:
                self.clock[p] = t
            return t


class SocketTransport(Transport):
    """Same semantics, but every frame is encoded and pushed through a
    connected OS socket pair per channel, then decoded on receipt."""

    mode = "socket"

    def __init__(self, m: int, latency=None, ls=Fraction(0)):
        super().__init__(m, latency, ls)
        self._socks: dict[tuple[int, int], tuple[socket.socket, socket.socket]] = {}
        self._meta: dict[tuple[int, int], deque] = {}
        self._out: dict[tuple[int, int], bytearray] = {}
        self._in: dict[tuple[int, int], bytearray] = {}

    def _pair(self, key):
        if key not in self._socks:
            tx, rx = socket.socketpair()
            tx.setblocking(False)
            rx.setblocking(False)
            self._socks[key] = (tx, rx)
            self._meta[key] = deque()
            self._out[key] = bytearray()
            self._in[key] = bytearray()
        return self._socks[key]

    _out: dict
    _in: dict

    def _deliver(self, frame: Frame) -> None:
        if not hasattr(self, "_out"):
            self._out, self._in = {}, {}
        key = (frame.sender, frame.receiver)
        self._pair(key)
        data = encode_frame(frame)
        self._out[key] += struct.pack("<I", len(data)) + data
        self._meta[key].append((frame.units, frame.arrival, frame.round))
        self._pump(key)

    def _pump(self, key) -> None:
        """Move bytes from the outgoing buffer through the socket."""
        tx, rx = self._socks[key]
        out, inc = self._out[key], self._in[key]
        while True:
            moved = False
            if out:
                try:
                    k = tx.send(out)
                    del out[:k]
                    moved = k > 0
                except BlockingIOError:
                    pass
            try:
                chunk = rx.recv(1 << 20)
                if chunk:
                    inc += chunk
                    moved = True
            except BlockingIOError:
                pass
            if not moved:
                return

    def _take(self, sender: int, receiver: int) -> Frame:
        key = (sender, receiver)
        if key not in self._socks or not self._meta[key]:
            raise TransportError(f"no message waiting on channel {sender}->{receiver}")
        inc = self._in[key]
        while True:
            if len(inc) >= 4:
                (n,) = struct.unpack_from("<I", inc, 0)
                if len(inc) >= 4 + n:
                    data = bytes(inc[4:4 + n])
                    del inc[:4 + n]
                    break
            before = len(inc) + len(self._out[key])
            self._pump(key)
            if len(inc) + len(self._out[key]) == before and not self._out[key]:
                raise TransportError("socket stalled")
        frame = decode_frame(data)
        frame.units, frame.arrival, frame.round = self._meta[key].popleft()
        return frame

    def pending(self) -> int:
        return sum(len(q) for q in self._meta.values()) + sum(len(q) for q in self._stash.values())

    def drain(self) -> None:
        for key in list(self._socks):
            while self._meta[key]:
                self._take(*key)
        self._stash.clear()

    def close(self) -> None:
        for tx, rx in self._socks.values():
            tx.close()
            rx.close()
        self._socks.clear()


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise TransportError("socket closed")
        buf.extend(chunk)
    return bytes(buf)


def make_transport(kind: str, m: int, latency=None, ls=Fraction(0)) -> Transport:
    if kind == "inprocess":
        return Transport(m, latency, ls)
    if kind == "socket":
        return SocketTransport(m, latency, ls)
    raise TransportError(f"unknown transport {kind!r}")
