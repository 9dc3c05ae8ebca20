"""IT-MAC authenticated XOR sharing and the soldering protocol.

A party ``i`` holding bit ``x`` is authenticated to party ``j`` by the pair
(MAC held by i, key held by j) with ``mac = key ^ x * delta_j`` where
``delta_j`` is j's global key.  An :class:`AuthShare` is a vector of
XOR-shared bits in which every share carries such a MAC towards every
other party of the set.

All operations work on whole vectors: MACs and keys are ``(n, W)`` arrays of
uint64 words with ``W = kappa // 64``.  Each party's material lives in its
own :class:`PartyView`; the protocol code only reads one party's view when
acting as that party.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .transport import (
    Frame, ProtocolAbort, Transport, frame_bits, frame_words, pack_bits, pack_words,
)


class PartySetError(ValueError):
    pass


def words(kappa: int) -> int:
    if kappa not in (64, 128):
        raise ValueError("kappa must be 64 or 128")
    return kappa // 64


def random_words(rng: np.random.Generator, shape) -> np.ndarray:
    n = int(np.prod(shape))
    return rng.bit_generator.random_raw(n).astype(np.uint64).reshape(shape)


@dataclass
class GlobalKeys:
    kappa: int
    delta: dict[int, np.ndarray]

    @property
    def parties(self) -> tuple[int, ...]:
        return tuple(sorted(self.delta))


def fresh_keys(parties, kappa: int, rng: np.random.Generator) -> GlobalKeys:
    W = words(kappa)
    return GlobalKeys(kappa, {p: random_words(rng, (W,)) for p in sorted(parties)})


def _times(bits: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Row-wise ``bit * delta`` for a bit vector and one key."""
    return bits.astype(np.uint64)[:, None] * delta[None, :]


@dataclass
class PartyView:
    """One party's material for an authenticated sharing."""
    party: int
    bits: np.ndarray                       # own shares, uint8 (n,)
    mac: dict[int, np.ndarray]             # j -> MAC of own share towards j
    key: dict[int, np.ndarray]             # i -> key for i's share
    delta: np.ndarray                      # own global key

    def copy(self) -> "PartyView":
        return PartyView(self.party, self.bits.copy(), {j: v.copy() for j, v in self.mac.items()},
                         {i: v.copy() for i, v in self.key.items()}, self.delta.copy())

    def select(self, idx) -> "PartyView":
        return PartyView(self.party, self.bits[idx], {j: v[idx] for j, v in self.mac.items()},
                         {i: v[idx] for i, v in self.key.items()}, self.delta)


@dataclass
class AuthShare:
    """⟨x⟩ for a vector of bits over ``parties``."""
    parties: tuple[int, ...]
    kappa: int
    views: dict[int, PartyView] = field(repr=False)

    @property
    def n(self) -> int:
        return len(next(iter(self.views.values())).bits)

    def view(self, party: int) -> PartyView:
        return self.views[party]

    def select(self, idx) -> "AuthShare":
        return AuthShare(self.parties, self.kappa, {p: v.select(idx) for p, v in self.views.items()})

    def value(self) -> np.ndarray:
        """XOR of all shares (test helper; no verification)."""
        out = np.zeros(self.n, dtype=np.uint8)
        for v in self.views.values():
            out ^= v.bits
        return out


def deal_authshare(values, parties, keys: GlobalKeys, rng: np.random.Generator) -> AuthShare:
    """Trusted-dealer stand-in for the preprocessing that yields ⟨x⟩."""
    parties = tuple(sorted(parties))
    if len(parties) < 2:
        raise PartySetError("authenticated sharing needs at least two parties")
    values = np.asarray(values, dtype=np.uint8) & 1
    n = len(values)
    W = words(keys.kappa)
    shares = {p: rng.integers(0, 2, n, dtype=np.uint8) for p in parties[1:]}
    acc = values.copy()
    for s in shares.values():
        acc ^= s
    shares[parties[0]] = acc
    views = {p: PartyView(p, shares[p], {}, {}, keys.delta[p]) for p in parties}
    for i in parties:
        for j in parties:
            if i == j:
                continue
            k = random_words(rng, (n, W))
            views[j].key[i] = k
            views[i].mac[j] = k ^ _times(shares[i], keys.delta[j])
    return AuthShare(parties, keys.kappa, views)


def audit(a: AuthShare) -> bool:
    """Check the MAC relation for every ordered pair (debug checker)."""
    for i in a.parties:
        for j in a.parties:
            if i == j:
                continue
            vi, vj = a.views[i], a.views[j]
            if not np.array_equal(vi.mac[j], vj.key[i] ^ _times(vi.bits, vj.delta)):
                return False
    return True


def _same_keys(a: AuthShare, b: AuthShare) -> None:
    if a.parties != b.parties:
        raise PartySetError("party sets differ")
    for p in a.parties:
        if not np.array_equal(a.views[p].delta, b.views[p].delta):
            raise PartySetError("global keys differ; key-switch first")


def xor_shares(a: AuthShare, b: AuthShare) -> AuthShare:
    """⟨x⟩ ⊕ ⟨y⟩, computed locally by each party."""
    _same_keys(a, b)
    views = {}
    for p in a.parties:
        va, vb = a.views[p], b.views[p]
        views[p] = PartyView(p, va.bits ^ vb.bits,
                             {j: va.mac[j] ^ vb.mac[j] for j in va.mac},
                             {i: va.key[i] ^ vb.key[i] for i in va.key}, va.delta)
    return AuthShare(a.parties, a.kappa, views)


def xor_const(a: AuthShare, c) -> AuthShare:
    """⟨x⟩ ⊕ c for a public bit vector c.

    The lowest party flips its share; every other party folds c into the
    key it holds for that share, so no MAC changes and nothing is sent.
    """
    c = np.broadcast_to(np.asarray(c, dtype=np.uint8) & 1, (a.n,))
    owner = a.parties[0]
    views = {}
    for p in a.parties:
        v = a.views[p].copy()
        if p == owner:
            v.bits ^= c
        else:
            v.key[owner] ^= _times(c, v.delta)
        views[p] = v
    return AuthShare(a.parties, a.kappa, views)


def keyswitch_view(v: PartyView, deltas: dict[int, np.ndarray]) -> PartyView:
    """Party-local half of ⊞: re-MAC own share under the new keys."""
    out = v.copy()
    for j in out.mac:
        if j not in deltas:
            raise PartySetError(f"missing key delta for party {j}")
        out.mac[j] ^= _times(v.bits, deltas[j])
    if v.party not in deltas:
        raise PartySetError(f"missing key delta for party {v.party}")
    out.delta = v.delta ^ deltas[v.party]
    return out


def keyswitch(a: AuthShare, deltas: dict[int, np.ndarray]) -> AuthShare:
    """Move ⟨x⟩ from keys Δ to Δ ⊕ δ given the broadcast differences δ."""
    return AuthShare(a.parties, a.kappa, {p: keyswitch_view(v, deltas) for p, v in a.views.items()})


def key_deltas(old: GlobalKeys, new: GlobalKeys, parties) -> dict[int, np.ndarray]:
    return {p: old.delta[p] ^ new.delta[p] for p in parties}


def check_mac(verifier: PartyView, sender: int, bits: np.ndarray, mac: np.ndarray) -> bool:
    return bool(np.array_equal(verifier.key[sender] ^ _times(bits, verifier.delta), mac))


def reconstruct_verify(a: AuthShare, edge: str = "reveal", to=None) -> np.ndarray:
    """Open ⟨x⟩ to ``to`` (default: everyone), checking every received MAC."""
    receivers = a.parties if to is None else (to,)
    value = None
    for r in receivers:
        vr = a.views[r]
        acc = vr.bits.copy()
        for s in a.parties:
            if s == r:
                continue
            vs = a.views[s]
            if not check_mac(vr, s, vs.bits, vs.mac[r]):
                raise ProtocolAbort(edge, r, "lambda-open", f"bad MAC from party {s}")
            acc ^= vs.bits
        value = acc if value is None else value
    return value


# -- soldering -------------------------------------------------------------------

def _digest(bits: np.ndarray) -> bytes:
    return hashlib.sha256(pack_bits(bits)).digest()


def _mac_frame(edge, s, r, mac):
    return Frame(edge, s, r, "mac", pack_words(mac), len(mac))


def solder(edge: str, v: AuthShare, bhat_v: np.ndarray, u: AuthShare,
           transport: Transport) -> dict[int, np.ndarray]:
    """Transfer the value on child output wires to parent input wires.

    ``v`` is ⟨λ_v⟩ over P1 under the child's keys, ``bhat_v`` the child's
    public masked output (known to P1), ``u`` is ⟨λ_u⟩ over P2 ⊇ P1 under the
    parent's keys.  Returns each P2 party's copy of b̂_u = λ_u ⊕ λ_v ⊕ b̂_v.

    Messages: P1 members broadcast b̂_u^i = λ_v^i ⊕ λ_u^i to P2 and δ_i to P1;
    the lowest P1 member also forwards b̂_v to P2 ∖ P1.  Members of P2 ∖ P1
    broadcast λ_u^i with MACs.  In the second round P1 members send the
    key-switched MACs on b̂_u^i.  A third step echoes digests of b̂_u to the
    lowest P2 party so that a copy altered in transit is caught.  Any failed
    check raises :class:`ProtocolAbort`.
    """
    run = SolderRun(edge, v, bhat_v, u, transport)
    transport.next_round()
    run.round_one()
    transport.next_round()
    run.round_two()
    out = run.finish()
    transport.next_round()
    run.confirm()
    return out


class SolderRun:
    """Step-wise soldering so an engine can batch several edges per round."""

    def __init__(self, edge, v: AuthShare, bhat_v, u: AuthShare, transport: Transport):
        self.edge, self.v, self.u, self.t = edge, v, u, transport
        self.p1, self.p2 = tuple(v.parties), tuple(u.parties)
        if not set(self.p1) <= set(self.p2):
            raise PartySetError(f"{edge}: child parties {self.p1} not within parent {self.p2}")
        if v.n != u.n:
            raise PartySetError(f"{edge}: width mismatch {v.n} != {u.n}")
        self.outside = tuple(p for p in self.p2 if p not in self.p1)
        self.ev = self.p1[0]
        self.n = v.n
        self.W = words(u.kappa)
        self.bhat_v = np.asarray(bhat_v, dtype=np.uint8)
        self._shares: dict[int, np.ndarray] = {}

    def round_one(self) -> None:
        t, e, n = self.t, self.edge, self.n
        for i in self.p1:
            vv, vu = self.v.view(i), self.u.view(i)
            share = vv.bits ^ vu.bits
            self._shares[i] = share
            delta = vv.delta ^ vu.delta
            t.broadcast(i, self.p2, lambda r: Frame(e, i, r, "bhat-share", pack_bits(share), n))
            if i == self.ev:
                t.broadcast(i, self.outside,
                            lambda r: Frame(e, i, r, "bhat-share", pack_bits(self.bhat_v), n, part=1))
            t.broadcast(i, self.p1, lambda r: Frame(e, i, r, "delta", pack_words(delta), 1))
        for q in self.outside:
            vq = self.u.view(q)
            t.broadcast(q, self.p2, lambda r: Frame(e, q, r, "lambda-reveal", pack_bits(vq.bits), n))
            for r in self.p2:
                if r != q:
                    t.send(_mac_frame(e, q, r, vq.mac[r]))

    def round_two(self) -> None:
        t, e, n, W = self.t, self.edge, self.n, self.W
        self._deltas: dict[int, dict[int, np.ndarray]] = {}
        for i in self.p1:
            got = {}
            for j in self.p1:
                if j != i:
                    f = t.recv(i, j, "delta", e)
                    got[j] = frame_words(f, (W,))
            vv, vu = self.v.view(i), self.u.view(i)
            got[i] = vv.delta ^ vu.delta
            self._deltas[i] = got
            switched = keyswitch_view(vv.select(slice(None)), {j: got[j] for j in self.p1})
            for j in self.p1:
                if j != i:
                    t.send(_mac_frame(e, i, j, switched.mac[j] ^ vu.mac[j]))

    def finish(self) -> dict[int, np.ndarray]:
        t, e, n, W = self.t, self.edge, self.n, self.W
        outside_bits: dict[int, dict[int, np.ndarray]] = {}
        results = {}
        for r in self.p2:
            vu = self.u.view(r)
            shares = {}
            for i in self.p1:
                if i == r:
                    shares[i] = self._shares[i]
                    continue
                f = t.recv(r, i, "bhat-share", e)
                shares[i] = frame_bits(f, n)
            if r in self.p1:
                bv = self.bhat_v
                vv = self.v.view(r)
                tilde = vu.delta
                for j in self.p1:
                    if j == r:
                        continue
                    f = t.recv(r, j, "mac", e)
                    mac = frame_words(f, (n, W))
                    key = vv.key[j] ^ vu.key[j]
                    if not np.array_equal(key ^ _times(shares[j], tilde), mac):
                        raise ProtocolAbort(e, r, "bhat-share", f"MAC on share of party {j} failed")
            else:
                f = t.recv(r, self.ev, "bhat-share", e)
                if f.part != 1:
                    raise ProtocolAbort(e, r, "bhat-share", "missing forwarded masked value")
                bv = frame_bits(f, n)
            reveals = {}
            for q in self.outside:
                if q == r:
                    reveals[q] = vu.bits
                    continue
                f = t.recv(r, q, "lambda-reveal", e)
                bits = frame_bits(f, n)
                fm = t.recv(r, q, "mac", e)
                mac = frame_words(fm, (n, W))
                if not check_mac(vu, q, bits, mac):
                    raise ProtocolAbort(e, r, "lambda-reveal", f"MAC on reveal of party {q} failed")
                reveals[q] = bits
            out = bv.copy()
            for s in shares.values():
                out ^= s
            for s in reveals.values():
                out ^= s
            results[r] = out
            outside_bits[r] = reveals
        self._results = results
        return results

    def confirm(self) -> None:
        """Echo step of the broadcast channel: every parent party sends a
        digest of its b̂_u to the lowest parent party, which compares."""
        t, e = self.t, self.edge
        head = self.p2[0]
        for r in self.p2[1:]:
            t.send(Frame(e, r, head, "bhat-share", _digest(self._results[r]), 0, 2))
        ref = _digest(self._results[head])
        for r in self.p2[1:]:
            if t.recv(head, r, "bhat-share", e).payload != ref:
                raise ProtocolAbort(e, head, "bhat-share", f"party {r} holds a different masked value")
