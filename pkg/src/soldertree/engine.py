"""Execute a tree of units: garble, inject inputs, solder, evaluate, reveal.

Garbling is a trusted-dealer stand-in.  Each unit gets fresh global keys for
its parties and authenticated masks ⟨λ⟩ for every input and output wire.
Evaluation goes through :class:`SealedBackend`, which takes masked input
bits and returns masked output bits.  Only inside that boundary are masks
removed, the circuit run in the clear, and embedded verifier bits checked.
Everything that crosses the transport is a masked bit, a share, a MAC, a
key difference, a digest, or a placeholder frame that stands for garbled
material and carries only the unit's commitment tag.
"""

from __future__ import annotations

import hashlib
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

import numpy as np

from .authshare import (
    AuthShare, GlobalKeys, ProtocolAbort, SolderRun, check_mac, deal_authshare, fresh_keys,
)
from .circuit import Circuit
from .primitives import split_list, top
from .transport import (
    Frame, Plaintext, Transport, frame_bits, frame_words, pack_bits, pack_words,
)


class EngineError(RuntimeError):
    pass


class VerAbort(ProtocolAbort):
    """An embedded verifier output 0: the list on ``edge`` broke its constraint."""

    def __init__(self, edge: str, unit: str, check: str):
        super().__init__(edge, "evaluator", "ver", f"check {check} failed in unit {unit}")
        self.unit = unit
        self.check = check


@dataclass
class MaskedValue:
    """Public masked bits b̂ = b ⊕ λ for one bundle."""
    label: str
    bits: np.ndarray


class SealedBackend:
    """Masked-in, masked-out evaluation of one circuit.

    Holds the plaintext wire masks.  A cryptographic garbling backend would
    replace this class and keep the same interface.
    """

    def __init__(self, circuit: Circuit, masks: dict[str, np.ndarray], unit: str):
        self._c = circuit
        self._masks = masks
        self.unit = unit

    def eval(self, masked: Mapping[str, np.ndarray]) -> np.ndarray:
        from .circuit import run_wires
        c = self._c
        vals = np.zeros((c.n_wires, 1), dtype=np.uint64)
        for g in c.input_groups:
            if g.label not in masked:
                raise EngineError(f"unit {self.unit}: no masked value for input {g.label}")
            clear = masked[g.label] ^ self._masks[g.label]
            vals[list(g.bundle.wires), 0] = clear.astype(np.uint64)
        run_wires(c, vals)
        for label, wire in c.ver_outputs:
            if not int(vals[wire, 0]) & 1:
                edge, _, check = label.partition(":")
                raise VerAbort(edge, self.unit, check or label)
        out = np.zeros(0, dtype=np.uint8)
        for label, bnd in c.outputs:
            bits = (vals[list(bnd.wires), 0] & np.uint64(1)).astype(np.uint8)
            out = np.concatenate([out, bits ^ self._masks[label]])
        return out


@dataclass
class GarbledUnit:
    name: str
    circuit: Circuit
    parties: tuple[int, ...]
    keys: GlobalKeys
    lam: dict[str, AuthShare] = field(repr=False)
    backend: SealedBackend = field(repr=False)
    tag: bytes = b""

    @property
    def evaluator(self) -> int:
        return self.parties[0]

    @property
    def out_label(self) -> str:
        return "out"


def unit_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def _digest(bits: np.ndarray) -> bytes:
    return hashlib.sha256(pack_bits(bits)).digest()


def _abort_all(t: Transport, parties, party, edge) -> None:
    if not isinstance(party, int):
        party = parties[0]
    for r in parties:
        if r != party:
            try:
                t.send(Frame(edge, party, r, "abort", b""))
            except Exception:  # noqa: BLE001 - best effort notification
                pass


def garble_unit(circuit: Circuit, parties, transport: Transport, rng: np.random.Generator,
                kappa: int = 128, name: str | None = None) -> GarbledUnit:
    """Deal fresh keys and I/O wire masks, and charge garbling to the clocks.

    Each party sends every other party |C| units of material and the
    garblers send |C| units to the evaluator.  The frames carry only the
    unit's commitment tag, which receivers check.
    """
    name = name or circuit.name
    parties = tuple(sorted(parties))
    if len(parties) < 2:
        raise EngineError(f"unit {name} needs at least two parties")
    for p in parties:
        if not 0 <= p < transport.m:
            raise EngineError(f"party {p} outside the transport")
    keys = fresh_keys(parties, kappa, rng)
    lam, masks = {}, {}
    labels = [(g.label, g.bundle.width) for g in circuit.input_groups]
    labels += [(lab, b.width) for lab, b in circuit.outputs]
    for label, width in labels:
        bits = rng.integers(0, 2, width, dtype=np.uint8)
        masks[label] = bits
        lam[label] = deal_authshare(bits, parties, keys, rng)
    tag = hashlib.sha256(name.encode() + rng.bytes(16)).digest()
    unit = GarbledUnit(name, circuit, parties, keys, lam, SealedBackend(circuit, masks, name), tag)
    C = circuit.and_count
    t = transport
    t.next_round()
    for i in parties:
        t.compute(i, 4 * C)
    for i in parties:
        for j in parties:
            if i != j:
                t.send(Frame(name, i, j, "gc-material", tag, 0, 0, C))
    for i in parties[1:]:
        t.send(Frame(name, i, parties[0], "gc-material", tag, 0, 1, C))
    for j in parties:
        for i in parties:
            if i != j:
                _expect_tag(t, j, i, unit)
    for i in parties[1:]:
        _expect_tag(t, parties[0], i, unit)
    return unit


def _expect_tag(t: Transport, r: int, s: int, unit: GarbledUnit) -> None:
    f = t.recv(r, s, "gc-material", unit.name)
    if f.payload != unit.tag:
        raise ProtocolAbort(unit.name, r, "gc-material", f"material from party {s} does not match")


def open_to(a: AuthShare, receivers, edge: str, t: Transport, role: str) -> dict[int, np.ndarray]:
    """Reconstruct ⟨x⟩ towards ``receivers`` over the transport, checking MACs."""
    n = a.n
    W = a.kappa // 64
    for r in receivers:
        for s in a.parties:
            if s != r:
                vs = a.view(s)
                t.send(Frame(edge, s, r, role, pack_bits(vs.bits), n))
                t.send(Frame(edge, s, r, "mac", pack_words(vs.mac[r]), n))
    out = {}
    for r in receivers:
        vr = a.view(r)
        acc = vr.bits.copy()
        for s in a.parties:
            if s == r:
                continue
            bits = frame_bits(t.recv(r, s, role, edge), n)
            mac = frame_words(t.recv(r, s, "mac", edge), (n, W))
            if not check_mac(vr, s, bits, mac):
                raise ProtocolAbort(edge, r, role, f"bad MAC on share of party {s}")
            acc ^= bits
        out[r] = acc
    return out


def _echo_broadcast(t: Transport, sender: int, parties, edge: str, bits: np.ndarray,
                    role: str, part: int) -> np.ndarray:
    """Broadcast ``bits`` and confirm every receiver got the same vector.

    Receivers return a digest of what they saw to the sender; any mismatch
    aborts.  Returns the evaluator's copy.
    """
    n = len(bits)
    payload = pack_bits(bits)
    t.broadcast(sender, parties, lambda r: Frame(edge, sender, r, role, payload, n, part))
    got = {sender: bits}
    for r in parties:
        if r != sender:
            got[r] = frame_bits(t.recv(r, sender, role, edge), n)
    ref = _digest(bits)
    for r in parties:
        if r != sender:
            t.send(Frame(edge, r, sender, role, _digest(got[r]), 0, part + 1))
    for r in parties:
        if r != sender:
            d = t.recv(sender, r, role, edge).payload
            if d != ref:
                raise ProtocolAbort(edge, sender, role, f"party {r} saw a different broadcast")
    return got[parties[0]]


def inject_input(unit: GarbledUnit, label: str, owner: int, value, transport: Transport) -> MaskedValue:
    """Open λ to the owner, who broadcasts b̂ = x ⊕ λ to the unit."""
    if owner not in unit.parties:
        raise EngineError(f"party {owner} is not a member of unit {unit.name}")
    g = unit.circuit.group(label)
    if g.solder or g.owner != owner:
        raise EngineError(f"input {label} of unit {unit.name} is not owned by party {owner}")
    if not isinstance(value, Plaintext):
        raise EngineError("party inputs must be wrapped in Plaintext")
    width = g.bundle.width
    x = value.value
    if isinstance(x, (int, np.integer)):
        x = np.frombuffer(int(x).to_bytes((width + 7) // 8, "little"), dtype=np.uint8)
        x = np.unpackbits(x, bitorder="little")[:width]
    x = np.asarray(x, dtype=np.uint8)
    t = transport
    t.next_round()
    lam = open_to(unit.lam[label], [owner], label, t, "lambda-open")[owner]
    t.next_round()
    bhat = _echo_broadcast(t, owner, unit.parties, label, x ^ lam, "masked-input", 0)
    return MaskedValue(label, bhat)


def solder_edges(parent: GarbledUnit, children: list[tuple[GarbledUnit, np.ndarray]],
                 transport: Transport) -> dict[str, MaskedValue]:
    """Solder every child output into ``parent``; all edges share each round."""
    t = transport
    runs = []
    for child, bhat in children:
        label = child.name
        runs.append((label, SolderRun(label, child.lam[child.out_label], bhat, parent.lam[label], t)))
    if not runs:
        return {}
    t.next_round()
    for _, r in runs:
        r.round_one()
    t.next_round()
    for _, r in runs:
        r.round_two()
    out = {}
    for label, r in runs:
        res = r.finish()
        out[label] = MaskedValue(label, res[parent.evaluator])
    t.next_round()
    for _, r in runs:
        r.confirm()
    return out


def solder_edge(child: GarbledUnit, bhat_v: np.ndarray, parent: GarbledUnit,
                transport: Transport) -> MaskedValue:
    return solder_edges(parent, [(child, bhat_v)], transport)[child.name]


def eval_unit(unit: GarbledUnit, masked: Mapping[str, MaskedValue], transport: Transport) -> np.ndarray:
    """Evaluator-side evaluation; garblers first send their input labels."""
    t = transport
    t.next_round()
    ev = unit.evaluator
    bits_in = unit.circuit.input_bits
    for i in unit.parties[1:]:
        t.send(Frame(unit.name, i, ev, "gc-material", unit.tag, 0, 2, bits_in))
    for i in unit.parties[1:]:
        _expect_tag(t, ev, i, unit)
    t.compute(ev, (len(unit.parties) - 1) * unit.circuit.and_count)
    return unit.backend.eval({k: v.bits for k, v in masked.items()})


def reveal_outputs(unit: GarbledUnit, bhat: np.ndarray, transport: Transport) -> np.ndarray:
    """Broadcast b̂ of the outputs, open λ to everyone, return the clear bits."""
    t = transport
    t.next_round()
    bhat = _echo_broadcast(t, unit.evaluator, unit.parties, unit.name, bhat, "masked-input", 2)
    t.next_round()
    lam = open_to(unit.lam[unit.out_label], unit.parties, unit.name, t, "lambda-reveal")
    first = lam[unit.parties[0]]
    for p, v in lam.items():
        if not np.array_equal(v, first):
            raise ProtocolAbort(unit.name, p, "lambda-reveal", "parties disagree on opened masks")
    return bhat ^ first


# -- tree execution ----------------------------------------------------------------

@dataclass
class Metrics:
    bytes: dict = field(default_factory=dict)
    messages: dict = field(default_factory=dict)
    rounds: int = 0
    simulated: Fraction = Fraction(0)
    unit_seconds: dict = field(default_factory=dict)
    wall_seconds: float = 0.0
    solder_batching: str = "per-parent"

    @property
    def total_bytes(self) -> int:
        return sum(self.bytes.values())

    def lines(self) -> list[str]:
        out = [f"rounds={self.rounds}", f"total_bytes={self.total_bytes}",
               f"simulated_time={float(self.simulated):.6g}",
               f"wall_seconds={self.wall_seconds:.4f}",
               f"solder_batching={self.solder_batching}"]
        for (s, r), v in sorted(self.bytes.items()):
            out.append(f"channel P{s + 1}->P{r + 1} bytes={v} messages={self.messages[(s, r)]}")
        for name, sec in sorted(self.unit_seconds.items()):
            out.append(f"unit {name} seconds={sec:.4f}")
        return out


def _children(node) -> list:
    return [src for _, src in node.inputs if not isinstance(src, int)]


def execute(root, inputs: Mapping[str, Plaintext], transport: Transport, seed: int = 0,
            kappa: int = 128, mode: str = "serial") -> tuple[np.ndarray, Metrics]:
    """Run a unit tree.  ``inputs`` maps each leaf label to its Plaintext value.

    Returns the revealed root output bits and run metrics.  Any abort is
    re-raised after every party of the failing unit is notified.
    """
    if mode not in ("serial", "parallel"):
        raise EngineError(f"unknown mode {mode!r}")
    t = transport
    metrics = Metrics()
    start = time.perf_counter()
    pool = ThreadPoolExecutor(max_workers=8) if mode == "parallel" else None

    def run(node) -> tuple[GarbledUnit, np.ndarray]:
        kids = _children(node)
        if pool is not None and len(kids) > 1 and _disjoint(kids):
            futs = [pool.submit(run, k) for k in kids]
            done = [f.result() for f in futs]
        else:
            done = [run(k) for k in kids]
        name = node.circuit.name
        t0 = time.perf_counter()
        parties = tuple(sorted(node.parties))
        try:
            unit = garble_unit(node.circuit, parties, t, unit_rng(seed, name), kappa, name)
            masked = solder_edges(unit, done, t)
            for label, src in node.inputs:
                if isinstance(src, int):
                    if label not in inputs:
                        raise EngineError(f"no input supplied for {label}")
                    masked[label] = inject_input(unit, label, src, inputs[label], t)
            bhat = eval_unit(unit, masked, t)
        except ProtocolAbort as e:
            if not hasattr(e, "unit"):
                e.unit = name
            _abort_all(t, parties, e.party, e.edge)
            raise
        metrics.unit_seconds[name] = time.perf_counter() - t0
        return unit, bhat

    try:
        unit, bhat = run(root)
        try:
            clear = reveal_outputs(unit, bhat, t)
        except ProtocolAbort as e:
            e.unit = unit.name
            _abort_all(t, unit.parties, e.party, e.edge)
            raise
    finally:
        if pool is not None:
            pool.shutdown()
    metrics.bytes = dict(t.bytes)
    metrics.messages = dict(t.messages)
    metrics.rounds = t.round
    metrics.simulated = t.elapsed()
    metrics.wall_seconds = time.perf_counter() - start
    return clear, metrics


def _disjoint(nodes) -> bool:
    seen: set = set()
    for n in nodes:
        ps = set(n.parties)
        if ps & seen:
            return False
        seen |= ps
    return True


def bits_to_value(bits: np.ndarray) -> int:
    return int.from_bytes(np.packbits(bits, bitorder="little").tobytes(), "little")


@dataclass
class RunResult:
    columns: tuple[str, ...]
    rows: list[tuple]
    metrics: Metrics


def decode_rows(plan, value: int) -> list[tuple]:
    """Turn the root output into result rows, dropping absent and padding rows."""
    root = plan.root
    lay = root.out_layout
    k0 = lay.key[0]
    w = lay.col_width(k0)
    out = []
    for v in split_list(value, root.out_rows, lay.width):
        r = lay.unpack(v)
        if r[k0] != 0 and r[k0] < top(w):
            out.append(tuple(r[c] for c, _ in plan.program.result))
    return out


def local_phase(plan, tables: Mapping, tamper_local=None) -> dict[str, Plaintext]:
    """Each party runs its local plan; outputs stay wrapped as Plaintext."""
    out = {}
    for lp in plan.locals:
        rows = lp.run(tables.get((lp.table, lp.party), []))
        if tamper_local is not None:
            rows = tamper_local(lp, rows)
        vals = lp.encode(rows)
        w = lp.layout.width
        out[lp.label] = Plaintext(sum(v << (i * w) for i, v in enumerate(vals)))
    return out


def run_tree(plan, tables: Mapping, transport: Transport | None = None, seed: int = 0,
             kappa: int = 128, mode: str = "serial", tamper_local=None) -> RunResult:
    """Local phase, then the joint tree, then decode the revealed rows."""
    from .transport import make_transport
    if plan.schema is not None:
        from .sqlfront import check_rows
        check_rows(plan.schema, tables)
    t = transport or make_transport("inprocess", plan.m)
    inputs = local_phase(plan, tables, tamper_local)
    clear, metrics = execute(plan.root, inputs, t, seed, kappa, mode)
    rows = decode_rows(plan, bits_to_value(clear))
    return RunResult(tuple(name for _, name in plan.program.result), rows, metrics)


# -- trace format for replay fuzzing ---------------------------------------------

def dump_trace(frames) -> str:
    """One frame per line: index round sender receiver role part edge items units payload-hex."""
    out = []
    for k, f in enumerate(frames):
        out.append(f"{k} {f.round} {f.sender} {f.receiver} {f.role} {f.part} {f.edge} "
                   f"{f.items} {f.units} {f.payload.hex()}")
    return "\n".join(out) + "\n"


def load_trace(text: str) -> list[dict]:
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        k, rnd, s, r, role, part, edge, items, units, hexp = line.split(" ")
        out.append(dict(index=int(k), round=int(rnd), sender=int(s), receiver=int(r), role=role,
                        part=int(part), edge=edge, items=int(items), units=int(units),
                        payload=bytes.fromhex(hexp)))
    return out


def bit_flipper(frame_index: int, bit: int):
    """Tamper hook flipping one payload bit of the ``frame_index``-th frame sent."""
    state = {"k": 0}

    def hook(f: Frame) -> Frame:
        k = state["k"]
        state["k"] += 1
        if k == frame_index and f.payload:
            data = bytearray(f.payload)
            data[(bit // 8) % len(data)] ^= 1 << (bit % 8)
            return Frame(f.edge, f.sender, f.receiver, f.role, bytes(data), f.items, f.part, f.units)
        return f
    return hook
