"""Gate-level Boolean circuit IR.

Wires are dense integer ids.  Every wire is defined exactly once, either as
an input wire or as the output of a gate, and ids are assigned in
topological order, so a circuit is just three parallel arrays
(kind, operand a, operand b) indexed by wire id.

Values are evaluated bit-sliced: each wire carries ``W`` uint64 words, so a
single pass evaluates ``64 * W`` independent instances ("lanes").
"""

from __future__ import annotations

from array import array
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

INPUT, CONST0, CONST1, AND, XOR, INV = 0, 1, 2, 3, 4, 5
KIND_NAMES = {INPUT: "INPUT", CONST0: "CONST0", CONST1: "CONST1",
              AND: "AND", XOR: "XOR", INV: "INV"}
NAME_KINDS = {v: k for k, v in KIND_NAMES.items()}
ARITY = {CONST0: 0, CONST1: 0, INV: 1, AND: 2, XOR: 2}


class CircuitError(ValueError):
    pass


@dataclass(frozen=True)
class SolderSource:
    """Owner tag for an input bundle that is fed by a solder edge."""
    edge: str

    def __str__(self) -> str:
        return f"solder:{self.edge}"


@dataclass(frozen=True)
class Bundle:
    """Ordered wires, least significant bit first."""
    wires: tuple[int, ...]
    semantic: str = "element"
    elem_width: int | None = None

    def __post_init__(self):
        if self.semantic == "list":
            if not self.elem_width or len(self.wires) % self.elem_width:
                raise CircuitError("list bundle needs a uniform element width")

    @property
    def width(self) -> int:
        return len(self.wires)

    def elements(self) -> list[tuple[int, ...]]:
        ew = self.elem_width or self.width
        return [self.wires[i:i + ew] for i in range(0, self.width, ew)]


@dataclass(frozen=True)
class InputGroup:
    label: str
    owner: object
    bundle: Bundle

    @property
    def solder(self) -> bool:
        return isinstance(self.owner, SolderSource)


@dataclass
class Circuit:
    """Immutable once built.  Use :class:`Builder` to construct one."""
    kind: np.ndarray
    a: np.ndarray
    b: np.ndarray
    input_groups: list[InputGroup]
    outputs: list[tuple[str, Bundle]]
    ver_outputs: list[tuple[str, int]] = field(default_factory=list)
    name: str = "circuit"

    def __post_init__(self):
        idx = np.arange(len(self.kind))
        two = (self.kind == AND) | (self.kind == XOR)
        one = two | (self.kind == INV)
        if np.any(one & (self.a >= idx)) or np.any(two & (self.b >= idx)):
            raise CircuitError("operand does not precede its gate")
        self.kind.setflags(write=False)
        self.a.setflags(write=False)
        self.b.setflags(write=False)

    @property
    def n_wires(self) -> int:
        return len(self.kind)

    def group(self, label: str) -> InputGroup:
        for g in self.input_groups:
            if g.label == label:
                return g
        raise KeyError(label)

    def output(self, label: str) -> Bundle:
        for lab, bnd in self.outputs:
            if lab == label:
                return bnd
        raise KeyError(label)

    @property
    def input_bits(self) -> int:
        return sum(g.bundle.width for g in self.input_groups)

    @property
    def and_count(self) -> int:
        return int(np.count_nonzero(self.kind == AND))


def gate_counts(c: Circuit) -> dict[str, int]:
    """Per-kind gate counts.  ``counts["AND"]`` is the |C| of the cost model."""
    counts = np.bincount(c.kind, minlength=6) if c.n_wires else np.zeros(6, int)
    return {KIND_NAMES[k]: int(counts[k]) for k in (AND, XOR, INV, CONST0, CONST1)}


class Builder:
    """Single-use circuit builder.

    The low-level :meth:`add_gate` appends a gate verbatim.  The helpers
    (:meth:`AND`, :meth:`XOR`, :meth:`NOT`, ...) fold constant operands so
    that padding with constant rows costs nothing.
    """

    def __init__(self, name: str = "circuit"):
        self.name = name
        self._kind = array("b")
        self._a = array("i")
        self._b = array("i")
        self._groups: list[InputGroup] = []
        self._outputs: list[tuple[str, Bundle]] = []
        self._ver: list[tuple[str, int]] = []
        self._c0: int | None = None
        self._c1: int | None = None
        self._closed = False
        self._n = 0

    # -- raw construction -------------------------------------------------
    def _new(self, kind: int, a: int, b: int) -> int:
        if self._closed:
            raise CircuitError("builder already finished")
        self._kind.append(kind)
        self._a.append(a)
        self._b.append(b)
        n = self._n
        self._n = n + 1
        return n

    def alloc_input(self, owner, width: int, label: str | None = None,
                    semantic: str = "element", elem_width: int | None = None) -> Bundle:
        if width <= 0:
            raise CircuitError("input width must be positive")
        label = label or f"in{len(self._groups)}"
        if any(g.label == label for g in self._groups):
            raise CircuitError(f"duplicate input label {label!r}")
        wires = tuple(self._new(INPUT, -1, -1) for _ in range(width))
        bnd = Bundle(wires, semantic, elem_width)
        self._groups.append(InputGroup(label, owner, bnd))
        return bnd

    def add_gate(self, kind, a: int | None = None, b: int | None = None) -> int:
        if isinstance(kind, str):
            if kind not in NAME_KINDS:
                raise CircuitError(f"not a gate kind: {kind}")
            kind = NAME_KINDS[kind]
        if kind not in ARITY:
            raise CircuitError(f"not a gate kind: {kind}")
        ops = [x for x in (a, b) if x is not None]
        if len(ops) != ARITY[kind]:
            raise CircuitError(f"{KIND_NAMES[kind]} takes {ARITY[kind]} operands")
        n = len(self._kind)
        for x in ops:
            if not 0 <= x < n:
                raise CircuitError(f"undefined wire {x}")
        return self._new(kind, -1 if a is None else a, -1 if b is None else b)

    # -- folding helpers --------------------------------------------------
    @property
    def zero(self) -> int:
        if self._c0 is None:
            self._c0 = self._new(CONST0, -1, -1)
        return self._c0

    @property
    def one(self) -> int:
        if self._c1 is None:
            self._c1 = self._new(CONST1, -1, -1)
        return self._c1

    def const(self, bit: int) -> int:
        return self.one if bit else self.zero

    def AND(self, x: int, y: int) -> int:
        c0, c1 = self._c0, self._c1
        if x == c0 or y == c0:
            return x if x == c0 else y
        if x == c1:
            return y
        if y == c1 or x == y:
            return x
        if self._closed:
            raise CircuitError("builder already finished")
        self._kind.append(AND)
        self._a.append(x)
        self._b.append(y)
        n = self._n
        self._n = n + 1
        return n

    def XOR(self, x: int, y: int) -> int:
        c0, c1 = self._c0, self._c1
        if x == c0:
            return y
        if y == c0:
            return x
        if x == y:
            return self.zero
        if x == c1:
            return self.NOT(y)
        if y == c1:
            return self.NOT(x)
        if self._closed:
            raise CircuitError("builder already finished")
        self._kind.append(XOR)
        self._a.append(x)
        self._b.append(y)
        n = self._n
        self._n = n + 1
        return n

    def NOT(self, x: int) -> int:
        if x == self._c0:
            return self.one
        if x == self._c1:
            return self.zero
        return self._new(INV, x, -1)

    def OR(self, x: int, y: int) -> int:
        # OR is not a gate kind; lowered through De Morgan.
        c0, c1 = self._c0, self._c1
        if x == c1 or y == c1:
            return self.one
        if x == c0:
            return y
        if y == c0 or x == y:
            return x
        return self.NOT(self.AND(self.NOT(x), self.NOT(y)))

    def MUX(self, sel: int, x: int, y: int) -> int:
        """``x`` if sel else ``y``."""
        return self.XOR(y, self.AND(sel, self.XOR(x, y)))

    # -- outputs ----------------------------------------------------------
    def set_output(self, label: str, bundle: Bundle | Sequence[int], semantic="element",
                   elem_width=None) -> Bundle:
        if not isinstance(bundle, Bundle):
            bundle = Bundle(tuple(bundle), semantic, elem_width)
        self._outputs.append((label, bundle))
        return bundle

    def add_ver(self, label: str, wire: int) -> None:
        self._ver.append((label, wire))

    @property
    def and_count(self) -> int:
        return sum(1 for k in self._kind if k == AND)

    def finish(self) -> Circuit:
        self._closed = True
        return Circuit(
            np.frombuffer(self._kind, dtype=np.int8).copy(),
            np.frombuffer(self._a, dtype=np.int32).copy(),
            np.frombuffer(self._b, dtype=np.int32).copy(),
            list(self._groups), list(self._outputs), list(self._ver), self.name)


def embed(parent: Builder, sub: Circuit, input_map: Mapping[str, Bundle | Sequence[int]],
          prefix: str = "") -> dict[str, Bundle]:
    """Inline ``sub`` into ``parent``.

    Every input group of ``sub`` must be mapped to a parent bundle of equal
    width.  Gates are copied verbatim (no folding), so AND counts add up.
    The sub-circuit's verifier outputs are appended to the parent's.
    """
    remap = np.full(sub.n_wires, -1, dtype=np.int64)
    for g in sub.input_groups:
        if g.label not in input_map:
            raise CircuitError(f"input {g.label!r} not mapped")
        src = input_map[g.label]
        src = src.wires if isinstance(src, Bundle) else tuple(src)
        if len(src) != g.bundle.width:
            raise CircuitError(f"width mismatch on {g.label!r}: {len(src)} != {g.bundle.width}")
        remap[list(g.bundle.wires)] = src
    kinds, a_arr, b_arr = sub.kind.tolist(), sub.a.tolist(), sub.b.tolist()
    for i, k in enumerate(kinds):
        if k == INPUT:
            if remap[i] < 0:
                raise CircuitError("unmapped input wire")
            continue
        if k in (CONST0, CONST1):
            remap[i] = parent._new(k, -1, -1)
        elif k == INV:
            remap[i] = parent._new(INV, int(remap[a_arr[i]]), -1)
        else:
            remap[i] = parent._new(k, int(remap[a_arr[i]]), int(remap[b_arr[i]]))
    out = {}
    for label, bnd in sub.outputs:
        out[label] = Bundle(tuple(int(remap[w]) for w in bnd.wires), bnd.semantic, bnd.elem_width)
    for label, w in sub.ver_outputs:
        parent.add_ver(prefix + label, int(remap[w]))
    return out


# -- evaluation -------------------------------------------------------------

def _run_python(kind, a, b, vals):
    full = np.uint64(0xFFFFFFFFFFFFFFFF)
    for i in range(len(kind)):
        k = kind[i]
        if k == AND:
            vals[i] = vals[a[i]] & vals[b[i]]
        elif k == XOR:
            vals[i] = vals[a[i]] ^ vals[b[i]]
        elif k == INV:
            vals[i] = vals[a[i]] ^ full
        elif k == CONST1:
            vals[i] = full
        elif k == CONST0:
            vals[i] = 0


def _mark_live_python(kind, a, b, live):
    for i in range(len(kind) - 1, -1, -1):
        if live[i]:
            k = kind[i]
            if k == AND or k == XOR:
                live[a[i]] = True
                live[b[i]] = True
            elif k == INV:
                live[a[i]] = True


try:
    from numba import njit

    @njit(cache=True, nogil=True)
    def _run_numba(kind, a, b, vals):
        full = np.uint64(0xFFFFFFFFFFFFFFFF)
        W = vals.shape[1]
        for i in range(kind.shape[0]):
            k = kind[i]
            if k == 3:
                x = a[i]
                y = b[i]
                for w in range(W):
                    vals[i, w] = vals[x, w] & vals[y, w]
            elif k == 4:
                x = a[i]
                y = b[i]
                for w in range(W):
                    vals[i, w] = vals[x, w] ^ vals[y, w]
            elif k == 5:
                x = a[i]
                for w in range(W):
                    vals[i, w] = vals[x, w] ^ full
            elif k == 2:
                for w in range(W):
                    vals[i, w] = full
            elif k == 1:
                for w in range(W):
                    vals[i, w] = 0

    @njit(cache=True, nogil=True)
    def _mark_live_numba(kind, a, b, live):
        for i in range(kind.shape[0] - 1, -1, -1):
            if live[i]:
                k = kind[i]
                if k == 3 or k == 4:
                    live[a[i]] = True
                    live[b[i]] = True
                elif k == 5:
                    live[a[i]] = True

    _run = _run_numba
    _mark_live = _mark_live_numba
except ImportError:  # pragma: no cover - exercised only without numba
    _run = _run_python
    _mark_live = _mark_live_python


def run_wires(c: Circuit, vals: np.ndarray) -> np.ndarray:
    """Evaluate in place.  ``vals`` has shape (n_wires, W) with input rows set."""
    _run(c.kind, c.a, c.b, vals)
    return vals


def int_to_bits(value: int, width: int) -> list[int]:
    if value < 0 or value >> width:
        raise CircuitError(f"value {value} does not fit in {width} bits")
    return [(value >> i) & 1 for i in range(width)]


def bits_to_int(bits: Iterable[int]) -> int:
    out = 0
    for i, bit in enumerate(bits):
        out |= (int(bit) & 1) << i
    return out


@dataclass
class EvalResult:
    outputs: dict[str, int]
    ver: dict[str, int]

    @property
    def ver_ok(self) -> bool:
        return all(self.ver.values())


def eval_plain(c: Circuit, inputs: Mapping[str, int]) -> EvalResult:
    """Reference evaluation on a single instance.

    ``inputs`` maps each input group label to the integer whose bits (LSB
    first) are assigned to the group's wires.
    """
    res = eval_lanes(c, {k: [v] for k, v in inputs.items()})
    return EvalResult({k: v[0] for k, v in res.outputs.items()},
                      {k: v[0] for k, v in res.ver.items()})


@dataclass
class LaneResult:
    outputs: dict[str, list[int]]
    ver: dict[str, list[int]]


def eval_lanes(c: Circuit, inputs: Mapping[str, Sequence[int]]) -> LaneResult:
    """Evaluate many independent instances at once (one per lane)."""
    missing = [g.label for g in c.input_groups if g.label not in inputs]
    if missing:
        raise CircuitError(f"missing assignment for inputs {missing}")
    lanes = {len(v) for v in inputs.values()}
    if len(lanes) > 1:
        raise CircuitError("all inputs need the same number of lanes")
    n = lanes.pop() if lanes else 1
    W = max(1, (n + 63) // 64)
    vals = np.zeros((c.n_wires, W), dtype=np.uint64)
    for g in c.input_groups:
        vals[list(g.bundle.wires)] = pack_lanes(inputs[g.label], g.bundle.width, W)
    run_wires(c, vals)
    outs = {lab: unpack_lanes(vals[list(b.wires)], n) for lab, b in c.outputs}
    vers = {lab: unpack_lanes(vals[[w]], n) for lab, w in c.ver_outputs}
    return LaneResult(outs, vers)


def pack_lanes(values: Sequence[int], width: int, W: int) -> np.ndarray:
    """Transpose per-lane integers into a (width, W) bit-sliced array."""
    n = len(values)
    for v in values:
        if v < 0 or v.bit_length() > width:
            raise CircuitError(f"value {v} does not fit in {width} bits")
    nbytes = (width + 7) // 8
    raw = b"".join(int(v).to_bytes(nbytes, "little") for v in values)
    bits = np.zeros((W * 64, nbytes * 8), dtype=np.uint8)
    if n:
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(n, nbytes)
        bits[:n] = np.unpackbits(arr, axis=1, bitorder="little")
    packed = np.packbits(bits[:, :width].reshape(W, 64, width), axis=1, bitorder="little")
    return np.ascontiguousarray(packed.transpose(2, 0, 1)).view("<u8").reshape(width, W)


def unpack_lanes(block: np.ndarray, n: int) -> list[int]:
    """Inverse of :func:`pack_lanes`."""
    width, W = block.shape
    as_bytes = np.ascontiguousarray(block).astype("<u8").view(np.uint8).reshape(width, W, 8)
    bits = np.unpackbits(as_bytes, axis=2, bitorder="little").reshape(width, W * 64)[:, :n]
    lanes = np.packbits(np.ascontiguousarray(bits.T), axis=1, bitorder="little")
    return [int.from_bytes(row.tobytes(), "little") for row in lanes]


def prune(c: Circuit, keep_outputs: Sequence[tuple[str, Bundle]] | None = None) -> Circuit:
    """Drop gates with no path to a kept output or a verifier output.

    Input wires are always kept so the input interface does not change.
    """
    outputs = list(c.outputs if keep_outputs is None else keep_outputs)
    live = np.zeros(c.n_wires, dtype=bool)
    for _, bnd in outputs:
        live[list(bnd.wires)] = True
    for _, w in c.ver_outputs:
        live[w] = True
    kind, a, b = c.kind, c.a, c.b
    _mark_live(kind, a, b, live)
    live[kind == INPUT] = True
    new_id = np.cumsum(live) - 1
    keep = np.flatnonzero(live)
    na = np.where(a[keep] >= 0, new_id[np.maximum(a[keep], 0)], -1).astype(np.int32)
    nb = np.where(b[keep] >= 0, new_id[np.maximum(b[keep], 0)], -1).astype(np.int32)

    def rb(bnd: Bundle) -> Bundle:
        return Bundle(tuple(int(new_id[w]) for w in bnd.wires), bnd.semantic, bnd.elem_width)

    groups = [InputGroup(g.label, g.owner, rb(g.bundle)) for g in c.input_groups]
    return Circuit(kind[keep].copy(), na, nb, groups,
                   [(lab, rb(bnd)) for lab, bnd in outputs],
                   [(lab, int(new_id[w])) for lab, w in c.ver_outputs], c.name)


# -- text dump --------------------------------------------------------------

def dump(c: Circuit) -> str:
    """Line-oriented text form: header lines start with '#', then one
    ``id KIND a b`` line per gate ('-' for an absent operand)."""
    lines = [f"# circuit {c.name}", f"# wires {c.n_wires}"]
    counts = gate_counts(c)
    lines.append("# counts " + " ".join(f"{k}={v}" for k, v in counts.items()))
    for g in c.input_groups:
        w = g.bundle.wires
        lines.append(f"# input {g.label} {g.owner} {len(w)} {w[0]} {g.bundle.semantic} "
                     f"{g.bundle.elem_width or 0}")
    for lab, bnd in c.outputs:
        lines.append(f"# output {lab} {bnd.width} {bnd.semantic} {bnd.elem_width or 0} "
                     + " ".join(map(str, bnd.wires)))
    for lab, w in c.ver_outputs:
        lines.append(f"# ver {lab} {w}")
    kinds, aa, bb = c.kind.tolist(), c.a.tolist(), c.b.tolist()
    for i, k in enumerate(kinds):
        if k == INPUT:
            continue
        x = "-" if aa[i] < 0 else str(aa[i])
        y = "-" if bb[i] < 0 else str(bb[i])
        lines.append(f"{i} {KIND_NAMES[k]} {x} {y}")
    return "\n".join(lines) + "\n"


def _parse_owner(text: str):
    if text.startswith("solder:"):
        return SolderSource(text[len("solder:"):])
    return int(text) if text.lstrip("-").isdigit() else text


def load(text: str) -> Circuit:
    """Parse the output of :func:`dump`."""
    name, n = "circuit", None
    groups, outputs, ver, gates = [], [], [], {}
    for line in text.splitlines():
        if not line.strip():
            continue
        parts = line.split()
        if parts[0] == "#":
            tag = parts[1]
            if tag == "circuit":
                name = parts[2]
            elif tag == "wires":
                n = int(parts[2])
            elif tag == "input":
                width, start = int(parts[4]), int(parts[5])
                ew = int(parts[7]) or None
                groups.append(InputGroup(parts[2], _parse_owner(parts[3]),
                                         Bundle(tuple(range(start, start + width)), parts[6], ew)))
            elif tag == "output":
                ew = int(parts[5]) or None
                outputs.append((parts[2], Bundle(tuple(int(x) for x in parts[6:]), parts[4], ew)))
            elif tag == "ver":
                ver.append((parts[2], int(parts[3])))
            continue
        gates[int(parts[0])] = (NAME_KINDS[parts[1]],
                                -1 if parts[2] == "-" else int(parts[2]),
                                -1 if parts[3] == "-" else int(parts[3]))
    if n is None:
        raise CircuitError("missing wires header")
    kind = np.zeros(n, dtype=np.int8)
    a = np.full(n, -1, dtype=np.int32)
    b = np.full(n, -1, dtype=np.int32)
    for i, (k, x, y) in gates.items():
        kind[i], a[i], b[i] = k, x, y
    return Circuit(kind, a, b, groups, outputs, ver, name)
