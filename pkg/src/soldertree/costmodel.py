"""Latency cost model for trees of jointly evaluated circuits.

All arithmetic is exact (:class:`fractions.Fraction`).  ``|C|`` is an AND
gate count and ``|I|`` a bit count.  The evaluator of a unit is its
lowest-indexed party.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

from .transport import Frame, Transport


class CostError(ValueError):
    pass


@dataclass(frozen=True)
class CostParams:
    """Unit symmetric-op cost ``ls`` and pairwise link costs ``L``."""
    ls: Fraction
    L: tuple[tuple[Fraction, ...], ...]

    def __post_init__(self):
        L = tuple(tuple(Fraction(x) for x in row) for row in self.L)
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "ls", Fraction(self.ls))
        m = len(L)
        if any(len(row) != m for row in L):
            raise CostError("latency matrix must be square")
        for i in range(m):
            if L[i][i] != 0:
                raise CostError(f"diagonal entry L[{i}][{i}] must be zero")
            for j in range(m):
                if L[i][j] < 0:
                    raise CostError("latencies must be non-negative")
                if L[i][j] != L[j][i]:
                    raise CostError(f"latency matrix not symmetric at ({i},{j})")
        if self.ls <= 0:
            raise CostError("unit op cost must be positive")

    @property
    def m(self) -> int:
        return len(self.L)

    @classmethod
    def uniform(cls, m: int, link=1, ls=1) -> "CostParams":
        return cls(Fraction(ls), tuple(tuple(Fraction(0 if i == j else link) for j in range(m))
                                       for i in range(m)))

    def max_link(self, parties: Sequence[int]) -> Fraction:
        ps = sorted(parties)
        vals = [self.L[i][j] for i in ps for j in ps if i != j]
        return max(vals) if vals else Fraction(0)

    def max_eval_link(self, parties: Sequence[int]) -> Fraction:
        ps = sorted(parties)
        ev = ps[0]
        vals = [self.L[ev][i] for i in ps[1:]]
        return max(vals) if vals else Fraction(0)


def parse_matrix(text: str) -> list[list[Fraction]]:
    """Whitespace/comma separated rows; ``#`` starts a comment."""
    rows = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].replace(",", " ").strip()
        if line:
            try:
                rows.append([Fraction(tok) for tok in line.split()])
            except ValueError as e:
                raise CostError(f"malformed latency entry: {e}") from None
    if not rows:
        raise CostError("empty latency matrix")
    return rows


def cost_offline(and_count: int, parties: Sequence[int], p: CostParams) -> Fraction:
    m = len(parties)
    C = and_count
    return (m - 1) * C * p.max_link(parties) + 4 * C * p.ls + C * p.max_eval_link(parties)


def cost_online(and_count: int, input_bits: int, parties: Sequence[int], p: CostParams) -> Fraction:
    m = len(parties)
    I = input_bits
    return ((m - 1) * I * p.max_link(parties) + (m - 1) * I * p.max_eval_link(parties)
            + (m - 1) * and_count * p.ls)


def cost_solder(bits: int, parent_parties: Sequence[int], p: CostParams) -> Fraction:
    m = len(parent_parties)
    return (m - 1) * bits * p.max_link(parent_parties)


@dataclass
class CostNode:
    """What the recursion needs to know about one unit."""
    name: str
    parties: tuple[int, ...]
    and_count: int
    input_bits: int
    solder_bits: int = 0          # bits soldered from this node into its parent
    children: list["CostNode"] = field(default_factory=list)


@dataclass
class NodeCost:
    name: str
    offline: Fraction
    online: Fraction
    solder: Fraction           # cost of soldering this node's output into its parent
    subtree: Fraction          # max over children of their totals
    child_solder: Fraction     # max over children of their solder costs
    total: Fraction


@dataclass
class CostReport:
    nodes: list[NodeCost]
    total: Fraction

    def by_name(self) -> dict[str, NodeCost]:
        return {n.name: n for n in self.nodes}

    def lines(self) -> list[str]:
        out = []
        for n in self.nodes:
            out.append(f"{n.name} offline={_fmt(n.offline)} online={_fmt(n.online)} "
                       f"solder={_fmt(n.solder)} subtree={_fmt(n.subtree)} total={_fmt(n.total)}")
        out.append(f"total={_fmt(self.total)}")
        return out


def _fmt(x: Fraction) -> str:
    return str(x.numerator) if x.denominator == 1 else f"{float(x):.6g}"


def cost_tree(root: CostNode, p: CostParams) -> CostReport:
    """Apply the recursion bottom-up; k-ary nodes take the max over all children."""
    nodes: list[NodeCost] = []

    def visit(node: CostNode, parent_parties) -> tuple[Fraction, Fraction]:
        kids = [visit(c, node.parties) for c in node.children]
        sub = max((k[0] for k in kids), default=Fraction(0))
        sold = max((k[1] for k in kids), default=Fraction(0))
        off = cost_offline(node.and_count, node.parties, p)
        on = cost_online(node.and_count, node.input_bits, node.parties, p)
        total = sub + sold + off + on
        my_solder = cost_solder(node.solder_bits, parent_parties, p) if parent_parties else Fraction(0)
        nodes.append(NodeCost(node.name, off, on, my_solder, sub, sold, total))
        return total, my_solder

    total, _ = visit(root, None)
    return CostReport(nodes, total)


# -- profiling ------------------------------------------------------------------

PROBE_UNITS = 64


def profile(transport: Transport, parties: Sequence[int] | None = None,
            probe_units: int = PROBE_UNITS, ops: int = 1 << 12) -> CostParams:
    """Estimate ``ls`` and ``L`` from probes over a live transport.

    Each link is timed with a round trip of ``probe_units`` payload units
    each way; ``ls`` comes from charging ``ops`` symmetric operations.
    """
    parties = sorted(range(transport.m) if parties is None else parties)
    for q in parties:
        if not 0 <= q < transport.m:
            raise CostError(f"party {q} unreachable")
    m = transport.m
    L = [[Fraction(0)] * m for _ in range(m)]
    t = transport
    for i in parties:
        for j in parties:
            if j <= i:
                continue
            t.sync_clocks([i, j])
            start = t.clock[i]
            t.send(Frame("probe", i, j, "probe", bytes(probe_units // 8), probe_units))
            t.recv(j, i, "probe", "probe")
            t.send(Frame("probe", j, i, "probe", bytes(probe_units // 8), probe_units))
            t.recv(i, j, "probe", "probe")
            rtt = t.clock[i] - start
            L[i][j] = L[j][i] = rtt / (2 * probe_units)
    p0 = parties[0]
    before = t.clock[p0]
    t.compute(p0, ops)
    ls = (t.clock[p0] - before) / ops
    if ls <= 0:
        raise CostError("symmetric-op benchmark measured zero cost")
    return CostParams(ls, tuple(tuple(r) for r in L))


def relative_error(predicted, measured) -> float:
    return abs(float(predicted) - float(measured)) / float(measured)
