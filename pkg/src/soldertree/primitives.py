"""Circuit primitives over lists of rows.

A row is a flat tuple of wires described by a :class:`Layout` (named
columns, LSB first within a column).  Lists are ascending by the layout's
key.  Value 0 is reserved for "absent"; padding rows carry a sentinel key
with the top bit set (see :func:`pad_values`).

The ``*_rows`` functions emit gates into an open :class:`Builder` and are
shared by the stand-alone ``build_*`` circuits and by the planner, which
composes them into unit circuits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

from .circuit import Builder, Bundle, Circuit, CircuitError, SolderSource, prune

Row = tuple  # tuple[int, ...] of wire ids

# -- layouts ------------------------------------------------------------------


@dataclass(frozen=True)
class Layout:
    """Named fixed-width columns; ``key`` lists sort columns, most significant first."""
    cols: tuple[tuple[str, int], ...]
    key: tuple[str, ...]

    def __post_init__(self):
        names = [c for c, _ in self.cols]
        if len(set(names)) != len(names):
            raise CircuitError(f"duplicate column in layout {names}")
        for k in self.key:
            if k not in names:
                raise CircuitError(f"key column {k!r} not in layout")

    @property
    def width(self) -> int:
        return sum(w for _, w in self.cols)

    @property
    def names(self) -> list[str]:
        return [c for c, _ in self.cols]

    def col_width(self, name: str) -> int:
        return dict(self.cols)[name]

    def offset(self, name: str) -> int:
        off = 0
        for c, w in self.cols:
            if c == name:
                return off
            off += w
        raise KeyError(name)

    def get(self, row: Row, name: str) -> tuple[int, ...]:
        off = self.offset(name)
        return row[off:off + self.col_width(name)]

    def key_bits(self, row: Row) -> list[int]:
        bits: list[int] = []
        for name in reversed(self.key):
            bits.extend(self.get(row, name))
        return bits

    @property
    def key_width(self) -> int:
        return sum(self.col_width(k) for k in self.key)

    @property
    def top_bit(self) -> int:
        """Bit index (within the row) of the sentinel flag."""
        first = self.key[0]
        return self.offset(first) + self.col_width(first) - 1

    def with_key(self, key: Sequence[str]) -> "Layout":
        return Layout(self.cols, tuple(key))

    def pack(self, values: dict) -> int:
        out, off = 0, 0
        for c, w in self.cols:
            v = int(values.get(c, 0))
            if v < 0 or v >> w:
                raise CircuitError(f"value {v} overflows column {c} ({w} bits)")
            out |= v << off
            off += w
        return out

    def unpack(self, value: int) -> dict:
        out, off = {}, 0
        for c, w in self.cols:
            out[c] = (value >> off) & ((1 << w) - 1)
            off += w
        return out


def single(w: int, name: str = "v") -> Layout:
    return Layout(((name, w),), (name,))


# -- row lists on a builder ----------------------------------------------------

def alloc_rows(b: Builder, owner, layout: Layout, n: int, label: str) -> list[Row]:
    bnd = b.alloc_input(owner, layout.width * n, label, "list", layout.width)
    return [tuple(e) for e in bnd.elements()]


def output_rows(b: Builder, label: str, rows: Sequence[Row], layout: Layout) -> Bundle:
    wires = tuple(w for r in rows for w in r)
    return b.set_output(label, Bundle(wires, "list", layout.width))


def const_row(b: Builder, layout: Layout, value: int) -> Row:
    return tuple(b.const((value >> i) & 1) for i in range(layout.width))


def max_row(b: Builder, layout: Layout) -> Row:
    """All-ones key, zero payload: sorts after every real or padding row."""
    val = 0
    for k in layout.key:
        val |= ((1 << layout.col_width(k)) - 1) << layout.offset(k)
    return const_row(b, layout, val)


# -- arithmetic and comparison ------------------------------------------------

def gt(b: Builder, x: Sequence[int], y: Sequence[int]) -> int:
    """Unsigned x > y, ripple borrow chain, one AND per bit."""
    c = b.zero
    for xi, yi in zip(x, y):
        c = b.XOR(xi, b.AND(b.XOR(xi, c), b.XOR(yi, c)))
    return c


def eq(b: Builder, x: Sequence[int], y: Sequence[int]) -> int:
    return and_all(b, [b.NOT(b.XOR(xi, yi)) for xi, yi in zip(x, y)])


def and_all(b: Builder, bits: Sequence[int]) -> int:
    bits = list(bits)
    if not bits:
        return b.one
    while len(bits) > 1:
        nxt = [b.AND(bits[i], bits[i + 1]) for i in range(0, len(bits) - 1, 2)]
        if len(bits) % 2:
            nxt.append(bits[-1])
        bits = nxt
    return bits[0]


def or_all(b: Builder, bits: Sequence[int]) -> int:
    return b.NOT(and_all(b, [b.NOT(x) for x in bits]))


def nonzero(b: Builder, x: Sequence[int]) -> int:
    return or_all(b, x)


def mux(b: Builder, sel: int, x: Sequence[int], y: Sequence[int]) -> list[int]:
    """Bitwise ``x if sel else y``."""
    return [b.MUX(sel, xi, yi) for xi, yi in zip(x, y)]


def mask(b: Builder, sel: int, x: Sequence[int]) -> list[int]:
    return [b.AND(sel, xi) for xi in x]


def add(b: Builder, x: Sequence[int], y: Sequence[int], carry: int | None = None) -> list[int]:
    """Ripple adder modulo 2**len(x)."""
    c = b.zero if carry is None else carry
    out = []
    for xi, yi in zip(x, y):
        t = b.XOR(xi, c)
        out.append(b.XOR(t, yi))
        c = b.XOR(c, b.AND(t, b.XOR(yi, c)))
    return out


def sub(b: Builder, x: Sequence[int], y: Sequence[int]) -> list[int]:
    return add(b, x, [b.NOT(yi) for yi in y], b.one)


def const_bits(b: Builder, value: int, width: int) -> list[int]:
    if value < 0 or value >> width:
        raise CircuitError(f"constant {value} does not fit in {width} bits")
    return [b.const((value >> i) & 1) for i in range(width)]


def fit(b: Builder, x: Sequence[int], width: int) -> list[int]:
    """Zero-extend or truncate to ``width`` bits."""
    x = list(x)[:width]
    return x + [b.zero] * (width - len(x))


# -- compare-and-swap, merge, sort -------------------------------------------

def cas(b: Builder, x: Row, y: Row, layout: Layout) -> tuple[Row, Row]:
    swap = gt(b, layout.key_bits(x), layout.key_bits(y))
    lo, hi = [], []
    for xi, yi in zip(x, y):
        d = b.AND(swap, b.XOR(xi, yi))
        lo.append(b.XOR(xi, d))
        hi.append(b.XOR(yi, d))
    return tuple(lo), tuple(hi)


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def bitonic_merger(b: Builder, seq: list[Row], layout: Layout) -> list[Row]:
    """Sort a bitonic sequence (length a power of two) ascending."""
    seq = list(seq)
    n = len(seq)
    stride = n // 2
    while stride >= 1:
        for i in range(n):
            if i & stride == 0:
                seq[i], seq[i + stride] = cas(b, seq[i], seq[i + stride], layout)
        stride //= 2
    return seq


def merge_rows(b: Builder, left: Sequence[Row], right: Sequence[Row], layout: Layout,
               limit: int | None = None) -> list[Row]:
    """Bitonic merge of two ascending lists.

    The inputs are laid out as left, constant max rows, reversed right,
    which is bitonic for any sizes; the padding folds away.
    """
    total = len(left) + len(right)
    if not left or not right:
        out = list(left) + list(right)
    else:
        n = _next_pow2(total)
        pad = [max_row(b, layout)] * (n - total)
        out = bitonic_merger(b, list(left) + pad + list(reversed(right)), layout)[:total]
    return out if limit is None else out[:limit]


def sort_rows(b: Builder, rows: Sequence[Row], layout: Layout) -> list[Row]:
    """Full bitonic sort, built as a tree of merges over single rows."""
    rows = list(rows)
    if len(rows) <= 1:
        return rows
    mid = len(rows) // 2
    return merge_rows(b, sort_rows(b, rows[:mid], layout), sort_rows(b, rows[mid:], layout), layout)


# -- set intersection ---------------------------------------------------------

def si2_rows(b: Builder, left: Sequence[Row], right: Sequence[Row], layout: Layout,
             star: bool = False) -> list[Row]:
    """Two-way intersection on the layout key.

    Without ``star`` each side must hold unique keys.  With ``star`` each
    side may repeat keys (a monotonized list); a one-bit origin tag is
    appended below the key so a match needs equal keys from different sides.

    Output has ``(len(left)+len(right))//2`` rows.  Slot k holds the merged
    element at odd position 2k+1 when that element belongs to a matched
    adjacent pair, else a zero row.  Every adjacent pair contains exactly one
    odd position, so each match lands in exactly one slot.  Non-key columns
    of a matched slot are the XOR of the two partners, which concatenates
    payloads when each side zero-fills the other side's columns.
    """
    if star:
        tagged = Layout(layout.cols + (("_tag", 1),), layout.key + ("_tag",))
        lrows = [tuple(r) + (b.zero,) for r in left]
        rrows = [tuple(r) + (b.one,) for r in right]
    else:
        tagged, lrows, rrows = layout, list(left), list(right)
    merged = merge_rows(b, lrows, rrows, tagged)
    n = len(merged)
    keys = [layout.key_bits(r) for r in merged]
    pair = []
    for i in range(n - 1):
        m = b.AND(eq(b, keys[i], keys[i + 1]), nonzero(b, keys[i]))
        if star:
            tag_i = merged[i][-1]
            tag_j = merged[i + 1][-1]
            m = b.AND(m, b.XOR(tag_i, tag_j))
        pair.append(m)
    width = layout.width
    key_pos = set()
    for k in layout.key:
        off = layout.offset(k)
        key_pos.update(range(off, off + layout.col_width(k)))
    out = []
    for j in range(1, n, 2):
        m_prev = pair[j - 1]
        m_next = pair[j] if j < n - 1 else b.zero
        matched = b.OR(m_prev, m_next)
        row = merged[j]
        partner_next = merged[j + 1] if j < n - 1 else (b.zero,) * len(row)
        new = []
        for pos in range(width):
            if pos in key_pos:
                new.append(b.AND(matched, row[pos]))
            else:
                partner = b.MUX(m_prev, merged[j - 1][pos], partner_next[pos])
                new.append(b.AND(matched, b.XOR(row[pos], partner)))
        out.append(tuple(new))
    return out


def theta_rows(b: Builder, left: Sequence[Row], right: Sequence[Row], lay_l: Layout,
               lay_r: Layout, col_l: str, op: str, col_r: str) -> list[Row]:
    """Pairwise join on ``left.col_l op right.col_r``.

    Emits one concatenated row per (i, j) pair, zeroed unless the predicate
    holds and both rows are present.  Quadratic in size by construction.
    """
    out = []
    for lr in left:
        lk = nonzero(b, lay_l.key_bits(lr))
        x = lay_l.get(lr, col_l)
        for rr in right:
            y = lay_r.get(rr, col_r)
            w = max(len(x), len(y))
            hit = b.AND(compare(b, fit(b, x, w), op, fit(b, y, w)),
                        b.AND(lk, nonzero(b, lay_r.key_bits(rr))))
            out.append(tuple(mask(b, hit, tuple(lr) + tuple(rr))))
    return out


def mono_rows(b: Builder, rows: Sequence[Row], layout: Layout) -> list[Row]:
    """Replace each zero-key row by the nearest preceding nonzero row."""
    prev: Row = tuple(b.zero for _ in range(layout.width))
    out = []
    for r in rows:
        nz = nonzero(b, layout.key_bits(r))
        prev = tuple(mux(b, nz, r, prev))
        out.append(prev)
    return out


# -- dedup and aggregation -----------------------------------------------------

def boundaries(b: Builder, rows: Sequence[Row], layout: Layout) -> list[int]:
    """1 where a row is the last of its run of equal keys."""
    keys = [layout.key_bits(r) for r in rows]
    out = [b.NOT(eq(b, keys[i], keys[i + 1])) for i in range(len(rows) - 1)]
    return out + [b.one] if rows else out


def dedup_rows(b: Builder, rows: Sequence[Row], layout: Layout) -> list[Row]:
    """Keep the last row of each equal-key run; zero the others."""
    return [tuple(mask(b, bnd, r)) for r, bnd in zip(rows, boundaries(b, rows, layout))]


@dataclass(frozen=True)
class AggSpec:
    kind: str            # SUM | COUNT | MIN | MAX
    col: str | None      # source column (None for COUNT)
    name: str
    width: int = 32

    def __post_init__(self):
        if self.kind not in ("SUM", "COUNT", "MIN", "MAX"):
            raise CircuitError(f"unknown aggregate {self.kind}")
        if self.kind != "COUNT" and self.col is None:
            raise CircuitError(f"{self.kind} needs a column")


def agg_layout(layout: Layout, aggs: Sequence[AggSpec]) -> Layout:
    cols = tuple((k, layout.col_width(k)) for k in layout.key)
    return Layout(cols + tuple((a.name, a.width) for a in aggs), layout.key)


def dedup_agg_rows(b: Builder, rows: Sequence[Row], layout: Layout,
                   aggs: Sequence[AggSpec]) -> tuple[list[Row], Layout]:
    """Group-by over a key-sorted list.

    First pass marks the last row of each key run.  Second pass keeps a
    running aggregate per column: each row is folded in, a boundary row
    emits (key, agg) and resets the aggregate, any other row emits zeros.
    Boundaries come from key comparison rather than a nonzero test, so an
    all-zero (absent) group cannot leak into its successor.
    """
    out_layout = agg_layout(layout, aggs)
    bnds = boundaries(b, rows, layout)
    ident = []
    for a in aggs:
        ident.append(const_bits(b, (1 << a.width) - 1 if a.kind == "MIN" else 0, a.width))
    acc = [list(x) for x in ident]
    out = []
    for r, bnd in zip(rows, bnds):
        cur = []
        for i, a in enumerate(aggs):
            if a.kind == "COUNT":
                val = const_bits(b, 1, a.width)
            else:
                val = fit(b, layout.get(r, a.col), a.width)
            if a.kind in ("SUM", "COUNT"):
                new = add(b, acc[i], val)
            elif a.kind == "MIN":
                new = mux(b, gt(b, acc[i], val), val, acc[i])
            else:
                new = mux(b, gt(b, val, acc[i]), val, acc[i])
            cur.append(new)
            acc[i] = mux(b, bnd, ident[i], new)
        key_part = []
        for k in layout.key:
            key_part.extend(layout.get(r, k))
        row = mask(b, bnd, key_part)
        for c in cur:
            row.extend(mask(b, bnd, c))
        out.append(tuple(row))
    return out, out_layout


# -- filters and predicates ----------------------------------------------------

@dataclass(frozen=True)
class Cmp:
    """Column-versus-constant comparison."""
    col: str
    op: str   # = != < <= > >=
    value: int


@dataclass(frozen=True)
class AndPred:
    terms: tuple


Pred = Union[Cmp, AndPred, Callable]


def compare(b: Builder, x: Sequence[int], op: str, y: Sequence[int]) -> int:
    if op == "=":
        return eq(b, x, y)
    if op == "!=":
        return b.NOT(eq(b, x, y))
    if op == ">":
        return gt(b, x, y)
    if op == "<":
        return gt(b, y, x)
    if op == ">=":
        return b.NOT(gt(b, y, x))
    if op == "<=":
        return b.NOT(gt(b, x, y))
    raise CircuitError(f"unknown comparison {op}")


def eval_pred(b: Builder, pred, row: Row, layout: Layout) -> int:
    if isinstance(pred, Cmp):
        if pred.col not in layout.names:
            raise CircuitError(f"predicate column {pred.col!r} outside row layout")
        x = layout.get(row, pred.col)
        return compare(b, x, pred.op, const_bits(b, pred.value, len(x)))
    if isinstance(pred, AndPred):
        return and_all(b, [eval_pred(b, t, row, layout) for t in pred.terms])
    return pred(b, row, layout)


def filter_rows(b: Builder, rows: Sequence[Row], layout: Layout, pred) -> list[Row]:
    return [tuple(mask(b, eval_pred(b, pred, r, layout), r)) for r in rows]


# -- verifiers -------------------------------------------------------------------

@dataclass(frozen=True)
class VerSpec:
    """A checkable output constraint.

    kind: ``sorted-strict`` | ``sorted-nonstrict`` | ``range`` | ``distinct``.
    ``col`` names the ranged column; ``lo``/``hi`` are inclusive bounds.
    """
    kind: str
    col: str | None = None
    lo: int = 0
    hi: int = 0

    def __post_init__(self):
        if self.kind not in ("sorted-strict", "sorted-nonstrict", "range", "distinct"):
            raise CircuitError(f"unknown verifier kind {self.kind}")
        if self.kind == "range" and self.lo > self.hi:
            raise CircuitError("range needs lo <= hi")

    def describe(self) -> str:
        if self.kind == "range":
            return f"range({self.col},{self.lo},{self.hi})"
        return self.kind


def ver_rows(b: Builder, rows: Sequence[Row], layout: Layout, spec: VerSpec) -> int:
    """One output bit: 1 iff the list satisfies ``spec``.

    Sentinel padding has the top key bit set and is strictly increasing, so
    it passes the order checks as an ordinary sorted suffix.  Range checks
    skip sentinel rows and absent (zero-key) rows.
    """
    oks = []
    if spec.kind in ("sorted-strict", "distinct", "sorted-nonstrict"):
        keys = [layout.key_bits(r) for r in rows]
        for x, y in zip(keys, keys[1:]):
            if spec.kind == "sorted-nonstrict":
                oks.append(b.NOT(gt(b, x, y)))
            else:
                both_zero = b.NOT(b.OR(nonzero(b, x), nonzero(b, y)))
                oks.append(b.OR(gt(b, y, x), both_zero))
    else:
        for r in rows:
            x = layout.get(r, spec.col)
            w = len(x)
            hi = min(spec.hi, (1 << w) - 1)
            in_range = b.AND(b.NOT(gt(b, const_bits(b, spec.lo, w), x)),
                             b.NOT(gt(b, x, const_bits(b, hi, w))))
            exempt = b.OR(r[layout.top_bit], b.NOT(nonzero(b, layout.key_bits(r))))
            oks.append(b.OR(in_range, exempt))
    return and_all(b, oks)


# -- order-by ---------------------------------------------------------------

def orderby_rows(b: Builder, rows: Sequence[Row], layout: Layout, col: str, desc: bool,
                 limit: int | None, tiebreak: Sequence[str] = ()) -> list[Row]:
    """Sort by ``col`` (ties broken by ``tiebreak`` ascending) and keep ``limit``.

    Absent rows (zero key) and padding rows (sentinel key) get an invalid
    flag as the most significant sort bit so they land after all real rows.
    """
    sk_rows, sk_cols = [], []
    for r in rows:
        key = layout.key_bits(r)
        invalid = b.OR(r[layout.top_bit], b.NOT(nonzero(b, key)))
        prim = list(layout.get(r, col))
        if desc:
            prim = [b.NOT(x) for x in prim]
        tie = []
        for t in reversed(tiebreak):
            tie.extend(layout.get(r, t))
        sk = tie + prim + [invalid]
        sk_cols = len(sk)
        sk_rows.append(tuple(r) + tuple(sk))
    ext = Layout(layout.cols + (("_sk", sk_cols),), ("_sk",))
    out = sort_rows(b, sk_rows, ext)
    if limit is not None:
        out = out[:limit]
    return [r[:layout.width] for r in out]


# -- plaintext helpers (padding, canonical form) -----------------------------

def top(w: int) -> int:
    return 1 << (w - 1)


def sentinel(w: int, party: int, bound: int, k: int) -> int:
    val = party * bound + k
    if val >= top(w):
        raise CircuitError("padding sentinel space exhausted; widen the key column")
    return top(w) | val


def pad_values(values: Sequence[int], bound: int, party: int, w: int) -> list[int]:
    """Pad a sorted list to ``bound`` entries with this party's sentinels."""
    values = list(values)
    if len(values) > bound:
        raise CircuitError(f"{len(values)} values exceed declared bound {bound}")
    for v in values:
        if not 1 <= v < top(w):
            raise CircuitError(f"value {v} outside data range [1, {top(w) - 1}]")
    return values + [sentinel(w, party, bound, k) for k in range(len(values), bound)]


def canonical(values: Sequence[int], w: int) -> list[int]:
    return sorted(v for v in values if v != 0 and v < top(w))


def split_list(value: int, n: int, width: int) -> list[int]:
    mask_ = (1 << width) - 1
    return [(value >> (i * width)) & mask_ for i in range(n)]


def join_list(values: Sequence[int], width: int) -> int:
    out = 0
    for i, v in enumerate(values):
        out |= v << (i * width)
    return out


# -- stand-alone primitive circuits --------------------------------------------

def _list_in(b: Builder, owner, n: int, layout: Layout, label: str) -> list[Row]:
    return alloc_rows(b, owner, layout, n, label)


def build_filter(n: int, layout: Layout | int, pred) -> Circuit:
    layout = single(layout) if isinstance(layout, int) else layout
    b = Builder("filter")
    rows = _list_in(b, 0, n, layout, "in")
    output_rows(b, "out", filter_rows(b, rows, layout, pred), layout)
    return b.finish()


def build_merge(nL: int, nR: int, w: int) -> Circuit:
    lay = single(w)
    b = Builder("merge")
    left = _list_in(b, 0, nL, lay, "left")
    right = _list_in(b, 1, nR, lay, "right")
    output_rows(b, "out", merge_rows(b, left, right, lay), lay)
    return b.finish()


def build_theta_join(nL: int, nR: int, w: int, op: str) -> Circuit:
    lay_l, lay_r = single(w, "l"), single(w, "r")
    b = Builder("theta")
    left = _list_in(b, 0, nL, lay_l, "left")
    right = _list_in(b, 1, nR, lay_r, "right")
    out_lay = Layout(lay_l.cols + lay_r.cols, ("l", "r"))
    output_rows(b, "out", theta_rows(b, left, right, lay_l, lay_r, "l", op, "r"), out_lay)
    return b.finish()


def build_mono(n: int, w: int) -> Circuit:
    lay = single(w)
    b = Builder("mono")
    rows = _list_in(b, 0, n, lay, "in")
    output_rows(b, "out", mono_rows(b, rows, lay), lay)
    return b.finish()


def build_2si(n: int, w: int, star: bool = False) -> Circuit:
    lay = single(w)
    b = Builder("2si*" if star else "2si")
    left = _list_in(b, 0, n, lay, "left")
    right = _list_in(b, 1, n, lay, "right")
    output_rows(b, "out", si2_rows(b, left, right, lay, star), lay)
    return b.finish()


def build_2si_star(n: int, w: int) -> Circuit:
    return build_2si(n, w, star=True)


def build_dedup(n: int, w: int) -> Circuit:
    lay = single(w)
    b = Builder("dedup")
    rows = _list_in(b, 0, n, lay, "in")
    output_rows(b, "out", dedup_rows(b, rows, lay), lay)
    return b.finish()


def build_dedup_agg(n: int, w_key: int, w_val: int, agg: str) -> Circuit:
    lay = Layout((("k", w_key), ("v", w_val)), ("k",))
    spec = AggSpec(agg, None if agg == "COUNT" else "v", "agg", w_val)
    b = Builder(f"dedup-{agg.lower()}")
    rows = _list_in(b, 0, n, lay, "in")
    out, out_lay = dedup_agg_rows(b, rows, lay, [spec])
    output_rows(b, "out", out, out_lay)
    return b.finish()


def build_ver(spec: VerSpec, n: int, layout: Layout | int) -> Circuit:
    layout = single(layout) if isinstance(layout, int) else layout
    b = Builder(f"ver-{spec.kind}")
    rows = _list_in(b, 0, n, layout, "in")
    bit = ver_rows(b, rows, layout, spec)
    b.add_ver(spec.describe(), bit)
    b.set_output("ok", [bit])
    return b.finish()


def prune_to_top_l(c: Circuit, l: int, label: str = "out") -> Circuit:
    """Keep only the first ``l`` elements of list output ``label``."""
    bnd = c.output(label)
    elems = bnd.elements()
    if not 1 <= l <= len(elems):
        raise CircuitError(f"l={l} outside 1..{len(elems)}")
    kept = Bundle(tuple(w for e in elems[:l] for w in e), "list", bnd.elem_width)
    outs = [(lab, kept if lab == label else o) for lab, o in c.outputs]
    return prune(c, outs)


# -- trees of circuits -------------------------------------------------------------

Shape = Union[int, tuple]


def leaves(shape: Shape) -> list[int]:
    if isinstance(shape, int):
        return [shape]
    out: list[int] = []
    for s in shape:
        out.extend(leaves(s))
    return out


def balanced(parties: Sequence[int]) -> Shape:
    parties = list(parties)
    if len(parties) == 1:
        return parties[0]
    mid = (len(parties) + 1) // 2
    return (balanced(parties[:mid]), balanced(parties[mid:]))


def left_deep(parties: Sequence[int]) -> Shape:
    parties = list(parties)
    shape: Shape = parties[0]
    for p in parties[1:]:
        shape = (shape, p)
    return shape


@dataclass
class TreeNode:
    """One circuit of a tree.  ``inputs`` lists (label, source) pairs where a
    source is a party id (leaf input) or a child :class:`TreeNode`."""
    circuit: Circuit
    parties: tuple[int, ...]
    inputs: list[tuple[str, object]]
    out_layout: Layout
    out_rows: int

    @property
    def children(self) -> list["TreeNode"]:
        return [s for _, s in self.inputs if isinstance(s, TreeNode)]

    def walk(self):
        for c in self.children:
            yield from c.walk()
        yield self


@dataclass
class _Side:
    label: str
    source: object
    rows: list
    layout: Layout
    is_leaf: bool


def _tree(kind: str, shape: Shape, n: int | Sequence[int], lay: Layout, decompose: bool,
          limit: int | None = None) -> TreeNode:
    """Build m-SI / m-Sort / m-SU trees of unit circuits.

    With ``decompose`` each internal shape node becomes its own circuit and
    children feed parents through solder inputs; otherwise one circuit
    holds the whole tree.
    """
    sizes = {p: (n if isinstance(n, int) else n[i]) for i, p in enumerate(sorted(leaves(shape)))}
    counter = [0]

    def leaf_ver() -> VerSpec:
        return VerSpec("sorted-nonstrict" if kind == "sort" else "sorted-strict")

    def body(b: Builder, l: _Side, r: _Side, root: bool):
        if kind == "si":
            rows = si2_rows(b, l.rows, r.rows, lay, star=not (l.is_leaf and r.is_leaf))
            return rows if root else mono_rows(b, rows, lay)
        rows = merge_rows(b, l.rows, r.rows, lay, limit)
        if root and kind == "su":
            rows = dedup_rows(b, rows, lay)
        return rows

    def side_in(b: Builder, s, nodes_out) -> _Side:
        if isinstance(s, int):
            label = f"p{s}"
            rows = alloc_rows(b, s, lay, sizes[s], label)
            b.add_ver(f"{label}:{leaf_ver().kind}", ver_rows(b, rows, lay, leaf_ver()))
            return _Side(label, s, rows, lay, True)
        return nodes_out(b, s)

    def unit(s, root: bool) -> TreeNode:
        b = Builder(f"{kind}-unit{counter[0]}")
        counter[0] += 1
        inputs = []

        def child(b_: Builder, sub) -> _Side:
            node = unit(sub, False)
            label = node.circuit.name
            rows = alloc_rows(b_, SolderSource(label), node.out_layout, node.out_rows, label)
            spec = VerSpec("sorted-nonstrict")
            b_.add_ver(f"{label}:{spec.kind}", ver_rows(b_, rows, lay, spec))
            inputs.append((label, node))
            return _Side(label, node, rows, lay, False)

        def inline(b_: Builder, sub) -> _Side:
            l_ = side_in(b_, sub[0], inline)
            r_ = side_in(b_, sub[1], inline)
            if l_.is_leaf:
                inputs.append((l_.label, l_.source))
            if r_.is_leaf:
                inputs.append((r_.label, r_.source))
            return _Side("", None, body(b_, l_, r_, False), lay, False)

        nodes_out = child if decompose else inline
        l = side_in(b, s[0], nodes_out)
        r = side_in(b, s[1], nodes_out)
        for side in (l, r):
            if side.is_leaf:
                inputs.append((side.label, side.source))
        rows = body(b, l, r, root)
        output_rows(b, "out", rows, lay)
        c = b.finish()
        return TreeNode(c, tuple(sorted(leaves(s))), inputs, lay, len(rows))

    if isinstance(shape, int):
        raise CircuitError("shape needs at least two leaves")
    return unit(shape, True)


def build_msort(sizes: Sequence[int], w: int, shape: Shape | None = None,
                decompose: bool = False, limit: int | None = None) -> TreeNode:
    if not sizes:
        raise CircuitError("empty shape")
    lay = single(w)
    if len(sizes) == 1:
        b = Builder("sort-identity")
        rows = alloc_rows(b, 0, lay, sizes[0], "p0")
        output_rows(b, "out", rows[:limit] if limit else rows, lay)
        return TreeNode(b.finish(), (0,), [("p0", 0)], lay, sizes[0])
    shape = shape if shape is not None else balanced(range(len(sizes)))
    return _tree("sort", shape, list(sizes), lay, decompose, limit)


def build_msi_tree(m: int, n: int, w: int, shape: Shape | None = None,
                   decompose: bool = True) -> TreeNode:
    if m < 2:
        raise CircuitError("m-SI needs at least two parties")
    shape = shape if shape is not None else balanced(range(m))
    if sorted(leaves(shape)) != list(range(m)):
        raise CircuitError("malformed shape")
    return _tree("si", shape, n, single(w), decompose)


def build_msu(m: int, n: int, w: int, shape: Shape | None = None,
              decompose: bool = True) -> TreeNode:
    shape = shape if shape is not None else balanced(range(m))
    return _tree("su", shape, n, single(w), decompose)


def eval_tree(root: TreeNode, party_inputs: dict[int, Sequence[int]],
              lanes: bool = False) -> dict:
    """Plaintext composition of a tree: returns root outputs and all ver bits.

    ``party_inputs`` maps party id to a per-lane list of packed list values
    when ``lanes`` is set, else to a single packed value.
    """
    from .circuit import eval_lanes

    cache: dict[int, list[int]] = {}
    vers: dict[str, list[int]] = {}

    def run(node: TreeNode) -> list[int]:
        if id(node) in cache:
            return cache[id(node)]
        assign = {}
        for label, src in node.inputs:
            if isinstance(src, TreeNode):
                assign[label] = run(src)
            else:
                v = party_inputs[src]
                assign[label] = list(v) if lanes else [v]
        res = eval_lanes(node.circuit, assign)
        for k, v in res.ver.items():
            vers[f"{node.circuit.name}/{k}"] = v
        cache[id(node)] = res.outputs["out"]
        return cache[id(node)]

    out = run(root)
    if lanes:
        return {"out": out, "ver": vers}
    return {"out": out[0], "ver": {k: v[0] for k, v in vers.items()}}
