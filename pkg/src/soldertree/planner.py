"""Query planning: operator tree, local split, constraints, circuit mapping.

Two joint program families are supported:

* union-aggregate: tables concatenated across parties, grouped, optionally
  filtered by HAVING, ordered and limited.  Lowered to a merge tree of
  sorted party lists, then a group-by pass at the root.
* equijoin: one table per party joined on a single key.  Lowered to a tree
  of two-way intersections carrying each party's payload columns, then the
  remaining predicate at the root.

Every non-root unit's output is checked by a verifier embedded in its
parent; every party's local output is checked by a verifier in the first
unit that consumes it.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Sequence

from .circuit import Builder, Circuit, SolderSource, gate_counts, prune
from .costmodel import CostNode, CostParams, CostReport, cost_tree
from .primitives import (
    AggSpec, AndPred, Cmp, Layout, VerSpec, alloc_rows, and_all, compare, const_bits,
    dedup_agg_rows, filter_rows, fit, gt, mask, merge_rows, mono_rows, mux, nonzero,
    orderby_rows, output_rows, sentinel, si2_rows, sort_rows, sub, top, ver_rows,
)
from . import sqlfront as sf


class PlanError(ValueError):
    pass


# -- constraints --------------------------------------------------------------------

@dataclass(frozen=True)
class ConstraintSet:
    """Checkable facts about one list: ranges, sort order, distinct key."""
    ranges: tuple[tuple[str, int, int], ...] = ()
    sorted_by: tuple[str, ...] = ()
    distinct: tuple[str, ...] = ()
    verifiable: bool = True

    def ver_specs(self, layout: Layout) -> tuple[VerSpec, ...]:
        if not self.verifiable:
            return ()
        specs = []
        if self.sorted_by:
            strict = self.distinct and tuple(self.distinct) == tuple(self.sorted_by)
            specs.append(VerSpec("sorted-strict" if strict else "sorted-nonstrict"))
        for col, lo, hi in self.ranges:
            if col in layout.names:
                specs.append(VerSpec("range", col, lo, hi))
        return tuple(specs)

    def describe(self) -> str:
        parts = [f"range({c},{lo},{hi})" for c, lo, hi in self.ranges]
        if self.sorted_by:
            parts.append("sorted(" + ",".join(self.sorted_by) + ")")
        if self.distinct:
            parts.append("distinct(" + ",".join(self.distinct) + ")")
        if not self.verifiable:
            parts.append("unverifiable")
        return ";".join(parts) or "none"


# -- operator tree -----------------------------------------------------------------------

@dataclass
class OpNode:
    kind: str
    op: object
    children: list
    parties: frozenset
    merged: bool = False

    def walk(self):
        for c in self.children:
            yield from c.walk()
        yield self


def build_tree(relop) -> OpNode:
    """Operator tree; a table scanned more than once makes the joint part one node."""
    seen: dict = {}
    for s in sf.scans(relop):
        seen[(s.table, s.party)] = seen.get((s.table, s.party), 0) + 1
    shared = any(v > 1 for v in seen.values())

    def conv(op) -> OpNode:
        kids = [conv(c) for c in sf.children_of(op)]
        return OpNode(type(op).__name__, op, kids, op.owners)

    root = conv(relop)
    if shared:
        for n in root.walk():
            if n.kind != "Scan":
                n.merged = True
    return root


# -- local plans --------------------------------------------------------------------------

@dataclass(frozen=True)
class LocalStep:
    kind: str          # filter | groupby | project | sort
    args: tuple

    def describe(self) -> str:
        if self.kind == "filter":
            return "filter(" + " and ".join(f"{c}{o}{v}" for c, o, v in self.args) + ")"
        if self.kind == "groupby":
            keys, aggs = self.args
            return "groupby(" + ",".join(keys) + ";" + ",".join(
                f"{k}({s or '*'})->{n}" for k, s, n in aggs) + ")"
        if self.kind == "project":
            return "project(" + ",".join(f"{s}->{d}" if s != d else s for s, d in self.args) + ")"
        return "sort(" + ",".join(self.args) + ")"


_OPS = {"=": lambda a, b: a == b, "!=": lambda a, b: a != b, "<": lambda a, b: a < b,
        "<=": lambda a, b: a <= b, ">": lambda a, b: a > b, ">=": lambda a, b: a >= b}


@dataclass(frozen=True)
class LocalPlan:
    """Plaintext work one party runs on its own table before the joint phase."""
    party: int
    table: str
    label: str
    steps: tuple[LocalStep, ...]
    layout: Layout
    bound: int
    constraints: ConstraintSet
    slot: int = 0       # leaf position; keeps padding sentinels disjoint across leaves
    stride: int = 0

    def run(self, rows: Sequence[dict]) -> list[dict]:
        rows = [dict(r) for r in rows]
        for st in self.steps:
            if st.kind == "filter":
                rows = [r for r in rows if all(_OPS[o](r[c], v) for c, o, v in st.args)]
            elif st.kind == "groupby":
                keys, aggs = st.args
                groups: dict = {}
                for r in rows:
                    groups.setdefault(tuple(r[k] for k in keys), []).append(r)
                out = []
                for gk, members in groups.items():
                    row = dict(zip(keys, gk))
                    for kind, src, name in aggs:
                        vals = [1 for _ in members] if kind == "COUNT" else [m[src] for m in members]
                        row[name] = {"COUNT": sum, "SUM": sum, "MIN": min, "MAX": max}[kind](vals)
                    out.append(row)
                rows = out
            elif st.kind == "project":
                rows = [{d: r[s] for s, d in st.args} for r in rows]
            elif st.kind == "sort":
                rows.sort(key=lambda r: tuple(r[k] for k in st.args))
        return rows

    def encode(self, rows: Sequence[dict]) -> list[int]:
        """Pad to the bound with this party's sentinels and pack each row."""
        if len(rows) > self.bound:
            raise sf.BoundError(f"party P{self.party + 1} supplies {len(rows)} rows to "
                                f"{self.label}, above its declared bound {self.bound}")
        k0 = self.layout.key[0]
        w = self.layout.col_width(k0)
        out = []
        for r in rows:
            if not 1 <= r[k0] < top(w):
                raise sf.BoundError(f"key {k0}={r[k0]} outside [1, {top(w) - 1}]")
            out.append(self.layout.pack(r))
        for k in range(len(rows), self.bound):
            out.append(self.layout.pack({k0: sentinel(w, self.slot, self.stride or self.bound, k)}))
        return out

    def describe(self) -> str:
        cols = ",".join(f"{c}:{w}" for c, w in self.layout.cols)
        steps = ";".join(s.describe() for s in self.steps) or "none"
        return (f"local {self.label} party=P{self.party + 1} table={self.table} bound={self.bound} "
                f"steps={steps} out={cols} key={','.join(self.layout.key)} "
                f"constraints={self.constraints.describe()}")


def _bits_for(n: int) -> int:
    return max(1, int(n).bit_length())


# -- joint programs ---------------------------------------------------------------------

@dataclass(frozen=True)
class LeafSpec:
    pos: int
    party: int
    label: str
    layout: Layout             # layout of the rows the party supplies
    rows: int
    vers: tuple[VerSpec, ...]
    prep: tuple                # in-circuit ops: ("filter", pred) | ("project", pairs) | ("sort",)
    tree_layout: Layout        # layout after prep


@dataclass
class Program:
    kind: str                            # union | join
    leaves: tuple[LeafSpec, ...]
    key: tuple[str, ...]
    aggs: tuple[AggSpec, ...] = ()
    having: object = None
    order: tuple | None = None           # (col, desc, limit, tiebreak)
    post_pred: object = None             # join: expression over widened columns
    result: tuple = ()                   # (layout column, output name)
    colmap: dict = field(default_factory=dict)
    signature: str = ""

    def __post_init__(self):
        self._circuits: dict = {}
        self._nodes: dict = {}


def _cmp_terms(pred, qual_ok=None, colname=lambda c: c.name):
    terms = []
    for t in sf.split_and(pred):
        if not (isinstance(t, sf.Bin) and t.op in _OPS and isinstance(t.left, sf.Col)
                and isinstance(t.right, sf.Lit) and isinstance(t.right.value, int)):
            return None
        if qual_ok is not None and not qual_ok(t.left):
            return None
        terms.append((colname(t.left), t.op, t.right.value))
    return terms


def _peel(op, cls):
    return (op, op.child) if isinstance(op, cls) else (None, op)


def lower(relop, schema: sf.Schema, split: bool = True) -> tuple[Program, list[LocalPlan]]:
    """Split into local plans and a joint program (steps 1 to 3 of planning)."""
    tree = build_tree(relop)
    root = relop
    project, root = _peel(root, sf.Project)
    order, root = _peel(root, sf.OrderByLimit)
    if isinstance(root, sf.Filter) and isinstance(root.child, sf.GroupByAgg):
        having, root = root, root.child
    else:
        having = None
    group, root = _peel(root, sf.GroupByAgg)
    where, root = _peel(root, sf.Filter)
    if isinstance(root, sf.Concat) and group is not None:
        prog, locals_ = _lower_union(root, where, group, having, order, project, schema, split)
    elif isinstance(root, sf.EquiJoin) and group is None and order is None:
        prog, locals_ = _lower_join(root, where, project, schema, split)
    elif isinstance(root, sf.ThetaJoin):
        raise PlanError("non-equijoin predicates are not lowered by this planner")
    else:
        raise PlanError("query shape not supported: expected UNION with GROUP BY or an equijoin")
    stride = max(lp.bound for lp in locals_)
    locals_ = [replace(lp, slot=i, stride=stride) for i, lp in enumerate(locals_)]
    if any(n.merged for n in tree.walk()):
        prog.signature += "|merged"
    return prog, locals_


def annotate_constraints(steps: Sequence[LocalStep], table: sf.TableSchema) -> ConstraintSet:
    """Propagate constraints bottom-up through a local plan.

    Schema-declared ranges seed the set; a filter tightens them (``c = v``
    gives ``[v, v]``); a group-by makes its keys distinct and drops facts
    about everything else; a projection renames; a sort records the order.
    Uniqueness declared on the table carries over when the unique columns
    are covered by the sort key plus equality-filtered columns.  Any other
    step kind yields a fact outside the three checkable kinds, so the set
    is marked unverifiable.
    """
    ranges: dict[str, tuple[int, int]] = {}
    for c in table.columns:
        if c.lo is not None:
            ranges[c.name] = (c.lo, c.hi)
    fixed: set = set()
    distinct: tuple = ()
    sorted_by: tuple = ()
    unique = set(table.unique or ())
    verifiable = True
    for st in steps:
        if st.kind == "filter":
            for col, op, v in st.args:
                w = table.column(col).width
                lo, hi = ranges.get(col, (0, (1 << w) - 1))
                if op == "=":
                    lo, hi = max(lo, v), min(hi, v)
                    fixed.add(col)
                elif op in ("<", "<="):
                    hi = min(hi, v if op == "<=" else v - 1)
                elif op in (">", ">="):
                    lo = max(lo, v if op == ">=" else v + 1)
                ranges[col] = (lo, hi)
        elif st.kind == "groupby":
            keys, _ = st.args
            ranges = {k: r for k, r in ranges.items() if k in keys}
            distinct, sorted_by, unique = tuple(keys), (), set(keys)
            fixed &= set(keys)
        elif st.kind == "project":
            ren = dict(st.args)
            ranges = {ren[k]: r for k, r in ranges.items() if k in ren}
            # constant columns can leave a unique set without breaking it
            unique = {ren[k] for k in unique if k in ren} if unique <= set(ren) | fixed else set()
            fixed = {ren[k] for k in fixed if k in ren}
            distinct = tuple(ren[k] for k in distinct) if set(distinct) <= set(ren) else ()
            sorted_by = ()
        elif st.kind == "sort":
            sorted_by = tuple(st.args)
        else:
            verifiable = False
    if sorted_by and unique and unique <= set(sorted_by) | fixed:
        distinct = sorted_by
    elif distinct and set(distinct) != set(sorted_by):
        distinct = distinct if not sorted_by else ()
    out = tuple((c, lo, hi) for c, (lo, hi) in sorted(ranges.items()) if lo <= hi)
    return ConstraintSet(out, sorted_by, distinct, verifiable)


def _lower_union(concat, where, group, having, order, project, schema, split):
    scans_ = list(concat.children)
    if not all(isinstance(s, sf.Scan) for s in scans_):
        raise PlanError("UNION operands must be party tables")
    t0 = schema.table(scans_[0].table, scans_[0].party)
    filters = []
    if where is not None:
        filters = _cmp_terms(where.pred)
        if filters is None:
            raise PlanError("WHERE must be a conjunction of column-constant comparisons")
    keys = tuple(k.name for k in group.keys)
    total = sum(schema.table(s.table, s.party).bound for s in scans_)
    final_aggs, partial = [], []
    for a in group.aggs:
        if a.kind == "COUNT":
            w = _bits_for(total) + 1
            final_aggs.append(AggSpec("COUNT", None, a.name, w))
            partial.append(("COUNT", None, a.name, "SUM", w))
        else:
            src = t0.column(a.arg.name)
            w = src.width + (_bits_for(total) if a.kind == "SUM" else 0)
            final_aggs.append(AggSpec(a.kind, a.arg.name, a.name, w))
            partial.append((a.kind, a.arg.name, a.name, a.kind, w))
    eq_fixed = {c for c, o, _ in filters if o == "="}
    uniq_ok = bool(t0.unique) and set(t0.unique) <= set(keys) | eq_fixed
    src_cols = [c.name for c in t0.columns]
    leaves, locals_ = [], []
    parties = [s.party for s in scans_]
    for pos, s in enumerate(scans_):
        t = schema.table(s.table, s.party)
        label = f"p{s.party}" if parties.count(s.party) == 1 else f"p{s.party}_{pos}"
        key_cols = [(k, t.column(k).width) for k in keys]
        if split and not uniq_ok:
            # local partial aggregation, joint aggregate combines partials
            cols = tuple(key_cols + [(name, w) for _, _, name, _, w in partial])
            lay = Layout(cols, keys)
            steps = []
            if filters:
                steps.append(LocalStep("filter", tuple(filters)))
            steps.append(LocalStep("groupby", (keys, tuple((k, s_, n) for k, s_, n, _, _ in partial))))
            steps.append(LocalStep("sort", keys))
            cons = annotate_constraints(steps, t)
            bound = t.joint_bound or t.bound
            loc = LocalPlan(s.party, s.table, label, tuple(steps), lay, bound, cons)
            leaves.append(LeafSpec(pos, s.party, label, lay, bound, cons.ver_specs(lay), (), lay))
            locals_.append(loc)
        elif split:
            # group key already unique per party: filter, project and sort locally only
            vals = [a.col for a in final_aggs if a.col and a.col not in keys]
            cols = tuple(key_cols + [(v, t.column(v).width) for v in dict.fromkeys(vals)])
            lay = Layout(cols, keys)
            steps = []
            if filters:
                steps.append(LocalStep("filter", tuple(filters)))
            steps.append(LocalStep("project", tuple((c, c) for c, _ in cols)))
            steps.append(LocalStep("sort", keys))
            cons = annotate_constraints(steps, t)
            bound = t.joint_bound or t.bound
            loc = LocalPlan(s.party, s.table, label, tuple(steps), lay, bound, cons)
            leaves.append(LeafSpec(pos, s.party, label, lay, bound, cons.ver_specs(lay), (), lay))
            locals_.append(loc)
        else:
            raw = Layout(tuple((c.name, c.width) for c in t.columns), keys)
            vals = [a.col for a in final_aggs if a.col and a.col not in keys]
            cols = tuple(key_cols + [(v, t.column(v).width) for v in dict.fromkeys(vals)])
            lay = Layout(cols, keys)
            prep = []
            if filters:
                prep.append(("filter", AndPred(tuple(Cmp(c, o, v) for c, o, v in filters))))
            prep.append(("project", tuple((c, c) for c, _ in cols)))
            prep.append(("sort",))
            steps = (LocalStep("project", tuple((c, c) for c in src_cols)),)
            loc = LocalPlan(s.party, s.table, label, steps, raw, t.bound, annotate_constraints(steps, t))
            leaves.append(LeafSpec(pos, s.party, label, raw, t.bound, (), tuple(prep), lay))
            locals_.append(loc)
    if split and not uniq_ok:
        aggs = tuple(AggSpec(fk, name, name, w) for _, _, name, fk, w in partial)
    else:
        aggs = tuple(final_aggs)
    having_pred = None
    if having is not None:
        terms = _cmp_terms(having.pred)
        if terms is None:
            raise PlanError("HAVING must compare aggregates with constants")
        having_pred = AndPred(tuple(Cmp(c, o, v) for c, o, v in terms))
    order_t = None
    if order is not None:
        order_t = (order.col.name, order.desc, order.limit, tuple(t.name for t in order.tiebreak))
    out_names = list(keys) + [a.name for a in aggs]
    if project is not None:
        result = tuple((c.name, name) for c, name in project.cols)
    else:
        result = tuple((n, n) for n in out_names)
    for c, _ in result:
        if c not in out_names:
            raise PlanError(f"selected column {c} is not a group key or aggregate")
    sig = f"union|split={split}|uniq={uniq_ok}"
    return Program("union", tuple(leaves), keys, aggs, having_pred, order_t, None, result,
                   {}, sig), locals_


def _lower_join(join, where, project, schema, split):
    scans_ = list(join.children)
    if not all(isinstance(s, sf.Scan) for s in scans_):
        raise PlanError("join operands must be party tables")
    refs = [s.alias or s.table for s in scans_]
    key_names = {k.name for k in join.keys}
    if len(key_names) != 1:
        raise PlanError("join key must be one column name shared by all tables")
    key = join.keys[0].name
    local_f = {r: [] for r in refs}
    post = []
    for term in sf.split_and(where.pred) if where is not None else []:
        quals = _quals(term)
        t1 = _cmp_terms(term)
        if t1 is not None and len(quals) == 1:
            local_f[next(iter(quals))].extend(t1)
        else:
            post.append(term)
    needed = {r: [] for r in refs}
    for term in post:
        for c in _cols(term):
            if c.name != key and c.name not in needed[c.qual]:
                needed[c.qual].append(c.name)
    result = []
    if project is None:
        raise PlanError("join query needs an explicit SELECT list")
    for c, name in project.cols:
        if c.name == key:
            result.append((key, name))
        else:
            if c.name not in needed[c.qual]:
                needed[c.qual].append(c.name)
            result.append((f"{c.name}@{refs.index(c.qual)}", name))
    colmap = {}
    leaves, locals_ = [], []
    parties = [s.party for s in scans_]
    for pos, (s, r) in enumerate(zip(scans_, refs)):
        t = schema.table(s.table, s.party)
        label = f"p{s.party}" if parties.count(s.party) == 1 else f"p{s.party}_{pos}"
        filters = local_f[r]
        eq_fixed = {c for c, o, _ in filters if o == "="}
        if not (t.unique and set(t.unique) <= {key} | eq_fixed):
            raise PlanError(f"join key {key} of {t.qualified} is not provably unique")
        pay = [(f"{c}@{pos}", t.column(c).width) for c in needed[r]]
        for c in needed[r]:
            colmap[(r, c)] = f"{c}@{pos}"
        colmap[(r, key)] = key
        tree_lay = Layout(((key, t.column(key).width),) + tuple(pay), (key,))
        if split:
            steps = []
            if filters:
                steps.append(LocalStep("filter", tuple(filters)))
            steps.append(LocalStep("project", ((key, key),) + tuple((c, f"{c}@{pos}") for c in needed[r])))
            steps.append(LocalStep("sort", (key,)))
            cons = annotate_constraints(steps, t)
            bound = t.joint_bound or t.bound
            locals_.append(LocalPlan(s.party, s.table, label, tuple(steps), tree_lay, bound, cons))
            leaves.append(LeafSpec(pos, s.party, label, tree_lay, bound, cons.ver_specs(tree_lay), (), tree_lay))
        else:
            raw = Layout(tuple((c.name, c.width) for c in t.columns), (key,))
            prep = []
            if filters:
                prep.append(("filter", AndPred(tuple(Cmp(c, o, v) for c, o, v in filters))))
            prep.append(("project", ((key, key),) + tuple((c, f"{c}@{pos}") for c in needed[r])))
            prep.append(("sort",))
            steps = (LocalStep("project", tuple((c.name, c.name) for c in t.columns)),)
            locals_.append(LocalPlan(s.party, s.table, label, steps, raw, t.bound,
                                     annotate_constraints(steps, t)))
            leaves.append(LeafSpec(pos, s.party, label, raw, t.bound, (), tuple(prep), tree_lay))
    post_pred = None
    for term in post:
        post_pred = term if post_pred is None else sf.Bin("AND", post_pred, term)
    sig = f"join|split={split}"
    return Program("join", tuple(leaves), (key,), (), None, None, post_pred, tuple(result),
                   colmap, sig), locals_


def _cols(e) -> list:
    if isinstance(e, sf.Col):
        return [e]
    if isinstance(e, sf.Bin):
        return _cols(e.left) + _cols(e.right)
    if isinstance(e, sf.Func):
        out = []
        for a in e.args:
            out.extend(_cols(a))
        return out
    return []


def _quals(e) -> set:
    return {c.qual for c in _cols(e)}


# -- in-circuit expression evaluation --------------------------------------------------

def _expr_bits(b: Builder, e, row, layout: Layout, colmap) -> list[int]:
    if isinstance(e, sf.Col):
        return list(layout.get(row, colmap[(e.qual, e.name)]))
    if isinstance(e, sf.Lit):
        v = int(e.value)
        return const_bits(b, v, max(1, v.bit_length()))
    if isinstance(e, sf.Func) and e.name in ("GREATEST", "LEAST"):
        args = [_expr_bits(b, a, row, layout, colmap) for a in e.args]
        w = max(len(a) for a in args)
        acc = fit(b, args[0], w)
        for a in args[1:]:
            a = fit(b, a, w)
            if e.name == "GREATEST":
                acc = mux(b, gt(b, a, acc), a, acc)
            else:
                acc = mux(b, gt(b, acc, a), a, acc)
        return acc
    if isinstance(e, sf.Bin) and e.op in ("+", "-"):
        x = _expr_bits(b, e.left, row, layout, colmap)
        y = _expr_bits(b, e.right, row, layout, colmap)
        w = max(len(x), len(y)) + (1 if e.op == "+" else 0)
        from .primitives import add
        return add(b, fit(b, x, w), fit(b, y, w)) if e.op == "+" else sub(b, fit(b, x, w), fit(b, y, w))
    raise PlanError(f"expression {sf.print_expr(e)} cannot be evaluated in a circuit")


def _pred_bit(b: Builder, e, row, layout: Layout, colmap) -> int:
    if isinstance(e, sf.Bin) and e.op == "AND":
        return b.AND(_pred_bit(b, e.left, row, layout, colmap), _pred_bit(b, e.right, row, layout, colmap))
    if isinstance(e, sf.Bin) and e.op == "OR":
        return b.OR(_pred_bit(b, e.left, row, layout, colmap), _pred_bit(b, e.right, row, layout, colmap))
    if isinstance(e, sf.Bin) and e.op in _OPS:
        x = _expr_bits(b, e.left, row, layout, colmap)
        y = _expr_bits(b, e.right, row, layout, colmap)
        w = max(len(x), len(y))
        return compare(b, fit(b, x, w), e.op, fit(b, y, w))
    raise PlanError(f"predicate {sf.print_expr(e)} not supported in a circuit")


# -- circuit assembly ------------------------------------------------------------------

Shape = object


@dataclass
class PlanNode:
    """One jointly evaluated circuit of the plan tree."""
    name: str
    circuit: Circuit
    parties: tuple[int, ...]
    inputs: list            # (label, party int | PlanNode)
    ver_specs: list         # (edge label, VerSpec)
    out_layout: Layout
    out_rows: int
    leaf_layouts: dict = field(default_factory=dict)   # label -> Layout for party inputs

    @property
    def children(self) -> list["PlanNode"]:
        return [s for _, s in self.inputs if isinstance(s, PlanNode)]

    def walk(self):
        for c in self.children:
            yield from c.walk()
        yield self

    @property
    def out_bits(self) -> int:
        return self.out_rows * self.out_layout.width


def _widen(b: Builder, rows, src: Layout, dst: Layout):
    out = []
    for r in rows:
        new = []
        for c, w in dst.cols:
            new.extend(src.get(r, c) if c in src.names else [b.zero] * w)
        out.append(tuple(new))
    return out


def _project(b: Builder, rows, src: Layout, pairs) -> tuple[list, Layout]:
    cols = tuple((d, src.col_width(s)) for s, d in pairs)
    key = tuple(d for s, d in pairs if s in src.key)
    lay = Layout(cols, key)
    return [tuple(w for s, _ in pairs for w in src.get(r, s)) for r in rows], lay


class _Side:
    __slots__ = ("label", "source", "rows", "layout", "leaf")

    def __init__(self, label, source, rows, layout, leaf):
        self.label, self.source, self.rows, self.layout, self.leaf = label, source, rows, layout, leaf


def _shape_leaves(shape) -> list[int]:
    if isinstance(shape, int):
        return [shape]
    out = []
    for s in shape:
        out.extend(_shape_leaves(s))
    return out


def shape_code(shape) -> str:
    return str(shape).replace(" ", "")


def _leaf_side(b: Builder, prog: Program, leaf: LeafSpec, cache: dict, ver_list: list) -> _Side:
    if leaf.label in cache:
        rows, lay = cache[leaf.label]
    else:
        rows = alloc_rows(b, leaf.party, leaf.layout, leaf.rows, leaf.label)
        for spec in leaf.vers:
            b.add_ver(f"{leaf.label}:{spec.describe()}", ver_rows(b, rows, leaf.layout, spec))
            ver_list.append((leaf.label, spec))
        lay = leaf.layout
        for op in leaf.prep:
            if op[0] == "filter":
                rows = filter_rows(b, rows, lay, op[1])
            elif op[0] == "project":
                rows, lay = _project(b, rows, lay, op[1])
                lay = Layout(lay.cols, prog.key)
            elif op[0] == "sort":
                rows = sort_rows(b, rows, lay)
        cache[leaf.label] = (rows, lay)
    return _Side(leaf.label, leaf.party, rows, lay, True)


def _combine(b: Builder, prog: Program, l: _Side, r: _Side, root: bool):
    if prog.kind == "union":
        return merge_rows(b, l.rows, r.rows, l.layout), l.layout
    names = [c for c, _ in l.layout.cols] + [c for c, _ in r.layout.cols if c not in l.layout.names]
    widths = dict(l.layout.cols) | dict(r.layout.cols)
    key = prog.key[0]
    pay = sorted((c for c in names if c != key), key=lambda c: (int(c.rsplit("@", 1)[1]), c))
    lay = Layout(((key, widths[key]),) + tuple((c, widths[c]) for c in pay), prog.key)
    lrows = _widen(b, l.rows, l.layout, lay)
    rrows = _widen(b, r.rows, r.layout, lay)
    rows = si2_rows(b, lrows, rrows, lay, star=not (l.leaf and r.leaf))
    if not root:
        rows = mono_rows(b, rows, lay)
    return rows, lay


def _finalize(b: Builder, prog: Program, rows, lay: Layout):
    if prog.kind == "union":
        rows, lay = dedup_agg_rows(b, rows, lay, prog.aggs)
        if prog.having is not None:
            rows = filter_rows(b, rows, lay, prog.having)
        if prog.order is not None:
            col, desc, limit, tie = prog.order
            rows = orderby_rows(b, rows, lay, col, desc, limit, tie)
    else:
        if prog.post_pred is not None:
            cm = {}
            for (q, c), name in prog.colmap.items():
                cm[(q, c)] = name
            out = []
            for r in rows:
                keep = b.AND(_pred_bit(b, prog.post_pred, r, lay, cm), nonzero(b, lay.key_bits(r)))
                out.append(tuple(mask(b, keep, r)))
            rows = out
    pairs = tuple((c, c) for c, _ in prog.result)
    rows, plain = _project(b, rows, lay, pairs)
    key = tuple(c for c, _ in prog.result if c in prog.key) or (prog.result[0][0],)
    return rows, Layout(plain.cols, key)


def assemble(prog: Program, shape, decompose: bool = True) -> PlanNode:
    """Map a joint program and tree shape to a tree of unit circuits."""
    leaves = prog.leaves
    if isinstance(shape, int):
        raise PlanError("a joint tree needs at least two leaves")
    if sorted(_shape_leaves(shape)) != list(range(len(leaves))):
        raise PlanError(f"shape {shape_code(shape)} does not cover leaves 0..{len(leaves) - 1}")
    if not decompose:
        return _mono_unit(prog, shape)
    return _unit(prog, shape, True)


def _iv(shape) -> tuple[int, int]:
    ls = _shape_leaves(shape)
    return ls[0], ls[-1]


def _unit_name(shape) -> str:
    lo, hi = _iv(shape)
    return f"u{lo}-{hi}"


def _unit(prog: Program, shape, root: bool) -> PlanNode:
    memo_key = (shape_code(shape), root)
    if memo_key in prog._nodes:
        return prog._nodes[memo_key]
    kids = [None, None]
    desc = []
    for i, s in enumerate(shape):
        if isinstance(s, int):
            desc.append(("leaf", s))
        else:
            kids[i] = _unit(prog, s, False)
            desc.append(("child", _unit_name(s), kids[i].out_rows, kids[i].out_layout))
    ckey = (tuple(desc), root)
    name = _unit_name(shape)
    if ckey not in prog._circuits:
        prog._circuits[ckey] = _build_unit(prog, name, shape, kids, root)
    circuit, inputs_desc, vers, out_lay, out_rows, leaf_lays = prog._circuits[ckey]
    inputs = []
    for label, src in inputs_desc:
        if isinstance(src, tuple):
            inputs.append((label, kids[src[1]]))
        else:
            inputs.append((label, src))
    parties = tuple(sorted({leaves_party for leaves_party in
                            (prog.leaves[p].party for p in _shape_leaves(shape))}))
    node = PlanNode(name, circuit, parties, inputs, list(vers), out_lay, out_rows, dict(leaf_lays))
    prog._nodes[memo_key] = node
    return node


def _build_unit(prog: Program, name: str, shape, kids, root: bool):
    b = Builder(name)
    inputs, vers, cache, leaf_lays = [], [], {}, {}
    sides = []
    for i, s in enumerate(shape):
        if isinstance(s, int):
            leaf = prog.leaves[s]
            side = _leaf_side(b, prog, leaf, cache, vers)
            if all(lbl != leaf.label for lbl, _ in inputs):
                inputs.append((leaf.label, leaf.party))
                leaf_lays[leaf.label] = leaf.layout
        else:
            kid = kids[i]
            label = kid.name
            rows = alloc_rows(b, SolderSource(label), kid.out_layout, kid.out_rows, label)
            spec = VerSpec("sorted-nonstrict")
            b.add_ver(f"{label}:{spec.kind}", ver_rows(b, rows, kid.out_layout, spec))
            vers.append((label, spec))
            inputs.append((label, ("child", i)))
            side = _Side(label, kid, rows, kid.out_layout, False)
        sides.append(side)
    rows, lay = _combine(b, prog, sides[0], sides[1], root)
    if root:
        rows, lay = _finalize(b, prog, rows, lay)
    output_rows(b, "out", rows, lay)
    c = prune(b.finish())
    return c, inputs, vers, lay, len(rows), leaf_lays


def _mono_unit(prog: Program, shape) -> PlanNode:
    key = ("mono", shape_code(shape))
    if key in prog._nodes:
        return prog._nodes[key]
    b = Builder("mono")
    inputs, vers, cache, leaf_lays = [], [], {}, {}

    def rec(s, root):
        if isinstance(s, int):
            leaf = prog.leaves[s]
            side = _leaf_side(b, prog, leaf, cache, vers)
            if all(lbl != leaf.label for lbl, _ in inputs):
                inputs.append((leaf.label, leaf.party))
                leaf_lays[leaf.label] = leaf.layout
            return side
        l, r = rec(s[0], False), rec(s[1], False)
        rows, lay = _combine(b, prog, l, r, root)
        return _Side("", None, rows, lay, False)

    top_side = rec(shape, True)
    rows, lay = _finalize(b, prog, top_side.rows, top_side.layout)
    output_rows(b, "out", rows, lay)
    c = prune(b.finish())
    parties = tuple(sorted({lf.party for lf in prog.leaves}))
    node = PlanNode("mono", c, parties, inputs, vers, lay, len(rows), leaf_lays)
    prog._nodes[key] = node
    return node


# -- shapes and choice ---------------------------------------------------------------------

def enumerate_shapes(m: int, space: str = "all") -> list:
    """Binary trees over leaves 0..m-1 in fixed order.

    ``space``: ``all`` (every tree, m <= 8), ``basic`` (left-deep and
    balanced), or ``auto`` (all for m <= 4, basic beyond).
    """
    if m < 2:
        raise PlanError("need at least two leaves")
    if space == "auto":
        space = "all" if m <= 4 else "basic"
    if space == "all":
        if m > 8:
            raise PlanError("full shape enumeration limited to m <= 8")

        def rec(lo, hi):
            if lo == hi:
                return [lo]
            out = []
            for k in range(lo, hi):
                for a in rec(lo, k):
                    for c in rec(k + 1, hi):
                        out.append((a, c))
            return out
        return rec(0, m - 1)
    if space == "basic":
        from .primitives import balanced, left_deep
        out = [left_deep(range(m)), balanced(range(m))]
        uniq = []
        for s in out:
            if s not in uniq:
                uniq.append(s)
        return uniq
    raise PlanError(f"unknown shape space {space!r}")


@dataclass(frozen=True)
class Monolithic:
    """Candidate that evaluates the whole joint tree ``inner`` as one unit."""
    inner: object

    def __str__(self) -> str:
        return "mono" + shape_code(self.inner)


def _assemble_any(prog: Program, shape) -> PlanNode:
    if isinstance(shape, Monolithic):
        return assemble(prog, shape.inner, decompose=False)
    return assemble(prog, shape, decompose=True)


def cost_nodes(root: PlanNode) -> CostNode:
    def conv(n: PlanNode) -> CostNode:
        kids = [conv(c) for c in n.children]
        return CostNode(n.name, n.parties, n.circuit.and_count, n.circuit.input_bits,
                        n.out_bits, kids)
    return conv(root)


def plan_cost(root: PlanNode, params: CostParams) -> CostReport:
    return cost_tree(cost_nodes(root), params)


def choose_plan(candidates: Sequence[tuple], params: CostParams) -> tuple:
    """Pick the cheapest (shape, PlanNode); ties go to the smaller shape code."""
    if not candidates:
        raise PlanError("no candidate plans")
    scored = [(plan_cost(node, params).total, shape_code(shape), shape, node)
              for shape, node in candidates]
    scored.sort(key=lambda x: (x[0], x[1]))
    return scored[0][2], scored[0][3]


def default_params(m: int) -> CostParams:
    return CostParams.uniform(m, link=1, ls=Fraction(1, 10))


# -- plan document ------------------------------------------------------------------------

@dataclass
class PlannerConfig:
    t: int | None = None
    space: str = "auto"
    split: bool = True
    decompose: bool = True
    shape: object = None          # force a shape
    params: CostParams | None = None
    include_monolithic: bool = True   # let the single-unit plan compete on cost


@dataclass
class Plan:
    sql: str
    config: PlannerConfig
    program: Program
    locals: list[LocalPlan]
    shape: object
    root: PlanNode
    cost: CostReport
    candidates: list = field(default_factory=list)   # (shape code, total cost)
    m: int = 0
    schema: sf.Schema | None = None

    @property
    def units(self) -> list[PlanNode]:
        return list(self.root.walk())

    def local_for(self, label: str) -> LocalPlan:
        for lp in self.locals:
            if lp.label == label:
                return lp
        raise KeyError(label)

    def per_party_and(self) -> dict[int, int]:
        out = {p: 0 for p in range(self.m)}
        for u in self.units:
            for p in u.parties:
                out[p] += u.circuit.and_count
        return out

    @property
    def joint_input_bits(self) -> int:
        """Bits the parties feed into the joint phase."""
        return sum(lp.bound * lp.layout.width for lp in self.locals)

    def render(self, emit_circuits: bool = False, shapes: bool = False, costs: bool = True) -> str:
        cfg = self.config
        t = cfg.t if cfg.t is not None else self.m - 1
        lines = ["plan v1",
                 f"query: {self.sql}",
                 f"parties: {self.m}",
                 f"threshold: {t}",
                 f"split: {'yes' if cfg.split else 'no'}",
                 f"decomposed: {'yes' if cfg.decompose else 'no'}",
                 f"shape: {shape_code(self.shape)}",
                 f"joint_input_bits: {self.joint_input_bits}"]
        for lp in self.locals:
            lines.append(lp.describe())
        for u in self.units:
            gc = gate_counts(u.circuit)
            ins = []
            for label, src in u.inputs:
                g = u.circuit.group(label)
                kind = f"P{src + 1}" if isinstance(src, int) else f"solder:{src.name}"
                ins.append(f"{label}<-{kind}:{g.bundle.width}")
            lines.append(
                f"unit {u.name} parties={','.join(f'P{p + 1}' for p in u.parties)} "
                f"and={gc['AND']} xor={gc['XOR']} inv={gc['INV']} "
                f"inputs={' '.join(ins)} "
                f"out={u.out_rows}x{','.join(f'{c}:{w}' for c, w in u.out_layout.cols)}")
            for label, spec in u.ver_specs:
                lines.append(f"  ver {label} {spec.describe()}")
            for c in u.children:
                lines.append(f"  solder {c.name} -> {u.name} bits={c.out_bits}")
        if costs:
            for ln in self.cost.lines():
                lines.append("cost " + ln)
        if shapes:
            for code, total in self.candidates:
                kind = "monolithic" if code.startswith("mono") else "candidate"
                lines.append(f"{kind} {code} cost={_fmt(total)}")
        if emit_circuits:
            from .circuit import dump
            for u in self.units:
                lines.append(f"circuit {u.name}")
                lines.extend(dump(u.circuit).rstrip("\n").split("\n"))
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.render(emit_circuits=True, shapes=True).encode()).hexdigest()


def _fmt(x) -> str:
    x = Fraction(x)
    return str(x.numerator) if x.denominator == 1 else f"{x.numerator}/{x.denominator}"


_PLAN_CACHE: dict = {}


def make_plan(sql: str, schema: sf.Schema, config: PlannerConfig | None = None,
              cache: bool = True) -> Plan:
    """Run the whole planning pipeline.  Plans depend only on the query text,
    the schema and the config, never on data, so they are cached."""
    config = config or PlannerConfig()
    m = len(schema.parties)
    params = config.params or default_params(m)
    key = (sql, sf.dump_schema(schema), config.split, config.decompose, config.space,
           None if config.shape is None else shape_code(config.shape), repr(params), config.t,
           config.include_monolithic)
    if cache and key in _PLAN_CACHE:
        return _PLAN_CACHE[key]
    if config.t is not None and not 0 < config.t < m:
        raise PlanError("threshold t must satisfy 0 < t < m")
    relop = sf.parse(sql, schema)
    sf.validate_bounds(relop, schema)
    prog, locals_ = lower(relop, schema, config.split)
    k = len(prog.leaves)
    merged = prog.signature.endswith("|merged")
    unverifiable = any(not lp.constraints.verifiable for lp in locals_)
    decompose = config.decompose and not merged and not unverifiable
    from .primitives import balanced
    if not decompose:
        cands = [(Monolithic(config.shape or balanced(range(k))),)]
    elif config.shape is not None:
        cands = [(config.shape,)]
    else:
        cands = [(s,) for s in enumerate_shapes(k, config.space)]
        if config.include_monolithic:
            cands.append((Monolithic(balanced(range(k))),))
    cands = [(s, _assemble_any(prog, s)) for (s,) in cands]
    scored = [(shape_code(s), plan_cost(n, params).total) for s, n in cands]
    shape, root = choose_plan(cands, params)
    cfg = PlannerConfig(config.t, config.space, config.split, not isinstance(shape, Monolithic),
                        config.shape, params, config.include_monolithic)
    plan = Plan(sql, cfg, prog, locals_, shape, root, plan_cost(root, params), scored, m, schema)
    if cache:
        _PLAN_CACHE[key] = plan
    return plan


def check_admissible(plan: Plan) -> None:
    """Tree shape, party containment and verifier coverage of every edge."""
    seen = set()
    for u in plan.units:
        if id(u) in seen:
            raise PlanError(f"unit {u.name} has more than one parent")
        seen.add(id(u))
        for c in u.children:
            if not set(c.parties) <= set(u.parties):
                raise PlanError(f"unit {c.name} parties not within parent {u.name}")
            if not any(lbl == c.name for lbl, _ in u.ver_specs):
                raise PlanError(f"edge {c.name} -> {u.name} lacks a verifier")
