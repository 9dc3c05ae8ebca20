"""SQL subset with party-annotated tables.

Tables are written ``name@Pk`` (party k, 1-based in SQL text, 0-based
internally).  ``UNION`` between tables means plain concatenation.

Supported: SELECT / FROM (UNION or JOIN ... ON) / WHERE / GROUP BY
(CONCAT(...) becomes a composite key) / HAVING / ORDER BY / LIMIT, the
aggregates COUNT SUM MIN MAX and the scalar functions GREATEST and LEAST.
"""

from __future__ import annotations

import configparser
import csv
import io
import math
import re
import sqlite3
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class SqlError(ValueError):
    """Parse or resolution failure, with a source position when known."""

    def __init__(self, message: str, pos: int | None = None, text: str | None = None):
        self.pos = pos
        if pos is not None and text is not None:
            line = text.count("\n", 0, pos) + 1
            col = pos - (text.rfind("\n", 0, pos) + 1) + 1
            message = f"{message} at line {line}, column {col}"
            self.line, self.col = line, col
        super().__init__(message)


class UnsupportedConstruct(SqlError):
    pass


class SchemaError(ValueError):
    pass


class BoundError(ValueError):
    pass


# -- schema --------------------------------------------------------------------

@dataclass(frozen=True)
class Column:
    name: str
    width: int
    lo: int | None = None
    hi: int | None = None
    enum: tuple[tuple[str, int], ...] = ()

    def code(self, literal: str) -> int:
        for k, v in self.enum:
            if k == literal:
                return v
        raise SchemaError(f"column {self.name} has no enum value {literal!r}")


@dataclass(frozen=True)
class TableSchema:
    name: str
    party: int
    columns: tuple[Column, ...]
    bound: int | None
    joint_bound: int | None = None
    unique: tuple[str, ...] = ()

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate column in {self.qualified}")
        for c in self.columns:
            if c.width < 2:
                raise SchemaError(f"column {c.name} of {self.qualified} narrower than 2 bits")
        if self.bound is not None and self.bound < 1:
            raise SchemaError(f"bound of {self.qualified} must be >= 1")

    @property
    def qualified(self) -> str:
        return f"{self.name}@P{self.party + 1}"

    def column(self, name: str) -> Column:
        for c in self.columns:
            if c.name == name:
                return c
        raise SqlError(f"unresolved column {name!r} in table {self.qualified}")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]


@dataclass
class Schema:
    tables: dict[tuple[str, int], TableSchema]

    def table(self, name: str, party: int) -> TableSchema:
        try:
            return self.tables[(name, party)]
        except KeyError:
            raise SqlError(f"unknown table {name}@P{party + 1}") from None

    @property
    def parties(self) -> list[int]:
        return sorted({p for _, p in self.tables})


_TABLE_RE = re.compile(r"^(\w+)@P(\d+)$")


def load_schema(text: str) -> Schema:
    """Parse the key/value schema format (one section per party table)."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise SchemaError(str(e)) from None
    tables = {}
    for sec in cp.sections():
        m = _TABLE_RE.match(sec)
        if not m:
            raise SchemaError(f"section {sec!r} is not of the form table@Pk")
        name, party = m.group(1), int(m.group(2)) - 1
        s = cp[sec]
        if "columns" not in s:
            raise SchemaError(f"{sec}: missing columns")
        cols = []
        for item in s["columns"].split(","):
            cname, _, w = item.strip().partition(":")
            lo = hi = None
            enum: tuple = ()
            if f"range.{cname}" in s:
                a, _, b = s[f"range.{cname}"].partition("..")
                lo, hi = int(a), int(b)
            if f"enum.{cname}" in s:
                enum = tuple((k.strip(), int(v)) for k, _, v in
                             (e.partition(":") for e in s[f"enum.{cname}"].split(",")))
            try:
                cols.append(Column(cname, int(w), lo, hi, enum))
            except ValueError:
                raise SchemaError(f"{sec}: bad column spec {item!r}") from None
        bound = int(s["bound"]) if "bound" in s else None
        jb = int(s["joint_bound"]) if "joint_bound" in s else None
        uniq = tuple(u.strip() for u in s.get("unique", "").split(",") if u.strip())
        tables[(name, party)] = TableSchema(name, party, tuple(cols), bound, jb, uniq)
    if not tables:
        raise SchemaError("schema has no tables")
    return Schema(tables)


def dump_schema(schema: Schema) -> str:
    out = []
    for key in sorted(schema.tables, key=lambda k: (k[1], k[0])):
        t = schema.tables[key]
        out.append(f"[{t.qualified}]")
        if t.bound is not None:
            out.append(f"bound = {t.bound}")
        if t.joint_bound is not None:
            out.append(f"joint_bound = {t.joint_bound}")
        out.append("columns = " + ", ".join(f"{c.name}:{c.width}" for c in t.columns))
        for c in t.columns:
            if c.lo is not None:
                out.append(f"range.{c.name} = {c.lo}..{c.hi}")
            if c.enum:
                out.append(f"enum.{c.name} = " + ", ".join(f"{k}:{v}" for k, v in c.enum))
        if t.unique:
            out.append("unique = " + ", ".join(t.unique))
        out.append("")
    return "\n".join(out)


# -- syntax tree ------------------------------------------------------------------

@dataclass(frozen=True)
class Col:
    qual: str | None
    name: str


@dataclass(frozen=True)
class Lit:
    value: object      # int or str


@dataclass(frozen=True)
class Star:
    pass


@dataclass(frozen=True)
class Func:
    name: str
    args: tuple


@dataclass(frozen=True)
class Bin:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class SelectItem:
    expr: object
    alias: str | None = None


@dataclass(frozen=True)
class TableRef:
    name: str
    party: int
    alias: str | None = None


@dataclass(frozen=True)
class Query:
    select: tuple[SelectItem, ...]
    tables: tuple[TableRef, ...]
    combine: str | None            # "union" | "join" | None (single table)
    join_on: tuple = ()            # one ON expression per joined table after the first
    where: object = None
    group_by: tuple = ()
    having: object = None
    order_by: tuple = ()           # (expr, desc)
    limit: int | None = None


AGGREGATES = ("COUNT", "SUM", "MIN", "MAX")
SCALARS = ("GREATEST", "LEAST", "CONCAT")
UNSUPPORTED_FUNCS = ("SUBSTRING", "SUBSTR", "REGEXP_LIKE", "REGEXP_REPLACE", "UPPER", "LOWER",
                     "LENGTH", "TRIM", "REPLACE")
KEYWORDS = {"SELECT", "FROM", "WHERE", "GROUP", "BY", "HAVING", "ORDER", "LIMIT", "AS", "AND",
            "OR", "NOT", "UNION", "JOIN", "ON", "ASC", "DESC", "REGEXP", "LIKE", "RLIKE", "ALL",
            "DISTINCT", "IN", "BETWEEN", "IS", "NULL", "CASE", "INNER", "LEFT", "RIGHT",
            "OUTER", "CROSS", "WITH"}

_TOKEN = re.compile(r"""
    (?P<ws>\s+|--[^\n]*)
  | (?P<num>\d+)
  | (?P<str>'(?:[^']|'')*')
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op><>|!=|<=|>=|[=<>+\-*/(),.;@])
""", re.VERBOSE)


@dataclass
class Tok:
    kind: str
    text: str
    pos: int


def tokenize(text: str) -> list[Tok]:
    toks, pos = [], 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise SqlError(f"unexpected character {text[pos]!r}", pos, text)
        kind = m.lastgroup
        if kind != "ws":
            val = m.group()
            if kind == "ident" and val.upper() in KEYWORDS:
                kind, val = "kw", val.upper()
            toks.append(Tok(kind, val, pos))
        pos = m.end()
    toks.append(Tok("eof", "", len(text)))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = tokenize(text)
        self.i = 0

    # token helpers
    @property
    def tok(self) -> Tok:
        return self.toks[self.i]

    def error(self, msg: str, tok: Tok | None = None, cls=SqlError):
        tok = tok or self.tok
        return cls(msg, tok.pos, self.text)

    def at_kw(self, *kws) -> bool:
        return self.tok.kind == "kw" and self.tok.text in kws

    def at_op(self, *ops) -> bool:
        return self.tok.kind == "op" and self.tok.text in ops

    def take(self) -> Tok:
        t = self.tok
        self.i += 1
        return t

    def expect_kw(self, kw: str) -> Tok:
        if not self.at_kw(kw):
            raise self.error(f"expected {kw}, found {self.tok.text or 'end of input'!r}")
        return self.take()

    def expect_op(self, op: str) -> Tok:
        if not self.at_op(op):
            raise self.error(f"expected {op!r}, found {self.tok.text or 'end of input'!r}")
        return self.take()

    def ident(self) -> str:
        if self.tok.kind != "ident":
            raise self.error(f"expected identifier, found {self.tok.text or 'end of input'!r}")
        return self.take().text

    def check_unsupported(self):
        t = self.tok
        if t.kind == "kw" and t.text in ("REGEXP", "RLIKE", "LIKE"):
            raise self.error(f"unsupported construct: {t.text} (pattern matching)",
                             cls=UnsupportedConstruct)
        if t.kind == "kw" and t.text in ("DISTINCT", "IN", "BETWEEN", "IS", "NULL", "CASE",
                                         "LEFT", "RIGHT", "OUTER", "CROSS", "WITH", "NOT"):
            raise self.error(f"unsupported construct: {t.text}", cls=UnsupportedConstruct)

    # grammar
    def query(self) -> Query:
        self.check_unsupported()
        self.expect_kw("SELECT")
        self.check_unsupported()
        items = [self.select_item()]
        while self.at_op(","):
            self.take()
            items.append(self.select_item())
        self.expect_kw("FROM")
        tables = [self.table_ref()]
        combine, on = None, []
        if self.at_kw("UNION"):
            combine = "union"
            while self.at_kw("UNION"):
                self.take()
                if self.at_kw("ALL"):
                    self.take()
                tables.append(self.table_ref())
        elif self.at_kw("JOIN", "INNER"):
            combine = "join"
            while self.at_kw("JOIN", "INNER"):
                if self.take().text == "INNER":
                    self.expect_kw("JOIN")
                tables.append(self.table_ref())
                self.expect_kw("ON")
                on.append(self.expr())
        self.check_unsupported()
        where = group = having = None
        order: list = []
        limit = None
        if self.at_kw("WHERE"):
            self.take()
            where = self.expr()
        if self.at_kw("GROUP"):
            self.take()
            self.expect_kw("BY")
            group = [self.expr()]
            while self.at_op(","):
                self.take()
                group.append(self.expr())
        if self.at_kw("HAVING"):
            self.take()
            having = self.expr()
        if self.at_kw("ORDER"):
            self.take()
            self.expect_kw("BY")
            order.append(self.order_item())
            while self.at_op(","):
                self.take()
                order.append(self.order_item())
        if self.at_kw("LIMIT"):
            self.take()
            if self.tok.kind != "num":
                raise self.error("LIMIT needs an integer")
            limit = int(self.take().text)
        if self.at_op(";"):
            self.take()
        self.check_unsupported()
        if self.tok.kind != "eof":
            raise self.error(f"unexpected {self.tok.text!r}")
        return Query(tuple(items), tuple(tables), combine, tuple(on), where,
                     tuple(group or ()), having, tuple(order), limit)

    def select_item(self) -> SelectItem:
        e = self.expr()
        alias = None
        if self.at_kw("AS"):
            self.take()
            alias = self.ident()
        return SelectItem(e, alias)

    def table_ref(self) -> TableRef:
        name = self.ident()
        at = self.expect_op("@")
        tag = self.ident()
        m = re.fullmatch(r"P(\d+)", tag)
        if not m or int(m.group(1)) < 1:
            raise self.error(f"party tag must look like P1, P2, ...; got {tag!r}", at)
        alias = None
        if self.at_kw("AS"):
            self.take()
            alias = self.ident()
        elif self.tok.kind == "ident":
            alias = self.ident()
        return TableRef(name, int(m.group(1)) - 1, alias)

    def order_item(self):
        e = self.expr()
        desc = False
        if self.at_kw("ASC", "DESC"):
            desc = self.take().text == "DESC"
        return (e, desc)

    def expr(self):
        left = self.and_expr()
        while self.at_kw("OR"):
            self.take()
            left = Bin("OR", left, self.and_expr())
        return left

    def and_expr(self):
        left = self.cmp_expr()
        while self.at_kw("AND"):
            self.take()
            left = Bin("AND", left, self.cmp_expr())
        return left

    def cmp_expr(self):
        left = self.add_expr()
        self.check_unsupported()
        if self.at_op("=", "<>", "!=", "<", "<=", ">", ">="):
            op = self.take().text
            op = "!=" if op == "<>" else op
            left = Bin(op, left, self.add_expr())
            self.check_unsupported()
        return left

    def add_expr(self):
        left = self.primary()
        while self.at_op("+", "-"):
            op = self.take().text
            left = Bin(op, left, self.primary())
        if self.at_op("*", "/"):
            raise self.error("unsupported construct: multiplication/division", cls=UnsupportedConstruct)
        return left

    def primary(self):
        t = self.tok
        self.check_unsupported()
        if t.kind == "num":
            self.take()
            return Lit(int(t.text))
        if t.kind == "str":
            self.take()
            return Lit(t.text[1:-1].replace("''", "'"))
        if self.at_op("("):
            self.take()
            if self.at_kw("SELECT"):
                raise self.error("unsupported construct: subquery", cls=UnsupportedConstruct)
            e = self.expr()
            self.expect_op(")")
            return e
        if self.at_op("*"):
            self.take()
            return Star()
        if t.kind == "ident":
            name = self.take().text
            if self.at_op("("):
                up = name.upper()
                if up not in AGGREGATES + SCALARS:
                    kind = "string function" if up in UNSUPPORTED_FUNCS else "user-defined function"
                    raise self.error(f"unsupported construct: {kind} {name}", t, UnsupportedConstruct)
                self.take()
                args = []
                if not self.at_op(")"):
                    args.append(self.expr())
                    while self.at_op(","):
                        self.take()
                        args.append(self.expr())
                self.expect_op(")")
                return Func(up, tuple(args))
            if self.at_op("."):
                self.take()
                return Col(name, self.ident())
            return Col(None, name)
        raise self.error(f"unexpected {t.text or 'end of input'!r}")


def parse_query(text: str) -> Query:
    return _Parser(text).query()


# -- printing -----------------------------------------------------------------------

_PREC = {"OR": 1, "AND": 2, "=": 3, "!=": 3, "<": 3, "<=": 3, ">": 3, ">=": 3, "+": 4, "-": 4}


def print_expr(e, dialect: str = "canonical") -> str:
    if isinstance(e, Col):
        return f"{e.qual}.{e.name}" if e.qual else e.name
    if isinstance(e, Lit):
        if isinstance(e.value, str):
            return "'" + e.value.replace("'", "''") + "'"
        return str(e.value)
    if isinstance(e, Star):
        return "*"
    if isinstance(e, Func):
        name = e.name
        if dialect == "sqlite":
            name = {"GREATEST": "max", "LEAST": "min"}.get(name, name)
        return f"{name}(" + ", ".join(print_expr(a, dialect) for a in e.args) + ")"
    if isinstance(e, Bin):
        p = _PREC[e.op]
        left = print_expr(e.left, dialect)
        right = print_expr(e.right, dialect)
        if isinstance(e.left, Bin) and _PREC[e.left.op] < p:
            left = f"({left})"
        if isinstance(e.right, Bin) and _PREC[e.right.op] <= p:
            right = f"({right})"
        return f"{left} {e.op} {right}"
    raise SqlError(f"cannot print {e!r}")


def print_sql(q: Query) -> str:
    """Canonical single-line text; ``parse_query(print_sql(q)) == q``."""
    parts = ["SELECT " + ", ".join(print_expr(i.expr) + (f" AS {i.alias}" if i.alias else "")
                                   for i in q.select)]

    def tref(t: TableRef) -> str:
        return f"{t.name}@P{t.party + 1}" + (f" AS {t.alias}" if t.alias else "")

    src = tref(q.tables[0])
    if q.combine == "union":
        src += "".join(f" UNION {tref(t)}" for t in q.tables[1:])
    elif q.combine == "join":
        src += "".join(f" JOIN {tref(t)} ON {print_expr(on)}" for t, on in zip(q.tables[1:], q.join_on))
    parts.append("FROM " + src)
    if q.where is not None:
        parts.append("WHERE " + print_expr(q.where))
    if q.group_by:
        parts.append("GROUP BY " + ", ".join(print_expr(g) for g in q.group_by))
    if q.having is not None:
        parts.append("HAVING " + print_expr(q.having))
    if q.order_by:
        parts.append("ORDER BY " + ", ".join(print_expr(e) + (" DESC" if d else "") for e, d in q.order_by))
    if q.limit is not None:
        parts.append(f"LIMIT {q.limit}")
    return " ".join(parts)


# -- relational operators ------------------------------------------------------------

@dataclass(frozen=True)
class Scan:
    table: str
    party: int
    alias: str | None
    columns: tuple[str, ...]

    @property
    def owners(self) -> frozenset:
        return frozenset({self.party})


@dataclass(frozen=True)
class Concat:
    children: tuple

    @property
    def owners(self) -> frozenset:
        return frozenset().union(*(c.owners for c in self.children))


@dataclass(frozen=True)
class EquiJoin:
    children: tuple
    keys: tuple        # Col per child, all compared for equality

    @property
    def owners(self) -> frozenset:
        return frozenset().union(*(c.owners for c in self.children))


@dataclass(frozen=True)
class ThetaJoin:
    children: tuple
    pred: object

    @property
    def owners(self) -> frozenset:
        return frozenset().union(*(c.owners for c in self.children))


@dataclass(frozen=True)
class Filter:
    pred: object
    child: object

    @property
    def owners(self) -> frozenset:
        return self.child.owners


@dataclass(frozen=True)
class AggCall:
    kind: str
    arg: object        # Col or None for COUNT(*)
    name: str


@dataclass(frozen=True)
class GroupByAgg:
    keys: tuple        # Col tuple (composite key when several)
    aggs: tuple        # AggCall tuple
    child: object

    @property
    def owners(self) -> frozenset:
        return self.child.owners


@dataclass(frozen=True)
class OrderByLimit:
    col: object
    desc: bool
    limit: int | None
    tiebreak: tuple
    child: object

    @property
    def owners(self) -> frozenset:
        return self.child.owners


@dataclass(frozen=True)
class Project:
    cols: tuple        # (expr, output name)
    child: object

    @property
    def owners(self) -> frozenset:
        return self.child.owners


def children_of(op) -> tuple:
    if isinstance(op, (Concat, EquiJoin, ThetaJoin)):
        return op.children
    if isinstance(op, Scan):
        return ()
    return (op.child,)


def scans(op) -> list[Scan]:
    if isinstance(op, Scan):
        return [op]
    out = []
    for c in children_of(op):
        out.extend(scans(c))
    return out


def split_and(e) -> list:
    if isinstance(e, Bin) and e.op == "AND":
        return split_and(e.left) + split_and(e.right)
    return [] if e is None else [e]


def _agg_name(f: Func) -> str:
    arg = "star" if not f.args or isinstance(f.args[0], Star) else print_expr(f.args[0]).replace(".", "_")
    return f"_{f.name.lower()}_{arg}"


class _Resolver:
    def __init__(self, q: Query, schema: Schema, text: str | None):
        self.q, self.schema, self.text = q, schema, text
        self.aliases: dict[str, TableSchema] = {}
        self.tables: list[TableSchema] = []
        for t in q.tables:
            ts = schema.table(t.name, t.party)
            self.tables.append(ts)
            if t.alias:
                if t.alias in self.aliases:
                    raise SqlError(f"duplicate alias {t.alias}")
                self.aliases[t.alias] = ts

    def column(self, c: Col) -> Column:
        if c.qual is not None:
            if c.qual in self.aliases:
                return self.aliases[c.qual].column(c.name)
            matches = [t for t in self.tables if t.name == c.qual]
            if len(matches) != 1:
                raise SqlError(f"unresolved or ambiguous table reference {c.qual!r}")
            return matches[0].column(c.name)
        found = {t.qualified: t.column(c.name) for t in self.tables if c.name in t.names}
        if not found:
            raise SqlError(f"unresolved column {c.name!r}")
        if self.q.combine == "join" and len(found) > 1:
            raise SqlError(f"ambiguous column reference {c.name!r}")
        return next(iter(found.values()))

    def expr(self, e, allow_agg=False, out_names=()):
        """Resolve column references and string literals (to enum codes)."""
        if isinstance(e, Col):
            if e.qual is None and e.name in out_names:
                return e
            self.column(e)
            return e
        if isinstance(e, Lit) or isinstance(e, Star):
            return e
        if isinstance(e, Func):
            if e.name in AGGREGATES and not allow_agg:
                raise SqlError(f"aggregate {e.name} outside SELECT/HAVING")
            return Func(e.name, tuple(self.expr(a, allow_agg, out_names) for a in e.args))
        if isinstance(e, Bin):
            left = self.expr(e.left, allow_agg, out_names)
            right = self.expr(e.right, allow_agg, out_names)
            if isinstance(right, Lit) and isinstance(right.value, str):
                if not isinstance(left, Col):
                    raise SqlError("string literal compared with a non-column")
                right = Lit(self.column(left).code(right.value))
            if isinstance(left, Lit) and isinstance(left.value, str):
                raise SqlError("string literal must be on the right of a comparison")
            return Bin(e.op, left, right)
        raise SqlError(f"cannot resolve {e!r}")

    def resolve(self):
        q = self.q
        if q.combine == "union":
            first = self.tables[0].names
            for t in self.tables[1:]:
                if t.names != first:
                    raise SqlError(f"UNION of {t.qualified} with mismatched columns")
        leaves = tuple(Scan(t.name, t.party, r.alias, tuple(t.names)) for t, r in zip(self.tables, q.tables))
        if q.combine == "union":
            op = Concat(leaves)
        elif q.combine == "join":
            keys, theta = self.join_keys()
            op = EquiJoin(leaves, keys) if not theta else ThetaJoin(leaves, theta)
        else:
            op = leaves[0]
        if q.where is not None:
            op = Filter(self.expr(q.where), op)
        aggs: dict[Func, AggCall] = {}
        sel_aliases = {}
        for it in q.select:
            if isinstance(it.expr, Func) and it.expr.name in AGGREGATES:
                aggs[it.expr] = self.agg_call(it.expr, it.alias)
                if it.alias:
                    sel_aliases[it.alias] = aggs[it.expr].name
        having = None
        if q.having is not None:
            having = self._lift_aggs(q.having, aggs)
        if q.group_by or aggs:
            keys = []
            for g in q.group_by:
                if isinstance(g, Func) and g.name == "CONCAT":
                    keys.extend(self.expr(a) for a in g.args)
                elif isinstance(g, Col):
                    keys.append(self.expr(g))
                else:
                    raise UnsupportedConstruct("GROUP BY accepts columns and CONCAT of columns only")
            for k in keys:
                if not isinstance(k, Col):
                    raise UnsupportedConstruct("CONCAT group keys must be columns")
            op = GroupByAgg(tuple(keys), tuple(aggs.values()), op)
            if having is not None:
                op = Filter(having, op)
        elif having is not None:
            raise SqlError("HAVING without GROUP BY")
        out_names = {a.name for a in aggs.values()} | set(sel_aliases)
        if q.order_by:
            (e, desc), *rest = q.order_by
            col = self._order_col(e, aggs, sel_aliases)
            tie = []
            for e2, d2 in rest:
                if d2:
                    raise UnsupportedConstruct("secondary ORDER BY columns must be ascending")
                tie.append(self._order_col(e2, aggs, sel_aliases))
            op = OrderByLimit(col, desc, q.limit, tuple(tie), op)
        elif q.limit is not None:
            raise UnsupportedConstruct("LIMIT without ORDER BY")
        cols = []
        for it in q.select:
            e = it.expr
            if isinstance(e, Func) and e.name in AGGREGATES:
                name = aggs[e].name
                cols.append((Col(None, name), it.alias or name))
            else:
                e = self.expr(e, out_names=out_names)
                if not isinstance(e, Col):
                    raise UnsupportedConstruct("SELECT list accepts columns and aggregates only")
                cols.append((e, it.alias or e.name))
        if not self._identity_projection(op, cols):
            op = Project(tuple(cols), op)
        return op

    def _identity_projection(self, op, cols) -> bool:
        inner = op.child if isinstance(op, OrderByLimit) else op
        if isinstance(inner, GroupByAgg):
            names = [k.name for k in inner.keys] + [a.name for a in inner.aggs]
            return [c.name for c, _ in cols] == names and all(c.name == n for c, n in cols)
        return False

    def _order_col(self, e, aggs, sel_aliases) -> Col:
        if isinstance(e, Func) and e in aggs:
            return Col(None, aggs[e].name)
        if isinstance(e, Col) and e.qual is None and e.name in sel_aliases:
            return Col(None, sel_aliases[e.name])
        if isinstance(e, Col):
            return self.expr(e)
        raise UnsupportedConstruct("ORDER BY accepts a column or aggregate")

    def _lift_aggs(self, e, aggs):
        if isinstance(e, Func) and e.name in AGGREGATES:
            if e not in aggs:
                aggs[e] = self.agg_call(e, None)
            return Col(None, aggs[e].name)
        if isinstance(e, Bin):
            return Bin(e.op, self._lift_aggs(e.left, aggs), self._lift_aggs(e.right, aggs))
        return self.expr(e)

    def agg_call(self, f: Func, alias) -> AggCall:
        name = alias or _agg_name(f)
        if f.name == "COUNT":
            if len(f.args) != 1 or not isinstance(f.args[0], Star):
                raise UnsupportedConstruct("only COUNT(*) is supported")
            return AggCall("COUNT", None, name)
        if len(f.args) != 1 or not isinstance(f.args[0], Col):
            raise UnsupportedConstruct(f"{f.name} takes one column")
        return AggCall(f.name, self.expr(f.args[0]), name)

    def join_keys(self):
        """Equality ON clauses forming one key class across all tables."""
        q = self.q
        refs = [t.alias or t.name for t in q.tables]
        key_of: dict[str, Col] = {}
        for on in q.join_on:
            for term in split_and(on):
                if not (isinstance(term, Bin) and term.op == "=" and isinstance(term.left, Col)
                        and isinstance(term.right, Col)):
                    return None, on
                for c in (term.left, term.right):
                    self.column(c)
                    if c.qual is None:
                        raise SqlError("join keys must be qualified")
                    if c.qual in key_of and key_of[c.qual].name != c.name:
                        return None, on
                    key_of[c.qual] = c
        missing = [r for r in refs if r not in key_of]
        if missing:
            raise SqlError(f"tables {missing} not constrained by a join key")
        return tuple(key_of[r] for r in refs), None


def resolve(q: Query, schema: Schema, text: str | None = None):
    return _Resolver(q, schema, text).resolve()


def parse(sql: str, schema: Schema):
    """Parse and resolve ``sql`` into a relational operator structure."""
    return resolve(parse_query(sql), schema, sql)


def validate_bounds(op, schema: Schema) -> dict:
    """Per-leaf bound report; raises :class:`BoundError` on a missing bound."""
    rows = {}
    for s in scans(op):
        t = schema.table(s.table, s.party)
        if t.bound is None:
            raise BoundError(f"table {t.qualified} has no declared row bound")
        rows[t.qualified] = t.bound
    return {"leaves": rows, "total_rows": sum(rows.values())}


def check_rows(schema: Schema, data: dict) -> None:
    """Refuse tables with more rows than declared or out-of-width values."""
    for (name, party), rows in data.items():
        t = schema.table(name, party)
        if t.bound is not None and len(rows) > t.bound:
            raise BoundError(f"{t.qualified}: {len(rows)} rows exceed declared bound {t.bound}")
        for r in rows:
            for c in t.columns:
                v = r[c.name]
                if v < 0 or v >> c.width:
                    raise BoundError(f"{t.qualified}: value {v} overflows {c.name} ({c.width} bits)")


# -- CSV --------------------------------------------------------------------------

def read_csv(text: str, table: TableSchema) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or sorted(reader.fieldnames) != sorted(table.names):
        raise SchemaError(f"CSV header {reader.fieldnames} does not match {table.qualified}")
    rows = []
    for line, rec in enumerate(reader, start=2):
        try:
            row = {k: int(v) for k, v in rec.items()}
        except ValueError:
            raise SchemaError(f"{table.qualified} line {line}: non-integer value") from None
        for c in table.columns:
            if row[c.name] < 0 or row[c.name] >> c.width:
                raise BoundError(f"{table.qualified} line {line}: {row[c.name]} overflows "
                                 f"{c.name} ({c.width} bits)")
        rows.append(row)
    return rows


def write_csv(rows: Iterable[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([r[c] for c in columns])
    return buf.getvalue()


# -- plaintext SQL oracle -----------------------------------------------------------

def oracle(q: Query, schema: Schema, data: dict) -> list[tuple]:
    """Run the query on one machine with sqlite over the union of all data."""
    con = sqlite3.connect(":memory:")
    wide = {}
    for (name, party), t in schema.tables.items():
        cols = []
        for c in t.columns:
            big = c.width > 62
            wide[(name, c.name)] = wide.get((name, c.name), False) or big
            cols.append(f"{c.name} {'TEXT' if big else 'INTEGER'}")
        con.execute(f"CREATE TABLE {name}_p{party + 1} ({', '.join(cols)})")
        rows = data.get((name, party), [])
        if rows:
            vals = [tuple(f"{r[c.name]:080x}" if c.width > 62 else r[c.name] for c in t.columns)
                    for r in rows]
            ph = ", ".join("?" * len(t.columns))
            con.executemany(f"INSERT INTO {name}_p{party + 1} VALUES ({ph})", vals)
    res = _Resolver(q, schema, None)
    rq = _lit_codes(q, res)
    sql = _sqlite_text(rq)
    out = []
    for row in con.execute(sql):
        out.append(tuple(int(v, 16) if isinstance(v, str) else v for v in row))
    con.close()
    return out


def _lit_codes(q: Query, res: _Resolver) -> Query:
    def fix(e):
        if isinstance(e, Bin):
            left, right = fix(e.left), fix(e.right)
            if isinstance(right, Lit) and isinstance(right.value, str) and isinstance(left, Col):
                right = Lit(res.column(left).code(right.value))
            return Bin(e.op, left, right)
        if isinstance(e, Func):
            return Func(e.name, tuple(fix(a) for a in e.args))
        return e
    return Query(q.select, q.tables, q.combine, q.join_on,
                 None if q.where is None else fix(q.where), q.group_by,
                 None if q.having is None else fix(q.having), q.order_by, q.limit)


def _sqlite_text(q: Query) -> str:
    sel = ", ".join(print_expr(i.expr, "sqlite") + (f" AS {i.alias}" if i.alias else "") for i in q.select)
    if q.combine == "union":
        inner = " UNION ALL ".join(f"SELECT * FROM {t.name}_p{t.party + 1}" for t in q.tables)
        src = f"({inner}) AS u"
    else:
        def tref(t):
            return f"{t.name}_p{t.party + 1}" + (f" AS {t.alias}" if t.alias else "")
        src = tref(q.tables[0])
        for t, on in zip(q.tables[1:], q.join_on):
            src += f" JOIN {tref(t)} ON {print_expr(on, 'sqlite')}"
    parts = [f"SELECT {sel} FROM {src}"]
    if q.where is not None:
        parts.append("WHERE " + print_expr(q.where, "sqlite"))
    if q.group_by:
        keys = []
        for g in q.group_by:
            keys.extend(g.args if isinstance(g, Func) and g.name == "CONCAT" else [g])
        parts.append("GROUP BY " + ", ".join(print_expr(k, "sqlite") for k in keys))
    if q.having is not None:
        parts.append("HAVING " + print_expr(q.having, "sqlite"))
    if q.order_by:
        parts.append("ORDER BY " + ", ".join(print_expr(e, "sqlite") + (" DESC" if d else "")
                                             for e, d in q.order_by))
    if q.limit is not None:
        parts.append(f"LIMIT {q.limit}")
    return " ".join(parts)


# -- fixtures ---------------------------------------------------------------------------

@dataclass
class Fixture:
    name: str
    m: int
    n: int
    ff: float
    seed: int
    schema: Schema
    sql: str
    data: dict = field(repr=False)     # (table, party) -> list of row dicts

    @property
    def query(self) -> Query:
        return parse_query(self.sql)

    def relop(self):
        return parse(self.sql, self.schema)


FIXTURES = ("q1", "q2", "q3", "tpch_rev")
DIAG_RANGE = (1, 2000)
CREDIT_RANGE = (300, 850)
USER_RANGE = (1, 1_000_000)
SSN_RANGE = (1, 999_999_999)
CREDIT_THRESHOLD = 100


def joint_bound(n: int, ff: float) -> int:
    return max(1, math.ceil(ff * n - 1e-9))


def _schema_for(name: str, m: int, n: int, ff: float) -> Schema:
    jb = joint_bound(n, ff)
    tables = {}
    for p in range(m):
        if name == "q1":
            cols = (Column("diag", 16, *DIAG_RANGE), Column("has_cdiff", 2, enum=(("False", 1), ("True", 2))))
            t = TableSchema("diagnoses", p, cols, n, jb)
        elif name == "q2":
            cols = (Column("user_id", 32, *USER_RANGE), Column("password", 256))
            t = TableSchema("passwords", p, cols, n, n, ("user_id",))
        elif name == "q3":
            cols = (Column("ssn", 32, *SSN_RANGE), Column("credit", 10, *CREDIT_RANGE),
                    Column("year", 12, 2000, 2030))
            t = TableSchema("credit_scores", p, cols, n, jb, ("ssn", "year"))
        elif name == "tpch_rev":
            cols = (Column("nation", 16, 1, 25), Column("revenue", 16, 1, 10_000), Column("discount", 4, 0, 10))
            t = TableSchema("lineitem", p, cols, n, min(jb, 25))
        else:
            raise SqlError(f"unknown fixture {name!r}")
        tables[(t.name, p)] = t
    return Schema(tables)


def fixture_sql(name: str, m: int) -> str:
    ps = range(1, m + 1)
    if name == "q1":
        src = " UNION ".join(f"diagnoses@P{k}" for k in ps)
        return (f"SELECT diag, COUNT(*) AS cnt FROM {src} WHERE has_cdiff = 'True' "
                f"GROUP BY diag ORDER BY cnt DESC, diag LIMIT 10")
    if name == "q2":
        src = " UNION ".join(f"passwords@P{k}" for k in ps)
        return (f"SELECT user_id FROM {src} GROUP BY CONCAT(user_id, password) "
                f"HAVING COUNT(*) > 1")
    if name == "q3":
        src = "credit_scores@P1 AS c1" + "".join(
            f" JOIN credit_scores@P{k} AS c{k} ON c1.ssn = c{k}.ssn" for k in ps if k > 1)
        cs = ", ".join(f"c{k}.credit" for k in ps)
        years = " AND ".join(f"c{k}.year = 2019" for k in ps)
        return (f"SELECT c1.ssn FROM {src} WHERE GREATEST({cs}) - LEAST({cs}) > "
                f"{CREDIT_THRESHOLD} AND {years}")
    if name == "tpch_rev":
        src = " UNION ".join(f"lineitem@P{k}" for k in ps)
        return (f"SELECT nation, SUM(revenue) AS rev FROM {src} WHERE discount <= 3 "
                f"GROUP BY nation ORDER BY rev DESC, nation LIMIT 5")
    raise SqlError(f"unknown fixture {name!r}")


def fixture(name: str, m: int = 4, n: int = 16, ff: float = 0.5, seed: int = 0) -> Fixture:
    """Deterministic seeded fixture.  ``ff`` is the fraction of each party's
    rows that survive its local filter (for q2: the password reuse rate)."""
    if name not in FIXTURES:
        raise SqlError(f"unknown fixture {name!r}")
    if m < 2 or n < 1 or not 0 < ff <= 1:
        raise SqlError("fixture needs m >= 2, n >= 1, 0 < ff <= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, m, n, int(ff * 1000), FIXTURES.index(name)]))
    schema = _schema_for(name, m, n, ff)
    data = {}
    keep = joint_bound(n, ff)
    if name == "q1":
        n_diag = max(4, 2 * keep)
        diags = rng.choice(np.arange(1, 1 + 3 * n_diag), size=n_diag, replace=False)
        for p in range(m):
            rows = []
            for k in range(n):
                hit = k < keep
                weights = 1.0 / np.arange(1, n_diag + 1)
                d = int(rng.choice(diags, p=weights / weights.sum()))
                rows.append({"diag": d, "has_cdiff": 2 if hit else 1})
            rng.shuffle(rows)
            data[("diagnoses", p)] = rows
    elif name == "q2":
        pool = rng.choice(np.arange(USER_RANGE[0], 4 * n * m + 1), size=2 * n, replace=False)
        shared = {int(u): int(rng.integers(1, 1 << 63)) << 190 | int(rng.integers(0, 1 << 62))
                  for u in pool}
        for p in range(m):
            users = rng.choice(pool, size=n, replace=False)
            rows = []
            for u in users:
                u = int(u)
                if rng.random() < ff:
                    h = shared[u]
                else:
                    h = int(rng.integers(1, 1 << 63)) << 190 | int(rng.integers(0, 1 << 62)) | (p + 1) << 180
                rows.append({"user_id": u, "password": h})
            data[("passwords", p)] = rows
    elif name == "q3":
        core = max(1, keep // 2)
        pool = rng.choice(np.arange(100_000_000, 100_000_000 + 10 * n * m), size=core + keep * 2,
                          replace=False)
        core_ssn, extra = pool[:core], pool[core:]
        for p in range(m):
            pick = list(core_ssn) + list(rng.choice(extra, size=keep - core, replace=False))
            rows = []
            for s in pick:
                rows.append({"ssn": int(s), "credit": int(rng.integers(CREDIT_RANGE[0], CREDIT_RANGE[1] + 1)),
                             "year": 2019})
            others = rng.choice(pool, size=n - keep, replace=True) if n > keep else []
            for s in others:
                rows.append({"ssn": int(s), "credit": int(rng.integers(CREDIT_RANGE[0], CREDIT_RANGE[1] + 1)),
                             "year": int(rng.integers(2010, 2019))})
            uniq = {(r["ssn"], r["year"]): r for r in rows}
            rows = list(uniq.values())
            rng.shuffle(rows)
            data[("credit_scores", p)] = rows
    else:
        jb = schema.table("lineitem", 0).joint_bound
        for p in range(m):
            rows = []
            nations = rng.choice(np.arange(1, 26), size=min(jb, 25), replace=False)
            for k in range(n):
                survive = rng.random() < ff
                rows.append({"nation": int(rng.choice(nations)) if survive else int(rng.integers(1, 26)),
                             "revenue": int(rng.integers(1, 2000)),
                             "discount": int(rng.integers(0, 4)) if survive else int(rng.integers(4, 11))})
            data[("lineitem", p)] = rows
    return Fixture(name, m, n, ff, seed, schema, fixture_sql(name, m), data)
