"""Command-line driver: plan, run, cost, bench, fixture.

Exit codes: 0 success, 1 protocol abort, 2 invalid input or plan error.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from . import engine as en
from . import planner as pl
from . import sqlfront as sf
from .authshare import ProtocolAbort
from .circuit import CircuitError
from .costmodel import CostError, CostParams, parse_matrix
from .transport import make_transport

EXIT_OK, EXIT_ABORT, EXIT_INVALID = 0, 1, 2


@dataclass
class RunConfig:
    schema: sf.Schema
    data: dict
    m: int
    transport: str = "inprocess"
    seed: int = 0
    kappa: int = 128
    mode: str = "serial"

    def __post_init__(self):
        owners = self.schema.parties
        if self.m != len(owners) or list(owners) != list(range(self.m)):
            raise sf.SchemaError(f"schema owners {[p + 1 for p in owners]} do not match m={self.m}")


# -- input loading ---------------------------------------------------------------

def _load_query_schema(args) -> tuple[str, sf.Schema, sf.Fixture | None]:
    if getattr(args, "fixture", None):
        fx = sf.fixture(args.fixture, args.m, args.n, args.ff, args.seed)
        return fx.sql, fx.schema, fx
    if not args.query or not args.schema:
        raise sf.SqlError("give --query and --schema, or --fixture")
    sql = Path(args.query).read_text().strip()
    schema = sf.load_schema(Path(args.schema).read_text())
    return sql, schema, None


def _load_data(args, schema: sf.Schema) -> dict:
    data = {}
    specs = list(args.data or [])
    if args.data_dir:
        d = Path(args.data_dir)
        for (name, party), t in schema.tables.items():
            p = d / f"{t.qualified}.csv"
            if p.exists():
                specs.append(f"{t.qualified}={p}")
    for spec in specs:
        if "=" not in spec:
            raise sf.SchemaError(f"--data expects table@Pk=path, got {spec!r}")
        qual, path = spec.split("=", 1)
        name, _, pk = qual.partition("@")
        if not pk.upper().startswith("P") or not pk[1:].isdigit():
            raise sf.SchemaError(f"bad table reference {qual!r}")
        t = schema.table(name, int(pk[1:]) - 1)
        data[(name, t.party)] = sf.read_csv(Path(path).read_text(), t)
    return data


def _params(args, m: int) -> CostParams | None:
    path = getattr(args, "latency", None)
    if not path:
        return None
    L = parse_matrix(Path(path).read_text())
    if len(L) != m:
        raise CostError(f"latency matrix is {len(L)}x{len(L)}, expected {m}x{m}")
    ls = Fraction(getattr(args, "ls", None) or "1/10")
    return CostParams(ls, tuple(tuple(r) for r in L))


def _config(args) -> pl.PlannerConfig:
    shape = None
    if getattr(args, "shape", None):
        import ast
        shape = ast.literal_eval(args.shape)
    return pl.PlannerConfig(space=getattr(args, "space", "auto"),
                            split=not getattr(args, "no_split", False),
                            decompose=not getattr(args, "monolithic", False), shape=shape)


def _out(path, text: str) -> None:
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


# -- commands --------------------------------------------------------------------------

def cmd_plan(args) -> int:
    sql, schema, _ = _load_query_schema(args)
    cfg = _config(args)
    cfg.params = _params(args, len(schema.parties))
    plan = pl.make_plan(sql, schema, cfg)
    doc = plan.render(emit_circuits=args.emit_circuits, shapes=args.shapes, costs=args.costs)
    doc += f"digest: {plan.digest()}\n"
    _out(args.output, doc)
    return EXIT_OK


def cmd_run(args) -> int:
    sql, schema, fx = _load_query_schema(args)
    data = fx.data if fx is not None else _load_data(args, schema)
    rc = RunConfig(schema, data, len(schema.parties), args.transport, args.seed, args.kappa,
                   "parallel" if args.parallel else "serial")
    plan = pl.make_plan(sql, schema, _config(args))
    t = make_transport(rc.transport, rc.m)
    tamper = _local_tamper(args.tamper) if args.tamper else None
    try:
        res = en.run_tree(plan, rc.data, t, rc.seed, rc.kappa, rc.mode, tamper_local=tamper)
    except ProtocolAbort as e:
        unit = getattr(e, "unit", "?")
        sys.stderr.write(f"abort: unit={unit} edge={e.edge} party={e.party} reason={e.reason}\n")
        return EXIT_ABORT
    finally:
        if hasattr(t, "close"):
            t.close()
    rows = [dict(zip(res.columns, r)) for r in res.rows]
    _out(args.output, sf.write_csv(rows, res.columns))
    if args.metrics:
        _out(args.metrics, "\n".join(res.metrics.lines()) + "\n")
    if args.check_oracle:
        exp = sf.oracle(sf.parse_query(sql), schema, rc.data)
        if sorted(exp) != sorted(res.rows):
            sys.stderr.write("result differs from plaintext oracle\n")
            return EXIT_INVALID
        sys.stderr.write("oracle: match\n")
    return EXIT_OK


def _local_tamper(spec: str):
    """``label:kind`` with kind in range, order, duplicate (test hook)."""
    label, _, kind = spec.partition(":")
    from .tamper import tamper_rows

    def hook(lp, rows):
        return tamper_rows(lp, rows, kind) if lp.label == label else rows
    return hook


def cmd_cost(args) -> int:
    sql, schema, _ = _load_query_schema(args)
    m = len(schema.parties)
    params = _params(args, m) or pl.default_params(m)
    cfg = _config(args)
    cfg.params = params
    plan = pl.make_plan(sql, schema, cfg)
    lines = [f"chosen_shape: {pl.shape_code(plan.shape)}"]
    lines += plan.cost.lines()
    for code, total in plan.candidates:
        kind = "monolithic" if code.startswith("mono") else "candidate"
        lines.append(f"{kind} {code} cost={pl._fmt(total)}")
    text = "\n".join(lines) + "\n"
    _out(args.output, text)
    if args.out_dir:
        d = Path(args.out_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / "cost.txt").write_text(text)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["node", "offline", "online", "solder", "subtree", "total"])
        for n in plan.cost.nodes:
            w.writerow([n.name] + [f"{float(x):.6g}" for x in (n.offline, n.online, n.solder,
                                                                  n.subtree, n.total)])
        (d / "cost.csv").write_text(buf.getvalue())
        from .report import plot_cost
        plot_cost(plan, d / "cost.png")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .report import BENCH_COLUMNS, bench_rows, plot_bench
    fixtures = args.fixtures.split(",")
    ms = [int(x) for x in args.m_list.split(",")]
    ns = [int(x) for x in args.n_list.split(",")]
    ffs = [float(x) for x in args.ff_list.split(",")]
    rows = bench_rows(fixtures, ms, ns, ffs, args.seed, args.kappa)
    buf = io.StringIO()
    w = csv.DictWriter(buf, BENCH_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    text = _table(rows)
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    (d / "bench.csv").write_text(buf.getvalue())
    (d / "bench.txt").write_text(text)
    plot_bench(rows, d / "bench.png")
    sys.stdout.write(text)
    return EXIT_OK


def _table(rows) -> str:
    cols = ["fixture", "m", "n", "ff", "variant", "sim_time", "bytes", "rounds",
            "max_party_and", "joint_input_bits", "ok"]
    widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) if rows else len(c) for c in cols}
    lines = ["  ".join(c.ljust(widths[c]) for c in cols)]
    for r in rows:
        lines.append("  ".join(str(r[c]).ljust(widths[c]) for c in cols))
    return "\n".join(lines) + "\n"


def cmd_fixture(args) -> int:
    fx = sf.fixture(args.name, args.m, args.n, args.ff, args.seed)
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    (d / "query.sql").write_text(fx.sql + "\n")
    (d / "schema.ini").write_text(sf.dump_schema(fx.schema))
    for (name, party), rows in sorted(fx.data.items()):
        t = fx.schema.table(name, party)
        (d / f"{t.qualified}.csv").write_text(sf.write_csv(rows, t.names))
    sys.stdout.write(f"wrote fixture {args.name} to {d}\n")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--query", help="file holding one SQL query")
    p.add_argument("--schema", help="schema file (INI)")
    p.add_argument("--fixture", choices=sf.FIXTURES, help="use a built-in fixture instead")
    p.add_argument("--m", type=int, default=4, help="fixture party count")
    p.add_argument("--n", type=int, default=16, help="fixture rows per party")
    p.add_argument("--ff", type=float, default=0.5, help="fixture filter factor")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-split", action="store_true", help="skip local query splitting")
    p.add_argument("--monolithic", action="store_true", help="one joint unit")
    p.add_argument("--space", default="auto", choices=("auto", "all", "basic"),
                   help="tree shapes the planner considers")
    p.add_argument("--shape", help="force a shape, e.g. '((0,1),(2,3))'")
    p.add_argument("-o", "--output", help="write the main output here instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="soldertree", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("plan", help="print the plan document")
    _common(p)
    p.add_argument("--emit-circuits", action="store_true")
    p.add_argument("--shapes", action="store_true", help="list every candidate shape with its cost")
    p.add_argument("--costs", action="store_true", help="include per-unit predicted costs")
    p.add_argument("--latency", help="latency matrix file used for shape choice")
    p.add_argument("--ls", help="unit symmetric-op cost (default 1/10)")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("run", help="execute a query")
    _common(p)
    p.add_argument("--data", action="append", help="table@Pk=path.csv (repeatable)")
    p.add_argument("--data-dir", help="directory of table@Pk.csv files")
    p.add_argument("--kappa", type=int, default=128, choices=(64, 128))
    p.add_argument("--transport", default="inprocess", choices=("inprocess", "socket"))
    p.add_argument("--parallel", action="store_true", help="run disjoint subtrees concurrently")
    p.add_argument("--metrics", help="write the metrics report here")
    p.add_argument("--check-oracle", action="store_true", help="compare with plaintext SQL")
    p.add_argument("--tamper", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("cost", help="predicted cost report")
    _common(p)
    p.add_argument("--latency", help="latency matrix file")
    p.add_argument("--ls", help="unit symmetric-op cost (default 1/10)")
    p.add_argument("--out-dir", help="also write cost.txt, cost.csv and cost.png here")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("bench", help="compare monolithic, decomposed and split plans")
    p.add_argument("--fixtures", default="q1,q3")
    p.add_argument("--m-list", default="2,4")
    p.add_argument("--n-list", default="8,16")
    p.add_argument("--ff-list", default="0.1,1.0")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kappa", type=int, default=64, choices=(64, 128))
    p.add_argument("--out-dir", default="bench_out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("fixture", help="write a fixture's schema, query and CSVs")
    p.add_argument("name", choices=sf.FIXTURES)
    p.add_argument("--m", type=int, default=4)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--ff", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_fixture)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except sf.SqlError as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_INVALID
    except (sf.SchemaError, sf.BoundError, pl.PlanError, CostError, CircuitError, OSError) as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
