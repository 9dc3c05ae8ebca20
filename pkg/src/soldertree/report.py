"""Benchmark tables and figures (matplotlib, Agg backend)."""

from __future__ import annotations

from fractions import Fraction
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from . import engine as en  # noqa: E402
from . import planner as pl  # noqa: E402
from . import sqlfront as sf  # noqa: E402
from .transport import make_transport  # noqa: E402

BENCH_COLUMNS = ["fixture", "m", "n", "ff", "variant", "sim_time", "bytes", "rounds",
                 "max_party_and", "joint_input_bits", "ok"]
VARIANTS = (("monolithic", False, False), ("decomposed", False, True), ("decomposed+split", True, True))


def bench_rows(fixtures, ms, ns, ffs, seed: int = 0, kappa: int = 64,
               link=1, ls=Fraction(1, 10)) -> list[dict]:
    rows = []
    for name in fixtures:
        for m in ms:
            for n in ns:
                for ff in ffs:
                    fx = sf.fixture(name, m, n, ff, seed)
                    expected = sorted(sf.oracle(fx.query, fx.schema, fx.data))
                    for variant, split, dec in VARIANTS:
                        plan = pl.make_plan(fx.sql, fx.schema, pl.PlannerConfig(split=split, decompose=dec,
                                                                     include_monolithic=False))
                        L = [[0 if i == j else link for j in range(m)] for i in range(m)]
                        t = make_transport("inprocess", m, L, ls)
                        res = en.run_tree(plan, fx.data, t, seed, kappa)
                        rows.append(dict(
                            fixture=name, m=m, n=n, ff=ff, variant=variant,
                            sim_time=f"{float(res.metrics.simulated):.6g}",
                            bytes=res.metrics.total_bytes, rounds=res.metrics.rounds,
                            max_party_and=max(plan.per_party_and().values()),
                            joint_input_bits=plan.joint_input_bits,
                            ok=sorted(res.rows) == expected))
    return rows


def plot_bench(rows, path) -> None:
    """Grouped bars of simulated time per configuration and variant."""
    configs = []
    for r in rows:
        key = (r["fixture"], r["m"], r["n"], r["ff"])
        if key not in configs:
            configs.append(key)
    fig, ax = plt.subplots(figsize=(max(6, 0.9 * len(configs) + 2), 4))
    width = 0.8 / len(VARIANTS)
    for k, (variant, _, _) in enumerate(VARIANTS):
        ys = []
        for key in configs:
            match = [r for r in rows if (r["fixture"], r["m"], r["n"], r["ff"]) == key
                     and r["variant"] == variant]
            ys.append(float(match[0]["sim_time"]) if match else 0.0)
        ax.bar([i + k * width for i in range(len(configs))], ys, width, label=variant)
    ax.set_xticks([i + width for i in range(len(configs))])
    ax.set_xticklabels([f"{f}\nm={m} n={n}\nff={ff}" for f, m, n, ff in configs], fontsize=7)
    ax.set_yscale("log")
    ax.set_ylabel("simulated time (link units)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=100)
    plt.close(fig)


def plot_cost(plan, path) -> None:
    """Stacked per-unit predicted cost: offline, online, solder."""
    nodes = plan.cost.nodes
    names = [n.name for n in nodes]
    off = [float(n.offline) for n in nodes]
    on = [float(n.online) for n in nodes]
    sol = [float(n.solder) for n in nodes]
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(nodes) + 2), 3.5))
    ax.bar(names, off, label="offline")
    ax.bar(names, on, bottom=off, label="online")
    ax.bar(names, sol, bottom=[a + b for a, b in zip(off, on)], label="solder")
    ax.set_ylabel("predicted cost")
    ax.set_title(f"shape {pl.shape_code(plan.shape)}", fontsize=9)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=100)
    plt.close(fig)
