"""Test hooks that corrupt one party's local output before it is encoded."""

from __future__ import annotations

KINDS = ("range", "order", "duplicate")


def tamper_rows(lp, rows: list[dict], kind: str) -> list[dict]:
    """Return ``rows`` with one constraint of ``lp`` broken.

    ``range`` pushes a ranged column one past its upper bound (on the
    largest-key row when the column is the key, so order still holds),
    ``order`` swaps the first two rows, ``duplicate`` repeats a row.
    """
    rows = [dict(r) for r in rows]
    if kind not in KINDS:
        raise ValueError(f"unknown tamper kind {kind!r}; pick one of {KINDS}")
    if not rows:
        raise ValueError(f"{lp.label} has no rows to tamper with")
    if kind == "range":
        if not lp.constraints.ranges:
            raise ValueError(f"{lp.label} carries no range constraint")
        col, lo, hi = lp.constraints.ranges[0]
        w = lp.layout.col_width(col)
        bad = hi + 1 if hi + 1 < (1 << (w - 1)) else lo - 1
        if bad < 0:
            raise ValueError(f"no out-of-range value fits column {col}")
        target = rows[-1] if col in lp.layout.key else rows[0]
        target[col] = bad
        return rows
    if kind == "order" and len(rows) >= 2:
        rows[0], rows[1] = rows[1], rows[0]
        return rows
    # duplicate (also the fallback for order on a single row)
    if len(rows) < lp.bound:
        rows.append(dict(rows[-1]))
    else:
        rows[-1] = dict(rows[-2])
    return rows
