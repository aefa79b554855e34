"""GPU-hour cost of recovering one image end to end.

Without an encoding defense one batch inversion suffices (``t`` hours). Under
InstaHide the attacker inverts every batch of ``T`` epochs, inverts ``n`` more
encodings to train a similarity network (plus 10 hours of training), then
clusters ``N*T`` encodings at a cost quadratic in their number (1/6 hour per
5,000 encodings).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

DEFENSES = ("none", "gradprune", "instahide")
TABLE_SIZES = (5_000, 50_000, 500_000)


@dataclass
class CostInputs:
    N: float
    T: float = 50
    b: float = 128
    t: float = 0.25
    n: float = 10_000
    defense: str = "instahide"


def estimate_hours(c: CostInputs) -> float:
    for name in ("N", "T", "b", "t", "n"):
        if not getattr(c, name) > 0:
            raise ValueError(f"{name} must be positive, got {getattr(c, name)}")
    if c.defense not in DEFENSES:
        raise ValueError(f"unknown defense {c.defense!r}; expected one of {DEFENSES}")
    if c.defense != "instahide":
        return c.t
    nt = c.N * c.T
    return (nt / c.b) * c.t + (c.n / c.b) * c.t + 10 + (1 / 6) * (nt / 5e3) ** 2


def cost_table(sizes=TABLE_SIZES, **overrides) -> list[dict]:
    rows = []
    for N in sizes:
        row = {"N": N}
        for d in DEFENSES:
            row[d] = estimate_hours(CostInputs(N=N, defense=d, **overrides))
        rows.append(row)
    return rows


def format_table(rows, fmt: str = "text") -> str:
    """Rounded to two decimals here and only here."""
    headers = ["N", "No defense", "GradPrune", "InstaHide"]
    cells = [[f"{r['N']:,}", f"{r['none']:,.2f}", f"{r['gradprune']:,.2f}", f"{r['instahide']:,.2f}"]
             for r in rows]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(headers)
        for r in rows:
            w.writerow([r["N"], f"{r['none']:.2f}", f"{r['gradprune']:.2f}", f"{r['instahide']:.2f}"])
        return buf.getvalue()
    widths = [max(len(h), *(len(c[i]) for c in cells)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.rjust(wd) for h, wd in zip(headers, widths))]
    lines += ["  ".join(c.rjust(wd) for c, wd in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"
