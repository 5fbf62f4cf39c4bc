"""Render result grids as markdown and CSV tables (rows: samples x strategy)."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Optional

NOT_APPLICABLE = "--"
MISSING = "missing"


class NoResults(RuntimeError):
    pass


def load_grids(results_dir) -> list:
    """``[(name, grid)]`` for every ``grid-<name>.json`` in ``results_dir``."""
    d = Path(results_dir)
    if not d.is_dir():
        raise NoResults(f"no results: {d} is not a directory")
    grids = [(p.stem[len("grid-"):], json.loads(p.read_text())) for p in sorted(d.glob("grid-*.json"))]
    if not grids:
        raise NoResults(f"no results in {d}")
    return grids


def _cell_text(grid: dict, strategy: str, n: int, category: str) -> tuple:
    recs = [c for c in grid["cells"]
            if c["strategy"] == strategy and c["samples"] == n and c["category"] == category]
    if recs and all(c["status"] == "n/a" for c in recs):
        return NOT_APPLICABLE, None
    value = grid["means"].get(f"{strategy}|{n}|{category}")
    if value is None:
        return MISSING, None
    return f"{value:.2f}", round(value, 2)


def table_rows(grid: dict) -> tuple:
    """``(header, rows, best)`` where best[(row, col)] marks the winning strategy at each N."""
    plan = grid["plan"]
    cats = list(plan["categories"])
    header = ["samples", "strategy"] + cats + ["Avg."]
    lower_better = grid["metric"] == "error"
    rows, values = [], []
    for n in plan["samples"]:
        for s in plan["strategies"]:
            texts, nums = [], []
            for c in cats:
                t, v = _cell_text(grid, s, n, c)
                texts.append(t)
                nums.append(v)
            if all(v is not None for v in nums):
                avg = round(sum(nums) / len(nums), 2)
                texts.append(f"{avg:.2f}")
                nums.append(avg)
            else:
                na = all(t == NOT_APPLICABLE for t in texts)
                texts.append(NOT_APPLICABLE if na else MISSING)
                nums.append(None)
            rows.append([str(n), s] + texts)
            values.append((n, nums))
    best = set()
    for col in range(len(cats) + 1):
        by_n: dict = {}
        for r, (n, nums) in enumerate(values):
            if nums[col] is not None:
                by_n.setdefault(n, []).append((nums[col], r))
        for cands in by_n.values():
            if len(cands) < 2:
                continue
            target = min(v for v, _ in cands) if lower_better else max(v for v, _ in cands)
            best.update((r, col) for v, r in cands if v == target)
    return header, rows, best


def _title(grid: dict) -> str:
    plan = grid["plan"]
    what = "classification error (%)" if grid["metric"] == "error" else "pixel accuracy (%)"
    return f"{plan['experiment']}, adapter depth {plan['depth']}: {what}"


def render_markdown(grid: dict) -> str:
    header, rows, best = table_rows(grid)
    out = [f"### {_title(grid)}", "", "| " + " | ".join(header) + " |",
           "|" + "|".join("---" for _ in header) + "|"]
    for r, row in enumerate(rows):
        cells = row[:2] + [f"**{t}**" if (r, i) in best else t for i, t in enumerate(row[2:])]
        out.append("| " + " | ".join(cells) + " |")
    return "\n".join(out) + "\n"


def render_csv(grid: dict) -> str:
    header, rows, _ = table_rows(grid)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["experiment", "depth"] + header)
    for row in rows:
        w.writerow([grid["plan"]["experiment"], grid["plan"]["depth"]] + row)
    return buf.getvalue()


def write_report(results_dir, out_dir: Optional[str] = None) -> list:
    """Write ``report.md`` plus ``table-<name>.csv`` per grid; returns the written paths."""
    grids = load_grids(results_dir)
    out = Path(out_dir or results_dir)
    out.mkdir(parents=True, exist_ok=True)
    md = out / "report.md"
    md.write_text("\n".join(render_markdown(g) for _, g in grids))
    paths = [md]
    for name, g in grids:
        p = out / f"table-{name}.csv"
        p.write_text(render_csv(g))
        paths.append(p)
    return paths
