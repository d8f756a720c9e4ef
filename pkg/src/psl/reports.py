"""CSV and text reports built only from the record store."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import numpy as np

from .records import RecordStore
from .train import RobustnessGrid, select_overdesign


def _fmt(x) -> str:
    if x is None:
        return "-"
    if isinstance(x, float) and x.is_integer():
        return str(int(x))
    return str(x)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def grid_from_store(store: RecordStore) -> RobustnessGrid | None:
    recs = store.latest("robust_err")
    if not recs:
        return None
    eps = sorted({r.keys["model_eps"] for r in recs})
    deltas = sorted({r.keys["delta"] for r in recs})
    errors = np.full((len(eps), len(deltas)), np.nan)
    for r in recs:
        errors[eps.index(r.keys["model_eps"]), deltas.index(r.keys["delta"])] = r.value
    if np.isnan(errors).any():
        raise ValueError("robust_err records do not form a complete grid")
    clean = list(errors[:, deltas.index(0)]) if 0 in deltas else []
    return RobustnessGrid(eps, deltas, errors, clean)


def format_grid(grid: RobustnessGrid) -> str:
    head = "eps\\delta " + " ".join(f"{_fmt(d):>7}" for d in grid.attack_deltas)
    lines = [head]
    for e, row in zip(grid.model_epsilons, grid.errors):
        lines.append(f"{_fmt(e):>9} " + " ".join(f"{v:7.2f}" for v in row))
    return "\n".join(lines)


def quant_rows(store: RecordStore) -> list[list]:
    """Rows (model_eps, attack, delta, tap, beta, accuracy, delta_vs_none)."""
    recs = store.latest("quant_acc")
    none = {(r.keys["model_eps"], r.keys["attack"], r.keys["delta"]): r.value
            for r in recs if r.keys["tap"] == "none"}
    rows = []
    for r in recs:
        k = r.keys
        base = none.get((k["model_eps"], k["attack"], k["delta"]))
        diff = None if base is None or k["tap"] == "none" else r.value - base
        rows.append([k["model_eps"], k["attack"], k["delta"], k["tap"], k["beta"], r.value, diff])
    return rows


def write_all(store: RecordStore, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written, summary = [], []

    grid = grid_from_store(store)
    if grid is not None:
        rows = [[e, d, grid.errors[i, j]] for i, e in enumerate(grid.model_epsilons)
                for j, d in enumerate(grid.attack_deltas)]
        written.append(_write_csv(out / "grid.csv", ["model_eps", "delta", "robust_err"], rows))
        # one curve per delta: error as a function of model epsilon
        curves = [[d] + list(grid.errors[:, j]) for j, d in enumerate(grid.attack_deltas)]
        written.append(_write_csv(out / "fig1_curves.csv",
                                  ["delta"] + [f"eps_{_fmt(e)}" for e in grid.model_epsilons], curves))
        sel = []
        for d in grid.attack_deltas:
            if d == 0:
                continue
            argmin = select_overdesign(grid, d, "grid_argmin").epsilon_star
            try:
                early = select_overdesign(grid, d, "early_stop").epsilon_star
            except ValueError:
                early = None
            sel.append([d, argmin, early])
        written.append(_write_csv(out / "overdesign.csv", ["delta", "eps_star_grid_argmin",
                                                           "eps_star_early_stop"], sel))
        summary += ["Robust error (%) under PGD_delta", format_grid(grid), "",
                    "Overdesign selection (delta: grid_argmin / early_stop)"]
        summary += [f"  {_fmt(d)}: {_fmt(a)} / {_fmt(e)}" for d, a, e in sel]
        summary.append("")

    qrows = quant_rows(store)
    if qrows:
        written.append(_write_csv(out / "quant_table.csv",
                                  ["model_eps", "attack", "delta", "tap", "beta", "accuracy",
                                   "delta_vs_none"], qrows))
        summary.append("Quantized accuracy (%), signed change vs the unquantized row")
        for eps, attack, delta, tap, beta, acc, diff in qrows:
            mark = "" if diff is None else f" ({diff:+.2f})"
            summary.append(f"  eps={_fmt(eps):>3} {attack:<8} delta={_fmt(delta):>2} "
                           f"tap={tap:<6} beta={_fmt(beta):>4}: {acc:6.2f}{mark}")
        summary.append("")

    fn = store.latest("filter_norms")
    if fn:
        table = defaultdict(dict)
        for r in fn:
            table[(r.keys["model_eps"], r.keys["layer"])][r.keys["stat"]] = r.value
        rows = [[e, layer, int(v["count"]), v["mean_linf"], v["max_linf"]]
                for (e, layer), v in table.items()]
        written.append(_write_csv(out / "filter_norms.csv",
                                  ["model_eps", "layer", "count", "mean_linf", "max_linf"], rows))
        summary.append("Filter L-inf norms (mean / max)")
        summary += [f"  eps={_fmt(e):>3} {layer:<14} {m:.4f} / {x:.4f}" for e, layer, _, m, x in rows]
        summary.append("")

    pm = store.latest("preact_mean")
    if pm:
        rows = [[r.keys["model_eps"], r.keys["tap"], r.keys["corruption"], r.value] for r in pm]
        written.append(_write_csv(out / "preact_means.csv",
                                  ["model_eps", "tap", "corruption", "mean"], rows))
        summary.append("Final pre-activation feature mean")
        summary += [f"  eps={_fmt(e):>3} {t} [{c}]: {v:+.5f}" for e, t, c, v in rows]
        summary.append("")

    ca = store.latest("corruption_acc")
    if ca:
        rows = [[r.keys["model_eps"], r.keys["corruption"], r.keys["severity"], r.value] for r in ca]
        written.append(_write_csv(out / "corruption.csv",
                                  ["model_eps", "corruption", "severity", "accuracy"], rows))
        summary.append("Average corruption accuracy (%)")
        summary += [f"  eps={_fmt(e):>3}: {v:6.2f}" for e, c, _, v in rows if c == "average"]
        summary.append("")

    text = "\n".join(summary) if summary else "no records\n"
    (out / "summary.txt").write_text(text)
    written.append(out / "summary.txt")
    return written
