#!/usr/bin/env python3
"""Figures from `tensegrity-sim` result files.

Usage: plot_results.py RESULTS_DIR [FIG_DIR]

Reads every `<experiment>.json` (or `<experiment>.csv`) in RESULTS_DIR and
writes one PNG per experiment into FIG_DIR (default: RESULTS_DIR).
"""

import csv
import json
import sys
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def load(path):
    if path.suffix == ".json":
        r = json.loads(path.read_text())
        return r["experiment"], [dict(zip(r["columns"], row)) for row in r["rows"]]
    with path.open() as f:
        rows = [{k: float(v) for k, v in row.items()} for row in csv.DictReader(f)]
    return path.stem, rows


def group(rows, key):
    out = defaultdict(list)
    for row in rows:
        out[row[key]].append(row)
    return out


def length(rows, ax):
    for load, rs in sorted(group(rows, "load_n").items()):
        ax.plot([r["height_m"] for r in rs], [r["error_pct_bar"] for r in rs], "o-", label=f"{load:g} N")
    ax.set(xlabel="crosshead height (m)", ylabel="length error (% of bar)")
    ax.legend()


def stiffness(rows, ax):
    for curve, rs in sorted(group(rows, "curve").items()):
        x = [r["length_m"] for r in rs]
        (line,) = ax.plot(x, [r["realized_n"] for r in rs], lw=1, label=f"curve {int(curve)}")
        ax.plot(x, [r["commanded_n"] for r in rs], "--", color=line.get_color(), lw=1)
    ax.set(xlabel="cable length (m)", ylabel="tension (N)", title="solid: realised, dashed: commanded")
    ax.legend(fontsize="small")


def locomotion(rows, ax):
    ax.plot([r["centroid_x_m"] for r in rows], [r["centroid_y_m"] for r in rows])
    ax.set(xlabel="x (m)", ylabel="y (m)", aspect="equal", title=f"{int(rows[-1]['face_transitions'])} face transitions")


def payload(rows, ax):
    labels = [f"{r['stiffness_n_per_m']:g} N/m\n{r['payload_kg']:g} kg" for r in rows]
    ax.bar(labels, [r["height_m"] for r in rows])
    ax.set(ylabel="settled height (m)")


def min_stiffness(rows, ax):
    names = {0.0: "search", 1.0: "verify", 2.0: "rerun"}
    for role, rs in sorted(group(rows, "role").items()):
        ax.scatter([r["stiffness_n_per_m"] for r in rs], [r["height_m"] for r in rs], label=names.get(role, role))
    ax.set(xscale="log", xlabel="cable stiffness (N/m)", ylabel="settled height (m)")
    ax.legend()


PLOTS = {
    "length": length,
    "stiffness": stiffness,
    "locomotion": locomotion,
    "payload": payload,
    "min-stiffness": min_stiffness,
}


def main():
    if len(sys.argv) < 2:
        sys.exit(__doc__)
    src = Path(sys.argv[1])
    dst = Path(sys.argv[2]) if len(sys.argv) > 2 else src
    dst.mkdir(parents=True, exist_ok=True)
    files = [p for p in sorted(src.iterdir()) if p.suffix in (".json", ".csv") and not p.name.endswith(".summary.json")]
    for path in files:
        name, rows = load(path)
        if name not in PLOTS or not rows:
            continue
        fig, ax = plt.subplots(figsize=(7, 4.5))
        PLOTS[name](rows, ax)
        fig.tight_layout()
        out = dst / f"{name}.png"
        fig.savefig(out, dpi=120)
        plt.close(fig)
        print(out)


if __name__ == "__main__":
    main()
