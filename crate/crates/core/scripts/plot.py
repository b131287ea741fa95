"""Figures from `foid sweep` output: python3 plot.py [results-dir]"""

import csv
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

SERIES = [("OID", 0.0), ("VoltVAr", 0.0), ("FOID", 0.01), ("FOID", 0.05), ("FOID", 0.1)]


def rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def label(s, ck):
    return f"{s} ck={ck:g}" if s == "FOID" else s


def series(data, s, ck, col):
    pts = [(float(r["ratio"]), float(r[col])) for r in data if r["strategy"] == s and float(r["ck"]) == ck]
    return zip(*pts) if pts else ([], [])


def main(out):
    sweep = rows(out / "sweep.csv")
    for col, ylabel, name, log in [
        ("total_curtailment_kw", "total curtailment (kW)", "curtailment.png", False),
        ("losses_kw", "line losses (kW)", "losses.png", True),
        ("fairness_variance", "curtailment share variance", "fairness.png", False),
    ]:
        fig, ax = plt.subplots(figsize=(8, 5))
        for s, ck in SERIES:
            x, y = series(sweep, s, ck, col)
            ax.plot(list(x), list(y), marker="o", ms=3, label=label(s, ck))
        ax.set_xlabel("PV : load")
        ax.set_ylabel(ylabel)
        if log:
            ax.set_yscale("log")
        ax.grid(alpha=0.3)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / name, dpi=120)
        plt.close(fig)

    ext = rows(out / "extended.csv")
    ratios = sorted({float(r["ratio"]) for r in ext})
    n = sum(1 for k in ext[0] if k.startswith("pc_"))
    fig, axes = plt.subplots(1, len(ratios), figsize=(5 * len(ratios), 4), sharey=True)
    strategies = [s for s in ("OID", "VoltVAr", "FOID") if any(r["strategy"] == s for r in ext)]
    w = 0.8 / max(len(strategies), 1)
    for ax, ratio in zip(axes if len(ratios) > 1 else [axes], ratios):
        for i, s in enumerate(strategies):
            r = max((r for r in ext if r["strategy"] == s and float(r["ratio"]) == ratio), key=lambda r: float(r["ck"]))
            ax.bar([h + 1 + (i - (len(strategies) - 1) / 2) * w for h in range(n)],
                   [float(r[f"pc_{h + 1}"]) for h in range(n)], w, label=label(s, float(r["ck"])))
        ax.set_title(f"{ratio:g}:1")
        ax.set_xlabel("household")
        ax.set_xticks(range(1, n + 1))
    (axes[0] if len(ratios) > 1 else axes).set_ylabel("curtailment (kW)")
    axes.flat[-1].legend() if len(ratios) > 1 else axes.legend()
    fig.tight_layout()
    fig.savefig(out / "households.png", dpi=120)
    plt.close(fig)


if __name__ == "__main__":
    main(Path(sys.argv[1] if len(sys.argv) > 1 else "results"))
