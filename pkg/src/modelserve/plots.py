"""Figure rendering for benchmark CSV output.

Each renderer reads one benchmark's CSV and writes a PNG next to it, so a
bench run leaves both the delimited data and a ready-to-look-at figure.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def _read_rows(csv_path) -> list[dict]:
    with open(csv_path, newline="") as fh:
        return list(csv.DictReader(fh))


def _save(fig, out_path) -> Path:
    out_path = Path(out_path)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_latency(csv_path, out_path) -> Path:
    rows = _read_rows(csv_path)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    topk = [r for r in rows if r["op"] == "topk"]
    for d in sorted({r["d"] for r in topk}, key=int):
        for cached, style in (("True", "--"), ("False", "-")):
            pts = sorted(((int(r["n"]), float(r["mean_ms"]))
                          for r in topk if r["d"] == d and r["cached"] == cached))
            if pts:
                label = f"d={d} {'cached' if cached == 'True' else 'uncached'}"
                ax1.plot([p[0] for p in pts], [p[1] for p in pts], style,
                         marker="o", ms=3, label=label)
    ax1.set_xscale("log")
    ax1.set_yscale("log")
    ax1.set_xlabel("itemset size")
    ax1.set_ylabel("topK latency (ms)")
    ax1.legend(fontsize=7)

    updates = sorted(((int(r["d"]), float(r["mean_ms"]) * 1e3)
                      for r in rows if r["op"] == "update"))
    if updates:
        ax2.plot([p[0] for p in updates], [p[1] for p in updates], marker="o")
    ax2.set_xlabel("model dimension d")
    ax2.set_ylabel("online update latency (us)")
    return _save(fig, out_path)


def plot_hybrid(csv_path, out_path) -> Path:
    rows = _read_rows(csv_path)
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    seeds = [r["seed"] for r in rows]
    x = range(len(rows))
    width = 0.38
    ax.bar([i - width / 2 for i in x], [float(r["online_gain_pct"]) for r in rows],
           width, label="online updates")
    ax.bar([i + width / 2 for i in x], [float(r["offline_gain_pct"]) for r in rows],
           width, label="full retrain")
    ax.set_xticks(list(x))
    ax.set_xticklabels([f"seed {s}" for s in seeds])
    ax.set_ylabel("RMSE improvement (%)")
    ax.legend()
    return _save(fig, out_path)


def plot_bandit(csv_path, out_path) -> Path:
    rows = _read_rows(csv_path)
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    for alpha in sorted({r["alpha"] for r in rows}, key=float):
        pts = [(int(r["step"]), float(r["mean_cumulative_regret"]))
               for r in rows if r["alpha"] == alpha]
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], label=f"alpha={alpha}")
    ax.set_xlabel("step")
    ax.set_ylabel("mean cumulative regret")
    ax.legend(fontsize=8)
    return _save(fig, out_path)


def plot_drift(csv_path, out_path) -> Path:
    rows = _read_rows(csv_path)
    fig, ax = plt.subplots(figsize=(6.5, 3.4))
    drift = [r for r in rows if r["run"] == "drift"]
    ax.plot([int(r["step"]) for r in drift], [float(r["error"]) for r in drift],
            lw=0.7, label="squared error")
    swaps = [int(r["step"]) for i, r in enumerate(drift[1:], 1)
             if r["version"] != drift[i - 1]["version"]]
    for s in swaps:
        ax.axvline(s, color="tab:red", ls="--", lw=1, label="version swap")
    phases = [r["phase"] for r in drift]
    if "drift" in phases:
        ax.axvline(phases.index("drift") + 1, color="tab:orange", ls=":",
                   lw=1, label="drift injected")
    ax.set_xlabel("observation")
    ax.set_ylabel("cross-validated error")
    ax.set_yscale("log")
    handles, labels = ax.get_legend_handles_labels()
    seen = dict(zip(labels, handles))
    ax.legend(seen.values(), seen.keys(), fontsize=8)
    return _save(fig, out_path)
