"""Render an audit directory into CSV tables, figures and a text summary.

Figures are drawn from the CSVs written next to them, so every number in a
chart can be diffed without opening an image.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .data import load_schema  # noqa: E402
from .lucidgan import CanonicalSet  # noqa: E402
from .metrics import summarize_pair  # noqa: E402

PAIRED_MODES = ("direct", "proxy", "lucid")


class MissingArtifact(FileNotFoundError):
    pass


def slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", text).strip("_").lower()


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing artifact: {path}")
    return path


def paired_table(pos: CanonicalSet, neg: CanonicalSet, schema, feature: str) -> pd.DataFrame:
    return summarize_pair(pos, neg, schema).frequency_table(feature)


def plot_paired(table: pd.DataFrame, feature: str, title: str, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(max(4.0, 0.35 * len(table) + 2), 3.2))
    if "bin_left" in table.columns:
        edges = np.append(table["bin_left"].to_numpy(), table["bin_right"].iloc[-1])
        ax.stairs(table["positive"], edges, label="positive", color="tab:green")
        ax.stairs(table["negative"], edges, label="negative", color="tab:red")
    else:
        x = np.arange(len(table))
        ax.bar(x - 0.2, table["positive"], 0.4, label="positive", color="tab:green")
        ax.bar(x + 0.2, table["negative"], 0.4, label="negative", color="tab:red")
        ax.set_xticks(x, [str(i) for i in table.index], rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("frequency")
    ax.set_title(f"{title}: {feature}", fontsize=9)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_heatmap(pct: pd.DataFrame, title: str, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(1.2 * pct.shape[1] + 3, 0.5 * pct.shape[0] + 1.5))
    im = ax.imshow(pct.to_numpy(float), cmap="viridis", vmin=0, vmax=100, aspect="auto")
    ax.set_xticks(range(pct.shape[1]), pct.columns, rotation=45, ha="right", fontsize=7)
    ax.set_yticks(range(pct.shape[0]), pct.index, fontsize=7)
    for i in range(pct.shape[0]):
        for j in range(pct.shape[1]):
            v = pct.iat[i, j]
            if pd.notna(v):
                ax.text(j, i, f"{v:.1f}", ha="center", va="center", fontsize=6, color="w")
    fig.colorbar(im, ax=ax, label="%")
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def table1(metrics: dict) -> pd.DataFrame:
    """Long-format PR/TPR table (percent) with the support of every group."""
    recs = []
    for feat, groups in metrics.get("groups", {}).items():
        for cat, g in groups.items():
            recs.append({
                "feature": feat, "category": cat, "support": g["support"],
                "PR": None if g["PR"] is None else 100 * g["PR"],
                "TPR": None if g["TPR"] is None else 100 * g["TPR"],
                "low_support": g["low_support"],
            })
    return pd.DataFrame(recs, columns=["feature", "category", "support", "PR", "TPR", "low_support"])


def render(out: str | Path) -> Path:
    """Write ``report/`` under an audit directory and return its path."""
    out = Path(out)
    schema = load_schema(_require(out / "data" / "schema.yaml"))
    metrics = json.loads(_require(out / "metrics.json").read_text())
    rep = out / "report"
    rep.mkdir(exist_ok=True)
    lines = [f"audit directory: {out}", ""]

    acc = metrics.get("validation_accuracy")
    if acc:
        lines.append("validation accuracy: " + ", ".join(f"{k}={v:.4f}" for k, v in acc.items() if v is not None))
    t1 = table1(metrics)
    t1.to_csv(rep / "table1.csv", index=False)
    if len(t1):
        lines += ["", "group metrics (percent, decision threshold 0.5):", t1.to_string(index=False)]
    for feat, d in metrics.get("disparity", {}).items():
        lines.append(f"{feat}: max DP gap {d['DP']:.3f}" + (f", max EOP gap {d['EOP']:.3f}" if d.get("EOP") is not None else ""))
    lines.append("")

    for mode in PAIRED_MODES:
        d = out / "canonical" / mode
        if not d.exists():
            continue
        pos = CanonicalSet.from_csv(_require(d / "positive.csv"))
        neg = CanonicalSet.from_csv(_require(d / "negative.csv"))
        if len(pos) == 0 or len(neg) == 0:
            empty = "positive" if len(pos) == 0 else "negative"
            lines.append(f"{mode}: {empty} canonical set is empty, no charts drawn")
            continue
        feats = [f.name for f in schema.features if f.name in pos.rows.columns]
        for feat in feats:
            tab = paired_table(pos, neg, schema, feat)
            base = rep / f"{mode}_{slug(feat)}"
            tab.to_csv(base.with_suffix(".csv"))
            plot_paired(tab, feat, mode, base.with_suffix(".png"))
        lines.append(f"{mode}: {len(pos)} positive / {len(neg)} negative rows, {len(feats)} paired charts")

    for path in sorted((out / "tables").glob("intersectional_*.csv")):
        pct = pd.read_csv(path, index_col=0)
        if pct.empty:
            lines.append(f"{path.stem}: empty, no heat map drawn")
            continue
        pct.to_csv(rep / path.name)
        plot_heatmap(pct, path.stem.replace("_", " "), rep / f"{path.stem}.png")
        lines += [f"{path.stem} (row percentages):", pct.round(1).to_string(), ""]

    (rep / "summary.txt").write_text("\n".join(lines) + "\n")
    return rep
