# src/faceshield/visualize.py
"""Plots for robustness tables and video reports (matplotlib, headless)."""

from __future__ import annotations

import logging
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

logger = logging.getLogger(__name__)

XLABELS = {
    "jpeg": "JPEG quality",
    "resize": "Resize ratio",
    "noise": "Noise std (0-255)",
    "blur": "Blur kernel",
}


def robustness_panels(table: pd.DataFrame, out_path: str, clean_f1: float | None = None) -> str:
    """One F1-vs-setting panel per transform; dashed lines mark the protected baseline and clean F1."""
    ok = table[(table["status"] == "ok") & (table["transform"] != "baseline")]
    transforms = list(dict.fromkeys(ok["transform"]))
    baseline = table.loc[table["transform"] == "baseline", "f1"]

    fig, axes = plt.subplots(1, max(1, len(transforms)), figsize=(3.2 * max(1, len(transforms)), 3.2), squeeze=False)
    for ax, name in zip(axes[0], transforms):
        rows = ok[ok["transform"] == name].sort_values("setting")
        ax.plot(rows["setting"].astype(float), rows["f1"], marker="o", linewidth=2)
        if not baseline.empty:
            ax.axhline(float(baseline.iloc[0]), linestyle="--", linewidth=1, label="protected")
        if clean_f1 is not None:
            ax.axhline(clean_f1, linestyle=":", linewidth=1, color="gray", label="clean")
        ax.set_xlabel(XLABELS.get(name, name))
        ax.set_ylim(0, 1.05)
        ax.set_title(name)
    axes[0][0].set_ylabel("F1")
    axes[0][0].legend(loc="upper left", fontsize=7)
    fig.tight_layout()

    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    fig.savefig(out_path, dpi=160)
    plt.close(fig)
    logger.info("💾 Wrote %s", out_path)
    return out_path


def video_timeline(report: pd.DataFrame, out_path: str) -> str:
    """Per-frame L∞ and F1 of a protected video, anchors marked."""
    fig, ax = plt.subplots(figsize=(9, 3.5))
    ax.plot(report["frame"], report["linf"], linewidth=1.5, label="L∞")
    anchors = report[report["is_anchor"]]
    ax.scatter(anchors["frame"], anchors["linf"], marker="^", label="anchor")
    ax.set_xlabel("Frame")
    ax.set_ylabel("L∞ (0-255)")
    scored = report.dropna(subset=["f1_contrib"])
    if not scored.empty:
        twin = ax.twinx()
        twin.plot(scored["frame"], scored["f1_contrib"], linestyle="--", marker="o", color="tab:red")
        twin.set_ylim(0, 1.05)
        twin.set_ylabel("F1")
    ax.legend(loc="upper right", fontsize=7)
    ax.set_title(f"Protected video ({report['mode'].iloc[0]})")
    fig.tight_layout()

    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    fig.savefig(out_path, dpi=160)
    plt.close(fig)
    logger.info("💾 Wrote %s", out_path)
    return out_path
