"""Score-vs-label figures and the on-disk evaluation report."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .scoring import ScoreSeries, per_video_auc  # noqa: E402

STYLE = {
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 10,
    "legend.fontsize": "small",
    "figure.dpi": 100,
    "svg.hashsalt": "stcfusion",
}


def plot_score_curve(frames, scores, labels, path, title: str = "", raw=None) -> Path:
    """One video's anomaly score over time with ground-truth spans shaded."""
    frames = np.asarray(frames)
    labels = np.asarray(labels)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(8, 3))
        ax.fill_between(frames, 0, 1, where=labels > 0, step="mid",
                        color="tab:red", alpha=0.2, linewidth=0, label="anomalous (label)")
        if raw is not None:
            ax.plot(frames, raw, color="0.6", linewidth=0.8, label="frame score")
        ax.plot(frames, scores, color="tab:blue", linewidth=1.5, label="smoothed score")
        ax.set_xlim(frames.min(), frames.max())
        ax.set_ylim(0, 1)
        ax.set_xlabel("frame")
        ax.set_ylabel("anomaly score")
        if title:
            ax.set_title(title)
        ax.legend(loc="upper right")
        fig.tight_layout()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return path


def plot_series(series: ScoreSeries, out_dir) -> list[Path]:
    out = []
    for v in series.videos():
        m = series.video == v
        out.append(plot_score_curve(series.frame[m], series.smoothed[m], series.label[m],
                                    Path(out_dir) / f"{v}.png", title=v, raw=series.fused[m]))
    return out


def emit_report(series: ScoreSeries, auc: float, out_dir, config: dict | None = None,
                extra: dict | None = None) -> dict:
    """Write scores.csv, report.json and one curve per video under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "scores.csv").write_text(series.to_csv())
    report = {
        "auc": auc,
        "auc_per_video": per_video_auc(series),
        "frames": len(series),
        "anomalous_frames": int(series.label.sum()),
        "config": config,
    }
    if extra:
        report.update(extra)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    plot_series(series, out_dir / "curves")
    return report


def plot_ablation(rows, path) -> Path:
    """Grouped bars of AUC per network, memory off vs on."""
    networks = list(dict.fromkeys(r["network"] for r in rows))
    off = [next(r["auc"] for r in rows if r["network"] == n and not r["memory"]) for n in networks]
    on = [next(r["auc"] for r in rows if r["network"] == n and r["memory"]) for n in networks]
    x = np.arange(len(networks))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.bar(x - 0.2, off, 0.4, label="no memory", color="0.6")
        ax.bar(x + 0.2, on, 0.4, label="context memory", color="tab:blue")
        ax.set_xticks(x, networks)
        lo = min(off + on)
        ax.set_ylim(max(0.0, lo - 0.1), 1.0)
        ax.set_ylabel("frame AUC")
        ax.legend(loc="lower right")
        fig.tight_layout()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return path
