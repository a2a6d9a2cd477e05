"""Scenario visualization: one panel per streaming step with lanes, agent
histories, ground-truth future and the scored prediction fan."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .scenario import Scenario, extract_window

LANE_COLOR = "#b0b0b0"
HISTORY_COLOR = "#384062"
NEIGHBOR_COLOR = "#815847"
GT_COLOR = "#68aaa0"
PRED_COLOR = "#ff9a3a"


def load_prediction_log(path: str | Path) -> dict:
    """Prediction-log records grouped by scenario id."""
    by_scenario: dict[str, list[dict]] = {}
    with Path(path).open() as fh:
        for line in fh:
            rec = json.loads(line)
            by_scenario.setdefault(rec["scenario_id"], []).append(rec)
    return by_scenario


def plot_stream(scenario: Scenario, records: list[dict], out_path: str | Path,
                T_h: int = 30, T_f: int = 60, T_a: int = 20, dpi: int = 110) -> Path:
    """Render the streaming predictions of one scenario to a PNG file."""
    records = sorted(records, key=lambda r: r["t_now"])
    fig, axes = plt.subplots(1, len(records), figsize=(5.2 * len(records), 5.2))
    if len(records) == 1:
        axes = [axes]
    for ax, rec in zip(axes, records):
        t_now = rec["t_now"]
        window = extract_window(scenario, t_now, T_h, T_f, T_a)
        for lane in scenario.lanes:
            ax.plot(lane.centerline[:, 0], lane.centerline[:, 1],
                    color=LANE_COLOR, lw=1.0, zorder=1)
        focal = window.track(scenario.focal_track_id)
        for tr in window.tracks:
            v = tr.hist_valid
            color = HISTORY_COLOR if tr.track_id == scenario.focal_track_id else NEIGHBOR_COLOR
            ax.plot(tr.hist[v, 0], tr.hist[v, 1], color=color, lw=1.6, zorder=3)
            if v.any():
                ax.plot(*tr.hist[np.flatnonzero(v)[-1], :2], "o", color=color,
                        ms=3.5, zorder=3)
        fv = focal.fut_valid[:T_f]
        ax.plot(focal.fut[:T_f][fv, 0], focal.fut[:T_f][fv, 1],
                color=GT_COLOR, lw=2.0, zorder=4)
        F = np.asarray(rec["F"])[:, :T_f]
        P = np.asarray(rec["P"])
        for k in np.argsort(P):
            ax.plot(F[k, :, 0], F[k, :, 1], color=PRED_COLOR,
                    lw=1.2, alpha=0.35 + 0.65 * float(P[k] / max(P.max(), 1e-9)),
                    zorder=5)
            ax.annotate(f"{P[k]:.2f}", F[k, -1], fontsize=6, color=PRED_COLOR)
        ax.set_title(f"t = {t_now / 10:.1f} s")
        ax.set_aspect("equal")
        cx, cy = focal.hist[T_h - 1, :2]
        ax.set_xlim(cx - 80, cx + 80)
        ax.set_ylim(cy - 80, cy + 80)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=dpi, metadata={"Software": None})
    plt.close(fig)
    return out_path
