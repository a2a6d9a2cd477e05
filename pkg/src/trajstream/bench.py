"""Forward-pass latency benchmark.

Times only model forward passes (tensorization and logging excluded), in
evaluation mode under no_grad. `online` is the cost of one steady-state
sliding window for the whole batch; `offline` is the cost of the full
three-window stream. Warmup repetitions are discarded.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .generator import GeneratorSpec, generate_synthetic
from .scenario import Scenario, extract_window, streaming_schedule
from .streaming import StreamState, align_state
from .tensorization import tensorize


@dataclass
class BenchRow:
    batch_size: int
    online_median_ms: float
    online_p95_ms: float
    offline_median_ms: float
    offline_p95_ms: float
    ratio: float
    cross_attention_count: int


@dataclass
class BenchTable:
    rows: list[BenchRow] = field(default_factory=list)

    def to_text(self) -> str:
        header = (f"{'B':>4}{'online med':>12}{'online p95':>12}"
                  f"{'offline med':>13}{'offline p95':>13}{'ratio':>8}{'xattn':>7}")
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(f"{r.batch_size:>4}{r.online_median_ms:>12.2f}"
                         f"{r.online_p95_ms:>12.2f}{r.offline_median_ms:>13.2f}"
                         f"{r.offline_p95_ms:>13.2f}{r.ratio:>8.2f}"
                         f"{r.cross_attention_count:>7}")
        return "\n".join(lines)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(
            [r.__dict__ for r in self.rows], indent=1) + "\n")


def _prepare(model, scenario: Scenario):
    """Pre-tensorize all windows of one scenario."""
    cfg: ModelConfig = model.cfg
    schedule = streaming_schedule(scenario, "av2_like", T_h=cfg.T_h, T_f=cfg.T_f)
    frames = []
    for t_now in schedule:
        window = extract_window(scenario, t_now, cfg.T_h, cfg.T_f, cfg.T_a)
        frames.append((t_now, tensorize(window, cfg.P_l, cfg.context_radius_m)))
    return frames


def _stream_forward_times(model, frames) -> list[float]:
    """Forward the stream; per-window forward-pass times (state handling
    excluded from the clock)."""
    cfg: ModelConfig = model.cfg
    dtype = next(model.parameters()).dtype
    state = None
    times = []
    for t_now, bundle in frames:
        stream = align_state(state, bundle.focal_pose, t_now, dtype) if state else None
        t0 = time.perf_counter()
        pred = model(bundle, stream)
        times.append(time.perf_counter() - t0)
        state = StreamState(
            S_prev=pred.scene_tokens.detach(),
            token_poses_prev=np.concatenate([bundle.agent_poses, bundle.lane_poses])
            if bundle.lane_poses.size else bundle.agent_poses.copy(),
            token_is_agent_prev=np.concatenate(
                [np.ones(len(bundle.track_ids), dtype=bool),
                 np.zeros(len(bundle.lane_ids), dtype=bool)]),
            F_prev=pred.F[:, :cfg.T_f].detach(),
            focal_pose_prev=bundle.focal_pose,
            t_now=t_now,
        )
    return times


def run_bench(model, batch_sizes=(1, 32, 64), repetitions: int = 5,
              warmup: int = 2, seed: int = 0) -> BenchTable:
    """Latency table over batch sizes, median and p95 over repetitions."""
    if warmup < 1:
        raise ValueError("warmup repetitions must be >= 1")
    model.eval()
    table = BenchTable()
    max_b = max(batch_sizes)
    scenarios = [generate_synthetic(seed + i, GeneratorSpec(template="intersection",
                                                            n_agents=4))
                 for i in range(max_b)]
    with torch.no_grad():
        prepared = [_prepare(model, sc) for sc in scenarios]
        for B in batch_sizes:
            online_reps, offline_reps = [], []
            for rep in range(warmup + repetitions):
                online = offline = 0.0
                for frames in prepared[:B]:
                    times = _stream_forward_times(model, frames)
                    offline += sum(times)
                    online += times[-1]
                if rep >= warmup:
                    online_reps.append(online * 1000)
                    offline_reps.append(offline * 1000)
            online_med = float(np.median(online_reps))
            offline_med = float(np.median(offline_reps))
            table.rows.append(BenchRow(
                batch_size=B,
                online_median_ms=online_med,
                online_p95_ms=float(np.percentile(online_reps, 95)),
                offline_median_ms=offline_med,
                offline_p95_ms=float(np.percentile(offline_reps, 95)),
                ratio=offline_med / online_med,
                cross_attention_count=model.decoder.last_cross_attention_count,
            ))
    return table
