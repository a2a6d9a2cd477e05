"""Metrics, streaming evaluation drivers and ablation sweeps.

Single-agent metrics follow the usual motion-forecasting definitions over the
top-k most probable modes; the multi-agent variants average per-agent errors
within each world. The cross-frame fluctuation metric measures the mean
displacement between overlapping portions of consecutive most-probable
predictions in the global frame.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, ModelConfig
from .multiagent import WorldModel, run_world_stream
from .scenario import Scenario, extract_window
from .streaming import EndpointNoise, run_stream
from .tensorization import tensorize

MISS_THRESHOLD_M = 2.0


class MetricError(ValueError):
    pass


def top_k_order(P: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k most probable modes, descending, index tie-break."""
    return np.argsort(-np.asarray(P), kind="stable")[:k]


def min_ade(F_topk: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    """Min over modes of the masked-mean pointwise distance."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise MetricError("min_ade: empty ground-truth mask")
    T = gt.shape[0]
    dist = np.linalg.norm(F_topk[:, :T] - gt[None], axis=-1)
    return float(np.min(dist[:, mask].mean(axis=1)))


def min_fde(F_topk: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    """Min over modes of the endpoint distance (final step must be valid)."""
    T = gt.shape[0]
    if not mask[T - 1]:
        raise MetricError("min_fde: final ground-truth step invalid")
    return float(np.min(np.linalg.norm(F_topk[:, T - 1] - gt[T - 1], axis=-1)))


def brier_min_fde(F_topk: np.ndarray, P_topk: np.ndarray, gt: np.ndarray,
                  mask: np.ndarray) -> float:
    """minFDE plus (1 - pi)^2 where pi is the probability of the
    FDE-minimizing mode."""
    T = gt.shape[0]
    if not mask[T - 1]:
        raise MetricError("brier_min_fde: final ground-truth step invalid")
    fde = np.linalg.norm(F_topk[:, T - 1] - gt[T - 1], axis=-1)
    best = int(np.argmin(fde))
    return float(fde[best] + (1.0 - P_topk[best]) ** 2)


def is_miss(F_topk: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> bool:
    """True iff no predicted endpoint lies within 2 m (inclusive) of the
    ground-truth endpoint."""
    T = gt.shape[0]
    if not mask[T - 1]:
        raise MetricError("miss: final ground-truth step invalid")
    fde = np.linalg.norm(F_topk[:, T - 1] - gt[T - 1], axis=-1)
    return bool(np.min(fde) > MISS_THRESHOLD_M)


@dataclass
class MetricReport:
    values: dict = field(default_factory=dict)
    n_samples: int = 0
    per_scenario: list = field(default_factory=list)

    def validate(self) -> None:
        for name, v in self.values.items():
            if not (math.isfinite(v) and v >= 0):
                raise MetricError(f"metric {name} = {v} out of range")
            if name.startswith(("MR", "actorMR")) and not 0 <= v <= 1:
                raise MetricError(f"miss rate {name} = {v} outside [0, 1]")

    def to_text(self) -> str:
        width = max((len(n) for n in self.values), default=6) + 2
        lines = [f"{'metric':<{width}}value", "-" * (width + 10)]
        for name, v in self.values.items():
            lines.append(f"{name:<{width}}{v:.4f}")
        lines.append(f"samples: {self.n_samples}")
        return "\n".join(lines)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(
            {"values": self.values, "n_samples": self.n_samples}, indent=1) + "\n")


def single_agent_metrics(samples: list[dict], ks=(1, 6)) -> MetricReport:
    """Aggregate per-sample records {F [K,T,2], P [K], gt [T,2], mask [T]}
    (all global-frame, T = T_f) into the benchmark metric table."""
    report = MetricReport()
    acc: dict[str, list] = {}
    for s in samples:
        order_all = top_k_order(s["P"], len(s["P"]))
        for k in ks:
            order = order_all[:k]
            Fk, Pk = s["F"][order], np.asarray(s["P"])[order]
            try:
                acc.setdefault(f"minADE_{k}", []).append(min_ade(Fk, s["gt"], s["mask"]))
                acc.setdefault(f"minFDE_{k}", []).append(min_fde(Fk, s["gt"], s["mask"]))
                acc.setdefault(f"brier-minFDE_{k}", []).append(
                    brier_min_fde(Fk, Pk, s["gt"], s["mask"]))
                acc.setdefault(f"MR_{k}", []).append(float(is_miss(Fk, s["gt"], s["mask"])))
            except MetricError:
                continue
    report.values = {name: float(np.mean(v)) for name, v in acc.items() if v}
    report.n_samples = len(samples)
    report.validate()
    return report


# ---------------------------------------------------------------------------
# Multi-agent (world) metrics

def world_metrics(samples: list[dict], ks=(1, 6)) -> MetricReport:
    """Aggregate world records {F_w [K,N,T,2], P_w [K], gt [N,T,2], mask [N,T]}.

    avgMinADE/avgMinFDE/avgBrierMinFDE pick the best world by the respective
    agent-averaged statistic; actorMR counts misses inside the
    avgMinFDE-best world.
    """
    acc: dict[str, list] = {}
    for s in samples:
        F_w, P_w, gt, mask = s["F_w"], np.asarray(s["P_w"]), s["gt"], s["mask"]
        T = gt.shape[1]
        dist = np.linalg.norm(F_w[:, :, :T] - gt[None], axis=-1)    # [K, N, T]
        steps = mask.sum(axis=1)
        has_any = steps > 0
        has_final = mask[:, T - 1]
        order_all = top_k_order(P_w, len(P_w))
        for k in ks:
            order = order_all[:k]
            if has_any.any():
                ade_kn = (dist[order] * mask[None]).sum(axis=2)[:, has_any] / steps[has_any]
                acc.setdefault(f"avgMinADE_{k}", []).append(float(ade_kn.mean(axis=1).min()))
            if has_final.any():
                fde_kn = dist[order][:, has_final, T - 1]
                avg_fde = fde_kn.mean(axis=1)
                acc.setdefault(f"avgMinFDE_{k}", []).append(float(avg_fde.min()))
                brier = avg_fde + (1.0 - P_w[order]) ** 2
                acc.setdefault(f"avgBrierMinFDE_{k}", []).append(float(brier.min()))
                best = int(np.argmin(avg_fde))
                misses = fde_kn[best] > MISS_THRESHOLD_M
                acc.setdefault(f"actorMR_{k}", []).append(float(misses.mean()))
    report = MetricReport(values={n: float(np.mean(v)) for n, v in acc.items() if v},
                          n_samples=len(samples))
    report.validate()
    return report


# ---------------------------------------------------------------------------
# Cross-frame fluctuation

def fluctuation(stream_samples: list[dict]) -> float | None:
    """Mean displacement between overlapping parts of consecutive
    most-probable predictions, in the global frame.

    Each sample holds `steps`: a list of (t_now, F_global [K, >=T_f, 2], P)
    for one agent, and `T_f`. Pairs without overlap are excluded.
    """
    pair_means = []
    for s in stream_samples:
        T_f = s["T_f"]
        entries = sorted(s["steps"], key=lambda e: e[0])
        for (t0, F0, P0), (t1, F1, P1) in zip(entries[:-1], entries[1:]):
            best0 = F0[int(np.argmax(P0))][:T_f]
            best1 = F1[int(np.argmax(P1))][:T_f]
            # absolute steps covered: (t, t + T_f]
            lo, hi = t1 + 1, t0 + T_f
            if hi < lo:
                continue
            seg0 = best0[lo - t0 - 1:hi - t0]
            seg1 = best1[lo - t1 - 1:hi - t1]
            pair_means.append(float(np.linalg.norm(seg0 - seg1, axis=-1).mean()))
    return float(np.mean(pair_means)) if pair_means else None


# ---------------------------------------------------------------------------
# Evaluation drivers

def _final_window_gt(scenario: Scenario, t_now: int, cfg: ModelConfig,
                     track_id: str) -> tuple[np.ndarray, np.ndarray]:
    window = extract_window(scenario, t_now, cfg.T_h, cfg.T_f, cfg.T_a)
    tr = window.track(track_id)
    return tr.fut[:cfg.T_f].copy(), tr.fut_valid[:cfg.T_f].copy()


def _eval_one(model, sc: Scenario, mode: str, noise_seed: int, index: int,
              endpoint_noise: EndpointNoise | None,
              target_encoder_depth: int | None):
    cfg: ModelConfig = model.cfg
    rng = np.random.default_rng((noise_seed, index))
    if mode == "stream":
        result = run_stream(model, sc, endpoint_noise=endpoint_noise,
                            noise_rng=rng, target_encoder_depth=target_encoder_depth)
    else:
        from .scenario import streaming_schedule
        t_last = streaming_schedule(sc, "av2_like", T_h=cfg.T_h, T_f=cfg.T_f)[-1]
        result = run_stream(model, sc, protocol="custom", times=[t_last])
    records = result.records
    final = records[-1]
    gt, mask = _final_window_gt(sc, final.t_now, cfg, sc.focal_track_id)
    sample = {"F": final.F_global[:, :cfg.T_f], "P": final.P,
              "gt": gt, "mask": mask, "scenario_id": sc.scenario_id}
    stream_sample = None
    if mode == "stream":
        stream_sample = {"T_f": cfg.T_f,
                         "steps": [(r.t_now, r.F_global, r.P) for r in records]}
    log_records = [{"scenario_id": sc.scenario_id, "t_now": r.t_now,
                    "F": r.F_global.tolist(), "P": r.P.tolist(),
                    "elapsed_s": r.elapsed_s} for r in records]
    return sample, stream_sample, log_records


def evaluate_stream(model, scenarios: list[Scenario], mode: str = "stream",
                    ks=(1, 6), endpoint_noise: EndpointNoise | None = None,
                    noise_seed: int = 0,
                    target_encoder_depth: int | None = None,
                    log_path: str | Path | None = None,
                    workers: int = 1) -> MetricReport:
    """Evaluate the final-window prediction of every scenario.

    `stream` runs the full sliding-window protocol first; `snapshot` runs the
    final window only. Both are scored at the identical timestamp. With
    `workers > 1`, scenarios run on worker threads against per-thread model
    copies (parameters are read-only during evaluation).
    """
    if mode not in ("stream", "snapshot"):
        raise ConfigError(f"unknown eval mode {mode!r}")
    if not scenarios:
        raise ConfigError("empty dataset")
    model.eval()
    with torch.no_grad():
        if workers > 1:
            import copy
            import threading
            from concurrent.futures import ThreadPoolExecutor
            local = threading.local()

            def job(item):
                i, sc = item
                if not hasattr(local, "model"):
                    local.model = copy.deepcopy(model)
                with torch.no_grad():
                    return _eval_one(local.model, sc, mode, noise_seed, i,
                                     endpoint_noise, target_encoder_depth)

            with ThreadPoolExecutor(max_workers=workers) as pool:
                outputs = list(pool.map(job, enumerate(scenarios)))
        else:
            outputs = [_eval_one(model, sc, mode, noise_seed, i,
                                 endpoint_noise, target_encoder_depth)
                       for i, sc in enumerate(scenarios)]
    samples = [o[0] for o in outputs]
    stream_samples = [o[1] for o in outputs if o[1] is not None]
    if log_path:
        with Path(log_path).open("w") as fh:
            for o in outputs:
                for rec in o[2]:
                    fh.write(json.dumps(rec) + "\n")
    report = single_agent_metrics(samples, ks)
    if stream_samples:
        fl = fluctuation(stream_samples)
        if fl is not None:
            report.values["fluctuation"] = fl
            report.validate()
    return report


def evaluate_world(world_model: WorldModel, scenarios: list[Scenario],
                   ks=(1, 6), log_path: str | Path | None = None) -> MetricReport:
    """Multi-agent evaluation of the final window's world predictions."""
    if not scenarios:
        raise ConfigError("empty dataset")
    cfg = world_model.cfg
    samples = []
    log_fh = Path(log_path).open("w") if log_path else None
    world_model.eval()
    with torch.no_grad():
        for sc in scenarios:
            result = run_world_stream(world_model, sc)
            final = result.records[-1]
            wp = final.world.to_world_prediction()
            gts, masks = [], []
            for agent_id in wp.agent_ids:
                gt, mask = _final_window_gt(sc, final.t_now, cfg, agent_id)
                gts.append(gt)
                masks.append(mask)
            samples.append({"F_w": wp.F_w, "P_w": wp.P_w,
                            "gt": np.stack(gts), "mask": np.stack(masks)})
            if log_fh:
                for r in result.records:
                    w = r.world.to_world_prediction()
                    log_fh.write(json.dumps({
                        "scenario_id": sc.scenario_id, "t_now": r.t_now,
                        "agent_ids": w.agent_ids, "F_w": w.F_w.tolist(),
                        "P_w": w.P_w.tolist(), "elapsed_s": r.elapsed_s}) + "\n")
    if log_fh:
        log_fh.close()
    return world_metrics(samples, ks)


# ---------------------------------------------------------------------------
# Ablation sweeps

SWEEP_DEFAULT_GRIDS = {
    "streaming_mechanisms": ["none", "CS+TR", "EAM", "CS+TR+EAM"],
    "target_radius": [10.0, 15.0, 30.0, 45.0],
    "endpoint_noise": ["none", "U1", "N1", "U3", "N3", "U5", "N5"],
    "encoder_depth": [1, 2, 3],
}

_NOISE_SPECS = {
    "none": EndpointNoise("none", 0.0),
    "U1": EndpointNoise("uniform", 1.0), "N1": EndpointNoise("gauss", 1.0),
    "U3": EndpointNoise("uniform", 3.0), "N3": EndpointNoise("gauss", 3.0),
    "U5": EndpointNoise("uniform", 5.0), "N5": EndpointNoise("gauss", 5.0),
}


@dataclass
class SweepTable:
    harness: str
    rows: list[dict] = field(default_factory=list)

    def to_text(self) -> str:
        header = f"{'row':<16}{'mADE6':>10}{'mFDE6':>10}{'b-mFDE6':>10}"
        lines = [f"harness: {self.harness}", header, "-" * len(header)]
        for r in self.rows:
            lines.append(f"{str(r['label']):<16}{r['minADE_6']:>10.4f}"
                         f"{r['minFDE_6']:>10.4f}{r['brier-minFDE_6']:>10.4f}")
        return "\n".join(lines)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=1) + "\n")


def _row_from_report(label, report: MetricReport) -> dict:
    return {"label": label,
            "minADE_6": report.values["minADE_6"],
            "minFDE_6": report.values["minFDE_6"],
            "brier-minFDE_6": report.values["brier-minFDE_6"]}


def sweep(harness: str, grid, model, scenarios: list[Scenario],
          noise_seed: int = 0) -> SweepTable:
    """Run one ablation harness over its grid against a single checkpoint."""
    if harness not in SWEEP_DEFAULT_GRIDS:
        raise ConfigError(f"unknown sweep harness {harness!r}")
    grid = list(grid) if grid is not None else SWEEP_DEFAULT_GRIDS[harness]
    cfg: ModelConfig = model.cfg
    table = SweepTable(harness=harness)
    if harness == "streaming_mechanisms":
        saved = (cfg.use_context_stream, cfg.use_trajectory_relay, cfg.use_endpoint_context)
        flag_rows = {"none": (False, False, False), "CS+TR": (True, True, False),
                     "EAM": (False, False, True), "CS+TR+EAM": (True, True, True)}
        try:
            for label in grid:
                if label not in flag_rows:
                    raise ConfigError(f"unknown streaming-mechanism row {label!r}")
                cfg.use_context_stream, cfg.use_trajectory_relay, \
                    cfg.use_endpoint_context = flag_rows[label]
                mode = "snapshot" if label == "none" else "stream"
                report = evaluate_stream(model, scenarios, mode=mode, ks=(6,))
                table.rows.append(_row_from_report(label, report))
        finally:
            cfg.use_context_stream, cfg.use_trajectory_relay, cfg.use_endpoint_context = saved
    elif harness == "target_radius":
        saved_r = cfg.r_target_m
        try:
            for r in grid:
                cfg.r_target_m = float(r)
                report = evaluate_stream(model, scenarios, ks=(6,))
                table.rows.append(_row_from_report(f"{r:g}m", report))
        finally:
            cfg.r_target_m = saved_r
    elif harness == "endpoint_noise":
        for label in grid:
            noise = _NOISE_SPECS.get(label) if isinstance(label, str) else label
            if noise is None:
                raise ConfigError(f"unknown endpoint-noise row {label!r}")
            report = evaluate_stream(model, scenarios, endpoint_noise=noise,
                                     noise_seed=noise_seed, ks=(6,))
            table.rows.append(_row_from_report(noise.label, report))
    elif harness == "encoder_depth":
        available = len(model.target_encoder.blocks)
        for depth in grid:
            depth = int(depth)
            if not 1 <= depth <= available:
                raise ConfigError(
                    f"encoder_depth {depth} incompatible with checkpoint "
                    f"(target encoder has {available} blocks)")
            report = evaluate_stream(model, scenarios, ks=(6,),
                                     target_encoder_depth=depth)
            table.rows.append(_row_from_report(str(depth), report))
    return table
