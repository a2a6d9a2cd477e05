"""Losses, learning-rate schedule and the streaming training loops."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import ModelConfig, TrainConfig
from .geometry import Pose2D
from .multiagent import WorldModel, WorldOutput, build_world, marginal_batch
from .scenario import Scenario, extract_window, streaming_schedule
from .streaming import StreamState, align_state, transform_points_torch
from .tensorization import TensorBundle, build_gt_tensor, focal_frame, global_to_local, tensorize

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Losses

def wta_select(F_modes: torch.Tensor, gt: torch.Tensor, gt_mask: torch.Tensor) -> int:
    """Index of the mode with the smallest mean displacement over valid steps,
    ties broken by the lowest index. Raises on an empty mask."""
    if not bool(gt_mask.any()):
        raise ValueError("wta_select: no valid ground-truth steps")
    T = gt.shape[0]
    dist = torch.linalg.norm(F_modes[:, :T] - gt.unsqueeze(0), dim=-1)
    m = gt_mask.to(dist.dtype)
    ade = (dist * m).sum(dim=1) / m.sum()
    return int(torch.argmin(ade.detach()).item())


def loss_total(prediction, gt: torch.Tensor, gt_mask: torch.Tensor,
               aux_gt: torch.Tensor, aux_mask: torch.Tensor,
               huber_delta: float = 1.0) -> dict:
    """Winner-takes-all regression + mode classification + neighbor auxiliary.

    `gt` covers the supervised horizon for the focal agent (focal frame);
    `aux_gt`/`aux_mask` cover the non-focal agents over T_f steps, aligned
    with the prediction's aux rows.
    """
    winner = wta_select(prediction.F, gt, gt_mask)
    T = gt.shape[0]
    reg = F.smooth_l1_loss(prediction.F[winner, :T][gt_mask], gt[gt_mask],
                           beta=huber_delta, reduction="mean")
    cls = -torch.log_softmax(prediction.score_logits, dim=0)[winner]
    if aux_mask.any():
        per_elem = F.smooth_l1_loss(prediction.aux_F, aux_gt, beta=huber_delta,
                                    reduction="none")
        aux = (per_elem * aux_mask.unsqueeze(-1)).sum() / (aux_mask.sum() * 2)
    else:
        aux = prediction.F.new_zeros(())
    return {"total": reg + cls + aux, "reg": reg, "cls": cls, "aux": aux,
            "winner": winner}


def select_best_world(F_w: torch.Tensor, gt: torch.Tensor, gt_mask: torch.Tensor) -> int:
    """Index of the world with the lowest mean-over-agents ADE. Agents without
    any valid step are excluded from the mean; ties break to the lowest index."""
    dist = torch.linalg.norm(F_w - gt.unsqueeze(0), dim=-1)          # [K, N_s, T]
    m = gt_mask.to(dist.dtype).unsqueeze(0)
    steps = gt_mask.sum(dim=1)                                        # [N_s]
    has = steps > 0
    if not bool(has.any()):
        raise ValueError("loss_world: no scored agent with valid ground truth")
    agent_ade = (dist * m).sum(dim=2)[:, has] / steps[has].unsqueeze(0)
    world_ade = agent_ade.mean(dim=1)
    return int(torch.argmin(world_ade.detach()).item())


def loss_world(world: WorldOutput, gt: torch.Tensor, gt_mask: torch.Tensor,
               marginal_components: dict | None = None,
               huber_delta: float = 1.0) -> dict:
    """Best-world regression and classification plus the marginal losses.

    `gt` is [N_s, T_f, 2] in the world's shared frame, aligned with agent_ids.
    """
    best = select_best_world(world.F_w, gt, gt_mask)
    reg = F.smooth_l1_loss(world.F_w[best][gt_mask], gt[gt_mask],
                           beta=huber_delta, reduction="mean")
    cls = -torch.log_softmax(world.world_logits, dim=0)[best]
    total = reg + cls
    out = {"reg": reg, "cls": cls, "best": best}
    if marginal_components is not None:
        total = total + marginal_components["total"]
        out["marginal"] = marginal_components["total"]
    out["total"] = total
    return out


# ---------------------------------------------------------------------------
# Optimizer schedule

def lr_schedule(step: int, steps_per_epoch: int, cfg: TrainConfig,
                epochs: int | None = None) -> float:
    """Linear warmup to the peak rate, then one cosine annealing to the end
    rate, parameterized so the final step lands exactly on `lr_end`."""
    total = (epochs if epochs is not None else cfg.epochs) * steps_per_epoch
    warm = cfg.warmup_epochs * steps_per_epoch
    if step < warm:
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * (step / warm)
    denom = max(total - 1 - warm, 1)
    progress = min(max((step - warm) / denom, 0.0), 1.0)
    return cfg.lr_end + 0.5 * (cfg.lr_peak - cfg.lr_end) * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Cached per-scenario streaming pass

@dataclass
class ScenarioFrames:
    """Pre-tensorized windows of one scenario (model-independent, cacheable)."""
    scenario: Scenario
    frames: list[dict] = field(default_factory=list)  # per window: bundle, gts


def prepare_frames(scenario: Scenario, mcfg: ModelConfig,
                   protocol: str = "av2_like") -> ScenarioFrames:
    schedule = streaming_schedule(scenario, protocol, T_h=mcfg.T_h, T_f=mcfg.T_f)
    sf = ScenarioFrames(scenario=scenario)
    for t_now in schedule:
        window = extract_window(scenario, t_now, mcfg.T_h, mcfg.T_f, mcfg.T_a)
        bundle = tensorize(window, mcfg.P_l, mcfg.context_radius_m)
        gt, gt_mask = build_gt_tensor(window, bundle.track_ids, bundle.focal_pose)
        sf.frames.append({"t_now": t_now, "window": window, "bundle": bundle,
                          "gt": gt, "gt_mask": gt_mask})
    return sf


def _stream_losses(model, sf: ScenarioFrames, tcfg: TrainConfig) -> dict:
    """Forward the full stream of one scenario, accumulating per-window losses."""
    cfg = model.cfg
    dtype = next(model.parameters()).dtype
    state: StreamState | None = None
    sums = {"total": 0.0, "reg": 0.0, "cls": 0.0, "aux": 0.0}
    for fr in sf.frames:
        bundle: TensorBundle = fr["bundle"]
        stream = align_state(state, bundle.focal_pose, fr["t_now"], dtype) if state else None
        pred = model(bundle, stream)
        gt = torch.as_tensor(fr["gt"], dtype=dtype)
        gt_mask = torch.as_tensor(fr["gt_mask"])
        i = bundle.focal_index
        aux_rows = [j for j in range(len(bundle.track_ids)) if j != i]
        comps = loss_total(pred, gt[i], gt_mask[i],
                           gt[aux_rows][:, :cfg.T_f], gt_mask[aux_rows][:, :cfg.T_f],
                           tcfg.huber_delta)
        for key in sums:
            sums[key] = sums[key] + comps[key]
        state = StreamState(
            S_prev=pred.scene_tokens,
            token_poses_prev=np.concatenate([bundle.agent_poses, bundle.lane_poses])
            if bundle.lane_poses.size else bundle.agent_poses.copy(),
            token_is_agent_prev=np.concatenate(
                [np.ones(len(bundle.track_ids), dtype=bool),
                 np.zeros(len(bundle.lane_ids), dtype=bool)]),
            F_prev=pred.F[:, :cfg.T_f],
            focal_pose_prev=bundle.focal_pose,
            t_now=fr["t_now"],
        )
        if tcfg.detach_stream:
            state = state.detached()
    n = len(sf.frames)
    return {k: v / n for k, v in sums.items()}


# ---------------------------------------------------------------------------
# Training loops

@dataclass
class TrainResult:
    history: list[dict]
    steps: int


def _dump_diagnostics(out_dir: Path | None, payload: dict) -> None:
    if out_dir is not None:
        (out_dir / "diagnostics.json").write_text(json.dumps(payload, indent=1))


def train_stream(model, scenarios: list[Scenario], tcfg: TrainConfig,
                 out_dir: str | Path | None = None,
                 max_steps: int | None = None,
                 protocol: str = "av2_like",
                 log_cb=None) -> TrainResult:
    """Single-agent streaming training: every scenario contributes its full
    sliding-window stream, one optimizer step per batch of scenarios."""
    torch.manual_seed(tcfg.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    mcfg: ModelConfig = model.cfg
    cache = [prepare_frames(s, mcfg, protocol) for s in scenarios]
    steps_per_epoch = max(math.ceil(len(scenarios) / tcfg.batch_size), 1)
    total_steps = tcfg.epochs * steps_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    opt = torch.optim.AdamW(
        [p for p in model.parameters() if p.requires_grad],
        lr=tcfg.lr_start, weight_decay=tcfg.weight_decay)
    rng = np.random.default_rng(tcfg.seed)
    order: list[int] = []
    history: list[dict] = []
    model.train()
    for step in range(total_steps):
        batch = []
        for _ in range(tcfg.batch_size):
            if not order:
                order = list(rng.permutation(len(cache)))
            batch.append(cache[order.pop()])
        lr = lr_schedule(step, steps_per_epoch, tcfg)
        for group in opt.param_groups:
            group["lr"] = lr
        opt.zero_grad()
        comps = {"total": 0.0, "reg": 0.0, "cls": 0.0, "aux": 0.0}
        for sf in batch:
            sc = _stream_losses(model, sf, tcfg)
            for k in comps:
                comps[k] = comps[k] + sc[k] / len(batch)
        loss = comps["total"]
        if not torch.isfinite(loss):
            _dump_diagnostics(out_dir, {"step": step, "loss": float(loss.detach()),
                                        "components": {k: float(torch.as_tensor(v).detach())
                                                       for k, v in comps.items() if k != "total"}})
            raise RuntimeError(f"non-finite loss at step {step}")
        loss.backward()
        grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), tcfg.grad_clip_norm)
        opt.step()
        if step % tcfg.log_every == 0 or step == total_steps - 1:
            row = {"step": step, "lr": lr, "grad_norm": float(grad_norm),
                   **{k: float(torch.as_tensor(v).detach()) for k, v in comps.items()}}
            history.append(row)
            if log_cb:
                log_cb(row)
            if out_dir is not None:
                with (out_dir / "metrics.jsonl").open("a") as fh:
                    fh.write(json.dumps(row) + "\n")
    model.eval()
    return TrainResult(history=history, steps=total_steps)


def _world_frame_losses(world_model: WorldModel, scenario: Scenario,
                        tcfg: TrainConfig, protocol: str) -> dict:
    """One scenario's multi-agent stream with per-window world + marginal losses."""
    cfg = world_model.cfg
    model = world_model.predictor
    dtype = next(model.parameters()).dtype
    schedule = streaming_schedule(scenario, protocol, T_h=cfg.T_h, T_f=cfg.T_f)
    states: dict[str, StreamState] = {}
    sums = {"total": 0.0, "reg": 0.0, "cls": 0.0, "marginal": 0.0}
    for t_now in schedule:
        window = extract_window(scenario, t_now, cfg.T_h, cfg.T_f, cfg.T_a)
        stream_inputs = {}
        for agent_id, state in states.items():
            try:
                pose = focal_frame(window, agent_id)
            except (ValueError, KeyError):
                continue
            stream_inputs[agent_id] = align_state(state, pose, t_now, dtype)
        marginals, _ = marginal_batch(model, window, stream_inputs)
        if not marginals:
            continue
        shared_frame = focal_frame(window, scenario.focal_track_id)
        world = build_world(world_model.consistency, marginals, shared_frame,
                            scenario.focal_track_id, cfg)
        # marginal single-agent losses, one per scored agent
        marg_total = None
        for m in marginals:
            gt, gt_mask = build_gt_tensor(window, m.bundle.track_ids, m.focal_pose)
            gt_t = torch.as_tensor(gt, dtype=dtype)
            mask_t = torch.as_tensor(gt_mask)
            i = m.bundle.focal_index
            if not bool(mask_t[i].any()):
                continue
            aux_rows = [j for j in range(len(m.bundle.track_ids)) if j != i]
            comps = loss_total(m.prediction, gt_t[i], mask_t[i],
                               gt_t[aux_rows][:, :cfg.T_f], mask_t[aux_rows][:, :cfg.T_f],
                               tcfg.huber_delta)
            marg_total = comps["total"] if marg_total is None else marg_total + comps["total"]
        marg_total = marg_total / len(marginals) if marg_total is not None \
            else torch.zeros((), dtype=dtype)
        # world ground truth in the shared frame
        gt_rows, mask_rows = [], []
        for m in marginals:
            tr = window.track(m.agent_id)
            v = tr.fut_valid[:cfg.T_f]
            pts = np.zeros((cfg.T_f, 2))
            pts[v] = global_to_local(tr.fut[:cfg.T_f][v], shared_frame)
            gt_rows.append(pts)
            mask_rows.append(v)
        gt_w = torch.as_tensor(np.stack(gt_rows), dtype=dtype)
        mask_w = torch.as_tensor(np.stack(mask_rows))
        comps = loss_world(world, gt_w, mask_w, {"total": marg_total}, tcfg.huber_delta)
        for k in sums:
            sums[k] = sums[k] + comps[k]
        new_states = {}
        for m in marginals:
            b = m.bundle
            st = StreamState(
                S_prev=m.prediction.scene_tokens,
                token_poses_prev=np.concatenate([b.agent_poses, b.lane_poses])
                if b.lane_poses.size else b.agent_poses.copy(),
                token_is_agent_prev=np.concatenate(
                    [np.ones(len(b.track_ids), dtype=bool),
                     np.zeros(len(b.lane_ids), dtype=bool)]),
                F_prev=m.prediction.F[:, :cfg.T_f],
                focal_pose_prev=m.focal_pose,
                t_now=t_now,
            )
            new_states[m.agent_id] = st.detached() if tcfg.detach_stream else st
        states = new_states
    n = len(schedule)
    return {k: v / n for k, v in sums.items()}


def train_world(world_model: WorldModel, scenarios: list[Scenario], tcfg: TrainConfig,
                out_dir: str | Path | None = None,
                max_steps: int | None = None,
                protocol: str = "av2_like",
                log_cb=None) -> TrainResult:
    """Multi-agent finetuning: joint world + marginal objective, cosine decay
    without warmup, optionally frozen agent/lane encoders."""
    torch.manual_seed(tcfg.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    if tcfg.freeze_encoders_ma:
        for mod in (world_model.predictor.agent_encoder, world_model.predictor.lane_encoder):
            for p in mod.parameters():
                p.requires_grad_(False)
    steps_per_epoch = max(math.ceil(len(scenarios) / tcfg.batch_size), 1)
    total_steps = tcfg.ma_epochs * steps_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    ma_cfg = TrainConfig(
        epochs=tcfg.ma_epochs, warmup_epochs=0, lr_start=tcfg.lr_peak,
        lr_peak=tcfg.lr_peak, lr_end=tcfg.lr_end, batch_size=tcfg.batch_size,
        weight_decay=tcfg.weight_decay, grad_clip_norm=tcfg.grad_clip_norm,
        huber_delta=tcfg.huber_delta, seed=tcfg.seed)
    opt = torch.optim.AdamW(
        [p for p in world_model.parameters() if p.requires_grad],
        lr=tcfg.lr_peak, weight_decay=tcfg.weight_decay)
    rng = np.random.default_rng(tcfg.seed)
    order: list[int] = []
    history: list[dict] = []
    world_model.train()
    for step in range(total_steps):
        batch = []
        for _ in range(tcfg.batch_size):
            if not order:
                order = list(rng.permutation(len(scenarios)))
            batch.append(scenarios[order.pop()])
        lr = lr_schedule(step, steps_per_epoch, ma_cfg, epochs=tcfg.ma_epochs)
        for group in opt.param_groups:
            group["lr"] = lr
        opt.zero_grad()
        comps = {"total": 0.0, "reg": 0.0, "cls": 0.0, "marginal": 0.0}
        for sc in batch:
            out = _world_frame_losses(world_model, sc, tcfg, protocol)
            for k in comps:
                comps[k] = comps[k] + out[k] / len(batch)
        loss = comps["total"]
        if not torch.isfinite(loss):
            _dump_diagnostics(out_dir, {"step": step, "loss": float(loss.detach())})
            raise RuntimeError(f"non-finite loss at step {step}")
        loss.backward()
        grad_norm = torch.nn.utils.clip_grad_norm_(
            [p for p in world_model.parameters() if p.requires_grad], tcfg.grad_clip_norm)
        opt.step()
        if step % tcfg.log_every == 0 or step == total_steps - 1:
            row = {"step": step, "lr": lr, "grad_norm": float(grad_norm),
                   **{k: float(torch.as_tensor(v).detach()) for k, v in comps.items()}}
            history.append(row)
            if log_cb:
                log_cb(row)
            if out_dir is not None:
                with (out_dir / "metrics.jsonl").open("a") as fh:
                    fh.write(json.dumps(row) + "\n")
    world_model.eval()
    return TrainResult(history=history, steps=total_steps)
