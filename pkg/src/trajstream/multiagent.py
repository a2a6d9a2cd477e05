"""Multi-agent prediction: marginal batching over scored agents plus the
global consistency module fusing marginal modes into joint world predictions.

World trajectories are assembled in a shared scene frame (the scenario focal
agent's frame at t_now): world k starts from the stack of every agent's k-th
most probable marginal trajectory, and the consistency module's
zero-initialized trajectory head adds refinement offsets on top.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig
from .geometry import Pose2D
from .model.layers import AttentionBlock, two_layer_head
from .model.predictor import Prediction
from .scenario import ObservationWindow, Scenario, extract_window, streaming_schedule
from .streaming import StreamState, align_state, transform_points_torch
from .tensorization import TensorizationError, focal_frame, local_to_global, tensorize

log = logging.getLogger(__name__)

CATEGORIES = ("focal", "driving", "parked")


@dataclass
class MarginalResult:
    agent_id: str
    prediction: Prediction
    focal_pose: Pose2D
    bundle: object


@dataclass
class WorldPrediction:
    F_w: np.ndarray          # [K, N_s, T_f, 2] global frame
    P_w: np.ndarray          # [K]
    agent_ids: list[str]


@dataclass
class WorldOutput:
    """Differentiable world tensors in the shared scene frame."""
    F_w: torch.Tensor        # [K, N_s, T_f, 2]
    P_w: torch.Tensor        # [K]
    world_logits: torch.Tensor
    shared_frame: Pose2D
    agent_ids: list[str]
    marginals: list[MarginalResult]

    def to_world_prediction(self) -> WorldPrediction:
        flat = self.F_w.detach().cpu().numpy()
        return WorldPrediction(
            F_w=local_to_global(flat, self.shared_frame),
            P_w=self.P_w.detach().cpu().numpy(),
            agent_ids=list(self.agent_ids),
        )


def marginal_batch(model, window: ObservationWindow,
                   stream_inputs: dict | None = None,
                   capture_internals: bool = False):
    """Independent focal-frame predictions for every scored agent, ordered by
    agent id. Agents invalid at t_now are excluded with a warning and listed
    in the returned exclusion record."""
    results: list[MarginalResult] = []
    excluded: list[str] = []
    for agent_id in sorted(window.scored_track_ids):
        try:
            bundle = tensorize(window, model.cfg.P_l, model.cfg.context_radius_m, agent_id)
        except (TensorizationError, KeyError):
            log.warning("scored agent %s invalid at t_now=%d, excluded", agent_id, window.t_now)
            excluded.append(agent_id)
            continue
        stream = (stream_inputs or {}).get(agent_id)
        pred = model(bundle, stream, capture_internals=capture_internals)
        results.append(MarginalResult(agent_id, pred, bundle.focal_pose, bundle))
    return results, excluded


def classify_agent_category(prediction: Prediction, focal: bool,
                            threshold_m: float = 1.0, T_f: int | None = None) -> str:
    """'parked' iff the most probable mode's endpoint displacement from the
    current position is strictly below the threshold; the focal tag is
    reserved for the scenario's focal track."""
    if focal:
        return "focal"
    k = int(torch.argmax(prediction.P).item())
    horizon = T_f if T_f is not None else prediction.F.shape[1]
    endpoint = prediction.F[k, horizon - 1]
    displacement = float(torch.linalg.norm(endpoint).detach())
    return "parked" if displacement < threshold_m else "driving"


class ConsistencyModule(nn.Module):
    """Self-attention across modes per agent, then across agents per mode,
    decoding joint world trajectories and a single score per world."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        D = cfg.D
        self.pos_fc1 = nn.Linear(4, D)
        self.pos_fc2 = nn.Linear(D, D)
        self.category_embed = nn.Embedding(len(CATEGORIES), D)
        self.mode_blocks = nn.ModuleList(
            AttentionBlock(D, cfg.n_heads, cfg.dropout, cfg.ffn_mult) for _ in range(2))
        self.agent_blocks = nn.ModuleList(
            AttentionBlock(D, cfg.n_heads, cfg.dropout, cfg.ffn_mult) for _ in range(2))
        self.traj_head = two_layer_head(D, 2 * cfg.T_f, zero_init=True)
        self.score_head = two_layer_head(D, 1)
        self.T_f = cfg.T_f

    def forward(self, q_stack: torch.Tensor, R: torch.Tensor,
                categories: torch.Tensor):
        """q_stack: [N_s, K, D]; R: [N_s, 4] (x, y, sin yaw, cos yaw) in the
        shared frame. Returns (offsets [K, N_s, T_f, 2], world_logits [K])."""
        pos = self.pos_fc2(torch.nn.functional.gelu(self.pos_fc1(R)))
        x = q_stack + pos.unsqueeze(1) + self.category_embed(categories).unsqueeze(1)
        for blk in self.mode_blocks:
            x = blk(x)                       # attention over K per agent
        x = x.transpose(0, 1)                # [K, N_s, D]
        for blk in self.agent_blocks:
            x = blk(x)                       # attention over N_s per mode
        K, N_s, _ = x.shape
        offsets = self.traj_head(x).view(K, N_s, self.T_f, 2)
        world_logits = self.score_head(x).squeeze(-1).mean(dim=1)
        return offsets, world_logits


def naive_world_stack(marginals: list[MarginalResult], shared_frame: Pose2D,
                      T_f: int) -> tuple[torch.Tensor, torch.Tensor]:
    """World k = every agent's k-th most probable marginal trajectory mapped
    into the shared frame; naive world scores are the per-rank mean of the
    marginal probabilities (a valid simplex)."""
    inv = shared_frame.inverse()
    trajs, probs = [], []
    for m in marginals:
        order = torch.argsort(-m.prediction.P, stable=True)
        F_agent = m.prediction.F[order][:, :T_f]                    # [K, T_f, 2]
        to_shared = inv.compose(m.focal_pose)
        trajs.append(transform_points_torch(F_agent, to_shared))
        probs.append(m.prediction.P[order])
    return torch.stack(trajs, dim=1), torch.stack(probs, dim=1).mean(dim=1)


def build_world(module: ConsistencyModule | None, marginals: list[MarginalResult],
                shared_frame: Pose2D, focal_track_id: str, cfg: ModelConfig) -> WorldOutput:
    """Fuse marginal predictions into joint worlds. With `cfg.naive_worlds`
    (or no module) the consistency module is bypassed entirely."""
    if not marginals:
        raise ValueError("no scored agents with valid marginal predictions")
    T_f = cfg.T_f
    base, naive_scores = naive_world_stack(marginals, shared_frame, T_f)
    agent_ids = [m.agent_id for m in marginals]
    if cfg.naive_worlds or module is None:
        return WorldOutput(F_w=base, P_w=naive_scores,
                           world_logits=torch.log(naive_scores.clamp_min(1e-12)),
                           shared_frame=shared_frame, agent_ids=agent_ids,
                           marginals=marginals)
    inv = shared_frame.inverse()
    q_stack = torch.stack([m.prediction.q_decoded for m in marginals])  # [N_s, K, D]
    R_rows = []
    for m in marginals:
        rel = inv.compose(m.focal_pose)
        R_rows.append([rel.x, rel.y, np.sin(rel.yaw), np.cos(rel.yaw)])
    R = q_stack.new_tensor(R_rows)
    categories = torch.tensor([CATEGORIES.index(classify_agent_category(
        m.prediction, focal=m.agent_id == focal_track_id,
        threshold_m=cfg.parked_threshold_m, T_f=T_f)) for m in marginals])
    offsets, world_logits = module(q_stack, R, categories)
    P_w = torch.softmax(world_logits, dim=0)
    return WorldOutput(F_w=base + offsets, P_w=P_w, world_logits=world_logits,
                       shared_frame=shared_frame, agent_ids=agent_ids,
                       marginals=marginals)


class WorldModel(nn.Module):
    """Marginal predictor plus consistency module, checkpointed together."""

    def __init__(self, predictor, cfg: ModelConfig):
        super().__init__()
        self.predictor = predictor
        self.consistency = ConsistencyModule(cfg)
        self.cfg = cfg


@dataclass
class WorldStreamRecord:
    t_now: int
    world: WorldOutput
    elapsed_s: float


@dataclass
class WorldStreamResult:
    scenario_id: str
    records: list[WorldStreamRecord] = field(default_factory=list)
    excluded: dict = field(default_factory=dict)


def run_world_stream(world_model: WorldModel, scenario: Scenario,
                     protocol: str = "av2_like", times: list[int] | None = None,
                     detach_state: bool = True) -> WorldStreamResult:
    """Streaming protocol in the multi-agent setting: every scored agent is
    treated as focal with its own cross-frame state; each window's marginal
    predictions are fused by the consistency module."""
    cfg = world_model.cfg
    model = world_model.predictor
    schedule = streaming_schedule(scenario, protocol, times, T_h=cfg.T_h, T_f=cfg.T_f)
    dtype = next(model.parameters()).dtype
    states: dict[str, StreamState] = {}
    result = WorldStreamResult(scenario_id=scenario.scenario_id)
    for t_now in schedule:
        window = extract_window(scenario, t_now, cfg.T_h, cfg.T_f, cfg.T_a)
        stream_inputs = {}
        for agent_id, state in states.items():
            try:
                pose = focal_frame(window, agent_id)
            except (TensorizationError, KeyError):
                continue
            stream_inputs[agent_id] = align_state(state, pose, t_now, dtype)
        t0 = time.perf_counter()
        marginals, excluded = marginal_batch(model, window, stream_inputs)
        if excluded:
            result.excluded[t_now] = excluded
        if not marginals:
            raise TensorizationError(
                f"{scenario.scenario_id}: no valid scored agents at t_now={t_now}")
        shared_frame = focal_frame(window, scenario.focal_track_id)
        world = build_world(world_model.consistency, marginals, shared_frame,
                            scenario.focal_track_id, cfg)
        elapsed = time.perf_counter() - t0
        result.records.append(WorldStreamRecord(t_now=t_now, world=world, elapsed_s=elapsed))
        new_states = {}
        for m in marginals:
            bundle = m.bundle
            state = StreamState(
                S_prev=m.prediction.scene_tokens,
                token_poses_prev=np.concatenate([bundle.agent_poses, bundle.lane_poses])
                if bundle.lane_poses.size else bundle.agent_poses.copy(),
                token_is_agent_prev=np.concatenate(
                    [np.ones(len(bundle.track_ids), dtype=bool),
                     np.zeros(len(bundle.lane_ids), dtype=bool)]),
                F_prev=m.prediction.F[:, :cfg.T_f],
                focal_pose_prev=m.focal_pose,
                t_now=t_now,
            )
            new_states[m.agent_id] = state.detached() if detach_state else state
        states = new_states
    return result
