"""Cross-frame streaming machinery.

Holds the learned modules that move information between prediction frames
(motion-conditioned normalization of the previous scene encoding, context
referencing via cross-attention, trajectory relay) plus the frame-to-frame
state container, ego-motion alignment, and the sliding-window driver.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig
from .geometry import Pose2D, compose_pose_array
from .model.layers import AttentionBlock, PoseEmbedding, two_layer_head
from .scenario import Scenario, extract_window, streaming_schedule
from .tensorization import TensorBundle, local_to_global, tensorize


def relative_motion(prev: Pose2D, cur: Pose2D) -> Pose2D:
    """Pose of the previous focal frame expressed in the current focal frame."""
    return cur.inverse().compose(prev)


def transform_points_torch(points: torch.Tensor, pose: Pose2D) -> torch.Tensor:
    """Differentiable rigid transform of [..., 2] points by a (constant) pose."""
    c, s = np.cos(pose.yaw), np.sin(pose.yaw)
    rot = points.new_tensor([[c, -s], [s, c]])
    t = points.new_tensor([pose.x, pose.y])
    return points @ rot.T + t


class MotionLayerNorm(nn.Module):
    """Layer normalization whose scale/shift are predicted from the focal
    agent's frame-to-frame motion. Zero-initialized, so it starts as plain
    (non-affine) layer normalization."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.motion_embed = PoseEmbedding(cfg.D)
        self.norm = nn.LayerNorm(cfg.D, elementwise_affine=False)
        self.gamma = nn.Linear(cfg.D, cfg.D)
        self.beta = nn.Linear(cfg.D, cfg.D)
        for lin in (self.gamma, self.beta):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, features: torch.Tensor, motion: torch.Tensor) -> torch.Tensor:
        m = self.motion_embed(motion)
        return self.norm(features) * (1.0 + self.gamma(m)) + self.beta(m)


class ContextReference(nn.Module):
    """Inject the previous frame's scene encoding into the current tokens:
    agent tokens attend to all previous tokens, lane tokens to previous lane
    tokens only. Attention-only residual blocks, so a fully-masked previous
    frame leaves the tokens unchanged."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.mln = MotionLayerNorm(cfg)
        self.prev_pose_embed = PoseEmbedding(cfg.D)
        self.agent_to_scene = AttentionBlock(cfg.D, cfg.n_heads, cfg.dropout,
                                             cfg.ffn_mult, with_ffn=False)
        self.map_to_map = AttentionBlock(cfg.D, cfg.n_heads, cfg.dropout,
                                         cfg.ffn_mult, with_ffn=False)

    def forward(self, C: torch.Tensor, n_agents: int, S_prev: torch.Tensor,
                prev_poses: torch.Tensor, prev_is_agent: torch.Tensor,
                prev_mask: torch.Tensor, motion: torch.Tensor) -> torch.Tensor:
        prev = self.mln(S_prev, motion) + self.prev_pose_embed(prev_poses)
        mem = prev.unsqueeze(0)
        agents = self.agent_to_scene(
            C[:n_agents].unsqueeze(0), memory=mem, key_mask=prev_mask.unsqueeze(0))
        lanes = C[n_agents:]
        if lanes.shape[0]:
            lane_key_mask = (prev_mask & ~prev_is_agent).unsqueeze(0)
            lanes = self.map_to_map(lanes.unsqueeze(0), memory=mem,
                                    key_mask=lane_key_mask).squeeze(0)
        return torch.cat([agents.squeeze(0), lanes])


class TrajectoryRelay(nn.Module):
    """Refine current mode trajectories with offsets attended from embedded
    previous-frame predictions. The offset head is zero-initialized, so the
    relay is the identity at the start of training."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.traj_embed = nn.Sequential(
            nn.Linear(2 * cfg.T_f, cfg.D), nn.GELU(), nn.Linear(cfg.D, cfg.D))
        self.block = AttentionBlock(cfg.D, cfg.n_heads, cfg.dropout, cfg.ffn_mult)
        self.offset_head = two_layer_head(cfg.D, 2 * cfg.horizon, zero_init=True)
        self.horizon = cfg.horizon

    def forward(self, F_cur: torch.Tensor, q_decoded: torch.Tensor,
                F_prev: torch.Tensor) -> torch.Tensor:
        K = F_cur.shape[0]
        emb = self.traj_embed(F_prev.reshape(K, -1))
        att = self.block(q_decoded.unsqueeze(0), memory=emb.unsqueeze(0)).squeeze(0)
        return F_cur + self.offset_head(att).view(K, self.horizon, 2)


# ---------------------------------------------------------------------------
# Cross-frame state

@dataclass
class StreamState:
    """Quantities carried from one prediction frame to the next, all expressed
    in the frame they were produced in."""
    S_prev: torch.Tensor              # [N_prev, D] encoded scene tokens
    token_poses_prev: np.ndarray      # [N_prev, 3] previous focal frame
    token_is_agent_prev: np.ndarray   # [N_prev] bool
    F_prev: torch.Tensor              # [K, T_f, 2] previous focal frame
    focal_pose_prev: Pose2D           # global
    t_now: int                        # frame tag for freshness checks

    def detached(self) -> "StreamState":
        return StreamState(self.S_prev.detach(), self.token_poses_prev,
                           self.token_is_agent_prev, self.F_prev.detach(),
                           self.focal_pose_prev, self.t_now)


@dataclass
class StreamInputs:
    """StreamState aligned into the current focal frame, model-ready."""
    S_prev: torch.Tensor
    prev_token_poses: torch.Tensor    # [N_prev, 3] current focal frame
    prev_token_is_agent: torch.Tensor
    prev_token_mask: torch.Tensor
    F_prev: torch.Tensor              # [K, T_f, 2] current focal frame
    motion: Pose2D                    # previous frame in current frame
    endpoint_noise: torch.Tensor | None = None  # [K, 2] anchor perturbation


def align_state(state: StreamState, cur_focal_pose: Pose2D, cur_t_now: int,
                dtype: torch.dtype) -> StreamInputs:
    """Re-express a StreamState in the focal frame at `cur_focal_pose`."""
    assert cur_t_now > state.t_now, "stream state is not from an earlier frame"
    motion = relative_motion(state.focal_pose_prev, cur_focal_pose)
    poses = compose_pose_array(motion, state.token_poses_prev)
    return StreamInputs(
        S_prev=state.S_prev,
        prev_token_poses=torch.as_tensor(poses, dtype=dtype),
        prev_token_is_agent=torch.as_tensor(state.token_is_agent_prev),
        prev_token_mask=torch.ones(len(poses), dtype=torch.bool),
        F_prev=transform_points_torch(state.F_prev, motion),
        motion=motion,
    )


# ---------------------------------------------------------------------------
# Endpoint-noise harness

@dataclass
class EndpointNoise:
    kind: str = "none"       # "none" | "uniform" | "gauss"
    scale: float = 0.0

    def sample(self, rng: np.random.Generator, K: int) -> np.ndarray | None:
        if self.kind == "none":
            return None
        if self.kind == "uniform":
            return rng.uniform(-self.scale, self.scale, size=(K, 2))
        if self.kind == "gauss":
            return rng.normal(0.0, self.scale, size=(K, 2))
        raise ValueError(f"unknown noise kind {self.kind!r}")

    @property
    def label(self) -> str:
        if self.kind == "none":
            return "none"
        return {"uniform": f"U(-{self.scale:g},{self.scale:g})",
                "gauss": f"N(0,{self.scale:g})"}[self.kind]


# ---------------------------------------------------------------------------
# Sliding-window driver

@dataclass
class StreamRecord:
    t_now: int
    prediction: object                # Prediction (focal frame)
    F_global: np.ndarray              # [K, horizon, 2]
    P: np.ndarray                     # [K]
    focal_pose: Pose2D
    elapsed_s: float
    internals: dict | None = None


@dataclass
class StreamResult:
    scenario_id: str
    records: list[StreamRecord] = field(default_factory=list)


def run_stream(model, scenario: Scenario, protocol: str = "av2_like",
               times: list[int] | None = None,
               focal_track_id: str | None = None,
               endpoint_noise: EndpointNoise | None = None,
               noise_rng: np.random.Generator | None = None,
               capture_internals: bool = False,
               detach_state: bool = True,
               target_encoder_depth: int | None = None) -> StreamResult:
    """Run the full sliding-window protocol over one scenario.

    The first window runs without streaming inputs; afterwards the state is
    aligned into each new focal frame before the forward pass. Output
    trajectories are returned in the global frame.
    """
    cfg: ModelConfig = model.cfg
    schedule = streaming_schedule(scenario, protocol, times, T_h=cfg.T_h, T_f=cfg.T_f)
    dtype = next(model.parameters()).dtype
    result = StreamResult(scenario_id=scenario.scenario_id)
    state: StreamState | None = None
    for t_now in schedule:
        window = extract_window(scenario, t_now, cfg.T_h, cfg.T_f, cfg.T_a)
        bundle = tensorize(window, cfg.P_l, cfg.context_radius_m, focal_track_id)
        stream = None
        if state is not None:
            stream = align_state(state, bundle.focal_pose, t_now, dtype)
            if endpoint_noise is not None and endpoint_noise.kind != "none":
                noise = endpoint_noise.sample(noise_rng or np.random.default_rng(0), cfg.K)
                stream.endpoint_noise = torch.as_tensor(noise, dtype=dtype)
        t0 = time.perf_counter()
        pred = model(bundle, stream, capture_internals=capture_internals,
                     target_encoder_depth=target_encoder_depth)
        elapsed = time.perf_counter() - t0
        F_local = pred.F.detach().cpu().numpy()
        result.records.append(StreamRecord(
            t_now=t_now, prediction=pred,
            F_global=local_to_global(F_local, bundle.focal_pose),
            P=pred.P.detach().cpu().numpy(),
            focal_pose=bundle.focal_pose, elapsed_s=elapsed,
            internals=pred.internals if capture_internals else None,
        ))
        state = StreamState(
            S_prev=pred.scene_tokens,
            token_poses_prev=np.concatenate([bundle.agent_poses, bundle.lane_poses])
            if bundle.lane_poses.size else bundle.agent_poses.copy(),
            token_is_agent_prev=np.concatenate(
                [np.ones(len(bundle.track_ids), dtype=bool),
                 np.zeros(len(bundle.lane_ids), dtype=bool)]),
            F_prev=pred.F[:, :cfg.T_f],
            focal_pose_prev=bundle.focal_pose,
            t_now=t_now,
        )
        if detach_state:
            state = state.detached()
    return result
