"""The full streaming trajectory predictor.

Composes the agent/lane encoders, scene encoder, endpoint-anchored target
encoding, dual-context decoder, trajectory relay and the auxiliary
neighbor-trajectory head. A forward pass without streaming inputs is exactly
the snapshot model.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from ..config import ModelConfig
from ..streaming import ContextReference, StreamInputs, TrajectoryRelay
from ..tensorization import TensorBundle
from .decoder import DualContextDecoder
from .encoders import AgentEncoder, LaneEncoder, SceneEncoder, TargetEncoder

ENDPOINT_HEADING_EPS = 1e-4  # m; displacements below this define no heading


def wrap_angle_torch(a: torch.Tensor) -> torch.Tensor:
    return math.pi - torch.remainder(math.pi - a, 2.0 * math.pi)


@dataclass
class Prediction:
    F: torch.Tensor             # [K, T_f + T_a, 2] focal frame
    P: torch.Tensor             # [K] probabilities (softmax over modes)
    score_logits: torch.Tensor  # [K]
    q_decoded: torch.Tensor     # [K, D] decoded mode features
    aux_F: torch.Tensor         # [N_a - 1, T_f, 2] single-mode neighbor futures
    scene_tokens: torch.Tensor  # [N_c, D] encoded scene, carried to the next frame
    internals: dict = field(default=None)


def build_target_frames(F_prev: torch.Tensor) -> torch.Tensor:
    """Anchor frames [K, 3] from previous trajectories [K, T, 2]: origin at
    the endpoint, heading from the last displacement above threshold (walking
    backwards), zero for fully stationary trajectories."""
    K, T, _ = F_prev.shape
    origins = F_prev[:, -1]
    yaws = []
    for k in range(K):
        yaw = None
        for j in range(T - 2, -1, -1):
            d = F_prev[k, j + 1] - F_prev[k, j]
            if float(torch.hypot(d[0], d[1]).detach()) >= ENDPOINT_HEADING_EPS:
                yaw = torch.atan2(d[1], d[0])
                break
        yaws.append(yaw if yaw is not None else F_prev.new_zeros(()))
    return torch.cat([origins, torch.stack(yaws).unsqueeze(1)], dim=1)


def gather_target_context(tokens: torch.Tensor, token_poses: torch.Tensor,
                          token_mask: torch.Tensor, frames: torch.Tensor,
                          radius: float, cap: int):
    """Per-mode nearest-first gathering of tokens within `radius` of each
    anchor frame origin (inclusive), capped at `cap` members.

    Returns (members [K, M, D], member_poses [K, M, 3] relative to the frame,
    member_index [K, M], member_mask [K, M]) or None when every region is
    empty. Member poses stay differentiable with respect to the frames.
    """
    K = frames.shape[0]
    n = tokens.shape[0]
    origins = token_poses[:, :2]
    dist = torch.linalg.norm(origins.unsqueeze(0) - frames[:, :2].unsqueeze(1).detach(), dim=-1)
    selected: list[torch.Tensor] = []
    for k in range(K):
        eligible = (dist[k] <= radius) & token_mask
        order = torch.argsort(dist[k], stable=True)
        keep = order[eligible[order]][:cap]
        selected.append(keep)
    M = max(len(s) for s in selected)
    if M == 0:
        return None
    member_index = tokens.new_zeros((K, M), dtype=torch.long)
    member_mask = tokens.new_zeros((K, M), dtype=torch.bool)
    for k, keep in enumerate(selected):
        member_index[k, :len(keep)] = keep
        member_mask[k, :len(keep)] = True
    members = tokens[member_index] * member_mask.unsqueeze(-1)
    pose_sel = token_poses[member_index]                      # [K, M, 3]
    d_xy = pose_sel[:, :, :2] - frames[:, :2].unsqueeze(1)
    cos_y = torch.cos(-frames[:, 2]).view(K, 1)
    sin_y = torch.sin(-frames[:, 2]).view(K, 1)
    rel_x = cos_y * d_xy[..., 0] - sin_y * d_xy[..., 1]
    rel_y = sin_y * d_xy[..., 0] + cos_y * d_xy[..., 1]
    rel_yaw = wrap_angle_torch(pose_sel[:, :, 2] - frames[:, 2].unsqueeze(1))
    member_poses = torch.stack([rel_x, rel_y, rel_yaw], dim=-1) * member_mask.unsqueeze(-1)
    return members, member_poses, member_index, member_mask


class StreamingPredictor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.agent_encoder = AgentEncoder(cfg)
        self.lane_encoder = LaneEncoder(cfg)
        self.scene_encoder = SceneEncoder(cfg)
        self.target_encoder = TargetEncoder(cfg)
        self.decoder = DualContextDecoder(cfg)
        self.context_reference = ContextReference(cfg)
        self.trajectory_relay = TrajectoryRelay(cfg)
        self.aux_head = nn.Linear(cfg.D, 2 * cfg.T_f)

    def _tensor(self, arr: np.ndarray) -> torch.Tensor:
        return torch.as_tensor(arr, dtype=next(self.parameters()).dtype)

    def forward(self, bundle: TensorBundle, stream: StreamInputs | None = None,
                capture_internals: bool = False,
                target_encoder_depth: int | None = None) -> Prediction:
        cfg = self.cfg
        A = self._tensor(bundle.A)
        L = self._tensor(bundle.L)
        step_mask = torch.as_tensor(bundle.A[:, :, 4] > 0)
        point_mask = torch.as_tensor(bundle.L[:, :, 2] > 0) if bundle.L.size \
            else torch.zeros((0, cfg.P_l), dtype=torch.bool)
        n_agents = A.shape[0]
        token_poses = self._tensor(np.concatenate([bundle.agent_poses, bundle.lane_poses])
                                   if bundle.lane_poses.size else bundle.agent_poses)
        token_mask = torch.cat([torch.as_tensor(bundle.agent_mask),
                                torch.as_tensor(bundle.lane_mask)])

        A_e = self.agent_encoder(A, step_mask)
        L_e = self.lane_encoder(L, point_mask)
        C = self.scene_encoder.build_tokens(
            A_e, L_e, token_poses,
            torch.as_tensor(bundle.agent_types), torch.as_tensor(bundle.lane_types))

        if stream is not None and cfg.use_context_stream:
            motion = self._tensor(stream.motion.as_array())
            C = self.context_reference(
                C, n_agents, stream.S_prev, stream.prev_token_poses,
                stream.prev_token_is_agent, stream.prev_token_mask, motion)

        S = self.scene_encoder(C, token_mask)

        target = None
        frames = None
        if stream is not None and cfg.use_endpoint_context:
            anchors = stream.F_prev
            if stream.endpoint_noise is not None:
                noise = torch.zeros_like(anchors)
                noise[:, -1] = stream.endpoint_noise
                anchors = anchors + noise
            frames = build_target_frames(anchors)
            source = S if cfg.gather_from_scene else C
            target = gather_target_context(source, token_poses, token_mask, frames,
                                           cfg.r_target_m, cfg.max_target_tokens)

        T = member_mask = None
        if target is not None:
            members, member_poses, member_index, member_mask = target
            T = self.target_encoder(members, member_poses, frames, member_mask,
                                    depth=target_encoder_depth)

        F_out, P, logits, q_decoded = self.decoder(S, token_mask, T, member_mask)

        if stream is not None and cfg.use_trajectory_relay:
            F_out = self.trajectory_relay(F_out, q_decoded, stream.F_prev)

        agent_tokens = S[:n_agents]
        others = torch.cat([agent_tokens[:bundle.focal_index],
                            agent_tokens[bundle.focal_index + 1:]])
        aux_F = self.aux_head(others).view(-1, cfg.T_f, 2)

        internals = None
        if capture_internals:
            internals = {
                "A_e": A_e.detach(), "L_e": L_e.detach(), "C": C.detach(),
                "S": S.detach(),
                "target_frames": frames.detach() if frames is not None else None,
                "member_index": target[2] if target is not None else None,
                "member_mask": target[3] if target is not None else None,
                "T": T.detach() if T is not None else None,
                "decoder_cross_attention_count": self.decoder.last_cross_attention_count,
            }
        return Prediction(F=F_out, P=P, score_logits=logits, q_decoded=q_decoded,
                          aux_F=aux_F, scene_tokens=S, internals=internals)
