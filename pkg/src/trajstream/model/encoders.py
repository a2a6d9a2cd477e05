"""Agent-history, lane, scene and target-region encoders."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..config import ModelConfig
from .layers import AttentionBlock, PoseEmbedding

NEG_INF = float("-inf")


def masked_max_pool(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Max over dim 1 of [B, N, D] restricted to mask-valid rows."""
    filled = x.masked_fill(~mask.unsqueeze(-1), NEG_INF)
    return filled.max(dim=1).values


class AgentEncoder(nn.Module):
    """Temporal self-attention over each track's history, pooled to one token."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.proj = nn.Linear(5, cfg.D)
        self.blocks = nn.ModuleList(
            AttentionBlock(cfg.D, cfg.n_heads, cfg.dropout, cfg.ffn_mult)
            for _ in range(cfg.blocks_fA))
        self.pool = cfg.temporal_pool

    def forward(self, A: torch.Tensor, step_mask: torch.Tensor) -> torch.Tensor:
        # A: [N_a, T_h, 5], step_mask: [N_a, T_h]
        assert bool(step_mask.any(dim=1).all()), "agent with zero valid steps"
        x = self.proj(A)
        for blk in self.blocks:
            x = blk(x, key_mask=step_mask)
        if self.pool == "last":
            last = step_mask.float().cumsum(dim=1).argmax(dim=1)
            return x[torch.arange(x.shape[0]), last]
        return masked_max_pool(x, step_mask)


class LaneEncoder(nn.Module):
    """Mini point-net over resampled centerline points."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        D = cfg.D
        self.point_fc1 = nn.Linear(3, D)
        self.point_fc2 = nn.Linear(D, D)
        self.mix = nn.Linear(2 * D, D)

    def forward(self, L: torch.Tensor, point_mask: torch.Tensor) -> torch.Tensor:
        # L: [N_l, P_l, 3], point_mask: [N_l, P_l]
        if L.shape[0] == 0:
            return L.new_zeros((0, self.mix.out_features))
        x = self.point_fc2(F.gelu(self.point_fc1(L)))
        x = x * point_mask.unsqueeze(-1)
        pooled = masked_max_pool(x, point_mask)
        x = torch.cat([x, pooled.unsqueeze(1).expand_as(x)], dim=-1)
        x = self.mix(x)
        return masked_max_pool(x, point_mask)


class SceneEncoder(nn.Module):
    """Joint self-attention over agent and lane tokens in the focal frame."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.agent_type_embed = nn.Embedding(cfg.n_agent_types, cfg.D)
        self.lane_type_embed = nn.Embedding(cfg.n_lane_types, cfg.D)
        self.pose_embed = PoseEmbedding(cfg.D)
        self.blocks = nn.ModuleList(
            AttentionBlock(cfg.D, cfg.n_heads, cfg.dropout, cfg.ffn_mult)
            for _ in range(cfg.blocks_fS))

    def build_tokens(self, A_e: torch.Tensor, L_e: torch.Tensor,
                     token_poses: torch.Tensor, agent_types: torch.Tensor,
                     lane_types: torch.Tensor) -> torch.Tensor:
        types = torch.cat([self.agent_type_embed(agent_types), self.lane_type_embed(lane_types)])
        return torch.cat([A_e, L_e]) + types + self.pose_embed(token_poses)

    def forward(self, tokens: torch.Tensor, token_mask: torch.Tensor) -> torch.Tensor:
        x = tokens.unsqueeze(0)
        for blk in self.blocks:
            x = blk(x, key_mask=token_mask.unsqueeze(0))
        return x.squeeze(0)


class TargetEncoder(nn.Module):
    """Per-region self-attention over tokens gathered around each endpoint
    anchor, expressed in the anchor's frame. Regions are batched over modes."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.rel_pose_embed = PoseEmbedding(cfg.D)
        self.anchor_pose_embed = PoseEmbedding(cfg.D)
        self.blocks = nn.ModuleList(
            AttentionBlock(cfg.D, cfg.n_heads, cfg.dropout, cfg.ffn_mult)
            for _ in range(cfg.blocks_fT))

    def forward(self, members: torch.Tensor, member_poses: torch.Tensor,
                anchor_poses: torch.Tensor, member_mask: torch.Tensor,
                depth: int | None = None) -> torch.Tensor:
        # members: [K, M, D]; member_poses: [K, M, 3]; anchor_poses: [K, 3]
        x = members + self.rel_pose_embed(member_poses) \
            + self.anchor_pose_embed(anchor_poses).unsqueeze(1)
        blocks = self.blocks if depth is None else self.blocks[:depth]
        for blk in blocks:
            x = blk(x, key_mask=member_mask)
        return x * member_mask.unsqueeze(-1)
