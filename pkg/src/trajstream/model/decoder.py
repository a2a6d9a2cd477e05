"""Dual-context decoder: learnable mode queries alternating cross-attention
between the scene encoding and per-mode target-region encodings."""
from __future__ import annotations

import torch
import torch.nn as nn

from ..config import ModelConfig
from .layers import AttentionBlock, two_layer_head


class DualContextDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.queries = nn.Parameter(torch.empty(cfg.K, cfg.D))
        nn.init.normal_(self.queries, std=0.02)
        self.scene_blocks = nn.ModuleList(
            AttentionBlock(cfg.D, cfg.n_heads, cfg.dropout, cfg.ffn_mult)
            for _ in range(cfg.decoder_stages))
        self.target_blocks = nn.ModuleList(
            AttentionBlock(cfg.D, cfg.n_heads, cfg.dropout, cfg.ffn_mult)
            for _ in range(cfg.decoder_stages))
        self.traj_head = two_layer_head(cfg.D, 2 * cfg.horizon)
        self.score_head = two_layer_head(cfg.D, 1)
        self.horizon = cfg.horizon
        # instrumentation: cross-attention block executions in the last call
        self.last_cross_attention_count = 0

    def forward(self, S: torch.Tensor, token_mask: torch.Tensor,
                T: torch.Tensor | None = None,
                member_mask: torch.Tensor | None = None):
        """Decode mode trajectories and scores.

        S: [N_c, D] scene tokens; T: [K, M, D] per-mode target tokens or None.
        Modes whose target region is empty bypass the target stage unchanged.
        Returns (F [K, horizon, 2], P [K], score_logits [K], Q_decoded [K, D]).
        """
        K = self.queries.shape[0]
        q = self.queries.unsqueeze(0)                      # [1, K, D]
        smask = token_mask.unsqueeze(0)
        self.last_cross_attention_count = 0
        use_target = T is not None and member_mask is not None and bool(member_mask.any())
        if use_target:
            has_members = member_mask.any(dim=1)           # [K]
        for scene_blk, target_blk in zip(self.scene_blocks, self.target_blocks):
            q = scene_blk(q, memory=S.unsqueeze(0), key_mask=smask)
            self.last_cross_attention_count += 1
            if use_target:
                per_mode = q.squeeze(0).unsqueeze(1)       # [K, 1, D]
                attended = target_blk(per_mode, memory=T, key_mask=member_mask)
                per_mode = torch.where(has_members.view(K, 1, 1), attended, per_mode)
                q = per_mode.squeeze(1).unsqueeze(0)
                self.last_cross_attention_count += 1
        q_decoded = q.squeeze(0)                           # [K, D]
        F_out = self.traj_head(q_decoded).view(K, self.horizon, 2)
        logits = self.score_head(q_decoded).squeeze(-1)
        P = torch.softmax(logits, dim=0)
        return F_out, P, logits, q_decoded
