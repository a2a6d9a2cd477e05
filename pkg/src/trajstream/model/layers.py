"""Shared neural building blocks: pose embeddings, masked attention, heads.

Attention is implemented directly (not via torch's fused modules) so that
fully-masked query rows contribute exactly zero through the residual path
instead of NaNs, which the padding-soundness contract relies on.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class PoseEmbedding(nn.Module):
    """(x, y, yaw) -> (x, y, sin yaw, cos yaw) -> Linear(4, D), GELU, Linear(D, D)."""

    def __init__(self, dim: int, in_features: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(in_features, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, poses: torch.Tensor) -> torch.Tensor:
        if poses.shape[-1] == 3:
            poses = torch.cat(
                [poses[..., :2], torch.sin(poses[..., 2:3]), torch.cos(poses[..., 2:3])], dim=-1)
        return self.fc2(F.gelu(self.fc1(poses)))


class MaskedAttention(nn.Module):
    """Scaled dot-product multi-head attention over [B, N, D] tensors.

    `key_mask` marks valid keys (True = attend). Queries whose keys are all
    masked receive a zero attention output.
    """

    def __init__(self, dim: int, n_heads: int, dropout: float):
        super().__init__()
        assert dim % n_heads == 0
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, query: torch.Tensor, key: torch.Tensor, value: torch.Tensor,
                key_mask: torch.Tensor | None = None) -> torch.Tensor:
        B, Nq, D = query.shape
        Nk = key.shape[1]
        h, hd = self.n_heads, self.head_dim
        q = self.q_proj(query).view(B, Nq, h, hd).transpose(1, 2)
        k = self.k_proj(key).view(B, Nk, h, hd).transpose(1, 2)
        v = self.v_proj(value).view(B, Nk, h, hd).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(hd)
        if key_mask is not None:
            bad = ~key_mask.view(B, 1, 1, Nk)
            scores = scores.masked_fill(bad, float("-inf"))
            attn = torch.softmax(scores, dim=-1)
            attn = torch.where(bad.expand_as(attn).all(dim=-1, keepdim=True),
                               torch.zeros_like(attn), attn)
        else:
            attn = torch.softmax(scores, dim=-1)
        attn = self.drop(attn)
        out = (attn @ v).transpose(1, 2).reshape(B, Nq, D)
        return self.out_proj(out)


class AttentionBlock(nn.Module):
    """Pre-norm transformer block: attention + GELU feedforward, residual.

    Self-attention when `memory` is omitted, cross-attention otherwise.
    With `with_ffn=False` the block is a pure attention residual, so an
    all-masked memory leaves the input exactly unchanged.
    """

    def __init__(self, dim: int, n_heads: int, dropout: float, ffn_mult: int = 4,
                 with_ffn: bool = True):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = MaskedAttention(dim, n_heads, dropout)
        if with_ffn:
            self.norm_ffn = nn.LayerNorm(dim)
            self.ffn = nn.Sequential(
                nn.Linear(dim, ffn_mult * dim), nn.GELU(), nn.Linear(ffn_mult * dim, dim))
        else:
            self.norm_ffn = None
            self.ffn = None
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, memory: torch.Tensor | None = None,
                key_mask: torch.Tensor | None = None) -> torch.Tensor:
        q = self.norm_q(x)
        kv = q if memory is None else self.norm_kv(memory)
        x = x + self.drop(self.attn(q, kv, kv, key_mask))
        if self.ffn is not None:
            x = x + self.drop(self.ffn(self.norm_ffn(x)))
        return x


def two_layer_head(dim: int, out_features: int, zero_init: bool = False) -> nn.Sequential:
    """Linear(D, 2D), ReLU, Linear(2D, out); optionally zero-initialized output."""
    head = nn.Sequential(nn.Linear(dim, 2 * dim), nn.ReLU(), nn.Linear(2 * dim, out_features))
    if zero_init:
        nn.init.zeros_(head[2].weight)
        nn.init.zeros_(head[2].bias)
    return head


def embed_mlp(in_features: int, dim: int) -> nn.Sequential:
    """Embedding-style two-layer MLP with GELU."""
    return nn.Sequential(nn.Linear(in_features, dim), nn.GELU(), nn.Linear(dim, dim))
