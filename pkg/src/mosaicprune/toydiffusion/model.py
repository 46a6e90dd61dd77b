"""Small class-conditional transformer that predicts the added noise."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 8
    channels: int = 1
    patch: int = 2
    d_model: int = 64
    n_heads: int = 4
    depth: int = 4
    mlp_ratio: int = 4
    num_classes: int = 2
    freq_dim: int = 64

    @property
    def tokens(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def mlp_hidden(self) -> int:
        return self.mlp_ratio * self.d_model

    @property
    def null_class(self) -> int:
        return self.num_classes

    def as_dict(self) -> dict:
        return asdict(self)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    return emb.to(torch.get_default_dtype())


class Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        assert d_model % n_heads == 0
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x):
        B, N, D = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        att = att.softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(B, N, D)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, d_model: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(d_model, hidden)
        self.fc2 = nn.Linear(hidden, d_model)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.attn = Attention(cfg.d_model, cfg.n_heads)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.mlp = Mlp(cfg.d_model, cfg.mlp_hidden)
        self.cond = nn.Linear(cfg.d_model, cfg.d_model)

    def forward(self, x, c):
        x = x + self.cond(c)[:, None, :]
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class Denoiser(nn.Module):
    """Patchify, add position/timestep/class conditioning, run blocks, unpatchify."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.patch_dim, cfg.d_model)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.tokens, cfg.d_model))
        self.t_mlp1 = nn.Linear(cfg.freq_dim, cfg.d_model)
        self.t_mlp2 = nn.Linear(cfg.d_model, cfg.d_model)
        self.y_embed = nn.Embedding(cfg.num_classes + 1, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.depth))
        self.norm_out = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.patch_dim)
        nn.init.normal_(self.pos_embed, std=0.02)

    def patchify(self, x):
        B, C, H, W = x.shape
        p = self.cfg.patch
        x = x.reshape(B, C, H // p, p, W // p, p).permute(0, 2, 4, 3, 5, 1)
        return x.reshape(B, (H // p) * (W // p), p * p * C)

    def unpatchify(self, tokens):
        cfg = self.cfg
        B = tokens.shape[0]
        g, p, C = cfg.image_size // cfg.patch, cfg.patch, cfg.channels
        x = tokens.reshape(B, g, g, p, p, C).permute(0, 5, 1, 3, 2, 4)
        return x.reshape(B, C, g * p, g * p)

    def forward(self, x, t, y):
        """``x``: (B, C, H, W); ``t``: (B,) integer timesteps; ``y``: (B,) labels, null = num_classes."""
        h = self.patch_embed(self.patchify(x)) + self.pos_embed
        temb = timestep_embedding(t, self.cfg.freq_dim).to(h.dtype)
        c = self.t_mlp2(F.silu(self.t_mlp1(temb))) + self.y_embed(y)
        c = F.silu(c)
        for blk in self.blocks:
            h = blk(h, c)
        return self.unpatchify(self.head(self.norm_out(h)))


def prunable_layers(model: Denoiser):
    """Yield ``(layer_id, module)`` for every Hessian-tracked linear layer."""
    for i, blk in enumerate(model.blocks):
        yield (i, "attn_out_proj"), blk.attn.proj
        yield (i, "mlp_down_proj"), blk.mlp.fc2
