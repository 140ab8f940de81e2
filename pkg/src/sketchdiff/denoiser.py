"""Trainable noise-prediction network: a small U-shaped convolutional model
with sinusoidal time embeddings and cross-attention over conditioning tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError

TOKEN_SOURCES = ("text_branch", "sketch_adapter", "null")


@dataclass
class ConditioningTokens:
    """A fixed-shape token sequence [L, D_t] (or [B, L, D_t]) consumed by
    cross-attention; produced by the caption encoder or the sketch adapter."""

    tokens: torch.Tensor
    source: str = "null"

    def __post_init__(self):
        if self.source not in TOKEN_SOURCES:
            raise ConfigurationError(f"unknown token source {self.source!r}")
        if self.tokens.ndim not in (2, 3):
            raise ConfigurationError(f"tokens must be [L, D] or [B, L, D], got {tuple(self.tokens.shape)}")

    def batched(self, batch_size: int) -> torch.Tensor:
        """Return [B, L, D], broadcasting a single token set if needed."""
        if self.tokens.ndim == 2:
            return self.tokens.unsqueeze(0).expand(batch_size, -1, -1)
        if self.tokens.shape[0] != batch_size:
            raise ConfigurationError(
                f"token batch {self.tokens.shape[0]} != input batch {batch_size}")
        return self.tokens


@dataclass
class ModelConfig:
    resolution: int = 32
    in_channels: int = 3
    base_width: int = 32
    channel_mults: tuple = (1, 2, 2)
    res_blocks: int = 2
    token_len: int = 16
    token_dim: int = 128
    time_dim: int = 128

    def null_tokens(self, batch: int | None = None) -> ConditioningTokens:
        shape = (self.token_len, self.token_dim) if batch is None else (batch, self.token_len, self.token_dim)
        return ConditioningTokens(torch.zeros(shape), source="null")


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """t: [B] -> [B, dim] sinusoidal features."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / (half - 1))
    args = t[:, None].to(torch.float64) * freqs[None, :]
    return torch.cat([args.sin(), args.cos()], dim=-1).to(torch.float32)


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Scaled dot-product attention rows: softmax over keys, one row per query."""
    scale = q.shape[-1] ** -0.5
    return F.softmax(q @ k.transpose(-2, -1) * scale, dim=-1)


def cross_attention(spatial: torch.Tensor, tokens: torch.Tensor,
                    wq: torch.Tensor, wk: torch.Tensor, wv: torch.Tensor) -> torch.Tensor:
    """Queries from spatial rows [N, D], keys/values from tokens [L, D];
    returns the attention-weighted value projections, [N, D]."""
    attn = attention_weights(spatial @ wq, tokens @ wk)
    return attn @ (tokens @ wv)


def _groups(ch: int) -> int:
    g = 8
    while ch % g:
        g //= 2
    return max(g, 1)


class TokenCrossAttention(nn.Module):
    """Cross-attention from a spatial feature map to conditioning tokens."""

    def __init__(self, channels: int, token_dim: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.to_q = nn.Linear(channels, token_dim, bias=False)
        self.to_k = nn.Linear(token_dim, token_dim, bias=False)
        self.to_v = nn.Linear(token_dim, token_dim, bias=False)
        self.proj = nn.Linear(token_dim, channels)

    def forward(self, x: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        B, C, H, W = x.shape
        h = self.norm(x).view(B, C, H * W).transpose(1, 2)  # [B, N, C]
        q = self.to_q(h)
        k = self.to_k(tokens)
        v = self.to_v(tokens)
        attn = attention_weights(q, k)
        out = self.proj(attn @ v)  # [B, N, C]
        return x + out.transpose(1, 2).view(B, C, H, W)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, t_emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(t_emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """U-shaped eps-predictor with one cross-attention block per resolution."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.base_width
        td = cfg.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.conv_in = nn.Conv2d(cfg.in_channels, w, 3, padding=1)

        widths = [w * m for m in cfg.channel_mults]
        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        ch = w
        skip_chs = [w]
        for i, wo in enumerate(widths):
            blocks = nn.ModuleList()
            for _ in range(cfg.res_blocks):
                blocks.append(ResidualBlock(ch, wo, td))
                ch = wo
                skip_chs.append(ch)
            self.down_blocks.append(blocks)
            self.down_attn.append(TokenCrossAttention(ch, cfg.token_dim))
            last = i == len(widths) - 1
            self.downsample.append(nn.Identity() if last else nn.Conv2d(ch, ch, 3, stride=2, padding=1))
            if not last:
                skip_chs.append(ch)

        self.mid1 = ResidualBlock(ch, ch, td)
        self.mid_attn = TokenCrossAttention(ch, cfg.token_dim)
        self.mid2 = ResidualBlock(ch, ch, td)

        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i, wo in reversed(list(enumerate(widths))):
            blocks = nn.ModuleList()
            for _ in range(cfg.res_blocks + 1):
                blocks.append(ResidualBlock(ch + skip_chs.pop(), wo, td))
                ch = wo
            self.up_blocks.append(blocks)
            self.up_attn.append(TokenCrossAttention(ch, cfg.token_dim))
            self.upsample.append(nn.Identity() if i == 0 else nn.Conv2d(ch, ch, 3, padding=1))

        self.norm_out = nn.GroupNorm(_groups(ch), ch)
        self.conv_out = nn.Conv2d(ch, cfg.in_channels, 3, padding=1)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, x: torch.Tensor, t, tokens: ConditioningTokens) -> torch.Tensor:
        squeeze = x.ndim == 3
        if squeeze:
            x = x.unsqueeze(0)
        B = x.shape[0]
        if not torch.is_tensor(t):
            t = torch.full((B,), int(t), dtype=torch.long)
        tok = tokens.batched(B).to(x.dtype)
        if tok.shape[-1] != self.cfg.token_dim:
            raise ConfigurationError(
                f"token width {tok.shape[-1]} != configured token_dim {self.cfg.token_dim}")

        t_emb = self.time_mlp(sinusoidal_embedding(t, self.cfg.time_dim).to(x.dtype))
        h = self.conv_in(x)
        skips = [h]
        for blocks, attn, down in zip(self.down_blocks, self.down_attn, self.downsample):
            for blk in blocks:
                h = blk(h, t_emb)
                skips.append(h)
            h = attn(h, tok)
            if not isinstance(down, nn.Identity):
                h = down(h)
                skips.append(h)
        h = self.mid2(self.mid_attn(self.mid1(h, t_emb), tok), t_emb)
        for blocks, attn, up in zip(self.up_blocks, self.up_attn, self.upsample):
            for blk in blocks:
                h = blk(torch.cat([h, skips.pop()], dim=1), t_emb)
            h = attn(h, tok)
            if not isinstance(up, nn.Identity):
                h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
        out = self.conv_out(F.silu(self.norm_out(h)))
        return out.squeeze(0) if squeeze else out


def predict_noise(model: Denoiser, x_t: torch.Tensor, t, tokens: ConditioningTokens) -> torch.Tensor:
    """eps_hat = model(x_t, t, tokens); shape-preserving and differentiable."""
    return model(x_t, t, tokens)
