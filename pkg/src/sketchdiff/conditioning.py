"""Conditioning-token producers: the caption-token encoder (frozen text
branch), the sketch patch encoder, and the trainable adapter mapping patch
embeddings to text-equivalent conditioning tokens.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .denoiser import ConditioningTokens, attention_weights
from .errors import ConfigurationError, InputError

# Attribute vocabulary: id 0 is padding; captions are [class, color, size, texture]
# padded to the conditioning token length.
CLASS_NAMES = ("circle", "square", "triangle", "star", "cross", "crescent", "heart", "arrow")
COLOR_NAMES = ("red", "green", "blue", "yellow", "purple", "orange")
SIZE_NAMES = ("small", "medium", "large")
TEXTURE_NAMES = ("plain", "striped", "dotted")

PAD_ID = 0
VOCAB = (
    ("<pad>",)
    + tuple(f"class:{c}" for c in CLASS_NAMES)
    + tuple(f"color:{c}" for c in COLOR_NAMES)
    + tuple(f"size:{s}" for s in SIZE_NAMES)
    + tuple(f"texture:{t}" for t in TEXTURE_NAMES)
)
VOCAB_SIZE = len(VOCAB)
_OFFSET_CLASS = 1
_OFFSET_COLOR = _OFFSET_CLASS + len(CLASS_NAMES)
_OFFSET_SIZE = _OFFSET_COLOR + len(COLOR_NAMES)
_OFFSET_TEXTURE = _OFFSET_SIZE + len(SIZE_NAMES)


def caption_ids(class_id: int, color_id: int, size_id: int, texture_id: int,
                length: int = 16) -> list[int]:
    """Token id sequence for one attribute caption, padded to `length`."""
    ids = [
        _OFFSET_CLASS + class_id,
        _OFFSET_COLOR + color_id,
        _OFFSET_SIZE + size_id,
        _OFFSET_TEXTURE + texture_id,
    ]
    return ids + [PAD_ID] * (length - len(ids))


def class_token_id(class_id: int) -> int:
    return _OFFSET_CLASS + class_id


def save_vocab(path) -> None:
    with open(path, "w") as f:
        json.dump(list(VOCAB), f, indent=0)


@dataclass
class PatchEmbedding:
    """Per-patch sketch features [S, D_s] (or [B, S, D_s]); S includes one
    leading global token."""

    patches: torch.Tensor

    @property
    def seq_len(self) -> int:
        return self.patches.shape[-2]

    @property
    def dim(self) -> int:
        return self.patches.shape[-1]

    def batched(self) -> torch.Tensor:
        return self.patches if self.patches.ndim == 3 else self.patches.unsqueeze(0)


class SelfAttentionBlock(nn.Module):
    """Single-head pre-norm self-attention with residual connection."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm(x)
        attn = attention_weights(self.to_q(h), self.to_k(h))
        return x + self.proj(attn @ self.to_v(h))


class CaptionEncoder(nn.Module):
    """Embedding table + positional embedding + one self-attention block;
    pretrained with the toy denoiser and frozen afterwards."""

    def __init__(self, token_len: int = 16, token_dim: int = 128, vocab_size: int = VOCAB_SIZE):
        super().__init__()
        self.token_len = token_len
        self.vocab_size = vocab_size
        self.embed = nn.Embedding(vocab_size, token_dim)
        self.pos = nn.Parameter(torch.zeros(token_len, token_dim))
        self.attn = SelfAttentionBlock(token_dim)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.max() >= self.vocab_size or ids.min() < 0:
            raise InputError(f"token id outside vocabulary [0, {self.vocab_size})")
        if ids.shape[-1] != self.token_len:
            raise ConfigurationError(f"caption length {ids.shape[-1]} != {self.token_len}")
        x = self.embed(ids) + self.pos
        return self.attn(x)


def encode_caption(ids: torch.Tensor, encoder: CaptionEncoder) -> ConditioningTokens:
    """Caption ids -> [L, D_t] conditioning tokens tagged `text_branch`."""
    if not torch.is_tensor(ids):
        ids = torch.as_tensor(ids, dtype=torch.long)
    return ConditioningTokens(encoder(ids), source="text_branch")


class SketchEncoder(nn.Module):
    """Convolutional patch encoder over 1-channel sketches.

    Emits [S, D_s] patch features (global token first) plus an unnormalized
    global feature whose magnitude carries the abstraction signal. The trunk
    is shared between conditioning and the abstraction classifier.
    """

    def __init__(self, resolution: int = 32, patch_dim: int = 256, feature_dim: int = 128):
        super().__init__()
        self.resolution = resolution
        self.patch_dim = patch_dim
        self.feature_dim = feature_dim
        self.trunk = nn.Sequential(
            nn.Conv2d(1, 64, 3, stride=2, padding=1), nn.SiLU(),      # 32 -> 16
            nn.Conv2d(64, 128, 3, stride=2, padding=1), nn.SiLU(),    # 16 -> 8
            nn.Conv2d(128, patch_dim, 3, padding=1), nn.SiLU(),
        )
        self.feature_head = nn.Linear(patch_dim, feature_dim)

    def _check(self, sketch: torch.Tensor) -> torch.Tensor:
        x = sketch if sketch.ndim == 4 else sketch.unsqueeze(0)
        if x.shape[-3] != 1 or x.shape[-1] != self.resolution or x.shape[-2] != self.resolution:
            raise ConfigurationError(
                f"expected [1, {self.resolution}, {self.resolution}] sketch, got {tuple(sketch.shape)}")
        return x

    def patch_grid(self, sketch: torch.Tensor) -> torch.Tensor:
        return self.trunk(self._check(sketch))

    def forward(self, sketch: torch.Tensor) -> torch.Tensor:
        """[B?, 1, H, W] -> [B?, S, D_s] with S = 1 + (H/4)^2."""
        squeeze = sketch.ndim == 3
        grid = self.patch_grid(sketch)                     # [B, D_s, 8, 8]
        B, D, H, W = grid.shape
        patches = grid.view(B, D, H * W).transpose(1, 2)   # [B, 64, D_s]
        global_tok = patches.mean(dim=1, keepdim=True)
        out = torch.cat([global_tok, patches], dim=1)      # [B, 65, D_s]
        return out.squeeze(0) if squeeze else out

    def global_feature(self, sketch: torch.Tensor) -> torch.Tensor:
        """Unnormalized [B?, feature_dim] vector; its l2-norm scores abstraction."""
        squeeze = sketch.ndim == 3
        pooled = self.patch_grid(sketch).mean(dim=(2, 3))
        feat = self.feature_head(pooled)
        return feat.squeeze(0) if squeeze else feat


def encode_sketch(sketch: torch.Tensor, encoder: SketchEncoder) -> PatchEmbedding:
    """Sketch raster -> patch embedding via the (frozen) encoder."""
    return PatchEmbedding(encoder(sketch))


@dataclass
class AdapterConfig:
    seq_len: int = 65       # S, including the global token
    patch_dim: int = 256    # D_s
    token_len: int = 16     # L
    token_dim: int = 128    # D_t


class SketchAdapter(nn.Module):
    """Maps patch embeddings [S, D_s] to conditioning tokens [L, D_t]:
    a 1-D convolution stack over the patch sequence, one self-attention
    block, and a final fully-connected projection."""

    def __init__(self, cfg: AdapterConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.token_dim
        self.convs = nn.Sequential(
            nn.Conv1d(cfg.patch_dim, d, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv1d(d, d, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv1d(d, d, 3, stride=1, padding=1), nn.SiLU(),
        )
        self.attn = SelfAttentionBlock(d)
        self.fc = nn.Linear(d, d)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        squeeze = patches.ndim == 2
        x = patches.unsqueeze(0) if squeeze else patches
        if x.shape[-1] != self.cfg.patch_dim or x.shape[-2] != self.cfg.seq_len:
            raise ConfigurationError(
                f"expected patches [{self.cfg.seq_len}, {self.cfg.patch_dim}], got {tuple(patches.shape[-2:])}")
        h = self.convs(x.transpose(1, 2))                       # [B, D_t, S']
        h = F.adaptive_avg_pool1d(h, self.cfg.token_len)        # [B, D_t, L]
        h = self.attn(h.transpose(1, 2))                        # [B, L, D_t]
        out = self.fc(h)
        return out.squeeze(0) if squeeze else out


class PlainSketchMapper(nn.Module):
    """Ablation stand-in for the adapter: convolution + projection only,
    no attention block."""

    def __init__(self, cfg: AdapterConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.token_dim
        self.convs = nn.Sequential(
            nn.Conv1d(cfg.patch_dim, d, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv1d(d, d, 3, stride=2, padding=1), nn.SiLU(),
        )
        self.fc = nn.Linear(d, d)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        squeeze = patches.ndim == 2
        x = patches.unsqueeze(0) if squeeze else patches
        if x.shape[-1] != self.cfg.patch_dim or x.shape[-2] != self.cfg.seq_len:
            raise ConfigurationError(
                f"expected patches [{self.cfg.seq_len}, {self.cfg.patch_dim}], got {tuple(patches.shape[-2:])}")
        h = self.convs(x.transpose(1, 2))
        h = F.adaptive_avg_pool1d(h, self.cfg.token_len)
        out = self.fc(h.transpose(1, 2))
        return out.squeeze(0) if squeeze else out


def adapt(emb: PatchEmbedding, adapter: nn.Module) -> ConditioningTokens:
    """Patch embedding -> [L, D_t] conditioning tokens tagged `sketch_adapter`."""
    return ConditioningTokens(adapter(emb.patches), source="sketch_adapter")
