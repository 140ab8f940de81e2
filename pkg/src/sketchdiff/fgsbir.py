"""Fine-grained sketch/photo retrieval embedder: trained in-repo with a
batch-hard triplet objective, then frozen to provide the discriminative loss
and the FGM evaluation metric.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InputError, StateError

BRANCHES = ("sketch", "photo")


class SbirEmbedder(nn.Module):
    """Two-branch encoder: per-modality input stems over a shared trunk,
    emitting unit-norm embeddings."""

    def __init__(self, resolution: int = 32, embed_dim: int = 64):
        super().__init__()
        self.resolution = resolution
        self.embed_dim = embed_dim
        self.sketch_stem = nn.Conv2d(1, 32, 3, padding=1)
        self.photo_stem = nn.Conv2d(3, 32, 3, padding=1)
        self.trunk = nn.Sequential(
            nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.SiLU(),   # 32 -> 16
            nn.Conv2d(64, 128, 3, stride=2, padding=1), nn.SiLU(),  # 16 -> 8
            nn.Conv2d(128, 128, 3, stride=2, padding=1), nn.SiLU(), # 8 -> 4
        )
        self.head = nn.Linear(128, embed_dim)
        self.trained = False

    def forward(self, image: torch.Tensor, branch: str) -> torch.Tensor:
        if branch not in BRANCHES:
            raise ConfigurationError(f"unknown branch {branch!r}")
        squeeze = image.ndim == 3
        x = image.unsqueeze(0) if squeeze else image
        stem = self.sketch_stem if branch == "sketch" else self.photo_stem
        h = self.trunk(stem(x)).mean(dim=(2, 3))
        v = F.normalize(self.head(h), dim=1)
        return v.squeeze(0) if squeeze else v


def embed(model: SbirEmbedder, image: torch.Tensor, branch: str) -> torch.Tensor:
    """Unit-norm embedding of an image through the given branch; requires a
    trained model."""
    if not model.trained:
        raise StateError("FG-SBIR embedder has not been trained")
    return model(image, branch)


def cosine_loss(e_a: torch.Tensor, e_b: torch.Tensor) -> torch.Tensor:
    """1 - cosine similarity; in [0, 2] for unit vectors."""
    return 1.0 - (e_a * e_b).sum(dim=-1)


def sbir_loss(model: SbirEmbedder, sketch: torch.Tensor, photo_hat: torch.Tensor) -> torch.Tensor:
    """1 - cos(F(s), F(x0_hat)); differentiable w.r.t. photo_hat, with the
    embedder's parameters frozen."""
    e_s = embed(model, sketch, "sketch")
    e_p = model(photo_hat, "photo")
    return cosine_loss(e_s.detach(), e_p).mean()


def fgm(model: SbirEmbedder, sketches: list[torch.Tensor] | torch.Tensor,
        generated: list[torch.Tensor] | torch.Tensor) -> float:
    """Mean pairwise cosine similarity between sketch and generated-image
    embeddings; higher is better."""
    if len(sketches) == 0 or len(generated) == 0:
        raise InputError("fgm requires non-empty image lists")
    if len(sketches) != len(generated):
        raise InputError(f"list lengths differ: {len(sketches)} vs {len(generated)}")
    with torch.no_grad():
        s = torch.stack(list(sketches)) if not torch.is_tensor(sketches) else sketches
        g = torch.stack(list(generated)) if not torch.is_tensor(generated) else generated
        e_s = embed(model, s, "sketch")
        e_g = embed(model, g, "photo")
        return float((e_s * e_g).sum(dim=1).mean())


def triplet_loss(anchor: torch.Tensor, positive: torch.Tensor, negative: torch.Tensor,
                 margin: float = 0.2) -> torch.Tensor:
    """max(0, margin + d(a, p) - d(a, n)) with euclidean d; batch mean."""
    d_pos = (anchor - positive).norm(dim=-1)
    d_neg = (anchor - negative).norm(dim=-1)
    return F.relu(margin + d_pos - d_neg).mean()


@dataclass
class TripletConfig:
    epochs: int = 15
    batch_size: int = 32
    learning_rate: float = 1e-3
    margin: float = 0.2
    seed: int = 0


def train_triplet(sketches: torch.Tensor, photos: torch.Tensor, photo_index: torch.Tensor,
                  config: TripletConfig) -> tuple[SbirEmbedder, list[float]]:
    """Train with batch-hard negatives: each batch pairs one sketch with its
    photo; the negative is the hardest other photo in the batch.

    sketches: [N, 1, H, W]; photos: [M, 3, H, W]; photo_index: [N] pairing map.
    """
    if photos.shape[0] < 2:
        raise ConfigurationError("triplet training needs at least 2 distinct photos")
    torch.manual_seed(config.seed)
    model = SbirEmbedder()
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    gen = torch.Generator().manual_seed(config.seed)

    n = sketches.shape[0]
    history = []
    for _ in range(config.epochs):
        order = torch.randperm(n, generator=gen)
        total, batches = 0.0, 0
        for i in range(0, n, config.batch_size):
            idx = order[i:i + config.batch_size]
            if idx.numel() < 2:
                continue
            e_s = model(sketches[idx], "sketch")
            e_p = model(photos[photo_index[idx]], "photo")
            sim = e_s @ e_p.t()
            # mask entries that share the positive photo, then take the
            # hardest remaining photo per anchor
            same = photo_index[idx].view(-1, 1) == photo_index[idx].view(1, -1)
            sim = sim.masked_fill(same, float("-inf"))
            hard = sim.argmax(dim=1)
            loss = triplet_loss(e_s, e_p, e_p[hard], config.margin)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            batches += 1
        history.append(total / max(batches, 1))

    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    model.trained = True
    return model, history


def retrieval_accuracy(model: SbirEmbedder, query_sketches: torch.Tensor,
                       query_targets: torch.Tensor, gallery_photos: torch.Tensor) -> float:
    """Top-1 accuracy of sketch queries against a photo gallery."""
    with torch.no_grad():
        e_q = embed(model, query_sketches, "sketch")
        e_g = embed(model, gallery_photos, "photo")
        top1 = (e_q @ e_g.t()).argmax(dim=1)
    return float((top1 == query_targets).float().mean())
