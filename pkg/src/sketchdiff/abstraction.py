"""Abstraction scoring: a magnitude-aware margin classifier over sketch
features. The l2-norm of the (unnormalized) global sketch feature acts as the
abstraction score after affine mapping; the time-sampler skew is its clipped
complement, omega = clip(1 - a, 0.2, 0.8).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .conditioning import SketchEncoder, class_token_id
from .errors import ConfigurationError, StateError

OMEGA_MIN, OMEGA_MAX = 0.2, 0.8


@dataclass(frozen=True)
class MarginBounds:
    """Bounds and weights of the magnitude-aware margin loss."""

    l_a: float = 10.0
    u_a: float = 110.0
    l_m: float = 0.45
    u_m: float = 0.8
    lambda_g: float = 35.0
    scale_s: float = 64.0
    eps_floor: float = 1e-6

    def __post_init__(self):
        if not self.l_a < self.u_a:
            raise ConfigurationError(f"need l_a < u_a, got ({self.l_a}, {self.u_a})")
        if not (0.0 <= self.l_m < self.u_m < 1.0):
            raise ConfigurationError(f"need 0 <= l_m < u_m < 1, got ({self.l_m}, {self.u_m})")
        if self.lambda_g < 0:
            raise ConfigurationError("lambda_g must be >= 0")
        if self.scale_s <= 0:
            raise ConfigurationError("scale_s must be > 0")


def margin(magnitude, b: MarginBounds):
    """Linear interpolation of the margin over the clamped magnitude band:
    m(x) = (u_m - l_m) / (u_a - l_a) * (x - l_a) + l_m, x clamped to [l_a, u_a]."""
    if torch.is_tensor(magnitude):
        x = magnitude.clamp(b.l_a, b.u_a)
    else:
        x = min(max(magnitude, b.l_a), b.u_a)
    return (b.u_m - b.l_m) / (b.u_a - b.l_a) * (x - b.l_a) + b.l_m


def magnitude_regularizer(magnitude, b: MarginBounds):
    """g(x) = x / u_a^2 + 1 / x, decreasing on (0, u_a]; magnitudes floored
    at eps_floor so the term stays defined."""
    if torch.is_tensor(magnitude):
        x = magnitude.clamp_min(b.eps_floor)
    else:
        x = max(magnitude, b.eps_floor)
    return x / b.u_a**2 + 1.0 / x


def abstraction_loss(features: torch.Tensor, labels: torch.Tensor,
                     centres: torch.Tensor, b: MarginBounds) -> torch.Tensor:
    """Softmax over scale_s * cos(theta_j) with an additive angular margin
    m(||f||) on the true class, plus lambda_g * g(||f||); batch mean."""
    if features.ndim == 1:
        features = features.unsqueeze(0)
        labels = labels.view(1)
    mag = features.norm(dim=1).clamp_min(b.eps_floor)
    cos = F.normalize(features, dim=1) @ centres.t()
    cos = cos.clamp(-1.0, 1.0)

    m = margin(mag, b)
    cos_y = cos.gather(1, labels.view(-1, 1)).squeeze(1)
    sin_y = (1.0 - cos_y**2).clamp_min(0.0).sqrt()
    cos_y_m = cos_y * torch.cos(m) - sin_y * torch.sin(m)
    # keep the penalized logit monotone in theta once theta + m exceeds pi
    cos_y_m = torch.where(cos_y > torch.cos(math.pi - m), cos_y_m, cos_y - m * torch.sin(m))

    logits = cos.clone()
    logits.scatter_(1, labels.view(-1, 1), cos_y_m.view(-1, 1))
    ce = F.cross_entropy(b.scale_s * logits, labels)
    return ce + b.lambda_g * magnitude_regularizer(mag, b).mean()


@dataclass(frozen=True)
class AbstractionScore:
    a: float
    omega: float
    magnitude: float


def score_from_magnitude(magnitude: float, b: MarginBounds) -> AbstractionScore:
    """a = clip((||f|| - l_a) / (u_a - l_a), 0, 1); omega = clip(1 - a, 0.2, 0.8)."""
    a = min(max((magnitude - b.l_a) / (b.u_a - b.l_a), 0.0), 1.0)
    omega = min(max(1.0 - a, OMEGA_MIN), OMEGA_MAX)
    return AbstractionScore(a=a, omega=omega, magnitude=float(magnitude))


def renormalize_centres(centres: torch.Tensor) -> None:
    """Project class-centre rows back onto the unit sphere (in place, no grad)."""
    with torch.no_grad():
        centres.div_(centres.norm(dim=1, keepdim=True).clamp_min(1e-12))


def init_centres(num_classes: int, dim: int, caption_encoder=None, seed: int = 0) -> torch.Tensor:
    """Unit class centres; seeded random rows, or rows of the caption
    encoder's class-attribute embeddings when one is available."""
    if caption_encoder is not None and caption_encoder.embed.embedding_dim == dim:
        ids = torch.tensor([class_token_id(c) for c in range(num_classes)])
        w = caption_encoder.embed.weight.detach()[ids].clone()
    else:
        gen = torch.Generator().manual_seed(seed)
        w = torch.randn(num_classes, dim, generator=gen)
    centres = torch.nn.Parameter(w)
    renormalize_centres(centres.data)
    return centres


@dataclass
class AbstractionScorer:
    """Frozen sketch encoder + trained class centres + bounds."""

    encoder: SketchEncoder
    centres: torch.Tensor
    bounds: MarginBounds
    trained: bool = False

    def score(self, sketch: torch.Tensor) -> AbstractionScore:
        if not self.trained:
            raise StateError("abstraction scorer has not been trained")
        with torch.no_grad():
            mag = self.encoder.global_feature(sketch).norm()
        return score_from_magnitude(float(mag), self.bounds)

    def score_batch(self, sketches: torch.Tensor) -> list[AbstractionScore]:
        if not self.trained:
            raise StateError("abstraction scorer has not been trained")
        with torch.no_grad():
            mags = self.encoder.global_feature(sketches).norm(dim=1)
        return [score_from_magnitude(float(m), self.bounds) for m in mags]


@dataclass
class ClassifierConfig:
    epochs: int = 12
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    bounds: MarginBounds = field(default_factory=MarginBounds)


def train_classifier(train_sketches: torch.Tensor, train_labels: torch.Tensor,
                     config: ClassifierConfig, num_classes: int,
                     caption_encoder=None) -> tuple[AbstractionScorer, list[float]]:
    """Train the shared sketch encoder with the margin loss; returns a frozen
    scorer and the per-epoch loss history."""
    if num_classes < 2:
        raise ConfigurationError("classifier needs at least 2 classes")
    torch.manual_seed(config.seed)
    encoder = SketchEncoder()
    centres = init_centres(num_classes, encoder.feature_dim, caption_encoder, seed=config.seed)
    opt = torch.optim.Adam(list(encoder.parameters()) + [centres], lr=config.learning_rate)
    gen = torch.Generator().manual_seed(config.seed)

    n = train_sketches.shape[0]
    history = []
    for _ in range(config.epochs):
        order = torch.randperm(n, generator=gen)
        total, batches = 0.0, 0
        for i in range(0, n, config.batch_size):
            idx = order[i:i + config.batch_size]
            feats = encoder.global_feature(train_sketches[idx])
            loss = abstraction_loss(feats, train_labels[idx], centres, config.bounds)
            opt.zero_grad()
            loss.backward()
            opt.step()
            renormalize_centres(centres.data)
            total += loss.item()
            batches += 1
        history.append(total / batches)

    encoder.eval()
    for p in encoder.parameters():
        p.requires_grad_(False)
    centres = centres.detach()
    return AbstractionScorer(encoder, centres, config.bounds, trained=True), history


def classifier_accuracy(scorer: AbstractionScorer, sketches: torch.Tensor,
                        labels: torch.Tensor) -> float:
    with torch.no_grad():
        feats = scorer.encoder.global_feature(sketches)
        pred = (F.normalize(feats, dim=1) @ scorer.centres.t()).argmax(dim=1)
    return float((pred == labels).float().mean())
