"""Training: caption-conditioned pretraining of the toy denoiser (then
frozen), and adapter training with the three-term objective under
abstraction-aware time-step sampling. Hosts the ablation switch matrix.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .abstraction import AbstractionScorer
from .conditioning import (AdapterConfig, CaptionEncoder, PlainSketchMapper, SketchAdapter,
                           SketchEncoder, adapt, encode_caption, encode_sketch)
from .denoiser import ConditioningTokens, Denoiser, ModelConfig
from .errors import ConfigurationError, StateError, TrainingFailure
from .fgsbir import SbirEmbedder, sbir_loss
from .schedule import IdentityCodec, NoiseSchedule, forward_diffuse, tweedie_estimate
from .tsampler import TimestepDistribution, sample


@dataclass
class TrainConfig:
    """Adapter-training hyperparameters and ablation switches."""

    lambda1: float = 1.0
    lambda2: float = 0.5
    lambda3: float = 0.1
    learning_rate: float = 1e-4
    weight_decay: float = 0.09
    batch_size: int = 8
    epochs: int = 50
    seed: int = 0
    T: int = 1000
    grad_clip: float = 1.0
    no_adapter: bool = False
    no_sbir: bool = False
    no_superconcept: bool = False
    uniform_tsampling: bool = False

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigurationError("loss weights must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_json(path, **overrides) -> "TrainConfig":
        cfg = json.loads(Path(path).read_text()) if path else {}
        cfg.update({k: v for k, v in overrides.items() if v is not None})
        return TrainConfig(**cfg)


@dataclass
class TrainState:
    """Step counter plus the running loss decomposition of the current run."""

    step: int = 0
    last: dict = field(default_factory=dict)


def diffusion_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error between true and predicted noise."""
    if eps.shape != eps_hat.shape:
        raise ConfigurationError(f"shape mismatch {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    return F.mse_loss(eps_hat, eps)


def superconcept_loss(eps_text: torch.Tensor, eps_sketch: torch.Tensor) -> torch.Tensor:
    """Squared error against the text-branch prediction, treated as a
    constant target (stop-gradient)."""
    if eps_text.shape != eps_sketch.shape:
        raise ConfigurationError(f"shape mismatch {tuple(eps_text.shape)} vs {tuple(eps_sketch.shape)}")
    return F.mse_loss(eps_sketch, eps_text.detach())


def total_loss(l_sd, l_sbir, l_reg, cfg: TrainConfig):
    """lambda1 * L_SD + lambda2 * L_SBIR + lambda3 * L_reg."""
    return cfg.lambda1 * l_sd + cfg.lambda2 * l_sbir + cfg.lambda3 * l_reg


def _freeze(module: torch.nn.Module) -> torch.nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


@dataclass
class PretrainConfig:
    epochs: int = 120
    batch_size: int = 8
    learning_rate: float = 2e-4
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)


def pretrain_text_diffusion(photos: torch.Tensor, captions: torch.Tensor,
                            sched: NoiseSchedule, config: PretrainConfig,
                            log=None) -> tuple[Denoiser, CaptionEncoder, list[float]]:
    """Train the toy caption-conditioned denoiser (the frozen "pretrained"
    model every later stage builds on). Returns frozen modules."""
    torch.manual_seed(config.seed)
    model = Denoiser(config.model)
    cap_enc = CaptionEncoder(config.model.token_len, config.model.token_dim)
    params = list(model.parameters()) + list(cap_enc.parameters())
    opt = torch.optim.AdamW(params, lr=config.learning_rate)
    gen = torch.Generator().manual_seed(config.seed)

    n = photos.shape[0]
    history: list[float] = []
    last_good = None
    step = 0
    for epoch in range(config.epochs):
        order = torch.randperm(n, generator=gen)
        total, batches = 0.0, 0
        for i in range(0, n, config.batch_size):
            idx = order[i:i + config.batch_size]
            x0 = photos[idx]
            t = torch.randint(1, sched.T + 1, (len(idx),), generator=gen)
            eps = torch.randn(x0.shape, generator=gen)
            x_t = forward_diffuse(x0, t, eps, sched)
            tokens = encode_caption(captions[idx], cap_enc)
            loss = diffusion_loss(eps, model(x_t, t, tokens))
            if not torch.isfinite(loss):
                raise TrainingFailure(f"non-finite pretraining loss at step {step}", last_good=last_good)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            batches += 1
            step += 1
        history.append(total / batches)
        last_good = ({k: v.detach().clone() for k, v in model.state_dict().items()},
                     {k: v.detach().clone() for k, v in cap_enc.state_dict().items()})
        if log:
            log({"epoch": epoch, "loss": history[-1], "step": step})

    return _freeze(model), _freeze(cap_enc), history


@dataclass
class FrozenStack:
    """Everything the adapter trains against; all modules frozen."""

    denoiser: Denoiser
    caption_encoder: CaptionEncoder
    sketch_encoder: SketchEncoder
    fg: SbirEmbedder
    scorer: AbstractionScorer
    sched: NoiseSchedule
    codec: IdentityCodec = field(default_factory=IdentityCodec)

    def validate(self) -> None:
        for name in ("denoiser", "caption_encoder", "sketch_encoder", "fg"):
            m = getattr(self, name)
            if m is None:
                raise StateError(f"missing frozen checkpoint: {name}")
        if not self.fg.trained or not self.scorer.trained:
            raise StateError("FG-SBIR embedder and abstraction scorer must be trained")


def make_adapter(cfg: TrainConfig, mcfg: ModelConfig, encoder: SketchEncoder) -> torch.nn.Module:
    acfg = AdapterConfig(seq_len=1 + (encoder.resolution // 4) ** 2, patch_dim=encoder.patch_dim,
                         token_len=mcfg.token_len, token_dim=mcfg.token_dim)
    return PlainSketchMapper(acfg) if cfg.no_adapter else SketchAdapter(acfg)


def train_adapter(sketches: torch.Tensor, photo_row: torch.Tensor, photos: torch.Tensor,
                  captions: torch.Tensor, cfg: TrainConfig, frozen: FrozenStack,
                  log=None) -> tuple[torch.nn.Module, list[dict]]:
    """The per-batch recipe: score omega per sketch, sample t from the skewed
    density, forward-diffuse, predict noise under adapter tokens, estimate
    the clean image for the discriminative loss, predict under caption tokens
    for the regularizer, combine, and update the adapter only."""
    frozen.validate()
    torch.manual_seed(cfg.seed)
    adapter = make_adapter(cfg, frozen.denoiser.cfg, frozen.sketch_encoder)
    opt = torch.optim.AdamW(adapter.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    n = sketches.shape[0]
    state = TrainState()
    metrics: list[dict] = []
    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=gen)
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            sk = sketches[idx]
            x0 = photos[photo_row[idx]]
            caps = captions[photo_row[idx]]

            if cfg.uniform_tsampling:
                omegas = [0.0] * len(idx)
                t = torch.from_numpy(rng.integers(1, cfg.T + 1, size=len(idx)))
            else:
                omegas = [s.omega for s in frozen.scorer.score_batch(sk)]
                t = torch.tensor([
                    sample(TimestepDistribution(cfg.T, w), rng) for w in omegas
                ], dtype=torch.long)

            eps = torch.randn(x0.shape, generator=gen)
            x_t = forward_diffuse(x0, t, eps, frozen.sched)

            tokens_s = adapt(encode_sketch(sk, frozen.sketch_encoder), adapter)
            eps_s = frozen.denoiser(x_t, t, tokens_s)
            l_sd = diffusion_loss(eps, eps_s)

            if cfg.no_sbir:
                l_sbir = torch.zeros(())
            else:
                x0_hat = frozen.codec.decode(tweedie_estimate(x_t, t, eps_s, frozen.sched))
                l_sbir = sbir_loss(frozen.fg, sk, x0_hat)

            if cfg.no_superconcept:
                l_reg = torch.zeros(())
            else:
                with torch.no_grad():
                    eps_t = frozen.denoiser(x_t, t, encode_caption(caps, frozen.caption_encoder))
                l_reg = superconcept_loss(eps_t, eps_s)

            loss = total_loss(l_sd, l_sbir, l_reg, cfg)
            if not torch.isfinite(loss):
                terms = {"L_SD": l_sd.item(), "L_SBIR": l_sbir.item(), "L_reg": l_reg.item()}
                bad = [k for k, v in terms.items() if not np.isfinite(v)]
                raise TrainingFailure(f"non-finite loss at step {state.step}: {bad or 'total'}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(adapter.parameters(), cfg.grad_clip)
            opt.step()

            state.step += 1
            state.last = {
                "step": state.step, "epoch": epoch,
                "L_SD": l_sd.item(), "L_SBIR": l_sbir.item(), "L_reg": l_reg.item(),
                "L_total": loss.item(),
                "mean_t": float(t.float().mean()), "mean_omega": float(np.mean(omegas)),
                "t": [int(v) for v in t], "omega": [float(w) for w in omegas],
            }
            metrics.append(state.last)
            if log:
                log(state.last)

    return _freeze(adapter), metrics


def write_metrics_jsonl(metrics: list[dict], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for row in metrics:
            f.write(json.dumps(row, sort_keys=True) + "\n")
