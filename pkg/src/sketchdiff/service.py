"""Frozen-checkpoint inference: sketch -> abstraction score -> adapter tokens
-> seeded reverse diffusion. Also owns per-component checkpoint I/O so the
CLI, evaluator, and gateway load the same artifacts."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import torch

from .abstraction import AbstractionScorer, MarginBounds
from .checkpoints import (checkpoint_exists, config_hash, load_checkpoint, load_module_arrays,
                          module_arrays, save_checkpoint)
from .conditioning import (AdapterConfig, CaptionEncoder, PlainSketchMapper, SketchAdapter,
                           SketchEncoder, adapt, encode_sketch)
from .denoiser import ConditioningTokens, Denoiser, ModelConfig
from .errors import StateError
from .fgsbir import SbirEmbedder, embed
from .schedule import IdentityCodec, NoiseSchedule, generate

ADAPTER_ROWS = ("full", "no_adapter", "no_sbir", "no_superconcept", "uniform_tsampling")


def save_component(base, module: torch.nn.Module, config: dict, step: int = 0,
                   history: list[float] | None = None) -> None:
    save_checkpoint(base, module_arrays(module), config, step, history)


def save_scorer(base, scorer: AbstractionScorer, step: int = 0,
                history: list[float] | None = None) -> None:
    """Centres + bounds; the encoder weights live in the sketch-encoder file."""
    save_checkpoint(base, {"centres": scorer.centres.numpy()},
                    dataclasses.asdict(scorer.bounds), step, history)


def _frozen(module: torch.nn.Module) -> torch.nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def load_denoiser(base) -> Denoiser:
    arrays, meta = load_checkpoint(base)
    model = Denoiser(ModelConfig(**{k: tuple(v) if isinstance(v, list) else v
                                    for k, v in meta["config"].items()}))
    load_module_arrays(model, arrays)
    return _frozen(model)

def load_caption_encoder(base) -> CaptionEncoder:
    arrays, meta = load_checkpoint(base)
    enc = CaptionEncoder(**meta["config"])
    load_module_arrays(enc, arrays)
    return _frozen(enc)


def load_sketch_encoder(base) -> SketchEncoder:
    arrays, meta = load_checkpoint(base)
    enc = SketchEncoder(**meta["config"])
    load_module_arrays(enc, arrays)
    return _frozen(enc)


def load_scorer(base, encoder: SketchEncoder) -> AbstractionScorer:
    arrays, meta = load_checkpoint(base)
    bounds = MarginBounds(**meta["config"])
    return AbstractionScorer(encoder, torch.from_numpy(arrays["centres"]), bounds, trained=True)


def load_fgsbir(base) -> SbirEmbedder:
    arrays, meta = load_checkpoint(base)
    model = SbirEmbedder(**meta["config"])
    load_module_arrays(model, arrays)
    model = _frozen(model)
    model.trained = True
    return model


def load_adapter(base) -> torch.nn.Module:
    arrays, meta = load_checkpoint(base)
    cfg = AdapterConfig(**meta["config"]["adapter"])
    adapter = PlainSketchMapper(cfg) if meta["config"]["kind"] == "plain" else SketchAdapter(cfg)
    load_module_arrays(adapter, arrays)
    return _frozen(adapter)


@dataclass
class SketchToImage:
    """Deterministic sketch-conditioned generator over frozen checkpoints.

    The inference path takes no captions: the sketch is scored for
    abstraction, adapted into conditioning tokens, and drives the reverse
    trajectory from a seeded Gaussian."""

    denoiser: Denoiser
    sketch_encoder: SketchEncoder
    adapter: torch.nn.Module
    scorer: AbstractionScorer
    sched: NoiseSchedule
    fg: SbirEmbedder | None = None
    codec: IdentityCodec = dataclasses.field(default_factory=IdentityCodec)
    config_hashes: dict = dataclasses.field(default_factory=dict)

    @property
    def stack_hash(self) -> str:
        return config_hash(self.config_hashes)

    def tokens_for(self, sketch: torch.Tensor) -> ConditioningTokens:
        with torch.no_grad():
            return adapt(encode_sketch(sketch, self.sketch_encoder), self.adapter)

    def generate_from_sketch(self, sketch: torch.Tensor, seed: int, steps: int = 50,
                             eta: float = 0.0, tokens: ConditioningTokens | None = None) -> torch.Tensor:
        """[1,H,W] sketch -> [3,H,W] image in [-1,1]."""
        if tokens is None:
            tokens = self.tokens_for(sketch)
        cfg = self.denoiser.cfg
        shape = (cfg.in_channels, cfg.resolution, cfg.resolution)
        with torch.no_grad():
            x = generate(lambda x_t, t, tok: self.denoiser(x_t, t, tok),
                         tokens, self.sched, shape, steps, seed, eta)
            return self.codec.decode(x).clamp(-1.0, 1.0)

    def score(self, sketch: torch.Tensor):
        return self.scorer.score(sketch)

    def toy_fgm(self, sketch: torch.Tensor, image: torch.Tensor) -> float:
        """Cosine similarity between the sketch and one generated image in
        the retrieval space; requires the embedder."""
        if self.fg is None:
            raise StateError("no FG-SBIR embedder loaded")
        with torch.no_grad():
            e_s = embed(self.fg, sketch, "sketch")
            e_g = embed(self.fg, image, "photo")
            return float((e_s * e_g).sum())


def load_bundle(checkpoint_dir, adapter_row: str = "full") -> SketchToImage:
    """Assemble the inference stack from a checkpoint directory."""
    d = Path(checkpoint_dir)
    sched_doc = d / "schedule.json"
    if not sched_doc.exists():
        raise StateError(f"no schedule.json in {d}")
    sched = NoiseSchedule.from_json(sched_doc.read_text())
    enc = load_sketch_encoder(d / "sketch_encoder")
    bundle = SketchToImage(
        denoiser=load_denoiser(d / "denoiser"),
        sketch_encoder=enc,
        adapter=load_adapter(d / f"adapter_{adapter_row}"),
        scorer=load_scorer(d / "abstraction", enc),
        sched=sched,
        fg=load_fgsbir(d / "fgsbir") if checkpoint_exists(d / "fgsbir") else None,
    )
    for name in ("denoiser", "sketch_encoder", f"adapter_{adapter_row}", "abstraction", "fgsbir"):
        if checkpoint_exists(d / name):
            _, meta = load_checkpoint(d / name)
            bundle.config_hashes[name] = meta["config_hash"]
    return bundle
