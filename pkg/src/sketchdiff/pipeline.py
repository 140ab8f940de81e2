"""End-to-end run orchestration: dataset, pretraining, auxiliary models,
adapter variants, and the benchmark report, with per-phase checkpoint caching
under a single run directory.

Sidecar protocol: each checkpoint's `config` key holds what the loader needs
to rebuild the module; `phase_config` records the training recipe and drives
cache invalidation."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import torch

from . import abstraction, evaluate, fgsbir, trainer
from .checkpoints import checkpoint_exists, load_checkpoint, save_checkpoint
from .conditioning import encode_caption
from .denoiser import ModelConfig
from .errors import ConfigurationError
from .schedule import build_schedule, generate
from .service import (load_caption_encoder, load_denoiser, load_fgsbir, load_scorer,
                      load_sketch_encoder)
from .synthdata import SynthDataset, build_dataset
from .trainer import FrozenStack, PretrainConfig, TrainConfig


@dataclass
class PipelineConfig:
    run_dir: str
    seed: int = 0
    # dataset
    n_photos: int = 512
    sketches_per_photo: int = 5
    split_ratio: float = 0.9
    # model / schedule
    model: ModelConfig = field(default_factory=ModelConfig)
    T: int = 1000
    # training budgets (the adapter epoch count is the standard 50)
    pretrain_photos: int = 128
    pretrain_epochs: int = 240
    adapter_pairs: int = 256
    adapter_epochs: int = 50
    classifier_epochs: int = 12
    fgsbir_epochs: int = 15
    photo_classifier_epochs: int = 10
    # evaluation
    rows: tuple = ("full", "no_adapter", "no_sbir")
    eval_samples: int = 32
    inference_steps: int = 50

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = dataclasses.asdict(self.model)
        d["rows"] = list(self.rows)
        return d


def _save_phase(base: Path, module: torch.nn.Module, load_config: dict, phase_config: dict,
                step: int = 0, history: list[float] | None = None) -> None:
    save_checkpoint(base, {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()},
                    load_config, step, history)
    meta = json.loads(base.with_suffix(".json").read_text())
    meta["phase_config"] = phase_config
    base.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True, indent=2))


def _phase_cached(base: Path, phase_config: dict) -> bool:
    if not checkpoint_exists(base):
        return False
    meta = json.loads(base.with_suffix(".json").read_text())
    return meta.get("phase_config") == phase_config


class RunContext:
    """One run directory with lazily trained/loaded phases."""

    def __init__(self, cfg: PipelineConfig, log=print):
        self.cfg = cfg
        self.log = log
        self.run = Path(cfg.run_dir)
        self.ckpt = self.run / "checkpoints"
        self.metrics_dir = self.run / "metrics"
        self.ckpt.mkdir(parents=True, exist_ok=True)
        self.metrics_dir.mkdir(parents=True, exist_ok=True)

    # --- dataset ---------------------------------------------------------

    @cached_property
    def dataset(self) -> SynthDataset:
        root = self.run / "dataset"
        if not (root / "manifest.json").exists():
            self.log(f"[pipeline] building dataset ({self.cfg.n_photos} photos)")
            build_dataset(self.cfg.n_photos, self.cfg.split_ratio, self.cfg.seed, root,
                          sketches_per_photo=self.cfg.sketches_per_photo)
        return SynthDataset(root)

    @cached_property
    def train_photos(self):
        return self.dataset.photos("train")

    @cached_property
    def eval_photos(self):
        return self.dataset.photos("eval")

    @cached_property
    def train_sketches(self):
        return self.dataset.sketches("train")

    @cached_property
    def eval_sketches(self):
        return self.dataset.sketches("eval")

    @cached_property
    def sched(self):
        sched = build_schedule("linear", self.cfg.T)
        (self.ckpt / "schedule.json").write_text(sched.to_json())
        return sched

    # --- phases ----------------------------------------------------------

    def ensure_pretrained(self):
        cfg = self.cfg
        pre_cfg = PretrainConfig(epochs=cfg.pretrain_epochs, seed=cfg.seed + 1, model=cfg.model)
        phase = {"epochs": pre_cfg.epochs, "batch_size": pre_cfg.batch_size,
                 "learning_rate": pre_cfg.learning_rate, "seed": pre_cfg.seed,
                 "photos": cfg.pretrain_photos, "model": dataclasses.asdict(cfg.model),
                 "T": cfg.T, "dataset": self.dataset.manifest.hash()}
        if not _phase_cached(self.ckpt / "denoiser", phase):
            photos, _, captions = self.train_photos
            self.log(f"[pipeline] pretraining denoiser "
                     f"({cfg.pretrain_epochs} epochs on {cfg.pretrain_photos} photos)")
            sub = slice(0, cfg.pretrain_photos)
            model, cap_enc, history = trainer.pretrain_text_diffusion(
                photos[sub], captions[sub], self.sched, pre_cfg)
            _save_phase(self.ckpt / "denoiser", model, dataclasses.asdict(cfg.model), phase,
                        len(history), history)
            _save_phase(self.ckpt / "caption_encoder", cap_enc,
                        {"token_len": cap_enc.token_len, "token_dim": cap_enc.embed.embedding_dim,
                         "vocab_size": cap_enc.vocab_size}, phase)
            (self.metrics_dir / "pretrain_loss.json").write_text(json.dumps(history))
        return (load_denoiser(self.ckpt / "denoiser"),
                load_caption_encoder(self.ckpt / "caption_encoder"))

    def ensure_abstraction(self):
        cfg = self.cfg
        cls_cfg = abstraction.ClassifierConfig(epochs=cfg.classifier_epochs, seed=cfg.seed + 2)
        phase = {"epochs": cls_cfg.epochs, "batch_size": cls_cfg.batch_size,
                 "learning_rate": cls_cfg.learning_rate, "seed": cls_cfg.seed,
                 "bounds": dataclasses.asdict(cls_cfg.bounds),
                 "dataset": self.dataset.manifest.hash()}
        if not _phase_cached(self.ckpt / "sketch_encoder", phase):
            _, cap_enc = self.ensure_pretrained()
            sketches, _, _, sk_labels = self.train_sketches
            self.log(f"[pipeline] training abstraction classifier ({cls_cfg.epochs} epochs)")
            scorer, history = abstraction.train_classifier(
                sketches, sk_labels, cls_cfg, num_classes=8, caption_encoder=cap_enc)
            _save_phase(self.ckpt / "sketch_encoder", scorer.encoder,
                        {"resolution": scorer.encoder.resolution,
                         "patch_dim": scorer.encoder.patch_dim,
                         "feature_dim": scorer.encoder.feature_dim}, phase, len(history), history)
            save_checkpoint(self.ckpt / "abstraction", {"centres": scorer.centres.numpy()},
                            dataclasses.asdict(scorer.bounds), len(history), history)
        encoder = load_sketch_encoder(self.ckpt / "sketch_encoder")
        return load_scorer(self.ckpt / "abstraction", encoder)

    def ensure_fgsbir(self):
        cfg = self.cfg
        tri_cfg = fgsbir.TripletConfig(epochs=cfg.fgsbir_epochs, seed=cfg.seed + 3)
        phase = {"epochs": tri_cfg.epochs, "batch_size": tri_cfg.batch_size,
                 "learning_rate": tri_cfg.learning_rate, "margin": tri_cfg.margin,
                 "seed": tri_cfg.seed, "dataset": self.dataset.manifest.hash()}
        if not _phase_cached(self.ckpt / "fgsbir", phase):
            photos, _, _ = self.train_photos
            sketches, photo_row, _, _ = self.train_sketches
            self.log(f"[pipeline] training FG-SBIR embedder ({tri_cfg.epochs} epochs)")
            fg, history = fgsbir.train_triplet(sketches, photos, photo_row, tri_cfg)
            _save_phase(self.ckpt / "fgsbir", fg,
                        {"resolution": fg.resolution, "embed_dim": fg.embed_dim},
                        phase, len(history), history)
        return load_fgsbir(self.ckpt / "fgsbir")

    def ensure_photo_classifier(self):
        cfg = self.cfg
        pc_cfg = evaluate.PhotoClassifierConfig(epochs=cfg.photo_classifier_epochs, seed=cfg.seed + 4)
        phase = {**dataclasses.asdict(pc_cfg), "dataset": self.dataset.manifest.hash()}
        if not _phase_cached(self.ckpt / "photo_classifier", phase):
            photos, labels, _ = self.train_photos
            self.log("[pipeline] training photo classifier")
            pc, history = evaluate.train_photo_classifier(photos, labels, pc_cfg)
            _save_phase(self.ckpt / "photo_classifier", pc,
                        {"num_classes": pc.num_classes, "feature_dim": pc.feature_dim},
                        phase, len(history), history)
        return evaluate.load_photo_classifier(self.ckpt / "photo_classifier")

    def adapter_config(self, row: str) -> TrainConfig:
        cfg = self.cfg
        return TrainConfig(epochs=cfg.adapter_epochs, seed=cfg.seed + 5, T=cfg.T,
                           no_adapter=(row == "no_adapter"), no_sbir=(row == "no_sbir"),
                           no_superconcept=(row == "no_superconcept"),
                           uniform_tsampling=(row == "uniform_tsampling"))

    def frozen_stack(self) -> FrozenStack:
        denoiser, cap_enc = self.ensure_pretrained()
        scorer = self.ensure_abstraction()
        fg = self.ensure_fgsbir()
        return FrozenStack(denoiser=denoiser, caption_encoder=cap_enc,
                           sketch_encoder=scorer.encoder, fg=fg, scorer=scorer, sched=self.sched)

    def ensure_adapter(self, row: str, train_cfg: TrainConfig | None = None):
        cfg = self.cfg
        tc = train_cfg or self.adapter_config(row)
        phase = {"train": tc.to_dict(), "pairs": cfg.adapter_pairs,
                 "dataset": self.dataset.manifest.hash()}
        base = self.ckpt / f"adapter_{row}"
        if not _phase_cached(base, phase):
            frozen = self.frozen_stack()
            photos, _, captions = self.train_photos
            sketches, photo_row, _, _ = self.train_sketches
            pairs = slice(0, cfg.adapter_pairs)
            self.log(f"[pipeline] training adapter[{row}] "
                     f"({tc.epochs} epochs on {cfg.adapter_pairs} pairs)")
            adapter, metrics = trainer.train_adapter(
                sketches[pairs], photo_row[pairs], photos, captions, tc, frozen)
            _save_phase(base, adapter,
                        {"adapter": dataclasses.asdict(adapter.cfg),
                         "kind": "plain" if tc.no_adapter else "attention"},
                        phase, len(metrics), [m["L_total"] for m in metrics])
            trainer.write_metrics_jsonl(metrics, self.metrics_dir / f"adapter_{row}.jsonl")
            evaluate.render_loss_figure(metrics, self.metrics_dir / f"adapter_{row}.png")
        return base

    # --- evaluation ------------------------------------------------------

    def abstraction_metrics(self) -> dict:
        scorer = self.ensure_abstraction()
        from scipy.stats import spearmanr
        ev_sketches, _, ev_knobs, ev_labels = self.eval_sketches
        scores = scorer.score_batch(ev_sketches)
        return {
            "heldout_accuracy": abstraction.classifier_accuracy(scorer, ev_sketches, ev_labels),
            "spearman_knob_vs_1ma": float(
                spearmanr(ev_knobs.numpy(), [1 - s.a for s in scores]).statistic),
        }

    def fgsbir_metrics(self) -> dict:
        fg = self.ensure_fgsbir()
        photos, _, _ = self.train_photos
        eval_photos, _, _ = self.eval_photos
        ev_sketches, ev_photo_row, _, _ = self.eval_sketches
        n_eval = min(len(eval_photos), 100)
        gallery = torch.cat([photos[:100 - n_eval], eval_photos[:n_eval]])
        offset = len(gallery) - n_eval
        mask = ev_photo_row < n_eval
        return {
            "retrieval_top1": fgsbir.retrieval_accuracy(
                fg, ev_sketches[mask], offset + ev_photo_row[mask], gallery),
            "gallery": int(len(gallery)),
        }

    def benchmark(self) -> evaluate.MetricReport:
        rows = tuple(self.cfg.rows) + ("null",)
        return evaluate.benchmark(self.ckpt, self.dataset, self.run / "report", rows=rows,
                                  photo_classifier=self.ensure_photo_classifier(),
                                  steps=self.cfg.inference_steps,
                                  max_eval=self.cfg.eval_samples)


def run_pipeline(cfg: PipelineConfig, log=print) -> dict:
    """Execute every phase (reusing cached checkpoints); returns a metric
    summary keyed by phase."""
    ctx = RunContext(cfg, log)
    summary: dict = {"run_dir": str(ctx.run), "dataset_hash": ctx.dataset.manifest.hash()}

    ctx.ensure_pretrained()
    summary["abstraction"] = ctx.abstraction_metrics()
    log(f"[pipeline] abstraction: {summary['abstraction']}")
    summary["fgsbir"] = ctx.fgsbir_metrics()
    log(f"[pipeline] fgsbir: {summary['fgsbir']}")

    photo_cls = ctx.ensure_photo_classifier()
    eval_photos, eval_labels, _ = ctx.eval_photos
    summary["photo_classifier"] = {
        "eval_accuracy": evaluate.classifier_accuracy(photo_cls, eval_photos, eval_labels)}

    for row in cfg.rows:
        ctx.ensure_adapter(row)

    report = ctx.benchmark()
    summary["benchmark"] = {r["row"]: {"fd": r["fd"], "fgm": r["fgm"]} for r in report.rows}
    log(f"[pipeline] benchmark:\n{report.to_table()}")

    (ctx.run / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2))
    return summary


def class_consistency(denoiser, cap_enc, photo_cls, captions: torch.Tensor,
                      labels: torch.Tensor, sched, n: int = 256, steps: int = 50,
                      seed: int = 99, batch: int = 32) -> float:
    """Fraction of caption-conditioned generations the frozen photo classifier
    assigns to the caption's class."""
    if len(captions) == 0:
        raise ConfigurationError("need at least one caption")
    idx = torch.arange(n) % len(captions)
    hits = 0
    for i in range(0, n, batch):
        rows = idx[i:i + batch]
        tokens = encode_caption(captions[rows], cap_enc)
        shape = (len(rows), denoiser.cfg.in_channels, denoiser.cfg.resolution, denoiser.cfg.resolution)
        with torch.no_grad():
            imgs = generate(lambda x, t, tok: denoiser(x, t, tok), tokens, sched,
                            shape, steps, seed + i).clamp(-1, 1)
            pred = photo_cls(imgs).argmax(dim=1)
        hits += int((pred == labels[rows]).sum())
    return hits / n
