"""Command-line interface: dataset building, the four training phases, the
time-step sampler utility, scoring, generation, retrieval metrics, the
benchmark report, and the HTTP service."""

from __future__ import annotations

import json
from pathlib import Path

import click
import numpy as np
import torch

from .denoiser import ModelConfig
from .pipeline import PipelineConfig, RunContext, run_pipeline
from .trainer import TrainConfig


def _ctx(run_dir: str, **overrides) -> RunContext:
    cfg = PipelineConfig(run_dir=run_dir)
    for k, v in overrides.items():
        if v is not None:
            setattr(cfg, k, v)
    return RunContext(cfg)


@click.group()
def main():
    """Abstraction-aware sketch-conditioned diffusion at desk scale."""


@main.command("build-dataset")
@click.option("--n", default=512, show_default=True, help="number of photos")
@click.option("--ratio", default=0.9, show_default=True, help="train split ratio")
@click.option("--seed", default=0, show_default=True)
@click.option("--sketches-per-photo", default=5, show_default=True)
@click.option("--out", required=True, type=click.Path())
def build_dataset_cmd(n, ratio, seed, sketches_per_photo, out):
    """Render a synthetic paired dataset with a deterministic manifest."""
    from .synthdata import build_dataset
    manifest = build_dataset(n, ratio, seed, out, sketches_per_photo=sketches_per_photo)
    click.echo(json.dumps({"samples": len(manifest.samples), "hash": manifest.hash()}))


@main.command("train-diffusion")
@click.option("--run-dir", required=True, type=click.Path())
@click.option("--epochs", type=int, default=None, help="pretraining epochs")
@click.option("--photos", type=int, default=None, help="photos used for pretraining")
def train_diffusion_cmd(run_dir, epochs, photos):
    """Pretrain the caption-conditioned toy denoiser (then frozen)."""
    ctx = _ctx(run_dir, pretrain_epochs=epochs, pretrain_photos=photos)
    ctx.ensure_pretrained()
    click.echo("pretrained denoiser ready")


@main.command("train-classifier")
@click.option("--run-dir", required=True, type=click.Path())
@click.option("--epochs", type=int, default=None)
def train_classifier_cmd(run_dir, epochs):
    """Train the abstraction classifier (shared sketch encoder)."""
    ctx = _ctx(run_dir, classifier_epochs=epochs)
    ctx.ensure_abstraction()
    click.echo(json.dumps(ctx.abstraction_metrics()))


@main.command("train-fgsbir")
@click.option("--run-dir", required=True, type=click.Path())
@click.option("--epochs", type=int, default=None)
def train_fgsbir_cmd(run_dir, epochs):
    """Train the retrieval embedder with the triplet objective."""
    ctx = _ctx(run_dir, fgsbir_epochs=epochs)
    ctx.ensure_fgsbir()
    click.echo(json.dumps(ctx.fgsbir_metrics()))


@main.command("train-adapter")
@click.option("--run-dir", required=True, type=click.Path())
@click.option("--row", default="full", show_default=True,
              type=click.Choice(["full", "no_adapter", "no_sbir", "no_superconcept",
                                 "uniform_tsampling"]))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="JSON file of TrainConfig fields")
@click.option("--epochs", type=int, default=None)
@click.option("--lambda1", type=float, default=None)
@click.option("--lambda2", type=float, default=None)
@click.option("--lambda3", type=float, default=None)
@click.option("--seed", type=int, default=None)
def train_adapter_cmd(run_dir, row, config_path, epochs, lambda1, lambda2, lambda3, seed):
    """Train one adapter variant against the frozen stack."""
    ctx = _ctx(run_dir)
    tc = TrainConfig.from_json(config_path, epochs=epochs, lambda1=lambda1,
                               lambda2=lambda2, lambda3=lambda3, seed=seed,
                               no_adapter=(row == "no_adapter") or None,
                               no_sbir=(row == "no_sbir") or None,
                               no_superconcept=(row == "no_superconcept") or None,
                               uniform_tsampling=(row == "uniform_tsampling") or None)
    if epochs is None and config_path is None:
        tc.epochs = ctx.cfg.adapter_epochs
    base = ctx.ensure_adapter(row, tc)
    click.echo(f"adapter checkpoint at {base}")


@main.command("pipeline")
@click.option("--run-dir", required=True, type=click.Path())
@click.option("--preset", default="standard", show_default=True,
              type=click.Choice(["standard", "smoke"]))
@click.option("--rows", default=None, help="comma-separated adapter rows")
def pipeline_cmd(run_dir, preset, rows):
    """Run every phase end to end and write the benchmark report."""
    cfg = PipelineConfig(run_dir=run_dir)
    if preset == "smoke":
        cfg = PipelineConfig(run_dir=run_dir, n_photos=48, pretrain_photos=24,
                             pretrain_epochs=4, adapter_pairs=24, adapter_epochs=2,
                             classifier_epochs=2, fgsbir_epochs=2,
                             photo_classifier_epochs=2, rows=("full",),
                             eval_samples=4, inference_steps=10, T=100)
    if rows:
        cfg.rows = tuple(rows.split(","))
    summary = run_pipeline(cfg)
    click.echo(json.dumps(summary, sort_keys=True, indent=2))


@main.command("tsample")
@click.option("--omega", required=True, type=float)
@click.option("-t", "--horizon", "horizon", default=1000, show_default=True, help="T")
@click.option("-n", "--draws", default=100000, show_default=True)
@click.option("--mode", default="discrete", type=click.Choice(["discrete", "continuous"]))
@click.option("--seed", default=0, show_default=True)
@click.option("--hist", "hist_path", required=True, type=click.Path(),
              help="output CSV of per-step counts")
@click.option("--plot", "plot_path", type=click.Path(), default=None,
              help="optional density/histogram figure (PNG)")
def tsample_cmd(omega, horizon, draws, mode, seed, hist_path, plot_path):
    """Sample the abstraction-aware time-step distribution; emit a histogram."""
    from . import tsampler
    dist = tsampler.TimestepDistribution(horizon, omega, mode=mode)
    ts = tsampler.sample(dist, np.random.default_rng(seed), n=draws)
    counts = tsampler.histogram(ts, horizon)
    with open(hist_path, "w") as f:
        f.write("t,count\n")
        for t, c in enumerate(counts, start=1):
            f.write(f"{t},{c}\n")
    if plot_path:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        fig, ax = plt.subplots(figsize=(6, 3))
        centers = np.arange(1, horizon + 1)
        ax.bar(centers, counts / counts.sum(), width=1.0, color="#b8c9dd",
               label="empirical")
        ax.plot(centers, [tsampler.pdf(t, dist) for t in centers], color="#b03030",
                linewidth=1.2, label="closed form")
        ax.set_xlabel("t")
        ax.legend(fontsize=8)
        ax.set_title(f"omega={omega}, T={horizon}", fontsize=9)
        fig.tight_layout()
        fig.savefig(plot_path, dpi=120)
        plt.close(fig)
    click.echo(json.dumps({"draws": draws, "mean": float(np.mean(ts)),
                           "analytic_mean": dist.mean()}))


def _load_sketch_png(path) -> torch.Tensor:
    from PIL import Image
    img = Image.open(path).convert("L")
    from .synthdata import RESOLUTION
    if img.size != (RESOLUTION, RESOLUTION):
        img = img.resize((RESOLUTION, RESOLUTION), Image.LANCZOS)
    return torch.from_numpy(np.asarray(img, dtype=np.float32) / 255.0).unsqueeze(0)


@main.command("score")
@click.option("--sketch", required=True, type=click.Path(exists=True))
@click.option("--checkpoints", required=True, type=click.Path(exists=True))
def score_cmd(sketch, checkpoints):
    """Print {a, omega, magnitude} for a sketch PNG."""
    from .service import load_scorer, load_sketch_encoder
    enc = load_sketch_encoder(Path(checkpoints) / "sketch_encoder")
    scorer = load_scorer(Path(checkpoints) / "abstraction", enc)
    s = scorer.score(_load_sketch_png(sketch))
    click.echo(json.dumps({"a": s.a, "omega": s.omega, "magnitude": s.magnitude}))


@main.command("generate")
@click.option("--sketch", required=True, type=click.Path(exists=True))
@click.option("--seed", default=0, show_default=True)
@click.option("--steps", default=50, show_default=True)
@click.option("--eta", default=0.0, show_default=True)
@click.option("--checkpoints", required=True, type=click.Path(exists=True))
@click.option("--row", default="full", show_default=True)
@click.option("--out", required=True, type=click.Path())
def generate_cmd(sketch, seed, steps, eta, checkpoints, row, out):
    """Sketch-conditioned generation with a pinned seed."""
    from PIL import Image
    from .service import load_bundle
    bundle = load_bundle(checkpoints, adapter_row=row)
    image = bundle.generate_from_sketch(_load_sketch_png(sketch), seed=seed,
                                        steps=steps, eta=eta)
    arr = ((image + 1.0) * 127.5).round().to(torch.uint8).permute(1, 2, 0).numpy()
    Image.fromarray(arr, "RGB").save(out)
    click.echo(json.dumps({"out": str(out), "config_hash": bundle.stack_hash}))


@main.command("fgm")
@click.option("--sketch-dir", required=True, type=click.Path(exists=True))
@click.option("--image-dir", required=True, type=click.Path(exists=True))
@click.option("--checkpoints", required=True, type=click.Path(exists=True))
def fgm_cmd(sketch_dir, image_dir, checkpoints):
    """Mean sketch/image cosine similarity over two directories of PNGs,
    matched by sorted filename."""
    from PIL import Image
    from .fgsbir import fgm
    from .service import load_fgsbir
    from .synthdata import photo_to_tensor
    model = load_fgsbir(Path(checkpoints) / "fgsbir")
    sk_paths = sorted(Path(sketch_dir).glob("*.png"))
    im_paths = sorted(Path(image_dir).glob("*.png"))
    sketches = [_load_sketch_png(p) for p in sk_paths]
    images = [photo_to_tensor(np.asarray(Image.open(p).convert("RGB"), dtype=np.uint8))
              for p in im_paths]
    click.echo(json.dumps({"fgm": fgm(model, sketches, images), "n": len(sketches)}))


@main.command("evaluate")
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(exists=True))
@click.option("--checkpoints", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(), help="report directory")
@click.option("--rows", default="full,no_adapter,no_sbir,no_superconcept,uniform_tsampling,null",
              show_default=True)
@click.option("--steps", default=50, show_default=True)
@click.option("--max-eval", default=32, show_default=True)
def evaluate_cmd(dataset_dir, checkpoints, out, rows, steps, max_eval):
    """Benchmark/ablation table with JSON, text, and figure outputs."""
    from .evaluate import benchmark
    from .synthdata import SynthDataset
    report = benchmark(checkpoints, SynthDataset(dataset_dir), out,
                       rows=tuple(rows.split(",")), steps=steps, max_eval=max_eval)
    click.echo(report.to_table())


@main.command("serve")
@click.option("--checkpoints", required=True, type=click.Path(exists=True),
              envvar="SKETCHDIFF_CHECKPOINTS")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8008, show_default=True, envvar="SKETCHDIFF_PORT")
def serve_cmd(checkpoints, host, port):
    """Run the HTTP gateway over a checkpoint directory."""
    from .gateway import main as serve_main
    serve_main(checkpoints, host=host, port=port)


if __name__ == "__main__":
    main()
