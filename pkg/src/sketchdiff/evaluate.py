"""Evaluation: Fréchet distance in a learned photo-feature space (the FID
stand-in), FGM via the retrieval embedder, and the benchmark/ablation report
with aligned-table, JSON, and figure outputs."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .checkpoints import (config_hash, load_checkpoint, load_module_arrays, module_arrays,
                          save_checkpoint)
from .denoiser import ConditioningTokens
from .errors import InputError
from .fgsbir import fgm
from .service import ADAPTER_ROWS, SketchToImage, load_bundle
from .synthdata import SynthDataset


class PhotoClassifier(nn.Module):
    """Small photo classifier; its penultimate layer is the feature space
    for the Fréchet metric."""

    def __init__(self, num_classes: int = 8, feature_dim: int = 128):
        super().__init__()
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.trunk = nn.Sequential(
            nn.Conv2d(3, 64, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(64, 128, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(128, 128, 3, padding=1), nn.SiLU(),
        )
        self.feature = nn.Linear(128, feature_dim)
        self.head = nn.Linear(feature_dim, num_classes)

    def features(self, photos: torch.Tensor) -> torch.Tensor:
        squeeze = photos.ndim == 3
        x = photos.unsqueeze(0) if squeeze else photos
        h = self.feature(self.trunk(x).mean(dim=(2, 3)))
        return h.squeeze(0) if squeeze else h

    def forward(self, photos: torch.Tensor) -> torch.Tensor:
        return self.head(F.silu(self.features(photos)))


@dataclass
class PhotoClassifierConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0


def train_photo_classifier(photos: torch.Tensor, labels: torch.Tensor,
                           config: PhotoClassifierConfig,
                           num_classes: int = 8) -> tuple[PhotoClassifier, list[float]]:
    torch.manual_seed(config.seed)
    model = PhotoClassifier(num_classes)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    gen = torch.Generator().manual_seed(config.seed)
    n = photos.shape[0]
    history = []
    for _ in range(config.epochs):
        order = torch.randperm(n, generator=gen)
        total, batches = 0.0, 0
        for i in range(0, n, config.batch_size):
            idx = order[i:i + config.batch_size]
            loss = F.cross_entropy(model(photos[idx]), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            batches += 1
        history.append(total / batches)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, history


def classifier_accuracy(model: PhotoClassifier, photos: torch.Tensor, labels: torch.Tensor) -> float:
    with torch.no_grad():
        return float((model(photos).argmax(dim=1) == labels).float().mean())


def save_photo_classifier(base, model: PhotoClassifier, history=None) -> None:
    save_checkpoint(base, module_arrays(model),
                    {"num_classes": model.num_classes, "feature_dim": model.feature_dim},
                    0, history or [])


def load_photo_classifier(base) -> PhotoClassifier:
    arrays, meta = load_checkpoint(base)
    model = PhotoClassifier(**meta["config"])
    load_module_arrays(model, arrays)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


# ---------------------------------------------------------------------------
# Frechet distance

def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    """Matrix square root via eigendecomposition, clipping tiny negative
    eigenvalues to zero."""
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(features_a: np.ndarray, features_b: np.ndarray, eps: float = 1e-6) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)) between Gaussians
    fitted to the two feature sets."""
    fa = np.asarray(features_a, dtype=np.float64)
    fb = np.asarray(features_b, dtype=np.float64)
    if not (np.isfinite(fa).all() and np.isfinite(fb).all()):
        raise InputError("non-finite feature values")
    if fa.ndim == 1:
        fa = fa[:, None]
    if fb.ndim == 1:
        fb = fb[:, None]
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    d = fa.shape[1]
    cov_a = np.cov(fa, rowvar=False).reshape(d, d) + eps * np.eye(d)
    cov_b = np.cov(fb, rowvar=False).reshape(d, d) + eps * np.eye(d)

    sqrt_a = _sqrtm_psd(cov_a)
    cross = _sqrtm_psd(sqrt_a @ cov_b @ sqrt_a)
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# benchmark report

ROW_LABELS = {
    "full": "full",
    "no_adapter": "w/o adapter",
    "no_sbir": "w/o discriminative",
    "no_superconcept": "w/o super-concept",
    "uniform_tsampling": "w/o abs.-aware sampling",
    "null": "null-token baseline",
}


@dataclass
class MetricReport:
    rows: list[dict]
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"meta": self.meta, "rows": self.rows}, sort_keys=True, indent=2)

    def to_table(self) -> str:
        header = f"{'row':<26}{'fd':>12}{'fgm':>9}{'n':>6}  status"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            fd = f"{r['fd']:.4f}" if r["fd"] is not None else "absent"
            gm = f"{r['fgm']:.4f}" if r["fgm"] is not None else "absent"
            lines.append(f"{ROW_LABELS.get(r['row'], r['row']):<26}{fd:>12}{gm:>9}{r['n_samples']:>6}  {r['status']}")
        return "\n".join(lines)


def generated_for_row(bundle: SketchToImage, sketches: torch.Tensor, steps: int,
                      base_seed: int, null_tokens: bool = False) -> torch.Tensor:
    """One generation per eval sketch, seeds pinned to base_seed + index."""
    out = []
    for i in range(sketches.shape[0]):
        tokens = bundle.denoiser.cfg.null_tokens() if null_tokens else None
        out.append(bundle.generate_from_sketch(sketches[i], seed=base_seed + i,
                                               steps=steps, tokens=tokens))
    return torch.stack(out)


def benchmark(checkpoint_dir, dataset: SynthDataset, out_dir,
              rows: tuple[str, ...] = ADAPTER_ROWS + ("null",),
              photo_classifier: PhotoClassifier | None = None,
              steps: int = 50, base_seed: int = 1234,
              max_eval: int | None = None) -> MetricReport:
    """One report row per ablation; missing checkpoints are marked absent,
    never silently dropped. Writes report.json, report.txt, report.png."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    photos, _, _ = dataset.photos("eval")
    sketches, photo_row, _, _ = dataset.sketches("eval")
    if max_eval is not None:
        sketches, photo_row = sketches[:max_eval], photo_row[:max_eval]

    if photo_classifier is None:
        photo_classifier = load_photo_classifier(Path(checkpoint_dir) / "photo_classifier")
    real_feats = photo_classifier.features(photos).numpy()

    report_rows = []
    for row in rows:
        adapter_row = "full" if row == "null" else row
        try:
            bundle = load_bundle(checkpoint_dir, adapter_row)
        except Exception:
            report_rows.append({"row": row, "fd": None, "fgm": None, "n_samples": 0,
                                "status": "absent", "config_hashes": {}})
            continue
        gen = generated_for_row(bundle, sketches, steps, base_seed, null_tokens=(row == "null"))
        gen_feats = photo_classifier.features(gen).numpy()
        report_rows.append({
            "row": row,
            "fd": round(frechet_distance(real_feats, gen_feats), 6),
            "fgm": round(fgm(bundle.fg, sketches, gen), 6),
            "n_samples": int(sketches.shape[0]),
            "status": "ok",
            "config_hashes": bundle.config_hashes,
        })

    report = MetricReport(rows=report_rows, meta={
        "steps": steps, "base_seed": base_seed,
        "dataset_hash": dataset.manifest.hash(),
        "report_hash_basis": config_hash({"rows": list(rows), "steps": steps, "seed": base_seed}),
    })
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_table() + "\n")
    render_report_figure(report, out / "report.png")
    return report


def render_report_figure(report: MetricReport, path) -> None:
    present = [r for r in report.rows if r["status"] == "ok"]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    names = [ROW_LABELS.get(r["row"], r["row"]) for r in present]
    for ax, key, title in zip(axes, ("fgm", "fd"), ("FGM (higher better)", "Frechet distance (lower better)")):
        ax.barh(names, [r[key] for r in present], color="#4878a8")
        ax.set_title(title, fontsize=10)
        ax.tick_params(labelsize=8)
        ax.invert_yaxis()
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def render_loss_figure(metrics: list[dict], path, keys=("L_SD", "L_SBIR", "L_reg", "L_total")) -> None:
    fig, ax = plt.subplots(figsize=(7, 3.2))
    steps = [m["step"] for m in metrics]
    for key in keys:
        if metrics and key in metrics[0]:
            ax.plot(steps, [m[key] for m in metrics], label=key, linewidth=0.9)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
