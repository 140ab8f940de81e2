"""Checkpoint container: a binary blob of named parameter arrays (.npz) plus
a JSON sidecar carrying the config hash, training step, and a loss-history
summary."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .errors import StateError


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def loss_summary(history: list[float]) -> dict:
    if not history:
        return {"steps": 0}
    return {
        "steps": len(history),
        "first": float(history[0]),
        "last": float(history[-1]),
        "min": float(min(history)),
    }


def module_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {k: torch.from_numpy(np.asarray(v)) for k, v in arrays.items()}
    module.load_state_dict(state)


def save_checkpoint(base: str | Path, arrays: dict[str, np.ndarray], config: dict,
                    step: int, history: list[float] | None = None) -> None:
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    np.savez(base.with_suffix(".npz"), **arrays)
    sidecar = {
        "config": config,
        "config_hash": config_hash(config),
        "training_step": step,
        "loss_history_summary": loss_summary(history or []),
    }
    base.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True, indent=2))


def checkpoint_exists(base: str | Path) -> bool:
    base = Path(base)
    return base.with_suffix(".npz").exists() and base.with_suffix(".json").exists()


def load_checkpoint(base: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    base = Path(base)
    if not checkpoint_exists(base):
        raise StateError(f"checkpoint not found at {base}")
    with np.load(base.with_suffix(".npz")) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(base.with_suffix(".json").read_text())
    return arrays, meta
