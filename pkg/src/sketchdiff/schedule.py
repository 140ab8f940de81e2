"""Diffusion arithmetic: noise schedules, forward noising, single-step clean
estimates, reverse stepping, and the (identity-by-default) pixel/latent codec.

Time convention: t in {1..T} indexes noisy states; alpha_bars[0] = 1 so t=0
is the clean image.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import torch

from .errors import ConfigurationError, ContractViolation, GenerationError

DEFAULT_T = 1000
DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed diffusion coefficients, indexed by time-step.

    betas/alphas have length T; alpha_bars has length T+1 with
    alpha_bars[0] = 1 by convention.
    """

    kind: str
    T: int
    beta_min: float
    beta_max: float
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    def alpha_bar(self, t):
        """alpha_bars[t] as a python float (t int) or a float64 tensor (t tensor)."""
        if torch.is_tensor(t):
            return self.alpha_bars[t]
        return float(self.alpha_bars[int(t)])

    def to_json(self) -> str:
        return json.dumps(
            {"kind": self.kind, "T": self.T, "beta_min": self.beta_min, "beta_max": self.beta_max},
            sort_keys=True,
        )

    @staticmethod
    def from_json(doc: str) -> "NoiseSchedule":
        cfg = json.loads(doc)
        return build_schedule(cfg["kind"], cfg["T"], cfg["beta_min"], cfg["beta_max"])


def build_schedule(kind: str, T: int, beta_min: float = DEFAULT_BETA_MIN,
                   beta_max: float = DEFAULT_BETA_MAX) -> NoiseSchedule:
    """Construct a noise schedule. `linear` interpolates betas affinely from
    beta_min to beta_max; `cosine` follows the squared-cosine alpha-bar curve
    with betas clamped into [beta_min, beta_max]."""
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigurationError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")

    if kind == "linear":
        betas = torch.linspace(beta_min, beta_max, T, dtype=torch.float64)
    elif kind == "cosine":
        s = 0.008
        x = torch.linspace(0, T, T + 1, dtype=torch.float64)
        bars = torch.cos(((x / T) + s) / (1 + s) * math.pi / 2) ** 2
        bars = bars / bars[0]
        betas = (1 - bars[1:] / bars[:-1]).clamp(beta_min, beta_max)
    else:
        raise ConfigurationError(f"unknown schedule kind {kind!r}")

    alphas = 1.0 - betas
    alpha_bars = torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(alphas, dim=0)])
    return NoiseSchedule(kind, T, float(beta_min), float(beta_max), betas, alphas, alpha_bars)


def _check_t(t: int, sched: NoiseSchedule, lo: int = 0) -> None:
    if t < lo or t > sched.T:
        raise ContractViolation(f"t={t} outside [{lo}, {sched.T}]")


def _gather(ab: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Reshape per-sample alpha-bar values to broadcast over [B, ...]."""
    return ab.to(like.dtype).view(-1, *([1] * (like.ndim - 1)))


def forward_diffuse(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.

    t may be an int (applied to the whole tensor) or a 1-D tensor of
    per-sample steps for a batched x0.
    """
    if eps.shape != x0.shape:
        raise ContractViolation(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    if torch.is_tensor(t):
        ab = sched.alpha_bars[t]
        return _gather(ab.sqrt(), x0) * x0 + _gather((1 - ab).sqrt(), x0) * eps
    _check_t(int(t), sched)
    ab = sched.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def tweedie_estimate(x_t: torch.Tensor, t, eps_hat: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Single-step clean estimate x0_hat = (x_t - sqrt(1 - ab_t) * eps_hat) / sqrt(ab_t).

    At t=0 this is the identity (alpha_bars[0] = 1).
    """
    if eps_hat.shape != x_t.shape:
        raise ContractViolation(f"eps_hat shape {tuple(eps_hat.shape)} != x_t shape {tuple(x_t.shape)}")
    if torch.is_tensor(t):
        ab = sched.alpha_bars[t]
        return (x_t - _gather((1 - ab).sqrt(), x_t) * eps_hat) / _gather(ab.sqrt(), x_t)
    _check_t(int(t), sched)
    ab = sched.alpha_bar(t)
    return (x_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def denoise_step(x_t: torch.Tensor, t: int, eps_hat: torch.Tensor, sched: NoiseSchedule,
                 noise: torch.Tensor | None = None, eta: float = 0.0,
                 t_prev: int | None = None) -> torch.Tensor:
    """One reverse step t -> t_prev (default t-1).

    Deterministic update for eta=0; eta=1 recovers the ancestral sampler:
        x_prev = sqrt(ab_prev) * x0_hat + sqrt(1 - ab_prev - sigma^2) * eps_hat + sigma * z
    with sigma = eta * sqrt((1 - ab_prev) / (1 - ab_t) * (1 - ab_t / ab_prev)).
    """
    _check_t(t, sched, lo=1)
    if t_prev is None:
        t_prev = t - 1
    if not (0 <= t_prev < t):
        raise ContractViolation(f"t_prev={t_prev} must lie in [0, t)")

    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t_prev)
    sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev))

    if sigma > 0.0 and noise is None:
        raise ContractViolation("stochastic step (eta > 0, t > 1) requires a noise argument")

    x0_hat = tweedie_estimate(x_t, t, eps_hat, sched)
    out = math.sqrt(ab_prev) * x0_hat + math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps_hat
    if sigma > 0.0:
        out = out + sigma * noise
    return out


def timestep_subset(T: int, steps: int) -> list[int]:
    """Evenly strided descending subset of {1..T} of the given size, ending at 1."""
    ts = torch.linspace(T, 1, steps).round().to(torch.long).tolist()
    # rounding can collide for steps close to T; deduplicate preserving order
    seen, out = set(), []
    for t in ts:
        if t not in seen:
            seen.add(t)
            out.append(t)
    return out


def generate(denoiser_fn, tokens, sched: NoiseSchedule, shape: tuple[int, ...],
             steps: int, seed: int, eta: float = 0.0) -> torch.Tensor:
    """Run the reverse trajectory from seeded Gaussian x_T.

    denoiser_fn(x_t, t, tokens) -> eps_hat. With eta=0 the output is a pure
    function of (tokens, seed, steps).
    """
    if not (1 <= steps <= sched.T):
        raise ContractViolation(f"steps={steps} outside [1, {sched.T}]")
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(shape, generator=gen, dtype=torch.float32)
    ts = timestep_subset(sched.T, steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps_hat = denoiser_fn(x, t, tokens)
        noise = torch.randn(shape, generator=gen, dtype=torch.float32) if eta > 0 and t_prev > 0 else None
        x = denoise_step(x, t, eps_hat, sched, noise=noise, eta=eta if t_prev > 0 else 0.0, t_prev=t_prev)
        if not torch.isfinite(x).all():
            raise GenerationError(f"non-finite values at reverse step t={t} (index {i})")
    return x


class IdentityCodec:
    """Pixel-space stand-in for a latent autoencoder: encode/decode are the identity."""

    identity = True

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return x

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return z
