"""Abstraction-aware time-step sampling.

The sampling density over t in [0, T] is

    pdf(t) = (1/T) * (1 - omega * cos(pi * t / T))

whose antiderivative gives the closed-form CDF

    cdf(t) = t/T - (omega / pi) * sin(pi * t / T).

omega = 0 is uniform; omega -> 1 skews mass toward large t. The discrete
form assigns each integer step t in {1..T} the mass cdf(t) - cdf(t-1), so
the pmf sums to 1 by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigurationError, InputError


@dataclass(frozen=True)
class TimestepDistribution:
    T: int
    omega: float
    mode: str = "discrete"

    def __post_init__(self):
        if self.T < 1:
            raise ConfigurationError(f"T must be >= 1, got {self.T}")
        if not (0.0 <= self.omega <= 1.0):
            raise ConfigurationError(f"omega must lie in [0, 1], got {self.omega}")
        if self.mode not in ("continuous", "discrete"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")

    @cached_property
    def pmf(self) -> np.ndarray:
        """Mass of each integer step t in {1..T} (index 0 corresponds to t=1)."""
        t = np.arange(self.T + 1, dtype=np.float64)
        c = cdf(t, self)
        return np.diff(c)

    def mean(self) -> float:
        """Analytic mean of the continuous density: T/2 + 2*omega*T/pi^2."""
        return self.T / 2 + 2 * self.omega * self.T / math.pi**2


def pdf(t, dist: TimestepDistribution):
    """Density at t (scalar or array); domain [0, T]."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > dist.T):
        raise InputError(f"t outside [0, {dist.T}]")
    out = (1.0 - dist.omega * np.cos(np.pi * t / dist.T)) / dist.T
    return float(out) if out.ndim == 0 else out


def cdf(t, dist: TimestepDistribution):
    """Closed-form CDF at t (scalar or array); domain [0, T]."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > dist.T):
        raise InputError(f"t outside [0, {dist.T}]")
    out = t / dist.T - (dist.omega / np.pi) * np.sin(np.pi * t / dist.T)
    return float(out) if out.ndim == 0 else out


def inverse_cdf(u, dist: TimestepDistribution, tol: float = 1e-10) -> np.ndarray:
    """Solve cdf(t) = u by bisection; u in [0, 1]."""
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    lo = np.zeros_like(u)
    hi = np.full_like(u, float(dist.T))
    # cdf is strictly increasing for omega < 1 and nondecreasing at omega = 1;
    # bisection needs no derivative and converges to tol * T in ~log2(T/tol) steps
    n_iter = int(math.ceil(math.log2(dist.T / tol))) + 1
    for _ in range(n_iter):
        mid = 0.5 * (lo + hi)
        below = cdf(mid, dist) < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def _as_rng(rng_or_seed) -> np.random.Generator:
    if isinstance(rng_or_seed, np.random.Generator):
        return rng_or_seed
    return np.random.default_rng(rng_or_seed)


def sample(dist: TimestepDistribution, rng_or_seed, n: int | None = None):
    """Draw integer time-steps in {1..T}.

    Continuous mode inverts the closed-form CDF and floors into {1..T}
    (t=0 maps to 1, which carries no training signal); discrete mode draws
    from the exact pmf. Returns an int when n is None, else an int array.
    """
    rng = _as_rng(rng_or_seed)
    size = 1 if n is None else n
    if dist.mode == "discrete":
        draws = rng.choice(dist.T, size=size, p=dist.pmf) + 1
    else:
        u = rng.random(size)
        t = np.floor(inverse_cdf(u, dist)).astype(np.int64)
        draws = np.clip(t, 1, dist.T)
    return int(draws[0]) if n is None else draws


def histogram(draws: np.ndarray, T: int) -> np.ndarray:
    """Counts per integer step, shape [T] (index 0 is t=1)."""
    return np.bincount(np.asarray(draws) - 1, minlength=T)
