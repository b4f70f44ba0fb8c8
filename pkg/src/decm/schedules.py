"""Interpolation path, timestep samplers, and loss-weighting functions.

The path is the straight optimal-transport one: alpha(t) = t, sigma(t) = 1-t,
so the interpolant is x_t = (1-t) z + t x1 and the conditional velocity is
x1 - z. Training times are drawn either on the endpoints of N uniform
segments of [0, 1] or from the usual continuous alternatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["Interpolant", "TimestepSampler", "WeightFn", "interpolate", "sample_t"]


@dataclass(frozen=True)
class Interpolant:
    """alpha(t) = t, sigma(t) = 1 - t with unit-rate derivatives."""

    def alpha(self, t):
        return np.asarray(t, dtype=np.float64)

    def sigma(self, t):
        return 1.0 - np.asarray(t, dtype=np.float64)

    def alpha_dot(self, t):
        return np.ones_like(np.asarray(t, dtype=np.float64))

    def sigma_dot(self, t):
        return -np.ones_like(np.asarray(t, dtype=np.float64))


def interpolate(z: np.ndarray, x1: np.ndarray, t) -> np.ndarray:
    """(1 - t) z + t x1, elementwise over the batch."""
    z = np.asarray(z, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if z.shape != x1.shape:
        raise ValueError(f"shape mismatch: z {z.shape} vs x1 {x1.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("t must lie in [0, 1]")
    if t.ndim == 1:
        t = t.reshape(-1, *([1] * (z.ndim - 1)))
    return (1.0 - t) * z + t * x1


@dataclass
class TimestepSampler:
    """Draws training times for the three loss branches.

    kinds:
      uniform-n-seg  endpoints i/N of N uniform segments (grid values only)
      lognorm        sigmoid of a normal draw (logit-normal times)
      arctan-norm    (2/pi) * arctan(exp(normal draw))
    The cm branch needs t < 1 (the right endpoint is pinned at s = 1); the
    n2n-right branch needs t > 0 (the left endpoint is pinned at r = 0); the
    fm branch is continuous U(0, 1).
    """

    kind: str = "uniform-n-seg"
    n_segments: int = 8
    loc: float = -0.4
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform-n-seg", "lognorm", "arctan-norm"):
            raise ValueError(f"unknown timestep sampler kind: {self.kind!r}")
        if self.n_segments < 1:
            raise ValueError("n_segments must be >= 1")

    def draw(self, rng: np.random.Generator, branch: str, size: int = 1) -> np.ndarray:
        if branch == "fm":
            return rng.random(size)
        if branch not in ("cm", "n2n-right"):
            raise ValueError(f"unknown branch: {branch!r}")
        n = self.n_segments
        if self.kind == "uniform-n-seg":
            if branch == "cm":
                idx = rng.integers(0, n, size=size)  # t < s = 1
            else:
                idx = rng.integers(1, n + 1, size=size)  # t > r = 0
            return idx / n
        if self.kind == "lognorm":
            raw = 1.0 / (1.0 + np.exp(-(self.loc + self.scale * rng.standard_normal(size))))
        else:  # arctan-norm, per the sCM-style schedule
            raw = (2.0 / np.pi) * np.arctan(np.exp(-0.8 + 1.6 * rng.standard_normal(size)))
        if branch == "cm":
            return np.clip(raw, 0.0, (n - 1) / n if n > 1 else 0.5)
        return np.clip(raw, 1.0 / n, 1.0)


def sample_t(sampler: TimestepSampler, rng: np.random.Generator, branch: str, size: int = 1) -> np.ndarray:
    return sampler.draw(rng, branch, size=size)


@dataclass
class WeightFn:
    """Loss weighting w1(t) / w2(r, t); constant 1 or kappa*(1-t) clipped to (0, 1]."""

    kind: str = "const"
    kappa: float = 1.0

    def __post_init__(self):
        if self.kind not in ("const", "kappa-one-minus-t"):
            raise ValueError(f"unknown weight kind: {self.kind!r}")

    def w1(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "const":
            return np.ones_like(t)
        return np.clip(self.kappa * (1.0 - t), np.finfo(np.float64).tiny, 1.0)

    def w2(self, r, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        r = np.asarray(r, dtype=np.float64)
        if self.kind == "const":
            return np.ones_like(np.broadcast_arrays(r, t)[0])
        return np.clip(self.kappa * (1.0 - (t - r)), np.finfo(np.float64).tiny, 1.0)
