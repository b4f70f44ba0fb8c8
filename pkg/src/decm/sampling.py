"""Inference procedures: Euler ODE, predict-and-renoise, and the mixed walk.

Euler steps the instantaneous field F(x, t, t) across the grid. The
consistency walk repeatedly jumps to the data end with the flow map and
re-noises to the next grid time with fresh noise. The mix walk runs k
deterministic flow-map hops first (the first of which, from t = 0, is
exactly the trained noise-to-noisy mapping) and finishes with the
consistency paradigm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .network import VelocityNet, flow_map

__all__ = [
    "SamplerSpec",
    "SampleRun",
    "uniform_grid",
    "euler_sample",
    "cm_sample",
    "mix_sample",
    "run_sampler",
]


def uniform_grid(nfe: int) -> np.ndarray:
    if nfe < 1:
        raise ValueError("nfe must be >= 1")
    return np.linspace(0.0, 1.0, nfe + 1)


@dataclass
class SamplerSpec:
    kind: str = "cm"  # euler | cm | mix
    nfe: int = 1
    grid: np.ndarray | None = None
    k: int | None = None  # mix: number of deterministic flow-map hops
    seed: int = 0
    euler_phase: str = "flow-map"  # mix phase A: flow-map | instantaneous
    train_segments: int | None = None  # for on-grid metadata only

    def __post_init__(self):
        if self.kind not in ("euler", "cm", "mix"):
            raise ValueError(f"unknown sampler kind: {self.kind!r}")
        if self.nfe < 1:
            raise ValueError("nfe must be >= 1")
        if self.grid is None:
            self.grid = uniform_grid(self.nfe)
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid[0] != 0.0 or self.grid[-1] != 1.0 or np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must increase from exactly 0 to exactly 1")
        if len(self.grid) != self.nfe + 1:
            raise ValueError("grid must have nfe + 1 points")
        if self.kind == "mix":
            if self.k is None:
                self.k = max(1, math.ceil(self.nfe / 2))
            if self.k >= self.nfe:
                raise ValueError(f"mix split k={self.k} must be < nfe={self.nfe}")
            if self.k < 0:
                raise ValueError("mix split k must be >= 0")
        if self.euler_phase not in ("flow-map", "instantaneous"):
            raise ValueError("euler_phase must be 'flow-map' or 'instantaneous'")

    def on_grid(self) -> bool:
        """True when every grid time lies on the trained segment grid."""
        if self.train_segments is None:
            return True
        scaled = self.grid * self.train_segments
        return bool(np.allclose(scaled, np.round(scaled), atol=1e-12))


@dataclass
class SampleRun:
    spec: SamplerSpec
    labels: np.ndarray | None
    samples: np.ndarray
    snapshots: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)


def _streams(spec: SamplerSpec):
    # independent init and renoise streams so NFE changes never reshuffle x0
    return (
        np.random.default_rng([spec.seed, 0x1417]),
        np.random.default_rng([spec.seed, 0x4E01]),
    )


def _resolve_x0(net: VelocityNet, spec: SamplerSpec, n: int, x0):
    if x0 is None:
        rng_init, rng_renoise = _streams(spec)
        x0 = rng_init.standard_normal((n, net.dim_x))
    else:
        _, rng_renoise = _streams(spec)
        x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    return x0, rng_renoise


def euler_sample(net: VelocityNet, spec: SamplerSpec, n: int, labels=None, x0=None, snapshots=None):
    """Deterministic integration with the instantaneous (s = t) velocity."""
    x, _ = _resolve_x0(net, spec, n, x0)
    grid = spec.grid
    for i in range(spec.nfe):
        t_i = np.full(len(x), grid[i])
        x = x + (grid[i + 1] - grid[i]) * net(x, t_i, t_i, labels)
        if snapshots is not None:
            snapshots.append(x.copy())
    return x


def _cm_walk(net, x, grid, start, labels, rng_renoise, snapshots=None):
    """Predict-data-then-renoise from grid[start]; fresh noise each step."""
    n_steps = len(grid) - 1
    xhat = None
    for j in range(start, n_steps):
        t_j = np.full(len(x), grid[j])
        xhat = flow_map(net, x, t_j, np.ones(len(x)), labels)
        if j < n_steps - 1:
            t_next = grid[j + 1]
            z_new = rng_renoise.standard_normal(x.shape)
            x = (1.0 - t_next) * z_new + t_next * xhat
            if snapshots is not None:
                snapshots.append(x.copy())
    return xhat


def cm_sample(net: VelocityNet, spec: SamplerSpec, n: int, labels=None, x0=None, snapshots=None):
    x, rng_renoise = _resolve_x0(net, spec, n, x0)
    return _cm_walk(net, x, spec.grid, 0, labels, rng_renoise, snapshots)


def mix_sample(net: VelocityNet, spec: SamplerSpec, n: int, labels=None, x0=None, snapshots=None):
    """k deterministic hops along the grid, then the consistency paradigm.

    k = 0 degenerates to the full consistency walk (test hook); k = nfe - 1
    leaves a single final jump and the whole trajectory is deterministic.
    """
    if spec.k >= spec.nfe:
        raise ValueError(f"mix split k={spec.k} must be < nfe={spec.nfe}")
    x, rng_renoise = _resolve_x0(net, spec, n, x0)
    grid = spec.grid
    for i in range(spec.k):
        t_i = np.full(len(x), grid[i])
        s_i = np.full(len(x), grid[i + 1])
        if spec.euler_phase == "flow-map":
            x = flow_map(net, x, t_i, s_i, labels)
        else:
            x = x + (grid[i + 1] - grid[i]) * net(x, t_i, t_i, labels)
        if snapshots is not None:
            snapshots.append(x.copy())
    return _cm_walk(net, x, grid, spec.k, labels, rng_renoise, snapshots)


_DISPATCH = {"euler": euler_sample, "cm": cm_sample, "mix": mix_sample}


def run_sampler(
    net: VelocityNet, spec: SamplerSpec, n: int, labels=None, keep_snapshots: bool = False
) -> SampleRun:
    """Draw n samples with the requested procedure; labels may be None, a
    scalar class, or a per-sample array."""
    if labels is not None and np.ndim(labels) == 0:
        labels = np.full(n, int(labels), dtype=np.int64)
    snapshots = [] if keep_snapshots else None
    samples = _DISPATCH[spec.kind](net, spec, n, labels=labels, snapshots=snapshots)
    if len(samples) != n:
        raise RuntimeError("sampler emitted wrong count")
    return SampleRun(
        spec=spec,
        labels=labels,
        samples=samples,
        snapshots=snapshots or [],
        metadata={"on_grid": spec.on_grid(), "nfe": spec.nfe, "kind": spec.kind},
    )
