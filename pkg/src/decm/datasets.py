"""Toy 2-D datasets with independent ground-truth machinery.

Each dataset knows how to sample labelled points. For Gaussian mixtures the
marginal velocity of the linear noise-to-data path is available in closed
form; for the other shapes a Monte-Carlo conditional-expectation estimator
stands in. A fine fixed-step integrator with Richardson extrapolation serves
as the reference transport map.

Convention everywhere: t=0 is standard-normal noise, t=1 is data, and the
interpolant is x_t = (1-t) * x0 + t * x1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GaussianMixture",
    "Checkerboard",
    "TwoMoons",
    "ArrayDataset",
    "make_dataset",
    "sample_data",
    "oracle_velocity",
    "mc_oracle_velocity",
    "reference_flow",
]


@dataclass
class GaussianMixture:
    """Isotropic Gaussian mixture; class label = component id."""

    means: np.ndarray
    scales: np.ndarray
    weights: np.ndarray
    kind: str = "gaussian-mixture"

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(-1)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if not (len(self.means) == len(self.scales) == len(self.weights)):
            raise ValueError("means, scales, weights must have equal length")
        total = self.weights.sum()
        if not np.isclose(total, 1.0):
            raise ValueError(f"mixture weights sum to {total}, expected 1")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.weights)

    def sample(self, n: int, rng: np.random.Generator):
        if n == 0:
            return np.zeros((0, self.dim)), np.zeros(0, dtype=np.int64)
        comp = rng.choice(self.n_classes, size=n, p=self.weights)
        x = self.means[comp] + self.scales[comp, None] * rng.standard_normal((n, self.dim))
        return x, comp

    def class_mean(self, k: int) -> np.ndarray:
        return self.means[k]


@dataclass
class Checkerboard:
    """Uniform density on the dark cells of a cells x cells board.

    Class label = dark-cell index (row-major over dark cells).
    """

    extent: float = 4.0
    cells: int = 4
    kind: str = "checkerboard"
    dark: np.ndarray = field(init=False)

    def __post_init__(self):
        ij = [(i, j) for i in range(self.cells) for j in range(self.cells) if (i + j) % 2 == 0]
        self.dark = np.asarray(ij, dtype=np.int64)

    @property
    def dim(self) -> int:
        return 2

    @property
    def n_classes(self) -> int:
        return len(self.dark)

    def sample(self, n: int, rng: np.random.Generator):
        if n == 0:
            return np.zeros((0, 2)), np.zeros(0, dtype=np.int64)
        cell = rng.integers(0, self.n_classes, size=n)
        size = 2.0 * self.extent / self.cells
        corner = -self.extent + self.dark[cell] * size
        x = corner + rng.random((n, 2)) * size
        return x, cell


@dataclass
class TwoMoons:
    """Two interleaved half circles; class label = moon id."""

    noise: float = 0.08
    radius: float = 2.0
    kind: str = "two-moons"

    @property
    def dim(self) -> int:
        return 2

    @property
    def n_classes(self) -> int:
        return 2

    def sample(self, n: int, rng: np.random.Generator):
        if n == 0:
            return np.zeros((0, 2)), np.zeros(0, dtype=np.int64)
        moon = rng.integers(0, 2, size=n)
        theta = rng.random(n) * np.pi
        x = np.empty((n, 2))
        x[:, 0] = self.radius * np.cos(theta)
        x[:, 1] = self.radius * np.sin(theta)
        flip = moon == 1
        x[flip, 0] = self.radius - x[flip, 0]
        x[flip, 1] = -x[flip, 1] + self.radius / 2.0
        x[~flip, 1] -= self.radius / 4.0
        x += self.noise * rng.standard_normal((n, 2))
        return x, moon


class ArrayDataset:
    """Empirical cloud: batches are rows drawn with replacement."""

    kind = "array"

    def __init__(self, X, y=None):
        self.X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if y is None:
            self.y = None
            self._n_classes = 0
        else:
            self.y = np.asarray(y, dtype=np.int64).reshape(-1)
            if len(self.y) != len(self.X):
                raise ValueError("X and y disagree on length")
            if self.y.min() < 0:
                raise ValueError("class labels must be non-negative")
            self._n_classes = int(self.y.max()) + 1

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def n_classes(self) -> int:
        return self._n_classes

    def sample(self, n: int, rng: np.random.Generator):
        if n == 0:
            return np.zeros((0, self.dim)), np.zeros(0, dtype=np.int64)
        idx = rng.integers(0, len(self.X), size=n)
        labels = self.y[idx] if self.y is not None else np.zeros(n, dtype=np.int64)
        return self.X[idx].copy(), labels


def make_dataset(kind: str, **params):
    """Factory used by the config layer."""
    if kind in ("gaussian-mixture", "two-gaussian"):
        if not params:
            params = dict(
                means=[[-2.0, 0.0], [2.0, 0.0]],
                scales=[0.35, 0.35],
                weights=[0.5, 0.5],
            )
        return GaussianMixture(**params)
    if kind == "checkerboard":
        return Checkerboard(**params)
    if kind == "two-moons":
        return TwoMoons(**params)
    raise ValueError(f"unknown dataset kind: {kind!r}")


def sample_data(dataset, n: int, rng: np.random.Generator):
    """n iid draws of (points, class labels)."""
    if n < 0:
        raise ValueError("n must be >= 0")
    return dataset.sample(n, rng)


def _mixture_velocity(ds: GaussianMixture, x: np.ndarray, t, label=None) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.asarray(t, dtype=np.float64)
    tcol = np.broadcast_to(t.reshape(-1, 1) if t.ndim else t, (len(x), 1))
    # exact independence limit: at t=1 the state is x1 and E[x0 | x1] = 0
    at_one = tcol[:, 0] == 1.0
    v = np.empty_like(x)
    v[at_one] = x[at_one]
    if at_one.all():
        return v
    keep = ~at_one
    xk, tk = x[keep], tcol[keep]
    var = (1.0 - tk) ** 2 + tk**2 * ds.scales[None, :] ** 2  # (m, k)
    diff = xk[:, None, :] - tk[:, :, None] * ds.means[None, :, :]  # (m, k, d)
    sq = np.sum(diff * diff, axis=2)  # (m, k)
    if label is None:
        logw = (
            np.log(ds.weights)[None, :]
            - 0.5 * ds.dim * np.log(var)
            - 0.5 * sq / var
        )
        logw -= logw.max(axis=1, keepdims=True)
        resp = np.exp(logw)
        resp /= resp.sum(axis=1, keepdims=True)
    else:
        resp = np.zeros_like(var)
        resp[:, label] = 1.0
    coef = (tk * ds.scales[None, :] ** 2 - (1.0 - tk)) / var  # (m, k)
    v_k = ds.means[None, :, :] + coef[:, :, None] * diff  # (m, k, d)
    v[keep] = np.sum(resp[:, :, None] * v_k, axis=1)
    return v


def oracle_velocity(dataset, x: np.ndarray, t, label=None) -> np.ndarray:
    """E[x1 - x0 | x_t = x] under the linear path.

    Closed form for Gaussian mixtures; Monte Carlo otherwise. `label` pins a
    single class (conditional velocity field).
    """
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ValueError("t must lie in [0, 1]")
    if isinstance(dataset, GaussianMixture):
        return _mixture_velocity(dataset, x, t, label=label)
    return mc_oracle_velocity(dataset, x, t, label=label)


def mc_oracle_velocity(
    dataset,
    x: np.ndarray,
    t,
    n_mc: int = 1_000_000,
    rng: np.random.Generator | None = None,
    label=None,
) -> np.ndarray:
    """Monte-Carlo conditional expectation of x1 - x0 given x_t = x.

    Draws x1 from the data (stratified over classes so every mode is
    represented), solves x0 = (x - t*x1)/(1-t), and weights each pair by the
    standard-normal density of that x0. Exact limits at t=0 and t=1.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = float(t)
    # stratified draw: equal-count strata per class, resampled to class weights
    per = max(1, n_mc // dataset.n_classes)
    xs, ws = [], []
    for k in range(dataset.n_classes):
        pts = _sample_class(dataset, k, per, rng)
        xs.append(pts)
        ws.append(np.full(len(pts), _class_weight(dataset, k) / len(pts)))
    x1 = np.concatenate(xs, axis=0)
    base_w = np.concatenate(ws)
    if label is not None:
        keep = slice(label * per, (label + 1) * per)
        x1 = x1[keep]
        base_w = np.ones(len(x1)) / len(x1)
    if t == 1.0:
        return x.copy()
    if t == 0.0:
        mean_x1 = np.sum(base_w[:, None] * x1, axis=0) / base_w.sum()
        return mean_x1[None, :] - x
    out = np.empty_like(x)
    for i, xi in enumerate(x):
        x0 = (xi[None, :] - t * x1) / (1.0 - t)
        logw = np.log(base_w) - 0.5 * np.sum(x0 * x0, axis=1)
        logw -= logw.max()
        w = np.exp(logw)
        w /= w.sum()
        out[i] = np.sum(w[:, None] * (x1 - x0), axis=0)
    return out


def _sample_class(dataset, k: int, n: int, rng: np.random.Generator):
    # rejection-free per-class draws for each dataset family
    if isinstance(dataset, GaussianMixture):
        return dataset.means[k] + dataset.scales[k] * rng.standard_normal((n, dataset.dim))
    if isinstance(dataset, Checkerboard):
        size = 2.0 * dataset.extent / dataset.cells
        corner = -dataset.extent + dataset.dark[k] * size
        return corner + rng.random((n, 2)) * size
    # fall back to filtering iid draws
    pts, labels = dataset.sample(8 * n, rng)
    pts = pts[labels == k]
    while len(pts) < n:
        more, ml = dataset.sample(8 * n, rng)
        pts = np.concatenate([pts, more[ml == k]], axis=0)
    return pts[:n]


def _class_weight(dataset, k: int) -> float:
    if isinstance(dataset, GaussianMixture):
        return float(dataset.weights[k])
    return 1.0 / dataset.n_classes


def reference_flow(field, x: np.ndarray, t: float, s: float, steps: int = 1024):
    """High-accuracy transport of x from time t to time s along the PF-ODE.

    `field` is either a dataset (its oracle velocity is integrated) or a
    callable v(x, t). Integrates with fine fixed-step Euler at `steps` and
    `steps // 2` sub-steps; returns the Richardson-extrapolated endpoint and
    the halving error estimate (mean L2 gap between the two resolutions).
    """
    if s < t:
        raise ValueError("reference_flow requires s >= t")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if callable(field):
        vfn = field
    else:
        vfn = lambda xx, tt: oracle_velocity(field, xx, tt)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if s == t:
        return x.copy(), 0.0
    y_full = _euler(vfn, x, t, s, steps)
    y_half = _euler(vfn, x, t, s, max(1, steps // 2))
    endpoint = 2.0 * y_full - y_half
    err = float(np.mean(np.linalg.norm(y_full - y_half, axis=1)))
    return endpoint, err


def _euler(vfn, x: np.ndarray, t: float, s: float, steps: int) -> np.ndarray:
    y = x.copy()
    dt = (s - t) / steps
    for i in range(steps):
        ti = t + i * dt
        y = y + dt * vfn(y, ti)
    return y
