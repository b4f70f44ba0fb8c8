"""Two-sample metrics for sample clouds plus gradient-norm diagnostics.

The Fréchet-Gaussian distance (Fréchet distance between Gaussians fitted to
each cloud) is the headline score; energy distance and sliced Wasserstein-2
corroborate it without the Gaussian assumption.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist

__all__ = [
    "MetricReport",
    "frechet_gaussian",
    "energy_distance",
    "sliced_w2",
    "evaluate_clouds",
    "grad_norm_series",
    "append_report",
]

_RIDGE = 1e-8


@dataclass
class MetricReport:
    frechet_gaussian: float
    energy_distance: float
    sliced_w2: float
    n_samples: int
    seed: int
    notes: dict = field(default_factory=dict)


def _check_cloud(a, name: str, min_rows: int = 1) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if len(a) < min_rows:
        raise ValueError(f"{name} needs at least {min_rows} samples, got {len(a)}")
    return a


def frechet_gaussian(a, b) -> float:
    """||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2) on fitted
    moments; singular covariances get a 1e-8 ridge."""
    val, _ = _frechet_flagged(a, b)
    return val


def _frechet_flagged(a, b):
    a = _check_cloud(a, "a", min_rows=2)
    b = _check_cloud(b, "b", min_rows=2)
    if a.shape[1] != b.shape[1]:
        raise ValueError("clouds have different dimensionality")
    d = a.shape[1]
    if len(a) < d + 1 or len(b) < d + 1:
        raise ValueError(f"need at least d+1={d + 1} samples per cloud")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    sa = np.cov(a, rowvar=False)
    sb = np.cov(b, rowvar=False)
    ridged = False
    if np.linalg.matrix_rank(sa, tol=1e-10) < d or np.linalg.matrix_rank(sb, tol=1e-10) < d:
        sa = sa + _RIDGE * np.eye(d)
        sb = sb + _RIDGE * np.eye(d)
        ridged = True
    root_a = _psd_sqrtm(sa)
    inner = _psd_sqrtm(root_a @ sb @ root_a)
    val = float(np.sum((mu_a - mu_b) ** 2) + np.trace(sa + sb - 2.0 * inner))
    return max(val, 0.0), ridged


def _psd_sqrtm(m: np.ndarray) -> np.ndarray:
    root = linalg.sqrtm(m)
    if np.iscomplexobj(root):
        root = root.real
    return np.asarray(root, dtype=np.float64)


def energy_distance(a, b, max_samples: int = 4096, seed: int = 0) -> float:
    """V-statistic energy distance; clouds above `max_samples` are
    subsampled with the given seed so the pairwise cost stays bounded."""
    a = _check_cloud(a, "a")
    b = _check_cloud(b, "b")
    rng = np.random.default_rng(seed)
    if len(a) > max_samples:
        a = a[rng.choice(len(a), max_samples, replace=False)]
    if len(b) > max_samples:
        b = b[rng.choice(len(b), max_samples, replace=False)]
    d_ab = cdist(a, b).mean()
    d_aa = cdist(a, a).mean()
    d_bb = cdist(b, b).mean()
    return float(max(2.0 * d_ab - d_aa - d_bb, 0.0))


def sliced_w2(a, b, n_projections: int = 256, rng: np.random.Generator | None = None) -> float:
    """sqrt of the mean, over random unit directions, of the 1-D quantile
    W2^2 between the projected clouds."""
    a = _check_cloud(a, "a")
    b = _check_cloud(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ValueError("clouds have different dimensionality")
    if rng is None:
        rng = np.random.default_rng(0)
    dirs = rng.standard_normal((a.shape[1], n_projections))
    dirs /= np.linalg.norm(dirs, axis=0, keepdims=True)
    pa = a @ dirs
    pb = b @ dirs
    m = min(len(a), len(b))
    qs = (np.arange(m) + 0.5) / m
    qa = np.quantile(pa, qs, axis=0)
    qb = np.quantile(pb, qs, axis=0)
    w2_sq = np.mean((qa - qb) ** 2, axis=0)
    return float(np.sqrt(np.mean(w2_sq)))


def evaluate_clouds(a, b, seed: int = 0, n_projections: int = 256) -> MetricReport:
    fg, ridged = _frechet_flagged(a, b)
    rng = np.random.default_rng(seed)
    report = MetricReport(
        frechet_gaussian=fg,
        energy_distance=energy_distance(a, b, seed=seed),
        sliced_w2=sliced_w2(a, b, n_projections=n_projections, rng=rng),
        n_samples=min(len(np.atleast_2d(a)), len(np.atleast_2d(b))),
        seed=seed,
    )
    if ridged:
        report.notes["covariance_ridge"] = _RIDGE
    return report


def grad_norm_series(values, window: int = 500, factor: float = 100.0) -> dict:
    """Summary of a gradient-norm trace: max, final, and a divergence flag
    set when any value exceeds `factor` times its trailing median."""
    values = np.asarray([v for v in values if np.isfinite(v)], dtype=np.float64)
    if len(values) == 0:
        raise ValueError("empty gradient-norm series")
    diverged = False
    for i in range(1, len(values)):
        med = float(np.median(values[max(0, i - window) : i]))
        if values[i] > factor * med:
            diverged = True
            break
    return {"max": float(values.max()), "final": float(values[-1]), "diverged": diverged}


def append_report(path: str, report: MetricReport, extra: dict | None = None) -> None:
    """Append one metric row to the experiment-ledger CSV."""
    row = {
        "frechet_gaussian": report.frechet_gaussian,
        "energy_distance": report.energy_distance,
        "sliced_w2": report.sliced_w2,
        "n_samples": report.n_samples,
        "seed": report.seed,
    }
    for key, val in (extra or {}).items():
        row[key] = val
    exists = os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(row))
        if not exists:
            writer.writeheader()
        writer.writerow(row)
