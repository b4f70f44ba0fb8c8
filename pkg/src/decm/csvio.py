"""CSV sample-cloud format and sidecar run metadata.

Clouds are written with header ``dim0,dim1,...,class``; the class column
holds -1 for unlabelled points. Sidecars are flat ``key = value`` text.
"""

from __future__ import annotations

import numpy as np

__all__ = ["save_cloud_csv", "load_cloud_csv", "save_sidecar", "load_sidecar"]


def save_cloud_csv(path, points: np.ndarray, labels=None) -> None:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    d = points.shape[1]
    if labels is None:
        labels = np.full(len(points), -1, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(labels) != len(points):
        raise ValueError("labels and points disagree on length")
    header = ",".join([f"dim{i}" for i in range(d)] + ["class"])
    body = np.concatenate([points, labels[:, None].astype(np.float64)], axis=1)
    np.savetxt(path, body, delimiter=",", header=header, comments="", fmt="%.17g")


def load_cloud_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if not header or header[-1] != "class" or not header[0].startswith("dim"):
        raise ValueError(f"{path}: not a sample-cloud CSV (header {header!r})")
    body = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    points = body[:, :-1]
    labels = body[:, -1].astype(np.int64)
    return points, labels


def save_sidecar(path, mapping: dict) -> None:
    with open(path, "w") as fh:
        for key in mapping:
            fh.write(f"{key} = {mapping[key]}\n")


def load_sidecar(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            out[key.strip()] = val.strip()
    return out
