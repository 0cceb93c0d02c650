"""Cluster re-weighting: one learnable weight per K-means cluster of the unlabeled set."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ClusterError(ValueError):
    pass


@dataclass(frozen=True)
class KMeansModel:
    centroids: np.ndarray
    iterations_run: int
    inertia: float

    @property
    def k(self) -> int:
        return len(self.centroids)


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centroids = [points[rng.integers(n)]]
    closest = ((points - centroids[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every point coincides with a chosen centroid; fall back to unused points
            idx = rng.integers(n)
        else:
            idx = int(rng.choice(n, p=closest / total))
        centroids.append(points[idx])
        closest = np.minimum(closest, ((points - points[idx]) ** 2).sum(axis=1))
    return np.array(centroids)


def assign(model: KMeansModel, points) -> np.ndarray:
    """Nearest centroid; ties go to the lowest cluster id (argmin's first hit)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[1] != model.centroids.shape[1]:
        raise ClusterError(f"points have dimension {points.shape[1]}, "
                           f"centroids {model.centroids.shape[1]}")
    return _sq_dists(points, model.centroids).argmin(axis=1)


def kmeans_fit(points, k: int, seed: int = 0, max_iters: int = 100) -> KMeansModel:
    """k-means++ seeding followed by Lloyd iterations to an assignment fixpoint."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k < 1 or n < k:
        raise ClusterError(f"need 1 <= K <= n, got K={k}, n={n}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(points, k, rng)
    labels = None
    it = 0
    for it in range(1, max_iters + 1):
        d = _sq_dists(points, centroids)
        new_labels = d.argmin(axis=1)
        counts = np.bincount(new_labels, minlength=k)
        # repair empty clusters by stealing the point farthest from its own centroid
        while (counts == 0).any():
            empty = int(np.flatnonzero(counts == 0)[0])
            own = d[np.arange(n), new_labels]
            own = np.where(counts[new_labels] > 1, own, -1.0)
            far = int(own.argmax())
            counts[new_labels[far]] -= 1
            new_labels[far] = empty
            counts[empty] = 1
            centroids[empty] = points[far]
            d[:, empty] = ((points - points[far]) ** 2).sum(axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        centroids = np.array([points[labels == j].mean(axis=0) for j in range(k)])
    final = _sq_dists(points, centroids)
    labels = final.argmin(axis=1)
    inertia = float(final[np.arange(n), labels].sum())
    return KMeansModel(centroids, it, inertia)


@dataclass
class WeightState:
    """Per-cluster weights plus the cluster id of every unlabeled example."""

    cluster_weights: np.ndarray
    assignment: np.ndarray
    w_max: float = 1.0

    @property
    def k(self) -> int:
        return len(self.cluster_weights)

    def per_example(self, indices=None) -> np.ndarray:
        idx = self.assignment if indices is None else self.assignment[np.asarray(indices)]
        return self.cluster_weights[idx]

    def copy(self) -> "WeightState":
        return WeightState(self.cluster_weights.copy(), self.assignment.copy(), self.w_max)


def init_weights(k: int, assignment=None, w_max: float = 1.0) -> WeightState:
    if k < 1:
        raise ClusterError("K must be at least 1")
    assignment = np.zeros(0, dtype=np.int64) if assignment is None else np.asarray(assignment)
    if assignment.size and (assignment.min() < 0 or assignment.max() >= k):
        raise ClusterError("assignment refers to a cluster outside [0, K)")
    return WeightState(np.ones(k), assignment.astype(np.int64), w_max)


def expand_weights(cluster_weights: Tensor, ws: WeightState, batch_indices) -> Tensor:
    """Per-example weights gathered from ``cluster_weights``, gradient-connected."""
    idx = np.asarray(batch_indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= len(ws.assignment)):
        raise ClusterError(f"unknown unlabeled index in batch (valid range 0..{len(ws.assignment) - 1})")
    return ad.take(cluster_weights, ws.assignment[idx])


def clip_weights(w: np.ndarray, w_max: float = 1.0) -> np.ndarray:
    return np.clip(w, 0.0, w_max)


def cluster_unlabeled(points, k: int, seed: int = 0,
                      embed: Callable[[np.ndarray], np.ndarray] | None = None,
                      max_iters: int = 100) -> tuple[KMeansModel, WeightState]:
    """Cluster the unlabeled set (optionally in an embedding space) and start at w = 1."""
    feats = np.asarray(points, dtype=np.float64) if embed is None else embed(points)
    km = kmeans_fit(feats, k, seed, max_iters)
    return km, init_weights(k, assign(km, feats))


def write_weights_csv(path, ws: WeightState, provenance=None) -> None:
    """One row per unlabeled example: index, cluster, weight, hidden provenance."""
    weights = ws.per_example()
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "cluster", "weight", "provenance"])
        for i, (c, w) in enumerate(zip(ws.assignment, weights)):
            prov = "na" if provenance is None else provenance[i]
            writer.writerow([i, int(c), repr(float(w)), prov])
