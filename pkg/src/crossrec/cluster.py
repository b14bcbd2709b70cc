from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Clustering:
    labels: np.ndarray      # (w,) cluster index per target
    centroids: np.ndarray   # (s, d) unit rows; zero rows for empty clusters
    sizes: np.ndarray       # (s,)

    @property
    def nonempty(self) -> np.ndarray:
        return np.flatnonzero(self.sizes > 0)


def _unit(x):
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(n, 1e-30)


def cluster_targets(targets: np.ndarray, s: int, rng, max_iter: int = 20) -> Clustering:
    """Spherical k-means on cosine similarity.

    Seeding is k-means++ with squared cosine distance.  Assignment ties go
    to the lowest cluster index, an emptied cluster stays empty, and with
    ``w <= s`` targets every target is its own cluster.
    """
    t = _unit(np.atleast_2d(np.asarray(targets, dtype=np.float64)))
    w, d = t.shape
    if w < 1 or s < 1:
        raise ValueError("need at least one target and one cluster")
    centroids = np.zeros((s, d))
    if w <= s:
        labels = np.arange(w)
        centroids[:w] = t
        sizes = np.zeros(s, dtype=np.int64)
        sizes[:w] = 1
        return Clustering(labels, centroids, sizes)

    seeds = [int(rng.integers(w))]
    dist = np.clip(1.0 - t @ t[seeds[0]], 0.0, None) ** 2
    for _ in range(1, s):
        total = dist.sum()
        if total > 0:
            nxt = int(rng.choice(w, p=dist / total))
        else:
            nxt = next(i for i in range(w) if i not in seeds) if len(seeds) < w else seeds[0]
        seeds.append(nxt)
        dist = np.minimum(dist, np.clip(1.0 - t @ t[nxt], 0.0, None) ** 2)
    centroids[:] = t[seeds]
    alive = np.ones(s, dtype=bool)
    labels = None
    for _ in range(max_iter):
        sim = t @ centroids.T
        sim[:, ~alive] = -np.inf
        new = np.argmax(sim, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(s):
            members = labels == c
            if members.any():
                centroids[c] = _unit(t[members].sum(axis=0))
            else:
                alive[c] = False
                centroids[c] = 0.0
    sizes = np.bincount(labels, minlength=s)
    centroids[sizes == 0] = 0.0
    return Clustering(labels, centroids, sizes)


def clustering_objective(targets: np.ndarray, labels: np.ndarray) -> float:
    """Sum over targets of cosine to their own cluster's normalised mean."""
    t = _unit(np.atleast_2d(targets))
    return float(sum(np.linalg.norm(t[labels == c].sum(axis=0)) for c in np.unique(labels)))
