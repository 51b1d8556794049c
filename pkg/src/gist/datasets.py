"""Synthetic node-classification data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import Graph

__all__ = ["NodeTask", "community_task"]


@dataclass(frozen=True, eq=False)
class NodeTask:
    graph: Graph
    x: np.ndarray
    labels: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1


def community_task(
    n: int = 200,
    num_classes: int = 2,
    avg_degree_in: float = 8.0,
    avg_degree_out: float = 1.0,
    feature_dim: int = 8,
    signal: float = 0.5,
    train_frac: float = 0.3,
    seed: int = 0,
) -> NodeTask:
    """Stochastic block model with noisy class-mean features.

    Each node's features are its class centroid scaled by ``signal`` plus
    unit Gaussian noise, so features alone are weakly informative and the
    graph carries the rest of the label signal.
    """
    rng = np.random.default_rng(seed)
    labels = np.sort(np.arange(n) % num_classes)
    size = n / num_classes
    p_in = min(1.0, avg_degree_in / max(size - 1, 1))
    p_out = min(1.0, avg_degree_out / max(n - size, 1))
    same = labels[:, None] == labels[None, :]
    prob = np.where(same, p_in, p_out)
    upper = np.triu(rng.random((n, n)) < prob, k=1)
    edges = np.argwhere(upper)
    # chain each community so no node is isolated
    chains = [np.column_stack([m[:-1], m[1:]]) for m in (rng.permutation(np.flatnonzero(labels == c)) for c in range(num_classes))]
    g = Graph.from_edges(np.vstack([edges, *chains]), n)

    centroids = rng.standard_normal((num_classes, feature_dim))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    x = signal * centroids[labels] + rng.standard_normal((n, feature_dim))
    perm = rng.permutation(n)
    n_train = max(num_classes, int(round(train_frac * n)))
    return NodeTask(g, x, labels, np.sort(perm[:n_train]), np.sort(perm[n_train:]))
