"""Relation types from K-means clustering of relative part displacements."""
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateClusteringError
from .model import RelationModel, TypeAssignment


@dataclass(frozen=True)
class ClusterResult:
    centers: np.ndarray   # (T, 2)
    labels: np.ndarray    # (N,)
    inertia: float
    history: tuple = ()   # inertia after each Lloyd assignment


def _sq_dists(points, centers):
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def nearest_center(points, centers):
    """Index of the nearest center per point (smaller index on ties)."""
    return np.argmin(_sq_dists(np.asarray(points, dtype=np.float64),
                               np.asarray(centers, dtype=np.float64)), axis=1)


def _kmeanspp(points, k, rng):
    n = len(points)
    centers = np.empty((k, 2))
    centers[0] = points[rng.integers(n)]
    closest = _sq_dists(points, centers[:1])[:, 0]
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers[c] = points[idx]
        closest = np.minimum(closest, _sq_dists(points, centers[c:c + 1])[:, 0])
    return centers


def _lloyd(points, T, rng, max_iters, tol):
    centers = _kmeanspp(points, T, rng)
    history = []
    for _ in range(max_iters):
        d2 = _sq_dists(points, centers)
        labels = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(len(points)), labels].sum()))
        new = centers.copy()
        for c in range(T):
            members = labels == c
            if members.any():
                new[c] = points[members].mean(axis=0)
        for c in range(T):
            if not (labels == c).any():
                far = int(np.argmax(d2[np.arange(len(points)), labels]))
                new[c] = points[far]
                labels[far] = c
                d2 = _sq_dists(points, new)
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if shift < tol:
            break
    d2 = _sq_dists(points, centers)
    labels = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(len(points)), labels].sum())
    history.append(inertia)
    return ClusterResult(centers, labels, inertia, tuple(history))


def kmeans_2d(points, T, seed=0, max_iters=300, tol=1e-7, n_init=10):
    """Lloyd's algorithm with k-means++ seeding on 2D points.

    Runs ``n_init`` seeded restarts and keeps the lowest inertia (the first
    on ties).  Empty clusters are re-seeded at the point farthest from its
    assigned center.  Raises :class:`DegenerateClusteringError` when ``T``
    exceeds the number of distinct points.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(points) == 0:
        raise DegenerateClusteringError("no points to cluster")
    if T < 1:
        raise ValueError("T must be >= 1")
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    distinct = len(np.unique(points, axis=0))
    if T > distinct:
        raise DegenerateClusteringError(
            f"cannot form {T} clusters from {distinct} distinct points")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        res = _lloyd(points, T, rng, max_iters, tol)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


def displacements(poses, i, j):
    """``l_j - l_i`` for every pose."""
    return np.array([p.locations[j] - p.locations[i] for p in poses], dtype=np.float64)


def derive_types(poses, graph, T_config, seed=0, max_iters=300, n_init=10):
    """Cluster each directed edge's displacements independently.

    ``T_config`` is an int (same for all directed edges) or a dict keyed by
    directed edge.  Returns the relation model and one type assignment per pose.
    """
    offsets = {}
    labels = {}
    for n, (i, j) in enumerate(graph.directed_edges):
        t = T_config if isinstance(T_config, int) else T_config[(i, j)]
        d = displacements(poses, i, j)
        result = kmeans_2d(d, t, seed=seed + n, max_iters=max_iters, n_init=n_init)
        offsets[(i, j)] = result.centers
        labels[(i, j)] = nearest_center(d, result.centers)
    relations = RelationModel(offsets)
    assignments = [TypeAssignment({e: int(labels[e][n]) for e in graph.directed_edges})
                   for n in range(len(poses))]
    return relations, assignments


def assign_types(pose, graph, relations):
    """Nearest-center type of every directed edge for a single pose."""
    types = TypeAssignment()
    for i, j in graph.directed_edges:
        d = pose.locations[j] - pose.locations[i]
        types[(i, j)] = int(nearest_center(d[None], relations.mean_offsets[(i, j)])[0])
    return types
