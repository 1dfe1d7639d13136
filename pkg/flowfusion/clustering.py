"""Geometric-photometric over-segmentation of a frame and its adjacency graph.

Clusters come from a deterministic k-means over ``(x, y, z, intensity)``
seeded on a regular 3D grid of pitch ``seed_resolution`` laid over the
back-projected point cloud. Each cluster is later treated as one rigid body.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

from .config import ClusteringConfig
from .errors import EmptyCloudError, ParameterError
from .frames import RgbdFrame
from .geometry import PinholeIntrinsics, backproject_depth

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ClusterSet:
    """Per-pixel labels (-1 = no valid depth) plus per-cluster statistics."""

    labels: np.ndarray
    sizes: np.ndarray
    centroids: np.ndarray
    mean_depths: np.ndarray
    mean_intensities: np.ndarray
    seed_resolution: float
    costs: Tuple[float, ...] = ()

    def __post_init__(self) -> None:
        for name in ("labels", "sizes", "centroids", "mean_depths", "mean_intensities"):
            getattr(self, name).setflags(write=False)

    @classmethod
    def from_labels(
        cls,
        labels: np.ndarray,
        frame: RgbdFrame,
        seed_resolution: float,
        K: Optional[PinholeIntrinsics] = None,
        costs: Tuple[float, ...] = (),
    ) -> "ClusterSet":
        """Compute statistics for an existing label image.

        Labels must be ``0..N-1`` on valid-depth pixels and ``-1`` elsewhere.
        """
        labels = np.array(labels, dtype=np.int64)
        points, valid = backproject_depth(frame.depth, K or frame.intrinsics)
        if not np.array_equal(labels >= 0, valid):
            raise ParameterError("labels must cover exactly the valid-depth pixels")
        flat = labels[valid]
        count = int(flat.max()) + 1 if flat.size else 0
        sizes = np.bincount(flat, minlength=count)
        if np.any(sizes == 0):
            raise ParameterError("cluster ids must be contiguous with no empty cluster")
        safe = np.maximum(sizes, 1).astype(float)
        pts = points[valid]
        centroids = np.stack(
            [np.bincount(flat, weights=pts[:, k], minlength=count) / safe for k in range(3)], axis=-1
        ) if count else np.zeros((0, 3))
        intensities = np.bincount(flat, weights=frame.intensity[valid], minlength=count) / safe
        return cls(
            labels=labels,
            sizes=sizes,
            centroids=centroids,
            mean_depths=centroids[:, 2].copy(),
            mean_intensities=intensities,
            seed_resolution=float(seed_resolution),
            costs=tuple(costs),
        )

    @property
    def count(self) -> int:
        return int(self.sizes.size)

    def __len__(self) -> int:
        return self.count


@dataclass(frozen=True, eq=False)
class AdjacencyGraph:
    """Symmetric, irreflexive binary adjacency over cluster ids.

    Stored as the sorted list of undirected edges ``(i, j)`` with ``i < j``.
    """

    node_count: int
    edges: np.ndarray

    def __post_init__(self) -> None:
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size:
            if np.any(edges[:, 0] == edges[:, 1]):
                raise ParameterError("adjacency graph cannot contain self-edges")
            edges = np.unique(np.sort(edges, axis=1), axis=0)
            if edges.min() < 0 or edges.max() >= self.node_count:
                raise ParameterError("edge endpoint outside the cluster range")
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)

    @classmethod
    def empty(cls, node_count: int) -> "AdjacencyGraph":
        return cls(node_count, np.zeros((0, 2), dtype=np.int64))

    def matrix(self) -> sparse.csr_matrix:
        n = self.node_count
        if not len(self.edges):
            return sparse.csr_matrix((n, n))
        i, j = self.edges[:, 0], self.edges[:, 1]
        data = np.ones(2 * len(i))
        return sparse.csr_matrix((data, (np.concatenate([i, j]), np.concatenate([j, i]))), shape=(n, n))

    def laplacian(self) -> sparse.csr_matrix:
        return sparse.csr_matrix(csgraph.laplacian(self.matrix()))

    def has_edge(self, i: int, j: int) -> bool:
        a, b = min(i, j), max(i, j)
        return bool(np.any((self.edges[:, 0] == a) & (self.edges[:, 1] == b)))

    def __len__(self) -> int:
        return len(self.edges)


# ---------------------------------------------------------------------------
# Clustering
# ---------------------------------------------------------------------------

def cluster_frame(
    frame: RgbdFrame,
    K: Optional[PinholeIntrinsics] = None,
    params: Optional[ClusteringConfig] = None,
) -> ClusterSet:
    params = params or ClusteringConfig()
    params.validate()
    K = K or frame.intrinsics
    points, valid = backproject_depth(frame.depth, K)
    if not np.any(valid):
        raise EmptyCloudError("frame has no valid depth pixel")

    xyz = points[valid]
    intensity = np.asarray(frame.intensity)[valid]
    scale = np.array([np.sqrt(params.spatial_weight)] * 3 + [np.sqrt(params.intensity_weight)])
    features = np.column_stack([xyz, intensity]) * scale

    centers = _grid_seeds(xyz, features, params.seed_resolution)
    assignment, costs = _kmeans(features, centers, params.max_kmeans_iters)

    # drop empty clusters, keeping seed order
    used = np.unique(assignment)
    remap = np.full(len(centers), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    labels = np.full(frame.shape, -1, dtype=np.int64)
    labels[valid] = remap[assignment]

    clusters = ClusterSet.from_labels(labels, frame, params.seed_resolution, K, tuple(costs))
    logger.debug("Clustered %d point(s) into %d cluster(s)", len(xyz), clusters.count)
    return clusters


def _grid_seeds(xyz: np.ndarray, features: np.ndarray, resolution: float) -> np.ndarray:
    """One seed per occupied grid cell: the mean feature of the cell's points.

    Cells are visited in lexicographic key order, which fixes the cluster ids.
    """
    keys = np.floor((xyz - xyz.min(axis=0)) / resolution).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.stack(
        [np.bincount(inverse, weights=features[:, k], minlength=len(counts)) for k in range(features.shape[1])],
        axis=-1,
    )
    return sums / counts[:, None]


def _kmeans(features: np.ndarray, centers: np.ndarray, max_iters: int) -> Tuple[np.ndarray, List[float]]:
    """Lloyd iterations; returns the final assignment and the cost after each assignment."""
    assignment = _assign(features, centers)
    costs = [_cost(features, centers, assignment)]
    for _ in range(max_iters):
        counts = np.bincount(assignment, minlength=len(centers))
        occupied = counts > 0
        sums = np.stack(
            [np.bincount(assignment, weights=features[:, k], minlength=len(centers)) for k in range(features.shape[1])],
            axis=-1,
        )
        centers = np.where(occupied[:, None], sums / np.maximum(counts, 1)[:, None], centers)
        # an emptied centre must not capture points again
        candidates = np.flatnonzero(occupied)
        updated = candidates[_assign(features, centers[candidates])]
        costs.append(_cost(features, centers, updated))
        if np.array_equal(updated, assignment):
            break
        assignment = updated
    return assignment, costs


def _assign(features: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Nearest centre per point; exact distance ties go to the lowest id."""
    if len(centers) == 1:
        return np.zeros(len(features), dtype=np.int64)
    tree = cKDTree(centers)
    dist, idx = tree.query(features, k=2)
    tie = dist[:, 0] == dist[:, 1]
    best = np.where(tie, np.minimum(idx[:, 0], idx[:, 1]), idx[:, 0])
    return best.astype(np.int64)


def _cost(features: np.ndarray, centers: np.ndarray, assignment: np.ndarray) -> float:
    diff = features - centers[assignment]
    return float(np.einsum("ij,ij->", diff, diff))


# ---------------------------------------------------------------------------
# Adjacency
# ---------------------------------------------------------------------------

def build_adjacency(clusters: ClusterSet) -> AdjacencyGraph:
    """Connect clusters sharing a 4-neighbour pixel border whose centroids
    lie within ``2 * seed_resolution`` of each other.
    """
    labels = clusters.labels
    pairs = []
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        touching = (a >= 0) & (b >= 0) & (a != b)
        if np.any(touching):
            pairs.append(np.column_stack([a[touching], b[touching]]))
    if not pairs:
        return AdjacencyGraph.empty(clusters.count)
    edges = np.unique(np.sort(np.concatenate(pairs), axis=1), axis=0)
    gap = np.linalg.norm(clusters.centroids[edges[:, 0]] - clusters.centroids[edges[:, 1]], axis=1)
    edges = edges[gap <= 2.0 * clusters.seed_resolution]
    return AdjacencyGraph(clusters.count, edges)
