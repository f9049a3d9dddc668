"""Hard clustering of motifs to shrink the loading matrix."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

from .core_types import MotifLoadings


class ClusteringError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClusterResult:
    loadings: MotifLoadings
    assignment: np.ndarray  # cluster index of every motif
    sizes: np.ndarray

    def indicator(self) -> np.ndarray:
        """``c x m`` hard-assignment matrix ``L``."""
        L = np.zeros((self.sizes.size, self.assignment.size))
        L[self.assignment, np.arange(self.assignment.size)] = 1.0
        return L


def reduce_loadings(loadings: MotifLoadings, assignment, scale_by_size: bool) -> ClusterResult:
    """Sum loading columns per cluster, optionally scaled by ``1/sqrt(size)``.

    Without scaling, activities of motifs in a cluster are modelled as one
    shared activity. The scaled version keeps the unit activity variance of the
    identity-covariance model: ``L L^T`` is diagonal with the cluster sizes.
    """
    assignment = np.asarray(assignment, dtype=int)
    c = int(assignment.max()) + 1
    sizes = np.bincount(assignment, minlength=c)
    if np.any(sizes == 0):
        raise ClusteringError("empty cluster")
    L = np.zeros((c, assignment.size))
    L[assignment, np.arange(assignment.size)] = 1.0
    Bc = loadings.values @ L.T
    if scale_by_size:
        Bc = Bc / np.sqrt(sizes)[None, :]
    ids = [f"cluster{j}" for j in range(c)]
    return ClusterResult(MotifLoadings(Bc, ids, loadings.promoter_ids), assignment, sizes)


def _relabel_first_appearance(labels: np.ndarray) -> np.ndarray:
    order = {}
    for lab in labels:
        order.setdefault(int(lab), len(order))
    return np.array([order[int(lab)] for lab in labels])


def hard_cluster(loadings: MotifLoadings, c: int, seed: int = 0,
                 scale_by_size: bool = False, restarts: int = 10) -> ClusterResult:
    """k-means on cosine-normalized loading columns.

    Motifs are points in promoter space. Clusters are numbered in order of
    their first motif. With ``c = m`` every motif is its own cluster and the
    loadings are returned unchanged.
    """
    B = loadings.values
    m = B.shape[1]
    if not 1 <= c <= m:
        raise ValueError(f"number of clusters must be in 1..{m}, got {c}")
    if c == m:
        return reduce_loadings(loadings, np.arange(m), scale_by_size)
    norms = np.linalg.norm(B, axis=0)
    X = (B / np.where(norms > 0, norms, 1.0)).T
    for attempt in range(restarts):
        km = KMeans(n_clusters=c, init="k-means++", n_init=restarts,
                    random_state=np.random.RandomState(seed + attempt))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            labels = km.fit_predict(X)
        if np.unique(labels).size == c:
            return reduce_loadings(loadings, _relabel_first_appearance(labels), scale_by_size)
    raise ClusteringError(f"k-means left empty clusters after {restarts} restarts; "
                          "try fewer clusters")
