"""Local covariance eigenvalue tuples and KNN in eigenvalue space."""

from __future__ import annotations

import numpy as np

from .errors import ParameterError
from .geometry import EIGENVALUE, EUCLIDEAN, NeighborList, PointCloud, SpatialIndex, knn

DEFAULT_K = 16
SYMMETRY_TOL = 1e-12
CLAMP_TOL = 1e-12


def _check_neighbors(neighbors: NeighborList) -> None:
    if neighbors.space != EUCLIDEAN or not neighbors.self_inclusive:
        raise ParameterError("covariances need self-inclusive Euclidean neighbours")
    if neighbors.k < 3:
        raise ParameterError(f"covariance needs K >= 3, got {neighbors.k}")


def local_covariance(cloud: PointCloud, neighbors: NeighborList, i: int) -> np.ndarray:
    """Population covariance (divided by K) of point ``i``'s neighbour coordinates."""
    _check_neighbors(neighbors)
    x = cloud.positions[neighbors.indices[i]]
    centered = x - x.mean(axis=0)
    return centered.T @ centered / x.shape[0]


def local_covariances(cloud: PointCloud, neighbors: NeighborList) -> np.ndarray:
    """Vectorised :func:`local_covariance` for every point, shape ``(N, 3, 3)``."""
    _check_neighbors(neighbors)
    x = cloud.positions[neighbors.indices]
    centered = x - x.mean(axis=1, keepdims=True)
    return np.einsum("nki,nkj->nij", centered, centered) / neighbors.k


def _eigvals_desc(cov: np.ndarray) -> np.ndarray:
    vals = np.linalg.eigvalsh(cov)[..., ::-1]
    tiny = (vals < 0) & (vals > -CLAMP_TOL)
    return np.where(tiny, 0.0, vals)


def eigen_tuple(cov) -> np.ndarray:
    """Eigenvalues of a symmetric 3x3 matrix, descending, as ``(l1, l2, l3)``."""
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape != (3, 3):
        raise ParameterError(f"expected a 3x3 matrix, got shape {cov.shape}")
    if np.abs(cov - cov.T).max() > SYMMETRY_TOL * max(1.0, float(np.abs(cov).max())):
        raise ParameterError("matrix is not symmetric")
    return _eigvals_desc(cov)


def eigen_tuples(cloud: PointCloud, k: int = DEFAULT_K, *, neighbors: NeighborList | None = None) -> np.ndarray:
    """Per-point ``(N, 3)`` eigenvalue tuples from the K-point neighbourhoods."""
    if neighbors is None:
        k = min(k, len(cloud))
        neighbors = knn(SpatialIndex(cloud.positions), k, self_inclusive=True)
    return _eigvals_desc(local_covariances(cloud, neighbors))


def eigen_knn(tuples, k: int) -> NeighborList:
    """Self-inclusive exact KNN in (l1, l2, l3) space."""
    tuples = np.asarray(tuples, dtype=np.float64)
    return knn(SpatialIndex(tuples), k, self_inclusive=True, space=EIGENVALUE)
