"""Local-difference scoring and indistinguishable-point selection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._grid import row_distance_sums
from .errors import ConfigurationError, InputError, ParameterError
from .geometry import NeighborList, PointCloud, SpatialIndex, knn

PROB_ROW_TOL = 1e-5


@dataclass(frozen=True)
class MiningConfig:
    """Weights ``mu`` for (geometry, semantic, feature) differences, ratio ``tau``."""

    mu: tuple[float, float, float] = (0.0, 0.0, 1.0)
    tau: float = 4.0
    k: int = 16
    ld1_channels: str = "xyz"

    def __post_init__(self):
        mu = tuple(float(m) for m in self.mu)
        if len(mu) != 3 or any(not 0.0 <= m <= 1.0 for m in mu):
            raise ParameterError(f"mu must be three weights in [0, 1], got {self.mu}")
        object.__setattr__(self, "mu", mu)
        if not self.tau >= 1.0:
            raise ParameterError(f"tau must be >= 1, got {self.tau}")
        if self.k < 1:
            raise ParameterError(f"K must be >= 1, got {self.k}")
        if self.ld1_channels not in ("xyz", "xyzrgb"):
            raise ParameterError(f"ld1 channels must be xyz or xyzrgb, got {self.ld1_channels}")


@dataclass(frozen=True, eq=False)
class MiningResult:
    ld_raw: np.ndarray
    ld_accumulated: np.ndarray
    selected: np.ndarray


def neighbor_difference(values: np.ndarray, neighbors: NeighborList) -> np.ndarray:
    """Sum over each point's neighbours of the L2 distance between value rows."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != len(neighbors):
        raise InputError(f"{values.shape[0]} value rows for {len(neighbors)} neighbour rows")
    return row_distance_sums(values, np.arange(len(neighbors), dtype=np.int64),
                             np.ascontiguousarray(neighbors.indices))


def ld_geometry(cloud: PointCloud, neighbors: NeighborList, channels: str = "xyz") -> np.ndarray:
    if channels == "xyzrgb" and not cloud.has_colors:
        raise ConfigurationError("ld1 channels xyzrgb need a cloud with colors")
    return neighbor_difference(cloud.properties(channels), neighbors)


def ld_semantic(probs, neighbors: NeighborList) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise InputError("probabilities must be an N x C matrix")
    sums = probs.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > PROB_ROW_TOL)
    if bad.size:
        raise InputError(f"probability row {int(bad[0])} sums to {sums[bad[0]]:.6g}, not 1")
    return neighbor_difference(probs, neighbors)


def ld_feature(features, neighbors: NeighborList) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if not np.isfinite(features).all():
        raise InputError("features contain non-finite values")
    return neighbor_difference(features, neighbors)


def accumulate_ld(ld_raw, mu) -> np.ndarray:
    """Min-max normalise each column, then weight by ``mu`` and sum.

    A constant column carries no signal and contributes 0 everywhere.
    """
    ld = np.asarray(ld_raw, dtype=np.float64)
    if ld.ndim != 2 or ld.shape[1] != 3 or ld.shape[0] < 1:
        raise InputError(f"ld_raw must be N x 3 with N >= 1, got shape {ld.shape}")
    if not np.isfinite(ld).all():
        raise InputError("local differences contain non-finite values")
    lo = ld.min(axis=0)
    span = ld.max(axis=0) - lo
    out = np.zeros(ld.shape[0])
    for j in range(3):
        if mu[j] == 0.0 or span[j] == 0.0:
            continue
        out += mu[j] * ((ld[:, j] - lo[j]) / span[j])
    return out


def top_indices(scores: np.ndarray, m: int) -> np.ndarray:
    """Indices of the ``m`` largest scores, descending, ties by ascending index."""
    order = np.lexsort((np.arange(scores.size), -scores))
    return order[:m]


def select_indistinguishable(ld, tau: float) -> np.ndarray:
    if not tau >= 1.0:
        raise ParameterError(f"tau must be >= 1, got {tau}")
    ld = np.asarray(ld, dtype=np.float64)
    m = int(np.floor(ld.size / tau))
    return top_indices(ld, m)


def mine(cloud: PointCloud, config: MiningConfig = MiningConfig(), *,
         probs=None, features=None, neighbors: Optional[NeighborList] = None) -> MiningResult:
    """Score every point and pick the top ``floor(N / tau)``.

    A difference whose weight is zero may omit its input; its column is then 0.
    """
    n = len(cloud)
    if neighbors is None:
        k = min(config.k, n - 1)
        if k < 1:
            raise ConfigurationError("mining needs at least two points")
        neighbors = knn(SpatialIndex(cloud.positions), k, self_inclusive=False)
    mu = config.mu
    cols = []
    for j, (weight, data, fn) in enumerate((
        (mu[0], cloud, lambda c: ld_geometry(c, neighbors, config.ld1_channels)),
        (mu[1], probs, lambda p: ld_semantic(p, neighbors)),
        (mu[2], features, lambda f: ld_feature(f, neighbors)),
    )):
        if data is None:
            if weight > 0:
                name = ("geometry", "prediction probabilities", "features")[j]
                raise ConfigurationError(f"mu{j + 1} > 0 but no {name} were supplied")
            cols.append(np.zeros(n))
        else:
            cols.append(fn(data))
    ld_raw = np.column_stack(cols)
    acc = accumulate_ld(ld_raw, mu)
    return MiningResult(ld_raw, acc, select_indistinguishable(acc, config.tau))
