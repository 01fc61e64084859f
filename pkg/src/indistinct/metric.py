"""Indistinguishable-points based metric (IPBM).

For every misclassified point the fraction of misclassified points among its
K nearest neighbours decides which kind of error area it belongs to:

* ``[0, zeta1)``  isolated small areas (ISA)
* ``[zeta1, zeta2)`` complex boundary areas (CBA)
* ``[zeta2, 1]``  confusing interior areas (CIA)

The three counts divided by the number of evaluated points are the scores;
lower is better.  Besides the whole cloud, two harder subsets can be
evaluated: points near a ground-truth category boundary and points with the
largest low-level local difference (geometry boundary).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from ._grid import row_distance_sums
from .errors import ConfigurationError, InputError, ParameterError, SubsetTooSmallError
from .geometry import NeighborList, PointCloud, SpatialIndex
from .mining import top_indices

ORIGINAL = "original"
CATEGORY_BOUNDARY = "category-boundary"
GEOMETRY_BOUNDARY = "geometry-boundary"
SUBSETS = (ORIGINAL, CATEGORY_BOUNDARY, GEOMETRY_BOUNDARY)
_ALIASES = {"category": CATEGORY_BOUNDARY, "geometry": GEOMETRY_BOUNDARY}

CORRECT, ISOLATE_SMALL, COMPLEX_BOUNDARY, CONFUSING_INTERIOR = 0, 1, 2, 3
AREA_NAMES = ("correct", "isolate-small", "complex-boundary", "confusing-interior")
AREA_COLORS = np.array(
    [
        [255, 255, 255],  # correct: white
        [255, 255, 0],    # isolate small: yellow
        [255, 165, 0],    # complex boundary: orange
        [0, 255, 255],    # confusing interior: cyan
    ],
    dtype=np.uint8,
)


@dataclass(frozen=True)
class IpbmConfig:
    k: int = 500
    zeta1: float = 0.33
    zeta2: float = 0.66
    rho: float = 0.002
    epsilon: float = 0.25
    ld1_channels: str = "auto"

    def __post_init__(self):
        if not isinstance(self.k, (int, np.integer)) or self.k < 1:
            raise ParameterError(f"K must be a positive integer, got {self.k!r}")
        if not 0.0 < self.zeta1 < self.zeta2 < 1.0:
            raise ParameterError(f"need 0 < zeta1 < zeta2 < 1, got {self.zeta1}, {self.zeta2}")
        if not 0.0 < self.rho <= 1.0:
            raise ParameterError(f"rho must lie in (0, 1], got {self.rho}")
        if not 0.0 < self.epsilon <= 1.0:
            raise ParameterError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if self.ld1_channels not in ("auto", "xyz", "xyzrgb"):
            raise ParameterError(f"ld1 channels must be auto, xyz or xyzrgb, got {self.ld1_channels}")

    @property
    def category_threshold(self) -> float:
        return self.rho * self.k

    def channels_for(self, cloud: PointCloud) -> str:
        if self.ld1_channels == "auto":
            return "xyzrgb" if cloud.has_colors else "xyz"
        return self.ld1_channels


@dataclass(frozen=True, eq=False)
class SubsetScores:
    """Scores of one evaluated point set.

    ``indices`` maps subset points into the cloud; ``tags`` holds one area code
    per subset point (see ``AREA_NAMES``).
    """

    name: str
    indices: np.ndarray
    s1: int
    s2: int
    s3: int
    tags: np.ndarray

    @property
    def n(self) -> int:
        return int(self.indices.size)

    @property
    def misclassified(self) -> int:
        return self.s1 + self.s2 + self.s3

    @property
    def isa(self) -> float:
        return self.s1 / self.n

    @property
    def cba(self) -> float:
        return self.s2 / self.n

    @property
    def cia(self) -> float:
        return self.s3 / self.n

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n": self.n,
            "s1": self.s1,
            "s2": self.s2,
            "s3": self.s3,
            "isa": self.isa,
            "cba": self.cba,
            "cia": self.cia,
        }


@dataclass(frozen=True, eq=False)
class IpbmReport:
    config: IpbmConfig
    subsets: list

    def __getitem__(self, name: str) -> SubsetScores:
        name = _ALIASES.get(name, name)
        for s in self.subsets:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"config": asdict(self.config), "subsets": [s.to_dict() for s in self.subsets]}


def misclassification_mask(pred_labels, gt_labels, num_classes: Optional[int] = None) -> np.ndarray:
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise InputError(f"prediction length {pred.size} does not match ground truth length {gt.size}")
    for name, lab in (("prediction", pred), ("ground truth", gt)):
        if lab.size and lab.min() < 0:
            raise InputError(f"{name} labels must be non-negative")
        if num_classes is not None and lab.size and lab.max() >= num_classes:
            raise InputError(f"{name} labels must lie in [0, {num_classes})")
    return pred != gt


def neighborhood_error_fraction(mask, neighbors: NeighborList) -> np.ndarray:
    """``m_i / K`` for each misclassified point, in ascending point order."""
    mask = np.asarray(mask, dtype=bool)
    if neighbors.self_inclusive:
        raise ConfigurationError("error fractions need self-excluded neighbourhoods")
    if len(neighbors) != mask.size:
        raise InputError(f"mask has {mask.size} entries for {len(neighbors)} neighbour rows")
    wrong = np.flatnonzero(mask)
    m = mask[neighbors.indices[wrong]].sum(axis=1)
    return m / neighbors.k


def area_tags(fractions, zeta1: float, zeta2: float) -> np.ndarray:
    f = np.asarray(fractions, dtype=np.float64)
    tags = np.full(f.shape, CONFUSING_INTERIOR, dtype=np.int8)
    tags[f < zeta2] = COMPLEX_BOUNDARY
    tags[f < zeta1] = ISOLATE_SMALL
    return tags


def partition(fractions, zeta1: float = 0.33, zeta2: float = 0.66) -> tuple[int, int, int]:
    """Counts in ``[0, zeta1)``, ``[zeta1, zeta2)`` and ``[zeta2, 1]``."""
    tags = area_tags(fractions, zeta1, zeta2)
    counts = np.bincount(tags, minlength=4)
    return int(counts[1]), int(counts[2]), int(counts[3])


def _require_k(n: int, k: int, subset: str) -> None:
    if n < k + 1:
        raise SubsetTooSmallError(subset, n, k)


def _cloud_statistics(cloud: PointCloud, config: IpbmConfig, *, wrong=None,
                      need_r: bool = False, need_ld: bool = False, chunk: int = 1 << 14):
    """One streamed KNN pass over the whole cloud.

    Returns ``(m, r, ld1)``: wrong-neighbour counts for the points flagged in
    ``wrong``, gt-disagreement counts and LD1 for every point (``None`` when
    not requested).
    """
    n = len(cloud)
    k = config.k
    _require_k(n, k, ORIGINAL)
    index = SpatialIndex(cloud.positions)
    m = np.zeros(n, np.int64) if wrong is not None else None
    r = np.zeros(n, np.int64) if need_r else None
    ld = np.zeros(n, np.float64) if need_ld else None
    props = np.ascontiguousarray(cloud.properties(config.channels_for(cloud))) if need_ld else None
    gt = cloud.gt_labels
    ids = np.arange(n) if (need_r or need_ld) else np.flatnonzero(wrong)
    for part, rows, _ in index.iter_query(ids, k, chunk=chunk, sort=False):
        if wrong is not None:
            m[part] = wrong[rows].sum(axis=1)
        if need_r:
            r[part] = (gt[rows] != gt[part][:, None]).sum(axis=1)
        if need_ld:
            ld[part] = row_distance_sums(props, part, rows)
    return m, r, ld


def _ensure_labels(cloud: PointCloud) -> None:
    if not cloud.has_labels:
        raise ConfigurationError("ground-truth labels required")


def category_boundary_subset(cloud: PointCloud, config: IpbmConfig = IpbmConfig()) -> np.ndarray:
    """Points whose label differs from at least ``rho * K`` of their K neighbours."""
    _ensure_labels(cloud)
    _, r, _ = _cloud_statistics(cloud, config, need_r=True)
    return np.flatnonzero(r >= config.category_threshold)


def geometry_boundary_subset(cloud: PointCloud, config: IpbmConfig = IpbmConfig()) -> np.ndarray:
    """The ``floor(epsilon * N)`` points with the largest LD1, as sorted indices."""
    _, _, ld = _cloud_statistics(cloud, config, need_ld=True)
    return np.sort(top_indices(ld, int(math.floor(config.epsilon * len(cloud)))))


def _score_subset(name, indices, wrong_sub, m_sub, config) -> SubsetScores:
    fractions = m_sub / config.k
    tags = np.zeros(indices.size, np.int8)
    tags[wrong_sub] = area_tags(fractions, config.zeta1, config.zeta2)
    s1, s2, s3 = partition(fractions, config.zeta1, config.zeta2)
    return SubsetScores(name, indices, s1, s2, s3, tags)


def _evaluate_within(name, cloud, indices, wrong, config) -> SubsetScores:
    _require_k(indices.size, config.k, name)
    index = SpatialIndex(cloud.positions[indices])
    wrong_sub = wrong[indices]
    ids = np.flatnonzero(wrong_sub)
    m = np.zeros(ids.size, np.int64)
    for part, rows, _ in index.iter_query(ids, config.k, sort=False):
        # iter_query reorders queries; map back by position in ``ids``
        m[np.searchsorted(ids, part)] = wrong_sub[rows].sum(axis=1)
    return _score_subset(name, indices, wrong_sub, m, config)


def normalize_subsets(subsets: Iterable[str]) -> list[str]:
    out = []
    for s in subsets:
        if s == "all":
            names = list(SUBSETS)
        else:
            name = _ALIASES.get(s, s)
            if name not in SUBSETS:
                raise ParameterError(f"unknown subset '{s}' (choose from {', '.join(SUBSETS)}, all)")
            names = [name]
        out.extend(n for n in names if n not in out)
    return out


def evaluate_ipbm(cloud: PointCloud, pred_labels, config: IpbmConfig = IpbmConfig(),
                  subsets: Sequence[str] = SUBSETS) -> IpbmReport:
    """Score predictions on each requested subset.

    Neighbourhoods are recomputed inside each subset, and ``N`` in the scores is
    the subset size.
    """
    _ensure_labels(cloud)
    names = normalize_subsets(subsets)
    wrong = misclassification_mask(pred_labels, cloud.gt_labels)
    need_r = CATEGORY_BOUNDARY in names
    need_ld = GEOMETRY_BOUNDARY in names
    n = len(cloud)
    m, r, ld = _cloud_statistics(cloud, config, wrong=wrong, need_r=need_r, need_ld=need_ld)

    results = []
    for name in names:
        if name == ORIGINAL:
            idx = np.arange(n, dtype=np.int64)
            results.append(_score_subset(name, idx, wrong, m[wrong], config))
        elif name == CATEGORY_BOUNDARY:
            idx = np.flatnonzero(r >= config.category_threshold)
            results.append(_evaluate_within(name, cloud, idx, wrong, config))
        else:
            idx = np.sort(top_indices(ld, int(math.floor(config.epsilon * n))))
            results.append(_evaluate_within(name, cloud, idx, wrong, config))
    return IpbmReport(config, results)


def colorize_areas(report: IpbmReport, cloud: Optional[PointCloud] = None,
                   subset: str = ORIGINAL) -> np.ndarray:
    """RGB per point of ``subset``: white correct, yellow ISA, orange CBA, cyan CIA."""
    scores = report[subset]
    if cloud is not None and scores.indices.size and scores.indices.max() >= len(cloud):
        raise InputError("report does not belong to this cloud")
    return AREA_COLORS[scores.tags]


def overall_scores(pred_labels, gt_labels, num_classes: int) -> tuple[float, float]:
    """Mean IoU over classes present in prediction or ground truth, and overall accuracy."""
    pred = np.asarray(pred_labels, dtype=np.int64)
    gt = np.asarray(gt_labels, dtype=np.int64)
    conf = np.bincount(gt * num_classes + pred, minlength=num_classes * num_classes)
    conf = conf.reshape(num_classes, num_classes)
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    present = union > 0
    miou = float((tp[present] / union[present]).mean()) if present.any() else 0.0
    return miou, float(tp.sum() / max(gt.size, 1))
