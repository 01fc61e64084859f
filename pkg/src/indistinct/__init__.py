"""Boundary-aware evaluation and mining of hard points in segmented point clouds."""

from .eigen import eigen_knn, eigen_tuple, eigen_tuples, local_covariance, local_covariances
from .errors import (
    ComputationError,
    ConfigurationError,
    IndistinctError,
    InputError,
    ParameterError,
    ParseError,
    SubsetTooSmallError,
    ValidationError,
)
from .geometry import (
    NeighborList,
    PointCloud,
    SampleIndex,
    SpatialIndex,
    build_spatial_index,
    fps,
    fps_hierarchy,
    knn,
    knn_bruteforce,
)
from .metric import (
    IpbmConfig,
    IpbmReport,
    SubsetScores,
    category_boundary_subset,
    colorize_areas,
    evaluate_ipbm,
    geometry_boundary_subset,
    misclassification_mask,
    neighborhood_error_fraction,
    partition,
)
from .mining import (
    MiningConfig,
    MiningResult,
    accumulate_ld,
    ld_feature,
    ld_geometry,
    ld_semantic,
    mine,
    select_indistinguishable,
)

__version__ = "0.1.0"
