"""Seeded forward-pass reference kernels for the segmentation network.

Nothing here trains.  Every kernel is a pure numpy function of its inputs
and a :class:`WeightBundle`, so architecture invariants (shapes, softmax
normalisation, convexity of attentive pooling, determinism) can be checked
on random weights.  Features are float32; geometry stays float64.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .eigen import eigen_tuples
from .errors import ConfigurationError, InputError, ParameterError
from .geometry import PointCloud, SpatialIndex, fps, knn
from .mining import MiningConfig, accumulate_ld, ld_feature, ld_geometry, ld_semantic, select_indistinguishable

DEFAULT_WIDTHS = (64, 128, 256, 512, 1024)
HEAD_WIDTHS = (64, 32)
LEAKY_SLOPE = 0.01
PROB_CLAMP = 1e-12
SUBSAMPLE_RATIO = 4
MODES = ("attention", "literal")


@dataclass(frozen=True)
class LayerSpec:
    level: int
    n_points: int
    width: int
    decoder_width: int
    k1: int
    k2: int


def layer_specs(n: int, levels: int = 5, widths: Sequence[int] = DEFAULT_WIDTHS,
                decoder_widths: Optional[Sequence[int]] = None, k1: int = 16, k2: int = 32,
                ratio: int = SUBSAMPLE_RATIO) -> list[LayerSpec]:
    """Per-level point counts ``N, N/r, N/r^2, ...`` (floored) and widths."""
    if levels < 1 or levels > len(widths):
        raise ParameterError(f"levels must lie in [1, {len(widths)}], got {levels}")
    if k1 < 1 or k2 < 1:
        raise ParameterError("K1 and K2 must be positive")
    decoder_widths = widths if decoder_widths is None else decoder_widths
    specs = []
    count = n
    for level in range(1, levels + 1):
        if count < 1:
            raise ConfigurationError(f"level {level} is empty after subsampling {n} points")
        specs.append(LayerSpec(level, count, int(widths[level - 1]),
                               int(decoder_widths[level - 1]), k1, k2))
        count //= ratio
    return specs


def leaky_relu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, x * np.float32(LEAKY_SLOPE))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _affine(x, layer):
    w, b = layer
    return x @ w + b


class WeightBundle:
    """Named ``(W, b)`` pairs drawn from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``.

    Each layer gets its own PCG64 stream keyed by ``(seed, crc32(name))`` so
    adding or reordering layers never changes the others.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.layers: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def add(self, name: str, fan_in: int, fan_out: int) -> None:
        rng = np.random.Generator(np.random.PCG64([self.seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())]))
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)
        b = rng.uniform(-bound, bound, size=fan_out).astype(np.float32)
        self.layers[name] = (w, b)

    def __getitem__(self, name: str):
        return self.layers[name]

    def __contains__(self, name: str) -> bool:
        return name in self.layers

    @classmethod
    def for_network(cls, specs: Sequence[LayerSpec], point_dims: int, num_classes: int,
                    seed: int, mode: str = "attention", in_features: int = 3) -> "WeightBundle":
        if mode not in MODES:
            raise ParameterError(f"unknown nonlocal mode '{mode}'")
        bundle = cls(seed)
        prev = in_features
        for s in specs:
            agg_in = 2 * point_dims + 2 * prev
            for branch in ("k1", "k2"):
                bundle.add(f"enc{s.level}.{branch}.agg1", agg_in, s.width)
                bundle.add(f"enc{s.level}.{branch}.agg2", s.width, s.width)
                bundle.add(f"enc{s.level}.{branch}.score", s.width, s.width)
            prev = s.width
        for s in specs:
            bundle.add(f"dec{s.level}.head", s.decoder_width, num_classes)
        top = specs[-1]
        if top.decoder_width != top.width:
            raise ConfigurationError("the deepest decoder width must equal its encoder width")
        for coarse, fine in zip(specs[:0:-1], specs[-2::-1]):
            lv = fine.level
            inner = max(1, fine.decoder_width // 2)
            bundle.add(f"dec{lv}.fp", coarse.decoder_width + fine.width, fine.decoder_width)
            bundle.add(f"dec{lv}.focal", fine.decoder_width + num_classes, fine.width)
            bundle.add(f"dec{lv}.g3", fine.width, inner)
            bundle.add(f"dec{lv}.g4", fine.decoder_width, inner)
            g5_in = fine.width if mode == "attention" else fine.decoder_width
            bundle.add(f"dec{lv}.g5.{mode}", g5_in, inner)
            bundle.add(f"dec{lv}.g2", inner, fine.decoder_width)
        widths = (specs[0].decoder_width, *HEAD_WIDTHS, num_classes)
        for i in range(len(widths) - 1):
            bundle.add(f"head.fc{i + 1}", widths[i], widths[i + 1])
        return bundle


# -- encoder ---------------------------------------------------------------

def gbaa_aggregate(points, feats, euclid_nbrs, eigen_nbrs, agg1, agg2) -> np.ndarray:
    """Per-point ``(K, D_l)`` local features from both neighbourhoods.

    Each neighbour contributes ``(p_k - p_i) | p_i | x_k | x~_k`` which goes
    through two shared affine + leaky-ReLU stages.
    """
    if not (euclid_nbrs.self_inclusive and eigen_nbrs.self_inclusive):
        raise ConfigurationError("aggregation needs self-inclusive neighbourhoods")
    if euclid_nbrs.indices.shape != eigen_nbrs.indices.shape:
        raise ConfigurationError("Euclidean and eigenvalue neighbourhoods must share N and K")
    points = np.asarray(points, dtype=np.float32)
    feats = np.asarray(feats, dtype=np.float32)
    if points.shape[0] != feats.shape[0] or points.shape[0] != len(euclid_nbrs):
        raise ConfigurationError("points, features and neighbourhoods disagree on N")
    ei = euclid_nbrs.indices
    neigh = points[ei]
    centre = np.broadcast_to(points[:, None, :], neigh.shape)
    x = np.concatenate([neigh - centre, centre, feats[ei], feats[eigen_nbrs.indices]], axis=-1)
    if x.shape[-1] != agg1[0].shape[0]:
        raise ConfigurationError(f"aggregation input width {x.shape[-1]} != weight fan-in {agg1[0].shape[0]}")
    return leaky_relu(_affine(leaky_relu(_affine(x, agg1)), agg2))


def attention_scores(local: np.ndarray, score) -> np.ndarray:
    """Per-channel weights over the K axis (softmax), same shape as ``local``."""
    return softmax(_affine(local, score), axis=-2)


def attentive_pool(local: np.ndarray, score) -> np.ndarray:
    """Weighted sum over K with per-channel softmax weights.

    Accumulates in float64 and rounds back to the input dtype, so the result
    never leaves the per-channel [min, max] hull of the inputs.
    """
    if local.shape[-2] < 1:
        raise ConfigurationError("attentive pooling needs K >= 1")
    wide = np.asarray(local, dtype=np.float64)
    weights = softmax(_affine(wide, tuple(np.asarray(p, np.float64) for p in score)), axis=-2)
    return (weights * wide).sum(axis=-2).astype(np.result_type(local, np.float32))


def multi_scale_combine(x_k1: np.ndarray, x_k2: np.ndarray) -> np.ndarray:
    if x_k1.shape != x_k2.shape:
        raise ConfigurationError(f"scale outputs differ in shape: {x_k1.shape} vs {x_k2.shape}")
    return x_k1 + x_k2


# -- decoder ---------------------------------------------------------------

def interpolate(coarse_vals, coarse_pos, fine_pos, k: int = 3) -> np.ndarray:
    """Inverse-squared-distance blend of the ``k`` nearest coarse values.

    A fine point that coincides with a coarse point takes that value exactly.
    Fewer than ``k`` coarse points means all of them are used.
    """
    coarse_vals = np.asarray(coarse_vals)
    k = min(k, len(coarse_pos))
    idx, sqd = SpatialIndex(coarse_pos).query_points(fine_pos, k)
    hit = sqd[:, 0] == 0.0
    w = 1.0 / np.where(sqd == 0.0, 1.0, sqd)
    w /= w.sum(axis=1, keepdims=True)
    out = np.einsum("nk,nkd->nd", w, coarse_vals[idx].astype(np.float64))
    out[hit] = coarse_vals[idx[hit, 0]]
    return out.astype(coarse_vals.dtype)


def feature_propagate(coarse_feats, coarse_pos, fine_pos, skip_feats, fp) -> np.ndarray:
    up = interpolate(coarse_feats, coarse_pos, fine_pos)
    return leaky_relu(_affine(np.concatenate([up, skip_feats], axis=1), fp))


def focalize_features(y_fp, z_up, selected, focal) -> np.ndarray:
    """Features of the selected points from their ``y_fp | z_up`` rows."""
    selected = np.asarray(selected, dtype=np.int64)
    x = np.concatenate([y_fp[selected], z_up[selected]], axis=1)
    if selected.size == 0:
        return np.zeros((0, focal[0].shape[1]), dtype=np.float32)
    return leaky_relu(_affine(x, focal))


def nonlocal_affinity(y_fp, focal_feats, g3, g4) -> np.ndarray:
    """Row-stochastic ``(N, M)`` affinities between all points and the focal set."""
    theta = _affine(y_fp, g4)
    phi = _affine(focal_feats, g3)
    return softmax(theta @ phi.T, axis=1)


def nonlocal_update(y_fp, focal_feats, layers: dict, mode: str = "attention",
                    residual: Optional[bool] = None) -> np.ndarray:
    """Update every point's features against the focal set.

    ``attention``: ``g2(sum_j a_ij g5(x_j))`` with ``a_ij`` a softmax over the
    focal points.  ``literal``: ``g2(sum_j g3(x_j) * g4(y_i) * g5(y_i))`` with
    elementwise products.  ``layers`` maps ``g2..g5`` to ``(W, b)``.  The
    residual ``+ y_i`` defaults to on for attention and off for literal.
    """
    if mode not in MODES:
        raise ParameterError(f"unknown nonlocal mode '{mode}'")
    if residual is None:
        residual = mode == "attention"
    y_fp = np.asarray(y_fp, dtype=np.float32)
    inner = layers["g2"][0].shape[0]
    if mode == "attention":
        if len(focal_feats) == 0:
            agg = np.zeros((y_fp.shape[0], inner), np.float32)
        else:
            aff = nonlocal_affinity(y_fp, focal_feats, layers["g3"], layers["g4"])
            agg = aff @ _affine(focal_feats, layers["g5"])
    else:
        pooled = _affine(focal_feats, layers["g3"]).sum(axis=0)
        agg = pooled * _affine(y_fp, layers["g4"]) * _affine(y_fp, layers["g5"])
    out = _affine(agg, layers["g2"])
    return out + y_fp if residual else out


def predict_probs(y, head) -> np.ndarray:
    return softmax(_affine(y, head))


def multi_stage_loss(z, gt_labels) -> float:
    """Mean cross-entropy of probabilities ``z`` against integer labels."""
    z = np.asarray(z, dtype=np.float64)
    gt = np.asarray(gt_labels, dtype=np.int64)
    if gt.shape != (z.shape[0],):
        raise InputError(f"{gt.size} labels for {z.shape[0]} prediction rows")
    if gt.size and (gt.min() < 0 or gt.max() >= z.shape[1]):
        raise InputError(f"labels must lie in [0, {z.shape[1]})")
    p = np.maximum(z[np.arange(gt.size), gt], PROB_CLAMP)
    return float(-np.log(p).mean())


def final_loss(stage_losses: Sequence[float], prediction_loss: float) -> float:
    return float(sum(stage_losses) + prediction_loss)


# -- pipeline --------------------------------------------------------------

@dataclass
class FeatureMap:
    encoder: list = field(default_factory=list)   # X^l
    decoder: list = field(default_factory=list)   # Y^l
    probs: list = field(default_factory=list)     # Z^l


@dataclass
class ForwardResult:
    specs: list
    samples: list          # per level, indices into the input cloud
    selected: dict         # decoder level -> mined indices (level-local)
    features: FeatureMap
    probs: np.ndarray      # final head output, N x C
    stage_losses: Optional[list] = None
    prediction_loss: Optional[float] = None
    total_loss: Optional[float] = None


def _point_properties(cloud: PointCloud) -> np.ndarray:
    if cloud.has_colors:
        return np.hstack([cloud.positions, cloud.colors / 255.0]).astype(np.float32)
    return cloud.positions.astype(np.float32)


def forward_pipeline(cloud: PointCloud, *, seed: int = 0, levels: int = 5, k1: int = 16, k2: int = 32,
                     mode: str = "attention", num_classes: Optional[int] = None,
                     mining: MiningConfig = MiningConfig(), eigen_k: int = 16,
                     fps_seed: int = 0, residual: Optional[bool] = None,
                     widths: Sequence[int] = DEFAULT_WIDTHS) -> ForwardResult:
    """Encoder (dual-K aggregation per level), decoder (propagation + focalisation), head."""
    if mode not in MODES:
        raise ParameterError(f"unknown nonlocal mode '{mode}'")
    n = len(cloud)
    if n < 3:
        raise ConfigurationError("forward pass needs at least 3 points")
    specs = layer_specs(n, levels, widths, k1=k1, k2=k2)
    c = num_classes or cloud.num_classes or 13
    props = _point_properties(cloud)
    weights = WeightBundle.for_network(specs, props.shape[1], c, seed, mode)

    # nested FPS sets: local[l] indexes level l-1's points
    samples = [np.arange(n, dtype=np.int64)]
    local = [samples[0]]
    for s in specs[1:]:
        start = fps_seed if len(samples) == 1 else 0
        pick = fps(cloud.positions[samples[-1]], s.n_points, start).indices
        local.append(pick)
        samples.append(samples[-1][pick])

    eig = eigen_tuples(cloud, min(eigen_k, n))
    fmap = FeatureMap()
    x_prev = eig.astype(np.float32)
    for s, loc, glob in zip(specs, local, samples):
        if s.level > 1:
            x_prev = x_prev[loc]
        pos = cloud.positions[glob]
        index = SpatialIndex(pos)
        eig_index = SpatialIndex(eig[glob])
        out = []
        for branch, k in (("k1", s.k1), ("k2", s.k2)):
            k = min(k, s.n_points)
            en = knn(index, k, self_inclusive=True)
            gn = knn(eig_index, k, self_inclusive=True, space="eigenvalue")
            pre = f"enc{s.level}.{branch}"
            local_feats = gbaa_aggregate(props[glob], x_prev, en, gn, weights[pre + ".agg1"], weights[pre + ".agg2"])
            out.append(attentive_pool(local_feats, weights[pre + ".score"]))
        x_prev = multi_scale_combine(*out)
        fmap.encoder.append(x_prev)

    top = specs[-1]
    y = fmap.encoder[-1]
    z = predict_probs(y, weights[f"dec{top.level}.head"])
    dec = {top.level: y}
    zs = {top.level: z}
    selected = {}
    for coarse, fine in zip(specs[:0:-1], specs[-2::-1]):
        lv = fine.level
        cpos = cloud.positions[samples[coarse.level - 1]]
        fcloud = cloud.subset(samples[lv - 1])
        y_fp = feature_propagate(y, cpos, fcloud.positions, fmap.encoder[lv - 1], weights[f"dec{lv}.fp"])
        z_up = interpolate(z, cpos, fcloud.positions)
        sel = _mine_level(fcloud, y_fp, z_up, mining)
        selected[lv] = sel
        focal = focalize_features(y_fp, z_up, sel, weights[f"dec{lv}.focal"])
        layers = {g: weights[f"dec{lv}.{g}"] for g in ("g2", "g3", "g4")}
        layers["g5"] = weights[f"dec{lv}.g5.{mode}"]
        y = nonlocal_update(y_fp, focal, layers, mode, residual)
        z = predict_probs(y, weights[f"dec{lv}.head"])
        dec[lv] = y
        zs[lv] = z
    fmap.decoder = [dec[s.level] for s in specs]
    fmap.probs = [zs[s.level] for s in specs]

    h = fmap.decoder[0]
    n_fc = len(HEAD_WIDTHS) + 1
    for i in range(1, n_fc):
        h = leaky_relu(_affine(h, weights[f"head.fc{i}"]))
    probs = predict_probs(h, weights[f"head.fc{n_fc}"])

    result = ForwardResult(specs, samples, selected, fmap, probs)
    if cloud.has_labels:
        stage = [multi_stage_loss(zl, cloud.gt_labels[idx]) for zl, idx in zip(fmap.probs, samples)]
        lp = multi_stage_loss(probs, cloud.gt_labels)
        result.stage_losses = stage
        result.prediction_loss = lp
        result.total_loss = final_loss(stage, lp)
    return result


def _mine_level(cloud: PointCloud, y_fp, z_up, config: MiningConfig) -> np.ndarray:
    n = len(cloud)
    if n < 2:
        return select_indistinguishable(np.zeros(n), config.tau)
    nbrs = knn(SpatialIndex(cloud.positions), min(config.k, n - 1))
    mu = config.mu
    cols = [
        ld_geometry(cloud, nbrs, config.ld1_channels) if mu[0] > 0 else np.zeros(n),
        ld_semantic(z_up, nbrs) if mu[1] > 0 else np.zeros(n),
        ld_feature(y_fp, nbrs) if mu[2] > 0 else np.zeros(n),
    ]
    return select_indistinguishable(accumulate_ld(np.column_stack(cols), mu), config.tau)
