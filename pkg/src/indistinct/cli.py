"""``indistinct`` command line front end.

Exit status: 0 success, 1 computation/IO failure, 2 invalid input or flags.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io as cio
from .eigen import DEFAULT_K as EIGEN_K, eigen_tuples
from .errors import ConfigurationError, IndistinctError, ParameterError, ValidationError
from .metric import (
    CATEGORY_BOUNDARY, GEOMETRY_BOUNDARY, IpbmConfig, category_boundary_subset, colorize_areas,
    evaluate_ipbm, geometry_boundary_subset, normalize_subsets, overall_scores,
)
from .mining import MiningConfig, mine

DEFAULTS = IpbmConfig()
MINING_DEFAULTS = MiningConfig()


def _mu(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got '{text}'")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got '{text}'")
    return parts


def _ipbm_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k", type=int, default=DEFAULTS.k, help="neighbourhood size (default %(default)s)")
    p.add_argument("--zeta1", type=float, default=DEFAULTS.zeta1)
    p.add_argument("--zeta2", type=float, default=DEFAULTS.zeta2)
    p.add_argument("--rho", type=float, default=DEFAULTS.rho)
    p.add_argument("--epsilon", type=float, default=DEFAULTS.epsilon)
    p.add_argument("--ld1-channels", choices=("auto", "xyz", "xyzrgb"), default=DEFAULTS.ld1_channels)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="indistinct", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ipbm", help="score predictions with the indistinguishable-points metric")
    p.add_argument("--gt", required=True, help="labelled cloud file")
    p.add_argument("--pred", required=True, help="labels or probabilities, one point per line")
    p.add_argument("--subset", default="all", help="all, or comma list of original,category,geometry")
    p.add_argument("--report", help="JSON report path")
    p.add_argument("--classes", type=int, default=None, help="number of classes")
    p.add_argument("--ply-prefix", help="write <prefix>-<subset>.ply area visualisations")
    p.add_argument("--ply-format", choices=cio.PLY_FORMATS, default="binary_little_endian")
    _ipbm_flags(p)

    p = sub.add_parser("subset", help="extract the category- or geometry-boundary subset")
    p.add_argument("--cloud", required=True)
    p.add_argument("--mode", required=True, choices=("category", "geometry"))
    p.add_argument("--out", required=True, help="selected indices, one per line")
    p.add_argument("--cloud-out", help="also write the subset as a cloud file")
    _ipbm_flags(p)

    p = sub.add_parser("mine", help="rank points by accumulated local difference")
    p.add_argument("--cloud", required=True)
    p.add_argument("--probs", help="N x C prediction probabilities")
    p.add_argument("--features", help="N x D per-point features")
    p.add_argument("--mu", type=_mu, default=MINING_DEFAULTS.mu, help="weights a,b,c (default 0,0,1)")
    p.add_argument("--tau", type=float, default=MINING_DEFAULTS.tau)
    p.add_argument("--k", type=int, default=MINING_DEFAULTS.k)
    p.add_argument("--ld1-channels", choices=("xyz", "xyzrgb"), default=MINING_DEFAULTS.ld1_channels)
    p.add_argument("--out", required=True, help="selected indices, one per line")
    p.add_argument("--ld-out", help="columns LD1 LD2 LD3 LD per point")

    p = sub.add_parser("features", help="per-point covariance eigenvalue tuples")
    p.add_argument("--cloud", required=True)
    p.add_argument("--k", type=int, default=EIGEN_K)
    p.add_argument("--out", required=True)

    p = sub.add_parser("forward", help="seeded forward pass of the reference network")
    p.add_argument("--cloud", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--levels", type=int, default=5)
    p.add_argument("--k1", type=int, default=16)
    p.add_argument("--k2", type=int, default=32)
    p.add_argument("--mode", choices=("literal", "attention"), default="attention")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--out", required=True, help="final per-point probabilities")
    p.add_argument("--summary", help="JSON summary path")
    return parser


def _ipbm_config(args) -> IpbmConfig:
    return IpbmConfig(args.k, args.zeta1, args.zeta2, args.rho, args.epsilon, args.ld1_channels)


def _write_lines(path, values, fmt="%d") -> None:
    Path(path).write_text("".join(f"{fmt % v}\n" for v in values))


def _write_table(path, table, fmt="%.9g") -> None:
    rows = np.char.mod(fmt, np.asarray(table, dtype=np.float64))
    Path(path).write_text("".join(" ".join(r) + "\n" for r in rows))


def cmd_ipbm(args) -> int:
    config = _ipbm_config(args)
    names = normalize_subsets(s.strip() for s in args.subset.split(","))
    cloud = cio.load_cloud(args.gt, args.classes)
    if not cloud.has_labels:
        raise ConfigurationError("ground-truth labels required")
    pred = cio.load_predictions(args.pred, len(cloud), args.classes)
    if pred.ndim == 2:
        pred = pred.argmax(axis=1)
    report = evaluate_ipbm(cloud, pred, config, names)
    if args.report:
        cio.write_report(report, args.report)
    if args.ply_prefix:
        for s in report.subsets:
            cio.write_ply(cloud.positions[s.indices], colorize_areas(report, cloud, s.name),
                          f"{args.ply_prefix}-{s.name}.ply", args.ply_format)
    classes = max(cloud.num_classes, int(pred.max()) + 1)
    miou, oa = overall_scores(pred, cloud.gt_labels, classes)
    print(f"{'subset':<18} {'N':>10} {'ISA(%)':>8} {'CBA(%)':>8} {'CIA(%)':>8}")
    for s in report.subsets:
        print(f"{s.name:<18} {s.n:>10d} {100 * s.isa:>8.2f} {100 * s.cba:>8.2f} {100 * s.cia:>8.2f}")
    print(f"mIoU {100 * miou:.2f}  OA {100 * oa:.2f}")
    return 0


def cmd_subset(args) -> int:
    config = _ipbm_config(args)
    cloud = cio.load_cloud(args.cloud)
    if args.mode == "category":
        if not cloud.has_labels:
            raise ConfigurationError("ground-truth labels required")
        idx = category_boundary_subset(cloud, config)
    else:
        idx = geometry_boundary_subset(cloud, config)
    _write_lines(args.out, idx)
    if args.cloud_out:
        cio.save_cloud(cloud.subset(idx), args.cloud_out)
    name = CATEGORY_BOUNDARY if args.mode == "category" else GEOMETRY_BOUNDARY
    print(f"{name}: {idx.size} of {len(cloud)} points")
    return 0


def cmd_mine(args) -> int:
    config = MiningConfig(args.mu, args.tau, args.k, args.ld1_channels)
    cloud = cio.load_cloud(args.cloud)
    probs = cio.load_predictions(args.probs, len(cloud)) if args.probs else None
    if probs is not None and probs.ndim != 2:
        raise ConfigurationError("--probs needs a probability matrix, not labels")
    feats = cio.load_matrix(args.features, len(cloud)) if args.features else None
    result = mine(cloud, config, probs=probs, features=feats)
    _write_lines(args.out, result.selected)
    if args.ld_out:
        _write_table(args.ld_out, np.column_stack([result.ld_raw, result.ld_accumulated]), "%.17g")
    print(f"selected {result.selected.size} of {len(cloud)} points")
    return 0


def cmd_features(args) -> int:
    if args.k < 3:
        raise ParameterError(f"covariance needs K >= 3, got {args.k}")
    cloud = cio.load_cloud(args.cloud)
    if args.k > len(cloud):
        raise ParameterError(f"K={args.k} exceeds the {len(cloud)} points in the cloud")
    _write_table(args.out, eigen_tuples(cloud, args.k), "%.17g")
    return 0


def cmd_forward(args) -> int:
    from .net import forward_pipeline

    if args.seed < 0 or args.seed >= 1 << 64:
        raise ParameterError("seed must be an unsigned 64-bit integer")
    if args.mode not in ("literal", "attention"):
        raise ParameterError(f"unknown mode '{args.mode}'")
    cloud = cio.load_cloud(args.cloud, args.classes)
    res = forward_pipeline(cloud, seed=args.seed, levels=args.levels, k1=args.k1, k2=args.k2,
                           mode=args.mode, num_classes=args.classes)
    _write_table(args.out, res.probs, "%.9g")
    if args.summary:
        summary = {
            "seed": args.seed,
            "mode": args.mode,
            "shapes": [
                {"level": s.level, "points": s.n_points,
                 "encoder": list(x.shape), "decoder": list(y.shape), "probs": list(z.shape)}
                for s, x, y, z in zip(res.specs, res.features.encoder, res.features.decoder, res.features.probs)
            ],
            "L_ms": res.stage_losses,
            "L_p": res.prediction_loss,
            "L_f": res.total_loss,
        }
        Path(args.summary).write_text(json.dumps(summary, indent=2) + "\n")
    return 0


COMMANDS = {
    "ipbm": cmd_ipbm,
    "subset": cmd_subset,
    "mine": cmd_mine,
    "features": cmd_features,
    "forward": cmd_forward,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads is not None:
        if args.threads < 1:
            print("indistinct: error: --threads must be >= 1", file=sys.stderr)
            return 2
        import numba

        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    try:
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"indistinct: error: {exc}", file=sys.stderr)
        return 2
    except (IndistinctError, OSError) as exc:
        print(f"indistinct: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
