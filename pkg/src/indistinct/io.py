"""Text cloud/prediction readers, PLY export and JSON reports.

Cloud files are whitespace separated, one point per line, no header:
``x y z``, ``x y z label``, ``x y z r g b`` or ``x y z r g b label``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InputError, ParseError
from .geometry import PointCloud
from .metric import IpbmReport

PROB_ROW_TOL = 1e-4
PLY_FORMATS = ("ascii", "binary_little_endian")


def _read_rows(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse a numeric text table; returns ``(values, line_numbers)``.

    Blank lines are skipped.  Every non-blank line must have the same field
    count as the first one.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise InputError(f"{path}: no such file") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise InputError(f"{path}: cannot read ({exc})") from None
    lines = text.splitlines()
    fields = [ln.split() for ln in lines]
    numbers = [i + 1 for i, f in enumerate(fields) if f]
    if not numbers:
        return np.empty((0, 0)), np.empty(0, np.int64)
    width = len(fields[numbers[0] - 1])
    for ln in numbers:
        if len(fields[ln - 1]) != width:
            raise ParseError(path, ln, f"expected {width} fields, found {len(fields[ln - 1])}")
    flat = [tok for ln in numbers for tok in fields[ln - 1]]
    try:
        values = np.array(flat, dtype=np.float64).reshape(len(numbers), width)
    except ValueError:
        for ln in numbers:
            for tok in fields[ln - 1]:
                try:
                    float(tok)
                except ValueError:
                    raise ParseError(path, ln, f"not a number: {tok!r}") from None
        raise
    return values, np.asarray(numbers, dtype=np.int64)


def _integral(path, values, lines, what, lo=None, hi=None) -> np.ndarray:
    bad_rows = ~np.isfinite(values) | (values != np.round(values))
    if lo is not None:
        bad_rows |= values < lo
    if hi is not None:
        bad_rows |= values > hi
    bad = np.flatnonzero(bad_rows.reshape(len(lines), -1).any(axis=1))
    if bad.size:
        raise ParseError(path, int(lines[bad[0]]), f"invalid {what}")
    return values.astype(np.int64)


def load_cloud(path, num_classes: Optional[int] = None) -> PointCloud:
    values, lines = _read_rows(path)
    if values.shape[0] == 0:
        raise InputError(f"{path}: empty cloud file")
    width = values.shape[1]
    if width not in (3, 4, 6, 7):
        raise ParseError(path, int(lines[0]), f"expected 3, 4, 6 or 7 fields, found {width}")
    pos = values[:, :3]
    bad = np.flatnonzero(~np.isfinite(pos).all(axis=1))
    if bad.size:
        raise ParseError(path, int(lines[bad[0]]), "non-finite coordinate")
    colors = labels = None
    if width >= 6:
        colors = _integral(path, values[:, 3:6], lines, "color (integers 0-255 expected)", 0, 255)
    if width in (4, 7):
        labels = _integral(path, values[:, -1], lines, "label (non-negative integer expected)", 0)
        if num_classes is not None and labels.max() >= num_classes:
            row = int(np.flatnonzero(labels >= num_classes)[0])
            raise ParseError(path, int(lines[row]), f"label {labels[row]} outside [0, {num_classes})")
    return PointCloud(pos, colors, labels, num_classes)


def save_cloud(cloud: PointCloud, path) -> None:
    """Write ``cloud`` in the text layout read by :func:`load_cloud` (lossless)."""
    cols = [np.char.mod("%.17g", cloud.positions)]
    if cloud.has_colors:
        cols.append(np.char.mod("%d", cloud.colors))
    if cloud.has_labels:
        cols.append(np.char.mod("%d", cloud.gt_labels[:, None]))
    table = np.hstack(cols)
    Path(path).write_text("\n".join(" ".join(row) for row in table) + "\n")


def load_predictions(path, n: int, num_classes: Optional[int] = None) -> np.ndarray:
    """Labels (one integer per line) or an ``N x C`` probability matrix.

    Probability rows must sum to 1 within ``1e-4`` and are renormalised.
    """
    values, lines = _read_rows(path)
    if values.shape[0] != n:
        raise InputError(f"{path}: prediction file has {values.shape[0]} lines but the cloud has {n} points")
    if values.shape[1] == 1:
        labels = _integral(path, values[:, 0], lines, "label (non-negative integer expected)", 0)
        if num_classes is not None and labels.size and labels.max() >= num_classes:
            row = int(np.flatnonzero(labels >= num_classes)[0])
            raise ParseError(path, int(lines[row]), f"label {labels[row]} outside [0, {num_classes})")
        return labels
    if num_classes is not None and values.shape[1] != num_classes:
        raise ParseError(path, int(lines[0]), f"expected {num_classes} probabilities, found {values.shape[1]}")
    if not np.isfinite(values).all() or values.min() < 0:
        row = int(np.flatnonzero(~np.isfinite(values).all(axis=1) | (values < 0).any(axis=1))[0])
        raise ParseError(path, int(lines[row]), "probabilities must be finite and non-negative")
    sums = values.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > PROB_ROW_TOL)
    if bad.size:
        raise ParseError(path, int(lines[bad[0]]), f"probabilities sum to {sums[bad[0]]:.6g}, not 1")
    return values / sums[:, None]


def load_matrix(path, n: int) -> np.ndarray:
    """An ``N x D`` float table (per-point features)."""
    values, lines = _read_rows(path)
    if values.shape[0] != n:
        raise InputError(f"{path}: file has {values.shape[0]} rows but the cloud has {n} points")
    bad = np.flatnonzero(~np.isfinite(values).all(axis=1))
    if bad.size:
        raise ParseError(path, int(lines[bad[0]]), "non-finite value")
    return values


def write_ply(positions, colors, path, fmt: str = "ascii") -> None:
    """Vertex-only PLY with float x/y/z and uchar red/green/blue."""
    if isinstance(positions, PointCloud):
        positions = positions.positions
    pos = np.asarray(positions, dtype=np.float32).reshape(-1, 3)
    col = np.asarray(colors)
    if pos.shape[0] == 0:
        raise InputError("refusing to write a PLY file with no vertices")
    if col.shape != pos.shape:
        raise InputError(f"need one RGB triple per point, got colors of shape {col.shape}")
    if fmt not in PLY_FORMATS:
        raise InputError(f"unknown PLY format '{fmt}' (choose ascii or binary_little_endian)")
    col = col.astype(np.uint8)
    header = "\n".join([
        "ply",
        f"format {fmt} 1.0",
        f"element vertex {pos.shape[0]}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if fmt == "ascii":
            xyz = np.char.mod("%.9g", pos.astype(np.float64))
            rgb = np.char.mod("%d", col)
            body = "\n".join(" ".join(r) for r in np.hstack([xyz, rgb])) + "\n"
            fh.write(body.encode("ascii"))
        else:
            rec = np.empty(pos.shape[0], dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                                ("red", "u1"), ("green", "u1"), ("blue", "u1")])
            rec["x"], rec["y"], rec["z"] = pos.T
            rec["red"], rec["green"], rec["blue"] = col.T
            fh.write(rec.tobytes())


def report_json(report: IpbmReport) -> str:
    return json.dumps(report.to_dict(), indent=2) + "\n"


def write_report(report: IpbmReport, path) -> None:
    Path(path).write_text(report_json(report))
