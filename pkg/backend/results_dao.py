# backend/results_dao.py
"""
Result files: JSON documents, CSV tables (pattern, markers, flow,
heights, truth), SVG pattern chart, height-map PGM-16 with a JSON
sidecar.

All writers go through a temp file + rename so a failed run never
leaves a half-written result behind.
"""

import csv
import json
import logging
import os
from typing import Iterable, List, Sequence

import numpy as np

from backend.camera import DotPattern
from backend.errors import DataError
from backend.flow import FlowField
from backend.frames_dao import write_pgm16
from backend.imageproc import MarkerSet
from backend.shape import HeightMap

log = logging.getLogger(__name__)


# ---------------------------------------------------
# GENERIC
# ---------------------------------------------------

def _replace_into(path, writer):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    try:
        writer(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def write_json(path, data):
    def _w(tmp):
        with open(tmp, "w", encoding="utf-8", newline="\n") as f:
            json.dump(data, f, indent=2)
            f.write("\n")
    _replace_into(path, _w)


def read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]):
    def _w(tmp):
        with open(tmp, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
    _replace_into(path, _w)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


# ---------------------------------------------------
# DOT PATTERN
# ---------------------------------------------------

PATTERN_HEADER = ("i", "j", "X_mm", "Y_mm", "Z_mm", "u_px", "v_px")


def write_pattern_csv(path, pattern: DotPattern):
    rows = (
        (int(i), int(j), x, y, z, u, v)
        for (i, j), (x, y, z), (u, v) in zip(pattern.grid_ij, pattern.dots3d, pattern.dots2d)
    )
    write_csv(path, PATTERN_HEADER, rows)


def write_pattern_svg(path, pattern: DotPattern, width: int, height: int, dot_radius_px: float):
    """Dot chart in image coordinates, one circle per dot."""
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
    ]
    for (i, j), (u, v) in zip(pattern.grid_ij, pattern.dots2d):
        lines.append(
            f'<circle cx="{u:.3f}" cy="{v:.3f}" r="{dot_radius_px:.3f}" fill="black" '
            f'data-i="{int(i)}" data-j="{int(j)}"/>'
        )
    lines.append("</svg>")

    def _w(tmp):
        with open(tmp, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
    _replace_into(path, _w)


# ---------------------------------------------------
# HEIGHT MAP
# ---------------------------------------------------

def write_height_map(stem, hm: HeightMap):
    """
    <stem>.pgm (16-bit) plus <stem>.json sidecar:
    height_mm = offset + scale * value.
    """
    z = np.where(hm.valid, hm.height, 0.0)
    lo = float(z.min()) if z.size else 0.0
    hi = float(z.max()) if z.size else 0.0
    scale = (hi - lo) / 65535.0 if hi > lo else 1.0
    values = np.rint((z - lo) / scale).astype(np.int64)

    _replace_into(f"{stem}.pgm", lambda tmp: write_pgm16(tmp, values))
    write_json(f"{stem}.json", {
        "scale": scale,
        "offset": lo,
        "pitch_mm": hm.pitch,
        "stride": hm.stride,
        "width": int(z.shape[1]),
        "height": int(z.shape[0]),
        "units": "mm",
    })


def write_height_csv(path, hm: HeightMap):
    rows = (
        (int(r), int(c), float(hm.height[r, c]))
        for r, c in zip(*np.nonzero(hm.valid))
    )
    write_csv(path, ("row", "col", "height_mm"), rows)


# ---------------------------------------------------
# GROUND TRUTH TABLES
# ---------------------------------------------------

def write_marker_table(path, frames: List):
    """frame, marker, x_px, y_px, dx_px, dy_px for every black dot of every ground-truth frame."""
    def rows():
        for ft in frames:
            for m, ((x, y), (dx, dy)) in enumerate(zip(ft.black_px, ft.black_displacement)):
                yield ft.index, m, x, y, dx, dy
    write_csv(path, ("frame", "marker", "x_px", "y_px", "dx_px", "dy_px"), rows())


def write_truth_table(path, frames: List, threshold_mm: float):
    """One row per frame: wrench, pose delta, contact area, peak height."""
    header = (
        "frame", "Fx", "Fy", "Fz", "Tx", "Ty", "Tz",
        "dx", "dy", "dz", "rx", "ry", "rz",
        "contact_area_px2", "peak_height_mm",
    )

    def rows():
        for ft in frames:
            yield (ft.index, *ft.wrench.vector, *ft.delta.vector,
                   ft.contact_area(threshold_mm), ft.peak_height())
    write_csv(path, header, rows())


# ---------------------------------------------------
# PROCESSING TABLE
# ---------------------------------------------------

FRAME_TABLE_HEADER = (
    "frame", "flags", "black", "white", "tracked", "mean_displacement_px",
    "Fx", "Fy", "Fz", "Tx", "Ty", "Tz",
    "dx", "dy", "dz", "rx", "ry", "rz",
    "reprojection_rms_px", "contact_area_px2", "peak_height_mm",
)

_WRENCH_KEYS = ("Fx", "Fy", "Fz", "Tx", "Ty", "Tz")
_DELTA_KEYS = ("dx", "dy", "dz", "rx", "ry", "rz")


def write_frame_table(path, records: List[dict]):
    """One row per processed frame record; missing values are empty cells."""
    def rows():
        for r in records:
            wrench = r.get("wrench") or {}
            delta = r.get("delta") or {}
            shape = r.get("shape") or {}
            yield (
                r["index"], ";".join(r.get("flags", [])),
                r["markers"]["black"], r["markers"]["white"], r["markers"]["tracked"],
                r["flow"]["mean_cumulative_px"],
                *(_blank(wrench.get(k)) for k in _WRENCH_KEYS),
                *(_blank(delta.get(k)) for k in _DELTA_KEYS),
                _blank(r.get("reprojection_rms_px")),
                _blank(shape.get("contact_area_px2")),
                _blank(shape.get("peak_height_mm")),
            )
    write_csv(path, FRAME_TABLE_HEADER, rows())


def _blank(v):
    return "" if v is None else v


# ---------------------------------------------------
# CALIBRATION SAMPLES
# ---------------------------------------------------

SAMPLE_HEADER = _DELTA_KEYS + _WRENCH_KEYS


def read_calibration_samples(path) -> np.ndarray:
    """
    CSV with columns dx dy dz rx ry rz Fx Fy Fz Tx Ty Tz (any order).
    Returns an (n, 12) array, deltas first.
    """
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)
            missing = [k for k in SAMPLE_HEADER if k not in (reader.fieldnames or [])]
            if missing:
                raise DataError(f"{path}: missing columns {', '.join(missing)}")
            rows = []
            for line, row in enumerate(reader, start=2):
                try:
                    rows.append([float(row[k]) for k in SAMPLE_HEADER])
                except (TypeError, ValueError) as e:
                    raise DataError(f"{path}: line {line}: {e}") from e
    except FileNotFoundError as e:
        raise DataError(f"samples file not found: {path}") from e
    return np.asarray(rows, dtype=float).reshape(-1, len(SAMPLE_HEADER))


def write_calibration_samples(path, samples: Sequence):
    """Inverse of read_calibration_samples for (PoseDelta, Wrench) pairs."""
    write_csv(path, SAMPLE_HEADER, ((*d.vector, *w.vector) for d, w in samples))


# ---------------------------------------------------
# PER-FRAME MARKERS AND FLOW
# ---------------------------------------------------

MARKER_HEADER = ("kind", "x_px", "y_px", "area")
FLOW_HEADER = ("x0", "y0", "dx", "dy", "status")


def write_marker_csv(path, marker_sets: Sequence[MarkerSet]):
    """One row per detected marker, black and white sets together."""
    rows = (
        (m.kind, float(x), float(y), float(a))
        for m in marker_sets
        for (x, y), a in zip(m.centroids, m.areas)
    )
    write_csv(path, MARKER_HEADER, rows)


def write_flow_csv(path, flow: FlowField):
    rows = (
        (float(x0), float(y0), float(dx), float(dy), "tracked" if ok else "lost")
        for (x0, y0), (dx, dy), ok in zip(flow.origins, flow.displacements, flow.status)
    )
    write_csv(path, FLOW_HEADER, rows)
