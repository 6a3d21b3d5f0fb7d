# backend/frames_dao.py
"""
Frame files (Netpbm via Pillow)
- frames:    frame_0000.ppm (P6, RGB 8-bit)
- 16-bit:    *.pgm (P5, maxval 65535) for height maps
"""

import logging
import os
import re
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image

from backend.errors import DataError, DimensionMismatchError
from backend.imageproc import Frame

log = logging.getLogger(__name__)

FRAME_PATTERN = re.compile(r"^frame_(\d+)\.ppm$")


def frame_name(index: int) -> str:
    return f"frame_{index:04d}.ppm"


# ---------------------------------------------------
# WRITE
# ---------------------------------------------------

def write_ppm(path, frame: Frame):
    Image.fromarray(np.ascontiguousarray(frame.pixels)).save(path, format="PPM")


def write_pgm16(path, values: np.ndarray):
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise DimensionMismatchError(f"2-D array expected, got shape {arr.shape}")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 65535:
        raise DataError("16-bit values must lie in [0, 65535]")
    Image.fromarray(arr.astype(np.int32)).save(path, format="PPM")


def write_frames(out_dir, frames: Sequence[Frame]) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for f in frames:
        p = os.path.join(out_dir, frame_name(f.index))
        write_ppm(p, f)
        paths.append(p)
    log.info("Wrote %d frames to %s", len(paths), out_dir)
    return paths


# ---------------------------------------------------
# READ
# ---------------------------------------------------

def read_ppm(path, index: int = 0) -> Frame:
    try:
        with Image.open(path) as im:
            pixels = np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except FileNotFoundError as e:
        raise DataError(f"frame not found: {path}") from e
    except OSError as e:
        raise DataError(f"unreadable frame {path}: {e}") from e
    return Frame(pixels, index)


def read_pgm16(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im, dtype=np.int64).astype(np.uint16)
    except OSError as e:
        raise DataError(f"unreadable 16-bit image {path}: {e}") from e


def list_frames(frames_dir) -> List[Path]:
    d = Path(frames_dir)
    if not d.is_dir():
        raise DataError(f"frames directory not found: {frames_dir}")
    found = []
    for p in d.iterdir():
        m = FRAME_PATTERN.match(p.name)
        if m:
            found.append((int(m.group(1)), p))
    found.sort()
    return [p for _, p in found]


def read_sequence(frames_dir, limit: Optional[int] = None) -> List[Frame]:
    """Frames in index order; the first one is the reference F₀."""
    paths = list_frames(frames_dir)
    if limit is not None:
        paths = paths[:limit]
    frames = [read_ppm(p, k) for k, p in enumerate(paths)]
    if frames:
        shape = frames[0].pixels.shape
        for f in frames[1:]:
            if f.pixels.shape != shape:
                raise DimensionMismatchError(f"frame {f.index} is {f.pixels.shape}, expected {shape}")
    log.info("Loaded %d frames from %s", len(frames), frames_dir)
    return frames
