# ======================================================
# backend/flow.py
# Sparse pyramidal Lucas–Kanade marker tracking
#
# Black-marker centroids are tracked frame-to-frame;
# the displacement field is the local force distribution
# (drawn as yellow arrows on overlays).
# ======================================================

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import cv2
import numpy as np

from backend.errors import PyramidError
from backend.imageproc import GrayFrame

log = logging.getLogger(__name__)


# ======================================================
# TYPES
# ======================================================

@dataclass
class FlowField:
    origins: np.ndarray        # (N, 2) px
    displacements: np.ndarray  # (N, 2) px, zero where lost
    status: np.ndarray         # (N,) bool, True = tracked

    def __len__(self):
        return len(self.origins)

    @property
    def tracked(self) -> int:
        return int(self.status.sum())

    def mean_magnitude(self) -> float:
        if not self.status.any():
            return 0.0
        return float(np.linalg.norm(self.displacements[self.status], axis=1).mean())

    @classmethod
    def empty(cls) -> "FlowField":
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0, dtype=bool))


# ======================================================
# PYRAMID
# ======================================================

def _check_levels(width: int, height: int, levels: int):
    if levels < 1:
        raise PyramidError("levels must be >= 1")
    need = 2 ** (levels - 1) * 8
    if min(width, height) < need:
        raise PyramidError(f"image {width}x{height} too small for {levels} levels (needs {need} px per side)")


def build_pyramid(g: GrayFrame, levels: int) -> List[GrayFrame]:
    """Level 0 is the input; each next level is blur(σ=1) then 2× decimation."""
    _check_levels(g.width, g.height, levels)
    pyr = [g]
    current = g.pixels
    for _ in range(levels - 1):
        blurred = cv2.GaussianBlur(current, (7, 7), 1.0, sigmaY=1.0, borderType=cv2.BORDER_REPLICATE)
        current = np.ascontiguousarray(blurred[::2, ::2])
        pyr.append(GrayFrame(current, g.index))
    return pyr


# ======================================================
# LUCAS–KANADE
# ======================================================

def _track(prev: GrayFrame, nxt: GrayFrame, points: np.ndarray, cfg) -> FlowField:
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return FlowField.empty()

    found, st, _ = cv2.calcOpticalFlowPyrLK(
        prev.pixels,
        nxt.pixels,
        pts.astype(np.float32).reshape(-1, 1, 2),
        None,
        winSize=(cfg.window, cfg.window),
        maxLevel=cfg.levels - 1,
        criteria=(cv2.TERM_CRITERIA_COUNT | cv2.TERM_CRITERIA_EPS, cfg.max_iters, cfg.eps),
        minEigThreshold=cfg.min_eig,
    )
    found = found.reshape(-1, 2).astype(float)
    status = st.ravel() == 1

    # OpenCV keeps points that drift partially outside; we do not
    h, w = nxt.pixels.shape
    inside = (found[:, 0] >= 0) & (found[:, 0] <= w - 1) & (found[:, 1] >= 0) & (found[:, 1] <= h - 1)
    status &= inside

    disp = np.where(status[:, None], found - pts, 0.0)
    return FlowField(pts.copy(), disp, status)


def lk_track(prev: GrayFrame, next: GrayFrame, points: Sequence, cfg) -> FlowField:
    """
    Coarse-to-fine iterative Lucas–Kanade for sparse points.

    A point is lost when its structure tensor at full resolution is too
    weak (minimum eigenvalue per window pixel below cfg.min_eig) or when
    it leaves the image. Weak texture on a coarser level only skips that
    level's update.
    """
    _check_levels(prev.width, prev.height, cfg.levels)
    return _track(prev, next, np.asarray(points, dtype=float), cfg)


def forward_backward_error(prev: GrayFrame, next: GrayFrame, points, cfg) -> np.ndarray:
    """Distance between each point and its forward-then-backward track (NaN if lost)."""
    _check_levels(prev.width, prev.height, cfg.levels)
    fwd = _track(prev, next, np.asarray(points, dtype=float), cfg)
    moved = fwd.origins + fwd.displacements
    bwd = _track(next, prev, moved, cfg)
    back = bwd.origins + bwd.displacements
    err = np.linalg.norm(back - fwd.origins, axis=1)
    err[~(fwd.status & bwd.status)] = np.nan
    return err


# ======================================================
# SEQUENCE TRACKER
# ======================================================

class MarkerTracker:
    """
    Frame-to-frame tracker for one sequence.

    Origins come from the reference frame; a point lost once stays
    dropped. Keeps both the adjacent flow and the cumulative
    displacement from the reference.
    """

    def __init__(self, cfg):
        self.cfg = cfg
        self.reference_points = np.zeros((0, 2))
        self.current_points = np.zeros((0, 2))
        self.alive = np.zeros(0, dtype=bool)
        self._prev: Optional[GrayFrame] = None

    def reset(self, reference: GrayFrame, origins: np.ndarray):
        _check_levels(reference.width, reference.height, self.cfg.levels)
        self.reference_points = np.asarray(origins, dtype=float).reshape(-1, 2).copy()
        self.current_points = self.reference_points.copy()
        self.alive = np.ones(len(self.reference_points), dtype=bool)
        self._prev = reference
        log.info("Marker tracker reset with %d origins", len(self.reference_points))

    def update(self, gray: GrayFrame) -> FlowField:
        if self._prev is None:
            raise RuntimeError("tracker used before reset()")

        idx = np.nonzero(self.alive)[0]
        flow = _track(self._prev, gray, self.current_points[idx], self.cfg)

        lost = idx[~flow.status]
        if len(lost):
            log.warning("Frame %d: %d marker(s) lost", gray.index, len(lost))
        self.alive[lost] = False
        self.current_points[idx] += flow.displacements
        self._prev = gray
        return flow

    @property
    def cumulative(self) -> np.ndarray:
        """(N, 2) displacement from the reference; zero for dropped points."""
        d = self.current_points - self.reference_points
        d[~self.alive] = 0.0
        return d

    def mean_cumulative_magnitude(self) -> float:
        if not self.alive.any():
            return 0.0
        return float(np.linalg.norm(self.cumulative[self.alive], axis=1).mean())
