# ======================================================
# Sequence Processing Service
# Dome tactile sensor
#
# PER FRAME (in this order)
# ------------------------------------------------------
# 1. undistort → blur → circular mask → sharpen → gray
# 2. black markers: LK flow vs previous frame (cumulative vs F₀)
# 3. white markers: ordered by angle → planar PnP
# 4. pose delta vs the reference pose → wrench
# 5. normals + height map (thread pool, optional)
#
# Frame 0 is the reference F₀ (the next frame stands in if
# its markers cannot be segmented). Per-frame data problems
# are recorded as flags; processing continues.
# ======================================================

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from backend.camera import (
    CameraIntrinsics,
    DistortionCoefficients,
    DomeGeometry,
    RemapGrid,
    project,
    undistort_frame,
    undistort_map,
)
from backend.errors import ConvergenceError, DataError
from backend.flow import FlowField, MarkerTracker
from backend.imageproc import (
    BLACK,
    WHITE,
    Frame,
    GrayFrame,
    MarkerSet,
    circular_mask,
    extract_markers,
    gaussian_blur,
    order_by_angle,
    sharpen,
    to_gray,
)
from backend.overlay import render_overlay
from backend.pose import LMSettings, PlatformModel, Pose6D, reprojection_rms, solve_planar_pnp
from backend.shape import HeightMap, LightConfig, contact_area, recover_height
from backend.wrench import PoseDelta, StiffnessMatrix, Wrench, default_stiffness, pose_delta, wrench_from_pose

log = logging.getLogger(__name__)


# ======================================================
# PREPROCESSING
# ======================================================

@dataclass
class Preprocessed:
    undistorted: Frame      # for overlays
    color: Frame            # blurred + masked, input to shape recovery
    gray: GrayFrame         # sharpened luminance, input to marker extraction


def preprocess(frame: Frame, grid: Optional[RemapGrid], icfg) -> Preprocessed:
    """undistort → blur → mask → sharpen → gray."""
    und = undistort_frame(frame, grid) if grid is not None else frame
    blurred = circular_mask(gaussian_blur(und, icfg.blur_sigma))
    gray = to_gray(sharpen(blurred, icfg.sharpen_amount, icfg.sharpen_sigma))
    return Preprocessed(und, blurred, gray)


# ======================================================
# RESULTS
# ======================================================

@dataclass
class FrameResult:
    index: int
    black_count: int = 0
    white_count: int = 0
    flow: FlowField = field(default_factory=FlowField.empty)
    markers: List[MarkerSet] = field(default_factory=list)
    cumulative: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    tracked: Optional[np.ndarray] = None
    white_px: Optional[np.ndarray] = None
    pose: Optional[Pose6D] = None
    reprojection_rms: Optional[float] = None
    delta: Optional[PoseDelta] = None
    wrench: Optional[Wrench] = None
    height: Optional[HeightMap] = None
    contact_area: Optional[float] = None
    flags: List[str] = field(default_factory=list)

    @property
    def mean_displacement(self) -> float:
        if self.tracked is None or not self.tracked.any():
            return 0.0
        return float(np.linalg.norm(self.cumulative[self.tracked], axis=1).mean())

    def features(self) -> Dict[str, Optional[float]]:
        return {
            "force_n": self.wrench.force_magnitude if self.wrench is not None else None,
            "displacement_px": self.mean_displacement if self.tracked is not None else None,
            "contact_area_px2": self.contact_area,
        }

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "flags": list(self.flags),
            "features": self.features(),
            "markers": {
                "black": self.black_count,
                "white": self.white_count,
                "tracked": int(self.tracked.sum()) if self.tracked is not None else 0,
            },
            "flow": {
                "mean_adjacent_px": self.flow.mean_magnitude(),
                "mean_cumulative_px": self.mean_displacement,
            },
            "white_px": self.white_px.tolist() if self.white_px is not None else None,
            "pose": self.pose.to_json() if self.pose is not None else None,
            "reprojection_rms_px": self.reprojection_rms,
            "delta": self.delta.to_json() if self.delta is not None else None,
            "wrench": self.wrench.to_json() if self.wrench is not None else None,
            "shape": {
                "contact_area_px2": self.contact_area,
                "peak_height_mm": self.height.peak() if self.height is not None else None,
            },
        }


@dataclass
class SequenceResult:
    results: List[FrameResult]
    reference_pose: Optional[Pose6D]
    overlays: List[Frame] = field(default_factory=list)

    def to_json(self) -> dict:
        flagged = sum(1 for r in self.results if r.flags)
        return {
            "frames": len(self.results),
            "flagged_frames": flagged,
            "reference_pose": self.reference_pose.to_json() if self.reference_pose is not None else None,
            "records": [r.to_json() for r in self.results],
        }


# ======================================================
# PROCESSOR
# ======================================================

class SequenceProcessor:
    """
    Stateful per-sequence processor. ``start`` takes the reference
    frame; ``process`` handles every later frame in order.
    """

    def __init__(self, cfg, stiffness: Optional[StiffnessMatrix] = None):
        self.cfg = cfg
        self.intr = CameraIntrinsics.from_config(cfg.camera)
        self.dist = DistortionCoefficients.from_config(cfg.camera)
        self.grid = None if self.dist.is_zero else undistort_map(self.intr, self.dist)
        self.platform = PlatformModel.from_config(cfg.pose)
        self.lm = LMSettings.from_config(cfg.pose)
        self.stiffness = stiffness if stiffness is not None else default_stiffness(cfg.wrench)
        self.lights = LightConfig.from_config(cfg.shape)
        self.pitch = float(DomeGeometry.from_config(cfg.dome).apex[2] / self.intr.fx)

        self.tracker = MarkerTracker(cfg.flow)
        self.reference_pose: Optional[Pose6D] = None
        self.reference_white: Optional[np.ndarray] = None
        self.reference_black_count = 0
        self._black_pending = False
        self._pose_pending = False

        # model point order by angle of the rest-pose projection
        rest_px = project(self.platform.rest_pose.transform(self.platform.s1), self.intr, DistortionCoefficients())
        self._model_order = order_by_angle(rest_px, (self.intr.cx, self.intr.cy))

    # ---------- stages ----------
    def _white_points(self, gray: GrayFrame, result: FrameResult) -> Optional[np.ndarray]:
        white = extract_markers(gray, WHITE, self.cfg.imageproc)
        result.markers.append(white)
        result.white_count = len(white)
        n = len(self.platform.s1)
        if len(white) != n:
            result.flags.append("white_count")
            log.warning("Frame %d: %d white markers (expected %d)", gray.index, len(white), n)
            return None
        det_order = order_by_angle(white.centroids, (self.intr.cx, self.intr.cy))
        pts = np.zeros((n, 2))
        pts[self._model_order] = white.centroids[det_order]
        return pts

    def _solve_pose(self, pts: np.ndarray, result: FrameResult) -> Optional[Pose6D]:
        try:
            pose = solve_planar_pnp(self.platform, pts, self.intr, self.lm)
        except ConvergenceError as e:
            result.flags.append("pose_convergence")
            log.warning("Frame %d: %s", result.index, e)
            return e.best
        except DataError as e:
            result.flags.append("pose_degenerate")
            log.warning("Frame %d: %s", result.index, e)
            return None
        result.reprojection_rms = reprojection_rms(self.platform, pose, pts, self.intr)
        return pose

    def _intrinsic(self, pre: Preprocessed, result: FrameResult):
        pts = self._white_points(pre.gray, result)
        if pts is None:
            return
        result.white_px = pts
        pose = self._solve_pose(pts, result)
        if pose is None:
            return
        result.pose = pose
        if self.reference_pose is None:
            result.flags.append("no_reference_pose")
            return
        result.delta = pose_delta(pose, self.reference_pose)
        result.wrench = wrench_from_pose(result.delta, self.stiffness, self.cfg.wrench.f_max)
        if result.wrench.saturated:
            result.flags.append("saturated")
        if result.delta.large_rotation:
            result.flags.append("large_rotation")

    def shape(self, pre: Preprocessed) -> HeightMap:
        ip = self.cfg.imageproc
        return recover_height(pre.color, self.lights, self.cfg.shape, self.pitch, (ip.t_low, ip.t_high))

    # ---------- reference ----------
    def _seed_black(self, pre: Preprocessed, result: FrameResult) -> bool:
        try:
            black = extract_markers(pre.gray, BLACK, self.cfg.imageproc)
        except DataError as e:
            result.flags.append("black_segmentation")
            log.warning("Frame %d: reference black markers unusable (%s); next frame becomes the reference",
                        result.index, e)
            return False

        self.tracker.reset(pre.gray, black.centroids)
        result.markers.append(black)
        self.reference_black_count = len(black)
        result.black_count = len(black)
        result.tracked = self.tracker.alive.copy()
        result.cumulative = self.tracker.cumulative
        result.flow = FlowField(black.centroids.copy(), np.zeros_like(black.centroids), np.ones(len(black), dtype=bool))
        return True

    def _seed_pose(self, pre: Preprocessed, result: FrameResult) -> bool:
        try:
            pts = self._white_points(pre.gray, result)
        except DataError as e:
            result.flags.append("white_segmentation")
            log.warning("Frame %d: reference white markers unusable (%s); next frame becomes the reference",
                        result.index, e)
            return False

        if pts is not None:
            result.white_px = pts
            pose = self._solve_pose(pts, result)
            if pose is not None:
                self.reference_pose = pose
                self.reference_white = pts
                result.pose = pose
                result.delta = PoseDelta.zero()
                result.wrench = Wrench.zero()
        if self.reference_pose is None:
            log.warning("Reference frame has no usable platform pose; wrench disabled for this sequence")
        return True

    # ---------- public ----------
    def start(self, reference: Frame) -> Tuple[FrameResult, Preprocessed]:
        """
        Take the reference frame. A reference whose markers cannot be
        segmented is flagged and the next frame is used instead.
        """
        pre = preprocess(reference, self.grid, self.cfg.imageproc)
        result = FrameResult(reference.index)

        self._black_pending = not self._seed_black(pre, result)
        self._pose_pending = not self._seed_pose(pre, result)

        log.info(
            "Reference frame set | black=%d | white=%d | pose=%s",
            result.black_count, result.white_count, "ok" if self.reference_pose else "missing",
        )
        return result, pre

    def process(self, frame: Frame) -> Tuple[FrameResult, Preprocessed]:
        pre = preprocess(frame, self.grid, self.cfg.imageproc)
        result = FrameResult(frame.index)

        # black markers (flow)
        if self._black_pending:
            self._black_pending = not self._seed_black(pre, result)
            if not self._black_pending:
                result.flags.append("reference_reseeded")
        else:
            self._track_black(pre, result)

        # white markers (pose → wrench)
        if self._pose_pending:
            self._pose_pending = not self._seed_pose(pre, result)
            if not self._pose_pending and "reference_reseeded" not in result.flags:
                result.flags.append("reference_reseeded")
        else:
            try:
                self._intrinsic(pre, result)
            except DataError as e:
                result.flags.append("white_segmentation")
                log.warning("Frame %d: %s", frame.index, e)

        return result, pre

    def _track_black(self, pre: Preprocessed, result: FrameResult):
        try:
            black = extract_markers(pre.gray, BLACK, self.cfg.imageproc)
            result.markers.append(black)
            result.black_count = len(black)
            if len(black) != self.reference_black_count:
                result.flags.append("black_count")
                log.warning(
                    "Frame %d: %d black markers (reference %d)",
                    result.index, len(black), self.reference_black_count,
                )
        except DataError as e:
            result.flags.append("black_segmentation")
            log.warning("Frame %d: %s", result.index, e)

        alive_before = int(self.tracker.alive.sum())
        result.flow = self.tracker.update(pre.gray)
        result.tracked = self.tracker.alive.copy()
        result.cumulative = self.tracker.cumulative
        if int(result.tracked.sum()) < alive_before:
            result.flags.append("lost_tracks")


def _shape_job(processor: SequenceProcessor, pre: Preprocessed, result: FrameResult):
    try:
        hm = processor.shape(pre)
    except ConvergenceError as e:
        result.flags.append("shape_convergence")
        log.warning("Frame %d: %s", result.index, e)
        return
    result.height = hm
    result.contact_area = contact_area(hm, processor.cfg.shape.contact_threshold_mm)


def process_sequence(frames: List[Frame], cfg, stiffness: Optional[StiffnessMatrix] = None,
                     threads: int = 1, with_shape: bool = True, overlay: bool = False,
                     shape_indices: Optional[Iterable[int]] = None) -> SequenceResult:
    """
    Run the full per-frame pipeline over a sequence (frame 0 = F₀).

    Flow and pose run in frame order; shape recovery fans out over
    ``threads`` workers, limited to ``shape_indices`` when given.
    Results are in frame order either way.
    """
    if len(frames) < 2:
        raise DataError(f"need at least 2 frames, got {len(frames)}")
    wanted = None if shape_indices is None else {int(k) for k in shape_indices}

    proc = SequenceProcessor(cfg, stiffness)
    results: List[FrameResult] = []
    overlays: List[Frame] = []

    pool = ThreadPoolExecutor(max_workers=threads) if with_shape and threads > 1 else None
    pending = []
    try:
        for k, frame in enumerate(frames):
            result, pre = proc.start(frame) if k == 0 else proc.process(frame)
            results.append(result)

            if with_shape and (wanted is None or k in wanted):
                if pool is not None:
                    pending.append(pool.submit(_shape_job, proc, pre, result))
                else:
                    _shape_job(proc, pre, result)

            if overlay:
                overlays.append(render_overlay(
                    pre.undistorted, cfg.overlay,
                    proc.tracker.reference_points, result.cumulative,
                    result.tracked if result.tracked is not None else np.zeros(0, dtype=bool),
                    proc.reference_white, result.white_px, result.pose, proc.intr,
                ))
        for fut in pending:
            fut.result()
    finally:
        if pool is not None:
            pool.shutdown(wait=True)

    flagged = sum(1 for r in results if r.flags)
    log.info("Processed %d frames (%d flagged)", len(results), flagged)
    return SequenceResult(results, proc.reference_pose, overlays)
