# ======================================================
# backend/overlay.py
# Processed-frame overlay
#
# - yellow arrows: black-marker movement from the reference frame
# - red arrows:    white-marker movement from the reference frame
# - RGB axes:      platform coordinate frame at the current pose
# ======================================================

import logging
from typing import Optional

import numpy as np
from PIL import Image, ImageDraw

from backend.camera import CameraIntrinsics, DistortionCoefficients, project
from backend.errors import ProjectionDomainError
from backend.imageproc import Frame
from backend.pose import Pose6D

log = logging.getLogger(__name__)

YELLOW = (255, 220, 0)
RED = (255, 40, 40)
AXIS_COLORS = ((255, 0, 0), (0, 200, 0), (0, 80, 255))

HEAD_LEN = 5.0
HEAD_ANGLE = np.radians(25.0)


def draw_arrow(draw: ImageDraw.ImageDraw, start, end, color, width: int = 1):
    x0, y0 = float(start[0]), float(start[1])
    x1, y1 = float(end[0]), float(end[1])
    draw.line([(x0, y0), (x1, y1)], fill=color, width=width)

    length = np.hypot(x1 - x0, y1 - y0)
    if length < 1e-6:
        return
    ang = np.arctan2(y1 - y0, x1 - x0)
    head = min(HEAD_LEN, 0.5 * length)
    for side in (-1, 1):
        a = ang + np.pi + side * HEAD_ANGLE
        draw.line([(x1, y1), (x1 + head * np.cos(a), y1 + head * np.sin(a))], fill=color, width=width)


def render_overlay(frame: Frame, ocfg,
                   black_origins: np.ndarray, black_displacement: np.ndarray, black_status: np.ndarray,
                   white_reference: Optional[np.ndarray] = None,
                   white_current: Optional[np.ndarray] = None,
                   pose: Optional[Pose6D] = None,
                   intr: Optional[CameraIntrinsics] = None) -> Frame:
    """Draw the arrows and axes onto a copy of ``frame``."""
    im = Image.fromarray(np.ascontiguousarray(frame.pixels))
    draw = ImageDraw.Draw(im)

    for o, d, ok in zip(black_origins, black_displacement, black_status):
        if ok:
            draw_arrow(draw, o, o + ocfg.flow_scale * d, YELLOW)

    if white_reference is not None and white_current is not None:
        for r, c in zip(white_reference, white_current):
            draw_arrow(draw, r, r + ocfg.pose_scale * (c - r), RED, width=2)

    if pose is not None and intr is not None:
        axes = np.vstack([np.zeros(3), ocfg.axis_length_mm * np.eye(3)])
        try:
            px = project(pose.transform(axes), intr, DistortionCoefficients())
        except ProjectionDomainError:
            log.debug("Frame %d: platform axes behind the camera, not drawn", frame.index)
        else:
            for k, color in enumerate(AXIS_COLORS):
                draw.line([tuple(px[0]), tuple(px[k + 1])], fill=color, width=2)

    return Frame(np.asarray(im, dtype=np.uint8).copy(), frame.index)
