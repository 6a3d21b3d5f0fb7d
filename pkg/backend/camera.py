# ======================================================
# backend/camera.py
# Pinhole camera with 5-coefficient Brown–Conrady distortion
#
# - project / undistort_points
# - destination-indexed undistortion remap
# - dome dot pattern that images as a uniform pixel grid
# ======================================================

import logging
from dataclasses import dataclass, field
from typing import Tuple

import cv2
import numpy as np

from backend.errors import ConfigError, DimensionMismatchError, ProjectionDomainError
from backend.imageproc import Frame

log = logging.getLogger(__name__)


# ======================================================
# TYPES
# ======================================================

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("focal lengths must be positive", key="camera.fx")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError("principal point outside the image", key="camera.cx")

    @classmethod
    def from_config(cls, cam) -> "CameraIntrinsics":
        return cls(cam.fx, cam.fy, cam.cx, cam.cy, int(cam.width), int(cam.height))

    @property
    def K(self) -> np.ndarray:
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])


@dataclass(frozen=True)
class DistortionCoefficients:
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    k3: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite(self.as_tuple())):
            raise ConfigError("distortion coefficients must be finite", key="camera.distortion")

    @classmethod
    def from_config(cls, cam) -> "DistortionCoefficients":
        k1, k2, p1, p2, k3 = cam.distortion
        return cls(k1, k2, p1, p2, k3)

    def as_tuple(self) -> Tuple[float, float, float, float, float]:
        return (self.k1, self.k2, self.p1, self.p2, self.k3)

    @property
    def is_zero(self) -> bool:
        return not any(self.as_tuple())


@dataclass(frozen=True)
class DomeGeometry:
    radius: float = 10.0
    center: Tuple[float, float, float] = (0.0, 0.0, 26.0)
    fov: float = 160.0

    def __post_init__(self):
        if self.radius <= 0:
            raise ConfigError("dome radius must be positive", key="dome.radius")
        if not 0 < self.fov < 180:
            raise ConfigError("fov must be in (0, 180)", key="dome.fov")
        if self.apex[2] <= 0:
            raise ConfigError("dome apex must lie in front of the camera", key="dome.center")

    @classmethod
    def from_config(cls, dome) -> "DomeGeometry":
        return cls(dome.radius, tuple(dome.center), dome.fov)

    @property
    def center_array(self) -> np.ndarray:
        return np.asarray(self.center, dtype=float)

    @property
    def apex(self) -> np.ndarray:
        """Point of the sphere nearest to the camera."""
        c = self.center_array
        return c - self.radius * c / np.linalg.norm(c)


@dataclass(frozen=True)
class DotPattern:
    dots3d: np.ndarray            # (N, 3) mm
    dots2d: np.ndarray            # (N, 2) px
    grid_ij: np.ndarray           # (N, 2) integer grid offsets from the principal point
    neighbors: np.ndarray         # (M, 2) indices of grid-adjacent dots
    neighbor_arcs: np.ndarray     # (M,) geodesic arc length mm

    def __len__(self):
        return len(self.dots3d)


# ======================================================
# PROJECTION
# ======================================================

def distort_normalized(x, y, dist: DistortionCoefficients):
    """
    Apply Brown–Conrady distortion to normalized image coordinates.
    """
    k1, k2, p1, p2, k3 = dist.as_tuple()
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2 + k3 * r2 * r2 * r2
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    return xd, yd


def project(p, intr: CameraIntrinsics, dist: DistortionCoefficients) -> np.ndarray:
    """
    Project camera-frame points (mm) to pixels.

    Accepts a single 3-vector or an (N, 3) array.
    """
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    pts = p.reshape(-1, 3)

    if np.any(pts[:, 2] <= 0):
        raise ProjectionDomainError("point has non-positive depth")

    x = pts[:, 0] / pts[:, 2]
    y = pts[:, 1] / pts[:, 2]
    xd, yd = distort_normalized(x, y, dist)
    uv = np.stack([intr.fx * xd + intr.cx, intr.fy * yd + intr.cy], axis=1)
    return uv[0] if single else uv


def undistort_points(pixels, intr: CameraIntrinsics, dist: DistortionCoefficients,
                     iters: int = 50, tol: float = 1e-15) -> np.ndarray:
    """
    Ideal (distortion-free) pixel positions of distorted pixels.

    Fixed-point inversion of the forward model; exact for zero distortion.
    """
    uv = np.asarray(pixels, dtype=float)
    single = uv.ndim == 1
    uv = uv.reshape(-1, 2)

    xd = (uv[:, 0] - intr.cx) / intr.fx
    yd = (uv[:, 1] - intr.cy) / intr.fy

    if dist.is_zero:
        x, y = xd, yd
    else:
        k1, k2, p1, p2, k3 = dist.as_tuple()
        x, y = xd.copy(), yd.copy()
        for _ in range(iters):
            r2 = x * x + y * y
            radial = 1.0 + k1 * r2 + k2 * r2 * r2 + k3 * r2 * r2 * r2
            dx = 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
            dy = p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
            x_new = (xd - dx) / radial
            y_new = (yd - dy) / radial
            step = np.max(np.abs(x_new - x) + np.abs(y_new - y)) if len(x) else 0.0
            x, y = x_new, y_new
            if step < tol:
                break

    out = np.stack([intr.fx * x + intr.cx, intr.fy * y + intr.cy], axis=1)
    return out[0] if single else out


def pixel_rays(pixels, intr: CameraIntrinsics) -> np.ndarray:
    """Ideal viewing rays (z = 1) through ideal pixel positions."""
    uv = np.asarray(pixels, dtype=float).reshape(-1, 2)
    return np.stack([
        (uv[:, 0] - intr.cx) / intr.fx,
        (uv[:, 1] - intr.cy) / intr.fy,
        np.ones(len(uv)),
    ], axis=1)


def ray_sphere_intersect(rays: np.ndarray, dome: DomeGeometry):
    """
    Nearest intersection of camera rays with the dome sphere.

    Returns (points (N, 3), hit (N,) bool). Missed rays get NaN points.
    """
    d = np.asarray(rays, dtype=float).reshape(-1, 3)
    c = dome.center_array
    a = np.einsum("ij,ij->i", d, d)
    b = d @ c
    disc = b * b - a * (c @ c - dome.radius ** 2)
    hit = disc >= 0
    t = np.full(len(d), np.nan)
    t[hit] = (b[hit] - np.sqrt(disc[hit])) / a[hit]
    hit &= t > 0
    t[~hit] = np.nan
    return d * t[:, None], hit


def silhouette_mask(intr: CameraIntrinsics, dome: DomeGeometry) -> np.ndarray:
    """Boolean (H, W) mask of ideal pixels whose ray meets the dome."""
    vv, uu = np.mgrid[0:intr.height, 0:intr.width]
    rays = pixel_rays(np.stack([uu.ravel(), vv.ravel()], axis=1), intr)
    _, hit = ray_sphere_intersect(rays, dome)
    return hit.reshape(intr.height, intr.width)


def geodesic_arc(a: np.ndarray, b: np.ndarray, dome: DomeGeometry) -> np.ndarray:
    """Great-circle distance (mm) between points on the dome sphere."""
    c = dome.center_array
    u = np.atleast_2d(a) - c
    v = np.atleast_2d(b) - c
    cos = np.einsum("ij,ij->i", u, v) / dome.radius ** 2
    return dome.radius * np.arccos(np.clip(cos, -1.0, 1.0))


# ======================================================
# UNDISTORTION REMAP
# ======================================================

@dataclass(frozen=True)
class RemapGrid:
    """
    Destination-indexed remap: for every destination pixel the
    (distorted) source location. Sources outside the image read 0.
    """
    width: int
    height: int
    map_x: np.ndarray
    map_y: np.ndarray
    out_of_bounds: np.ndarray
    _maps: tuple = field(repr=False, compare=False, default=())

    @classmethod
    def build(cls, map_x: np.ndarray, map_y: np.ndarray) -> "RemapGrid":
        h, w = map_x.shape
        oob = (map_x < 0) | (map_x > w - 1) | (map_y < 0) | (map_y > h - 1)
        maps = (map_x.astype(np.float32), map_y.astype(np.float32))

        for arr in (map_x, map_y, oob):
            arr.setflags(write=False)
        return cls(w, h, map_x, map_y, oob, maps)

    def sample(self, image: np.ndarray) -> np.ndarray:
        """
        Bilinear sampling of an (H, W) or (H, W, C) array through the map.
        8-bit input stays 8-bit; anything else comes back as float32.
        """
        if image.dtype != np.uint8:
            image = image.astype(np.float32)
        mx, my = self._maps
        out = cv2.remap(image, mx, my, cv2.INTER_LINEAR,
                        borderMode=cv2.BORDER_CONSTANT, borderValue=0)
        out[self.out_of_bounds] = 0
        return out


def undistort_map(intr: CameraIntrinsics, dist: DistortionCoefficients) -> RemapGrid:
    """
    For each destination (ideal) pixel, the distorted source location
    given by the forward model applied to its normalized coordinates.
    """
    vv, uu = np.mgrid[0:intr.height, 0:intr.width].astype(float)

    if dist.is_zero:
        return RemapGrid.build(uu, vv)

    x = (uu - intr.cx) / intr.fx
    y = (vv - intr.cy) / intr.fy
    xd, yd = distort_normalized(x, y, dist)
    grid = RemapGrid.build(intr.fx * xd + intr.cx, intr.fy * yd + intr.cy)

    log.debug(
        "Undistort map built %dx%d (%d out-of-bounds sources)",
        intr.width, intr.height, int(grid.out_of_bounds.sum()),
    )
    return grid


def undistort_frame(frame: Frame, grid: RemapGrid) -> Frame:
    if (frame.width, frame.height) != (grid.width, grid.height):
        raise DimensionMismatchError(
            f"frame {frame.width}x{frame.height} does not match map {grid.width}x{grid.height}"
        )
    return Frame(grid.sample(frame.pixels), frame.index)


# ======================================================
# DOME PATTERN
# ======================================================

def generate_dome_pattern(intr: CameraIntrinsics, dist: DistortionCoefficients,
                          dome: DomeGeometry, grid_step: float) -> DotPattern:
    """
    Dots on the dome that image onto a uniform pixel grid.

    Grid nodes sit at (cx + i*step, cy + j*step). Each node's ideal ray
    is intersected with the sphere (near side); nodes whose ray misses
    are skipped.
    """
    if grid_step < 2:
        raise ConfigError("grid_step must be at least 2 px", key="pattern.grid_step")
    if grid_step > max(intr.width, intr.height):
        log.warning("grid_step %.1f px exceeds the image; pattern is empty", grid_step)
        return DotPattern(np.zeros((0, 3)), np.zeros((0, 2)), np.zeros((0, 2), dtype=int),
                          np.zeros((0, 2), dtype=np.intp), np.zeros(0))

    i_lo = -int(np.floor(intr.cx / grid_step))
    i_hi = int(np.floor((intr.width - 1 - intr.cx) / grid_step))
    j_lo = -int(np.floor(intr.cy / grid_step))
    j_hi = int(np.floor((intr.height - 1 - intr.cy) / grid_step))

    jj, ii = np.mgrid[j_lo:j_hi + 1, i_lo:i_hi + 1]
    ij = np.stack([ii.ravel(), jj.ravel()], axis=1)
    nodes = np.stack([intr.cx + ij[:, 0] * grid_step, intr.cy + ij[:, 1] * grid_step], axis=1)

    ideal = undistort_points(nodes, intr, dist)
    points, hit = ray_sphere_intersect(pixel_rays(ideal, intr), dome)

    ij, nodes, points = ij[hit], nodes[hit], points[hit]

    # Grid adjacency (right and down neighbours)
    lookup = {(int(a), int(b)): n for n, (a, b) in enumerate(ij)}
    pairs = []
    for n, (a, b) in enumerate(ij):
        for da, db in ((1, 0), (0, 1)):
            m = lookup.get((int(a) + da, int(b) + db))
            if m is not None:
                pairs.append((n, m))
    neighbors = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
    arcs = geodesic_arc(points[neighbors[:, 0]], points[neighbors[:, 1]], dome) if len(neighbors) else np.zeros(0)

    log.info(
        "Dome pattern generated | step=%.1f px | dots=%d | arcs %.3f–%.3f mm",
        grid_step, len(points),
        float(arcs.min()) if len(arcs) else 0.0,
        float(arcs.max()) if len(arcs) else 0.0,
    )

    return DotPattern(points, nodes, ij, neighbors, arcs)
