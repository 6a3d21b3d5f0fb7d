# backend/simulator.py
"""
Synthetic Dome Sensor
---------------------
Renders camera frames of the dome sensor for a scripted contact
scenario, together with exact ground truth for every pipeline stage.

Per frame:
1. platform pose from the applied wrench (compliance S⁻¹·w)
2. white platform markers projected from the posed platform
3. elastomer height field from the indenter (softened by object hardness)
4. black dots advected by the tangential deformation field
5. Lambertian shading of the height field
6. anti-aliased discs (4×4 supersampling)
7. forward lens distortion
8. additive Gaussian noise, seeded per frame (seed ^ frame index)

Frames have no inter-frame state, so they render independently.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import List, Optional, Tuple

import numpy as np

from backend.camera import (
    CameraIntrinsics,
    DistortionCoefficients,
    DomeGeometry,
    DotPattern,
    RemapGrid,
    generate_dome_pattern,
    pixel_rays,
    project,
    ray_sphere_intersect,
    undistort_points,
)
from backend.imageproc import Frame
from backend.pose import PlatformModel, Pose6D
from backend.scenario import SOFT, ContactScenario, Indenter
from backend.shape import HeightMap, LightConfig, normals_from_height, render_shading
from backend.wrench import (
    PoseDelta,
    StiffnessMatrix,
    Wrench,
    apply_delta,
    default_stiffness,
    pose_from_wrench,
)

log = logging.getLogger(__name__)

BLACK_LEVEL = 10.0
WHITE_LEVEL = 255.0
BOX_FILLET_MM = 0.25


# ======================================================
# SENSOR MODEL
# ======================================================

@dataclass
class SensorModel:
    intr: CameraIntrinsics
    dist: DistortionCoefficients
    dome: DomeGeometry
    pattern: DotPattern
    platform: PlatformModel
    stiffness: StiffnessMatrix
    lights: LightConfig
    noise_sigma: float = 0.0
    jitter_px: float = 0.0
    seed: int = 0
    supersample: int = 4
    dot_radius_mm: float = 0.4
    white_radius_mm: float = 0.4
    deformation_gain: float = 0.3
    spread: float = 1.5
    soft_compliance: float = 0.5
    hard_compliance: float = 0.005
    f_max: float = 17.0

    @classmethod
    def from_config(cls, cfg, seed: Optional[int] = None) -> "SensorModel":
        intr = CameraIntrinsics.from_config(cfg.camera)
        dist = DistortionCoefficients.from_config(cfg.camera)
        dome = DomeGeometry.from_config(cfg.dome)
        return cls(
            intr=intr,
            dist=dist,
            dome=dome,
            pattern=generate_dome_pattern(intr, dist, dome, cfg.pattern.grid_step),
            platform=PlatformModel.from_config(cfg.pose),
            stiffness=default_stiffness(cfg.wrench),
            lights=LightConfig.from_config(cfg.shape),
            noise_sigma=cfg.sim.noise_sigma,
            jitter_px=cfg.sim.jitter_px,
            seed=cfg.sim.seed if seed is None else seed,
            supersample=cfg.sim.supersample,
            dot_radius_mm=cfg.pattern.dot_radius_mm,
            white_radius_mm=cfg.pose.white_radius_mm,
            deformation_gain=cfg.sim.deformation_gain,
            spread=cfg.sim.spread,
            soft_compliance=cfg.sim.soft_compliance,
            hard_compliance=cfg.sim.hard_compliance,
            f_max=cfg.wrench.f_max,
        )

    # ---------- cached geometry ----------
    @cached_property
    def surface(self) -> Tuple[np.ndarray, np.ndarray]:
        """(points (H, W, 3) mm, silhouette (H, W)) of the dome per ideal pixel."""
        vv, uu = np.mgrid[0:self.intr.height, 0:self.intr.width]
        rays = pixel_rays(np.stack([uu.ravel(), vv.ravel()], axis=1), self.intr)
        pts, hit = ray_sphere_intersect(rays, self.dome)
        shape = (self.intr.height, self.intr.width)
        return pts.reshape(shape + (3,)), hit.reshape(shape)

    @cached_property
    def pitch(self) -> float:
        """Height-map pitch: mm per pixel at the dome apex."""
        return float(self.dome.apex[2] / self.intr.fx)

    @cached_property
    def distortion_grid(self) -> Optional[RemapGrid]:
        """Output (distorted) pixel → ideal image location; None without distortion."""
        if self.dist.is_zero:
            return None
        vv, uu = np.mgrid[0:self.intr.height, 0:self.intr.width].astype(float)
        ideal = undistort_points(np.stack([uu.ravel(), vv.ravel()], axis=1), self.intr, self.dist)
        shape = (self.intr.height, self.intr.width)
        return RemapGrid.build(ideal[:, 0].reshape(shape), ideal[:, 1].reshape(shape))

    @cached_property
    def reference_dots(self) -> np.ndarray:
        """Undeformed black-dot centres in the ideal image."""
        return project(self.pattern.dots3d, self.intr, DistortionCoefficients()).reshape(-1, 2)

    def contact_compliance(self, sc: ContactScenario) -> float:
        if sc.compliance is not None:
            return sc.compliance
        return self.soft_compliance if sc.hardness == SOFT else self.hard_compliance


# ======================================================
# CONTACT FRAME (log / exp maps on the dome sphere)
# ======================================================

class ContactFrame:
    """
    Geodesic polar coordinates around the contact centre.

    log maps dome points to tangent-plane coordinates u (mm), with |u|
    the geodesic distance; exp is its inverse.
    """

    def __init__(self, dome: DomeGeometry, indenter: Indenter):
        self.center = dome.center_array
        self.radius = dome.radius

        apex_dir = -self.center / np.linalg.norm(self.center)
        e1 = np.array([1.0, 0.0, 0.0]) - apex_dir[0] * apex_dir
        if np.linalg.norm(e1) < 1e-9:
            e1 = np.array([0.0, 1.0, 0.0]) - apex_dir[1] * apex_dir
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(apex_dir, e1)

        th = np.radians(indenter.polar_deg)
        ph = np.radians(indenter.azimuth_deg)
        n = np.cos(th) * apex_dir + np.sin(th) * (np.cos(ph) * e1 + np.sin(ph) * e2)
        self.normal = n / np.linalg.norm(n)

        # tangent basis, rotated by the indenter axis
        t = e1 - (e1 @ self.normal) * self.normal
        if np.linalg.norm(t) < 1e-9:
            t = e2 - (e2 @ self.normal) * self.normal
        t /= np.linalg.norm(t)
        b = np.cross(self.normal, t)
        ax = np.radians(indenter.axis_deg)
        self.t1 = np.cos(ax) * t + np.sin(ax) * b
        self.t2 = np.cross(self.normal, self.t1)

    @property
    def point(self) -> np.ndarray:
        return self.center + self.radius * self.normal

    def log(self, points: np.ndarray) -> np.ndarray:
        w = (np.asarray(points, dtype=float).reshape(-1, 3) - self.center) / self.radius
        cos = np.clip(w @ self.normal, -1.0, 1.0)
        g = self.radius * np.arccos(cos)
        tang = w - cos[:, None] * self.normal
        tn = np.linalg.norm(tang, axis=1)
        safe = np.where(tn > 1e-15, tn, 1.0)
        u1 = np.where(tn > 1e-15, g * (tang @ self.t1) / safe, 0.0)
        u2 = np.where(tn > 1e-15, g * (tang @ self.t2) / safe, 0.0)
        return np.stack([u1, u2], axis=1)

    def exp(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float).reshape(-1, 2)
        g = np.linalg.norm(u, axis=1)
        ang = g / self.radius
        safe = np.where(g > 0, g, 1.0)
        direction = (u[:, :1] * self.t1 + u[:, 1:] * self.t2) / safe[:, None]
        w = np.cos(ang)[:, None] * self.normal + np.sin(ang)[:, None] * direction
        return self.center + self.radius * w


# ======================================================
# DEFORMATION MODEL
# ======================================================

def softening(model: SensorModel, sc: ContactScenario, k: int) -> float:
    """Dimensionless contact softening: compliance·|F| per mm."""
    return model.contact_compliance(sc) * float(np.linalg.norm(sc.wrenches[k, :3]))


def _smooth_edge(x: np.ndarray, edge: float, width: float) -> np.ndarray:
    t = np.clip((x - edge) / width, 0.0, 1.0)
    return 1.0 - t * t * (3.0 - 2.0 * t)


def indentation_profile(indenter: Indenter, u: np.ndarray, depth: float, soft: float) -> np.ndarray:
    """
    Surface height (mm, toward the camera) at contact coordinates u.

    A softer contact (larger ``soft``) spreads the indentation: radius
    grows by (1 + s)², peak depth shrinks by 1 / (1 + s).
    """
    u = np.asarray(u, dtype=float).reshape(-1, 2)
    if depth <= 0:
        return np.zeros(len(u))

    grow = 1.0 + soft
    if indenter.shape == "box":
        half = indenter.radius * grow
        d_eff = depth / grow
        w = BOX_FILLET_MM * grow
        return d_eff * _smooth_edge(np.abs(u[:, 0]), half, w) * _smooth_edge(np.abs(u[:, 1]), half, w)

    r_eff = indenter.radius * grow * grow
    d_eff = min(depth / grow, r_eff)
    dist = np.abs(u[:, 1]) if indenter.shape == "cylinder" else np.linalg.norm(u, axis=1)
    cap = np.sqrt(np.maximum(r_eff * r_eff - dist * dist, 0.0)) - (r_eff - d_eff)
    return np.maximum(cap, 0.0)


def tangential_displacement(model: SensorModel, indenter: Indenter, depth: float,
                            soft: float, points: np.ndarray) -> np.ndarray:
    """
    Tangential marker displacement (N, 2) mm in the contact frame's
    geodesic coordinates: radially outward from the contact centre with
    magnitude a·depth·exp(−(g/σ)²), σ = spread·radius·(1 + s),
    a = gain / (1 + s). Zero at the contact centre.
    """
    frame = ContactFrame(model.dome, indenter)
    u = frame.log(points)
    return radial_field(u, depth, soft, indenter.radius, model.deformation_gain, model.spread)


def radial_field(u: np.ndarray, depth: float, soft: float, radius: float,
                 gain: float, spread: float) -> np.ndarray:
    g = np.linalg.norm(u, axis=1)
    if depth <= 0:
        return np.zeros_like(u)
    sigma = spread * radius * (1.0 + soft)
    mag = gain / (1.0 + soft) * depth * np.exp(-(g / sigma) ** 2)
    safe = np.where(g > 0, g, 1.0)
    return np.where(g[:, None] > 0, u * (mag / safe)[:, None], 0.0)


# ======================================================
# GROUND TRUTH
# ======================================================

@dataclass
class FrameTruth:
    index: int
    wrench: Wrench
    delta: PoseDelta
    pose: Pose6D
    white_px: np.ndarray            # (4, 2) ideal image
    white_radius_px: np.ndarray     # (4,)
    black_px: np.ndarray            # (N, 2) ideal image
    black_displacement: np.ndarray  # (N, 2) px from frame 0
    black_radius_px: np.ndarray     # (N,)
    height: HeightMap
    softening: float = 0.0

    def contact_area(self, threshold_mm: float) -> float:
        return float((self.height.valid & (self.height.height > threshold_mm)).sum())

    def peak_height(self) -> float:
        return float(self.height.height.max()) if self.height.height.size else 0.0

    def features(self, threshold_mm: float) -> dict:
        """Per-frame hardness features, same keys as processed frame records."""
        disp = np.linalg.norm(self.black_displacement, axis=1).mean() if len(self.black_displacement) else 0.0
        return {
            "force_n": self.wrench.force_magnitude,
            "displacement_px": float(disp),
            "contact_area_px2": self.contact_area(threshold_mm),
        }

    def to_json(self, threshold_mm: float = 0.02) -> dict:
        return {
            "index": self.index,
            "features": self.features(threshold_mm),
            "wrench": self.wrench.to_json(),
            "delta": self.delta.to_json(),
            "pose": self.pose.to_json(),
            "white_px": self.white_px.tolist(),
            "peak_height_mm": self.peak_height(),
            "softening": self.softening,
        }


@dataclass
class GroundTruth:
    scenario: ContactScenario
    frames: List[FrameTruth] = field(default_factory=list)

    def __len__(self):
        return len(self.frames)

    def to_json(self, threshold_mm: float = 0.02) -> dict:
        return {
            "scenario": self.scenario.name,
            "hardness": self.scenario.hardness,
            "label": self.scenario.label,
            "frame_count": self.scenario.frames,
            "frames": [f.to_json(threshold_mm) for f in self.frames],
        }


def platform_pose(model: SensorModel, wrench: Wrench) -> Tuple[PoseDelta, Pose6D]:
    delta = pose_from_wrench(wrench, model.stiffness)
    return delta, apply_delta(model.platform.rest_pose, delta)


def frame_truth(model: SensorModel, sc: ContactScenario, k: int) -> FrameTruth:
    intr = model.intr
    ideal = DistortionCoefficients()

    wrench = Wrench.from_vector(sc.wrenches[k], model.f_max)
    delta, pose = platform_pose(model, wrench)

    cam_white = pose.transform(model.platform.s1)
    white_px = project(cam_white, intr, ideal)
    white_r = intr.fx * model.white_radius_mm / cam_white[:, 2]

    depth = float(sc.depths[k])
    soft = softening(model, sc, k)
    frame = ContactFrame(model.dome, sc.indenter)

    # black dots, advected along the surface
    dots = model.pattern.dots3d
    if len(dots) and depth > 0:
        u = frame.log(dots)
        u = u + radial_field(u, depth, soft, sc.indenter.radius, model.deformation_gain, model.spread)
        dots = frame.exp(u)
    black_px = project(dots, intr, ideal).reshape(-1, 2) if len(dots) else np.zeros((0, 2))
    black_r = intr.fx * model.dot_radius_mm / dots[:, 2] if len(dots) else np.zeros(0)

    # height field
    points, sil = model.surface
    height = np.zeros(sil.shape)
    if depth > 0:
        height[sil] = indentation_profile(sc.indenter, frame.log(points[sil]), depth, soft)
    hm = HeightMap(height, model.pitch, sil.copy(), 1)

    return FrameTruth(
        index=k,
        wrench=wrench,
        delta=delta,
        pose=pose,
        white_px=white_px,
        white_radius_px=white_r,
        black_px=black_px,
        black_displacement=black_px - model.reference_dots,
        black_radius_px=black_r,
        height=hm,
        softening=soft,
    )


# ======================================================
# RASTERIZATION
# ======================================================

def paint_discs(img: np.ndarray, centers: np.ndarray, radii: np.ndarray,
                level: float, supersample: int = 4):
    """
    Blend filled discs into img (H, W, C) in place. Pixel (u, v) covers
    [u − ½, u + ½] × [v − ½, v + ½]; coverage from ss×ss samples.
    """
    h, w = img.shape[:2]
    ss = int(supersample)
    off = (np.arange(ss) + 0.5) / ss - 0.5

    for (cx, cy), r in zip(np.asarray(centers, dtype=float), np.asarray(radii, dtype=float)):
        x0 = max(int(np.floor(cx - r - 1)), 0)
        x1 = min(int(np.ceil(cx + r + 1)), w - 1)
        y0 = max(int(np.floor(cy - r - 1)), 0)
        y1 = min(int(np.ceil(cy + r + 1)), h - 1)
        if x1 < x0 or y1 < y0:
            continue

        xs = (np.arange(x0, x1 + 1)[:, None] + off).ravel()
        ys = (np.arange(y0, y1 + 1)[:, None] + off).ravel()
        inside = (xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2 <= r * r
        cov = inside.reshape(y1 - y0 + 1, ss, x1 - x0 + 1, ss).mean(axis=(1, 3))

        patch = img[y0:y1 + 1, x0:x1 + 1]
        patch *= (1.0 - cov)[..., None]
        patch += (level * cov)[..., None]


def render_frame(model: SensorModel, sc: ContactScenario, k: int,
                 truth: Optional[FrameTruth] = None) -> Frame:
    gt = truth if truth is not None else frame_truth(model, sc, k)

    normals = normals_from_height(gt.height.height, model.pitch)
    img = render_shading(normals, model.lights)

    black_px, white_px = gt.black_px, gt.white_px
    if model.jitter_px > 0:
        # painted centres only; the truth keeps the exact positions
        jit = np.random.default_rng([int(model.seed), int(k), 1])
        black_px = black_px + jit.normal(0.0, model.jitter_px, size=black_px.shape)
        white_px = white_px + jit.normal(0.0, model.jitter_px, size=white_px.shape)

    paint_discs(img, black_px, gt.black_radius_px, BLACK_LEVEL, model.supersample)
    paint_discs(img, white_px, gt.white_radius_px, WHITE_LEVEL, model.supersample)

    if model.distortion_grid is not None:
        img = model.distortion_grid.sample(img).astype(float)

    if model.noise_sigma > 0:
        rng = np.random.default_rng(int(model.seed) ^ int(k))
        img = img + rng.normal(0.0, model.noise_sigma, size=img.shape)

    return Frame(np.clip(np.rint(img), 0, 255).astype(np.uint8), k)


def render_sequence(model: SensorModel, sc: ContactScenario,
                    threads: int = 1) -> Tuple[List[Frame], GroundTruth]:
    """
    Render every frame of the scenario. Output order and content do not
    depend on ``threads``.
    """
    saturated = [k for k in range(sc.frames) if np.linalg.norm(sc.wrenches[k, :3]) > model.f_max]
    if saturated:
        log.warning("Scenario %s: %d frame(s) exceed f_max=%.1f N", sc.name, len(saturated), model.f_max)

    def one(k):
        gt = frame_truth(model, sc, k)
        return render_frame(model, sc, k, gt), gt

    # warm shared caches before fanning out
    _ = model.surface, model.distortion_grid, model.reference_dots

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(sc.frames)))
    else:
        results = [one(k) for k in range(sc.frames)]

    frames = [r[0] for r in results]
    truth = GroundTruth(sc, [r[1] for r in results])
    log.info("Rendered %d frames for scenario %s (%s)", sc.frames, sc.name, sc.hardness)
    return frames, truth
