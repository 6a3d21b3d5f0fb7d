import logging
import os

import numpy as np

from backend.camera import CameraIntrinsics, DomeGeometry, silhouette_mask
from backend.errors import ConfigError, TactileError
from backend.imageproc import mask_region
from backend.pose import PlatformModel, project_model
from backend.shape import LightConfig
from backend.wrench import default_stiffness

log = logging.getLogger(__name__)


def check_camera(cfg):
    try:
        intr = CameraIntrinsics.from_config(cfg.camera)
        dome = DomeGeometry.from_config(cfg.dome)
    except TactileError as e:
        log.error("Camera/dome check FAILED: %s", e)
        return False
    if dome.apex[2] <= 0:
        log.error("Camera/dome check FAILED: dome apex is not in front of the camera")
        return False
    log.info("Camera check OK (%dx%d, f=%.1f)", intr.width, intr.height, intr.fx)
    return True


def check_pyramid(cfg):
    smallest = min(cfg.camera.width, cfg.camera.height) >> (cfg.flow.levels - 1)
    if smallest < cfg.flow.window:
        log.error(
            "Flow check FAILED: %d pyramid levels leave %d px, smaller than window %d",
            cfg.flow.levels, smallest, cfg.flow.window,
        )
        return False
    log.info("Flow check OK")
    return True


def check_lights(cfg):
    try:
        lights = LightConfig.from_config(cfg.shape)
    except TactileError as e:
        log.error("Light check FAILED: %s", e)
        return False
    log.info("Light check OK (cond=%.2f)", lights.condition_number)
    return True


def check_stiffness(cfg):
    try:
        s = default_stiffness(cfg.wrench)
    except TactileError as e:
        log.error("Stiffness check FAILED: %s", e)
        return False
    log.info("Stiffness check OK (cond=%.3g)", s.condition_number)
    return True


def check_dome_fov(cfg):
    """The whole dome, rim included, must lie inside the lens field of view."""
    try:
        dome = DomeGeometry.from_config(cfg.dome)
    except TactileError as e:
        log.error("Dome FOV check FAILED: %s", e)
        return False
    c = dome.center_array
    dist = float(np.linalg.norm(c))
    off_axis = np.degrees(np.arccos(c[2] / dist))
    half_angle = np.degrees(np.arcsin(min(dome.radius / dist, 1.0)))
    if off_axis + half_angle > dome.fov / 2.0:
        log.error(
            "Dome FOV check FAILED: dome spans %.1f° off axis, lens covers %.1f°",
            off_axis + half_angle, dome.fov / 2.0,
        )
        return False
    log.info("Dome FOV check OK (%.1f° of %.1f°)", off_axis + half_angle, dome.fov / 2.0)
    return True


def check_silhouette_in_frame(cfg):
    """No border pixel may see the dome."""
    try:
        intr = CameraIntrinsics.from_config(cfg.camera)
        dome = DomeGeometry.from_config(cfg.dome)
    except TactileError as e:
        log.error("Silhouette check FAILED: %s", e)
        return False
    sil = silhouette_mask(intr, dome)
    if not sil.any():
        log.error("Silhouette check FAILED: dome not visible")
        return False
    if sil[0].any() or sil[-1].any() or sil[:, 0].any() or sil[:, -1].any():
        log.error("Silhouette check FAILED: dome silhouette touches the frame border")
        return False
    log.info("Silhouette check OK (%d px)", int(sil.sum()))
    return True


def check_white_markers_in_mask(cfg, samples: int = 16):
    """Rest-pose platform discs must survive the circular frame mask."""
    try:
        intr = CameraIntrinsics.from_config(cfg.camera)
        platform = PlatformModel.from_config(cfg.pose)
    except TactileError as e:
        log.error("White marker check FAILED: %s", e)
        return False

    cam = platform.rest_pose.transform(platform.s1)
    if np.any(cam[:, 2] <= 0):
        log.error("White marker check FAILED: platform markers behind the camera")
        return False
    centers = project_model(platform, platform.rest_pose, intr)
    radii = intr.fx * cfg.pose.white_radius_mm / cam[:, 2]

    ang = np.linspace(0.0, 2.0 * np.pi, samples, endpoint=False)
    ring = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    rim = (centers[:, None, :] + radii[:, None, None] * ring[None, :, :]).reshape(-1, 2)
    px = np.rint(rim).astype(int)

    inside = mask_region(intr.width, intr.height)
    in_frame = (px[:, 0] >= 0) & (px[:, 0] < intr.width) & (px[:, 1] >= 0) & (px[:, 1] < intr.height)
    ok = in_frame.copy()
    ok[in_frame] = inside[px[in_frame, 1], px[in_frame, 0]]
    if not ok.all():
        bad = sorted({int(i) // samples for i in np.nonzero(~ok)[0]})
        log.error("White marker check FAILED: marker(s) %s cut by the circular mask", bad)
        return False
    log.info("White marker check OK")
    return True


def check_output(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        log.error("Output check FAILED: %s", e)
        return False
    if not os.access(path, os.W_OK):
        log.error("Output check FAILED: %s is not writable", path)
        return False
    return True


def run_startup_checks(cfg, out_dir=None):
    log.info("Running startup self-checks")

    results = {
        "camera": check_camera(cfg),
        "dome_fov": check_dome_fov(cfg),
        "silhouette": check_silhouette_in_frame(cfg),
        "white_markers": check_white_markers_in_mask(cfg),
        "flow": check_pyramid(cfg),
        "lights": check_lights(cfg),
        "stiffness": check_stiffness(cfg),
    }
    if out_dir is not None:
        results["output"] = check_output(out_dir)

    return results


def require_startup_checks(cfg, out_dir=None):
    """Raise ConfigError naming the failed checks."""
    results = run_startup_checks(cfg, out_dir)
    failed = [name for name, ok in results.items() if not ok]
    if failed:
        raise ConfigError(f"startup checks failed: {', '.join(failed)}")
    return results
