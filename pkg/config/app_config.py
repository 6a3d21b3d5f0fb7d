# config/app_config.py
"""
Application Configuration
-------------------------
- Loads defaults from config.json (repository root)
- Merges an optional user config file over the defaults
- Applies command-line overrides (flags win)
- Rejects unknown keys and range-checks every value

Every pipeline stage receives one frozen PipelineConfig.
"""

import copy
import json
import logging
import os
import re
from dataclasses import dataclass, fields, is_dataclass
from typing import Any, Dict, Optional, Tuple

from backend.errors import ConfigError

log = logging.getLogger(__name__)

# ==================================================
# Paths
# ==================================================

CONFIG_DIR = os.path.dirname(__file__)
CONFIG_FILE = os.path.join(CONFIG_DIR, "..", "config.json")


# ==================================================
# Load Defaults
# ==================================================

def _load_config():
    if not os.path.exists(CONFIG_FILE):
        log.error(f"Config file not found: {CONFIG_FILE}")
        return {}
    try:
        with open(CONFIG_FILE, "r", encoding="utf-8") as f:
            return json.load(f)
    except Exception as e:
        log.error(f"Failed to load config.json: {e}")
        return {}

config = _load_config()

# ==================================================
# Application Information
# ==================================================

APP_NAME = "Dome Tactile Perception"
VERSION = "1.0.0"
CONFIG_VERSION = "1.0"


# ==================================================
# Logging Configuration
# ==================================================

LOG_LEVEL = config.get("app", {}).get("log_level", "INFO")

LOG_FORMAT = "%(asctime)s | %(levelname)s | %(name)s: %(message)s"
LOG_DATE_FORMAT = "%Y-%m-%d %H:%M:%S"

LOGS_DIR = config.get("paths", {}).get("log_dir", "logs")


# ==================================================
# Sections
# ==================================================

@dataclass(frozen=True)
class PathsConfig:
    out_dir: str = "out"
    log_dir: str = "logs"


@dataclass(frozen=True)
class CameraConfig:
    width: int = 480
    height: int = 480
    fx: float = 320.0
    fy: float = 320.0
    cx: float = 240.0
    cy: float = 240.0
    distortion: Tuple[float, ...] = (0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class DomeConfig:
    radius: float = 10.0
    center: Tuple[float, ...] = (0.0, 0.0, 26.0)
    fov: float = 160.0


@dataclass(frozen=True)
class PatternConfig:
    grid_step: float = 32.0
    dot_radius_mm: float = 0.4


@dataclass(frozen=True)
class ImageprocConfig:
    blur_sigma: float = 1.0
    sharpen_amount: float = 1.0
    sharpen_sigma: float = 1.5
    t_low: int = 70
    t_high: int = 200
    min_area: float = 4.0
    max_area: float = 400.0
    kernel_radius: int = 1
    max_markers: int = 400


@dataclass(frozen=True)
class FlowConfig:
    window: int = 21
    levels: int = 3
    max_iters: int = 30
    eps: float = 0.01
    min_eig: float = 1e-4


@dataclass(frozen=True)
class PoseConfig:
    markers: Tuple[Tuple[float, ...], ...] = (
        (-6.0, -6.0, 0.0), (6.0, -6.0, 0.0), (6.0, 6.0, 0.0), (-6.0, 6.0, 0.0),
    )
    rest_translation: Tuple[float, ...] = (0.0, 0.0, 14.0)
    rest_euler_deg: Tuple[float, ...] = (0.0, 0.0, 180.0)
    white_radius_mm: float = 0.4
    lm_damping: float = 1e-3
    lm_factor: float = 10.0
    lm_max_iters: int = 100
    lm_step_tol: float = 1e-10


@dataclass(frozen=True)
class WrenchConfig:
    f_max: float = 17.0
    stiffness_file: Optional[str] = None
    spring_count: int = 6
    spring_circle_radius: float = 7.0
    wire_diameter: float = 0.3
    coil_diameter: float = 3.0
    active_coils: float = 4.0
    shear_modulus: float = 79300.0
    shear_ratio: float = 0.3


@dataclass(frozen=True)
class ShapeConfig:
    light_elevation_deg: float = 70.0
    light_azimuths_deg: Tuple[float, ...] = (90.0, 210.0, 330.0)
    gains: Tuple[float, ...] = (120.0, 120.0, 120.0)
    ambient: Tuple[float, ...] = (20.0, 20.0, 20.0)
    saturation: int = 250
    min_norm: float = 0.1
    invalid_dilation: int = 3
    fill_radius: int = 3
    omega: float = 1.9
    tolerance: float = 1e-8
    max_sweeps: int = 20000
    stride: int = 4
    contact_threshold_mm: float = 0.02


@dataclass(frozen=True)
class SimConfig:
    noise_sigma: float = 0.0
    jitter_px: float = 0.0
    seed: int = 0
    supersample: int = 4
    deformation_gain: float = 0.3
    spread: float = 1.5
    soft_compliance: float = 0.5
    hard_compliance: float = 0.005
    contact_stiffness: float = 4.0


@dataclass(frozen=True)
class HardnessConfig:
    pooling: str = "mean"
    learning_rate: float = 1e-3
    epochs: int = 300
    seed: int = 0
    train_fraction: float = 0.8
    sequences: int = 500
    frames_per_sequence: int = 60


@dataclass(frozen=True)
class OverlayConfig:
    enabled: bool = True
    flow_scale: float = 3.0
    pose_scale: float = 20.0
    axis_length_mm: float = 4.0


@dataclass(frozen=True)
class AppConfig:
    log_level: str = "INFO"
    threads: int = 1


@dataclass(frozen=True)
class PipelineConfig:
    version: str = CONFIG_VERSION
    paths: PathsConfig = PathsConfig()
    camera: CameraConfig = CameraConfig()
    dome: DomeConfig = DomeConfig()
    pattern: PatternConfig = PatternConfig()
    imageproc: ImageprocConfig = ImageprocConfig()
    flow: FlowConfig = FlowConfig()
    pose: PoseConfig = PoseConfig()
    wrench: WrenchConfig = WrenchConfig()
    shape: ShapeConfig = ShapeConfig()
    sim: SimConfig = SimConfig()
    hardness: HardnessConfig = HardnessConfig()
    overlay: OverlayConfig = OverlayConfig()
    app: AppConfig = AppConfig()


# ==================================================
# Range Rules (dotted key → predicate, description)
# ==================================================

def _positive(v):
    return v > 0


def _non_negative(v):
    return v >= 0


_RULES = {
    "camera.width": (_positive, "> 0"),
    "camera.height": (_positive, "> 0"),
    "camera.fx": (_positive, "> 0"),
    "camera.fy": (_positive, "> 0"),
    "camera.distortion": (lambda v: len(v) == 5, "five coefficients (k1, k2, p1, p2, k3)"),
    "dome.radius": (_positive, "> 0"),
    "dome.center": (lambda v: len(v) == 3, "a 3-vector"),
    "dome.fov": (lambda v: 0 < v < 180, "in (0, 180)"),
    "pattern.grid_step": (lambda v: v >= 2, ">= 2"),
    "pattern.dot_radius_mm": (_positive, "> 0"),
    "imageproc.blur_sigma": (_positive, "> 0"),
    "imageproc.sharpen_amount": (_non_negative, ">= 0"),
    "imageproc.sharpen_sigma": (_positive, "> 0"),
    "imageproc.t_low": (lambda v: 0 <= v <= 255, "in [0, 255]"),
    "imageproc.t_high": (lambda v: 0 <= v <= 255, "in [0, 255]"),
    "imageproc.min_area": (_non_negative, ">= 0"),
    "imageproc.max_area": (_positive, "> 0"),
    "imageproc.kernel_radius": (_non_negative, ">= 0"),
    "imageproc.max_markers": (_positive, "> 0"),
    "flow.window": (lambda v: v >= 3 and v % 2 == 1, "odd and >= 3"),
    "flow.levels": (lambda v: v >= 1, ">= 1"),
    "flow.max_iters": (lambda v: v >= 1, ">= 1"),
    "flow.eps": (_positive, "> 0"),
    "flow.min_eig": (_non_negative, ">= 0"),
    "pose.markers": (lambda v: len(v) == 4 and all(len(p) == 3 for p in v), "four 3-vectors"),
    "pose.rest_translation": (lambda v: len(v) == 3 and v[2] > 0, "a 3-vector in front of the camera"),
    "pose.rest_euler_deg": (lambda v: len(v) == 3, "a 3-vector"),
    "pose.white_radius_mm": (_positive, "> 0"),
    "pose.lm_damping": (_positive, "> 0"),
    "pose.lm_factor": (lambda v: v > 1, "> 1"),
    "pose.lm_max_iters": (lambda v: v >= 1, ">= 1"),
    "pose.lm_step_tol": (_positive, "> 0"),
    "wrench.f_max": (_positive, "> 0"),
    "wrench.spring_count": (lambda v: v >= 3, ">= 3"),
    "wrench.spring_circle_radius": (_positive, "> 0"),
    "wrench.wire_diameter": (_positive, "> 0"),
    "wrench.coil_diameter": (_positive, "> 0"),
    "wrench.active_coils": (_positive, "> 0"),
    "wrench.shear_modulus": (_positive, "> 0"),
    "wrench.shear_ratio": (_positive, "> 0"),
    "shape.light_elevation_deg": (lambda v: 0 < v <= 90, "in (0, 90]"),
    "shape.light_azimuths_deg": (lambda v: len(v) == 3, "three angles"),
    "shape.gains": (lambda v: len(v) == 3 and all(g > 0 for g in v), "three positive gains"),
    "shape.ambient": (lambda v: len(v) == 3 and all(a >= 0 for a in v), "three non-negative levels"),
    "shape.saturation": (lambda v: 0 < v <= 255, "in (0, 255]"),
    "shape.min_norm": (_non_negative, ">= 0"),
    "shape.invalid_dilation": (_non_negative, ">= 0"),
    "shape.fill_radius": (_non_negative, ">= 0"),
    "shape.omega": (lambda v: 0 < v < 2, "in (0, 2)"),
    "shape.tolerance": (_positive, "> 0"),
    "shape.max_sweeps": (lambda v: v >= 1, ">= 1"),
    "shape.stride": (lambda v: v >= 1, ">= 1"),
    "shape.contact_threshold_mm": (_non_negative, ">= 0"),
    "sim.noise_sigma": (_non_negative, ">= 0"),
    "sim.jitter_px": (_non_negative, ">= 0"),
    "sim.seed": (_non_negative, ">= 0"),
    "sim.supersample": (lambda v: v >= 1, ">= 1"),
    "sim.deformation_gain": (_non_negative, ">= 0"),
    "sim.spread": (_positive, "> 0"),
    "sim.soft_compliance": (_non_negative, ">= 0"),
    "sim.hard_compliance": (_non_negative, ">= 0"),
    "sim.contact_stiffness": (_positive, "> 0"),
    "hardness.pooling": (lambda v: v in ("mean", "last5"), "'mean' or 'last5'"),
    "hardness.learning_rate": (_non_negative, ">= 0"),
    "hardness.epochs": (_non_negative, ">= 0"),
    "hardness.seed": (_non_negative, ">= 0"),
    "hardness.train_fraction": (lambda v: 0 < v < 1, "in (0, 1)"),
    "hardness.sequences": (lambda v: v >= 2, ">= 2"),
    "hardness.frames_per_sequence": (lambda v: v >= 10, ">= 10"),
    "overlay.flow_scale": (_positive, "> 0"),
    "overlay.pose_scale": (_positive, "> 0"),
    "overlay.axis_length_mm": (_positive, "> 0"),
    "app.log_level": (lambda v: v in ("DEBUG", "INFO", "WARNING", "ERROR"), "a logging level name"),
    "app.threads": (lambda v: v >= 1, ">= 1"),
}


# ==================================================
# Loader
# ==================================================

def _line_of(text: Optional[str], key: str) -> Optional[int]:
    """
    Best-effort source line of the last component of a dotted key.
    """
    if not text:
        return None
    leaf = key.split(".")[-1]
    m = re.search(r'"%s"\s*:' % re.escape(leaf), text)
    if not m:
        return None
    return text.count("\n", 0, m.start()) + 1


def _merge(base: dict, user: dict, prefix: str, text: Optional[str]) -> dict:
    out = copy.deepcopy(base)
    for key, value in user.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigError("unknown key", key=dotted, line=_line_of(text, dotted))
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError("expected an object", key=dotted, line=_line_of(text, dotted))
            out[key] = _merge(base[key], value, dotted + ".", text)
        else:
            out[key] = value
    return out


def _coerce(value: Any, default: Any, key: str, text: Optional[str]):
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or float(value) != int(value):
                raise TypeError
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if isinstance(default, tuple):
            if default and isinstance(default[0], tuple):
                return tuple(tuple(float(x) for x in row) for row in value)
            return tuple(float(x) for x in value)
        if default is None or isinstance(default, str):
            return None if value is None else str(value)
    except (TypeError, ValueError):
        pass
    raise ConfigError(f"invalid value {value!r}", key=key, line=_line_of(text, key))


def _build(cls, data: dict, prefix: str, text: Optional[str]):
    kwargs = {}
    for f in fields(cls):
        default = f.default
        dotted = f"{prefix}{f.name}"
        if is_dataclass(default):
            kwargs[f.name] = _build(type(default), data.get(f.name, {}), dotted + ".", text)
            continue
        value = data.get(f.name, default)
        value = _coerce(value, default, dotted, text)
        rule = _RULES.get(dotted)
        if rule and not rule[0](value):
            raise ConfigError(f"value {value!r} must be {rule[1]}", key=dotted, line=_line_of(text, dotted))
        kwargs[f.name] = value
    return cls(**kwargs)


def _defaults_dict() -> dict:
    return config_to_dict(PipelineConfig())


def config_to_dict(cfg) -> dict:
    """
    Plain (JSON-ready) dict of a config dataclass tree.
    """
    out = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if is_dataclass(value):
            out[f.name] = config_to_dict(value)
        elif isinstance(value, tuple):
            out[f.name] = [list(v) if isinstance(v, tuple) else v for v in value]
        else:
            out[f.name] = value
    return out


def _apply_override(data: dict, dotted: str, value: Any):
    node = data
    parts = dotted.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError("unknown override", key=dotted)
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError("unknown override", key=dotted)
    node[parts[-1]] = value


def load_pipeline_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    """
    Build the pipeline config.

    Layers (later wins): dataclass defaults → root config.json →
    user file at ``path`` → ``overrides`` (dotted keys, e.g. "sim.seed").
    """
    data = _merge(_defaults_dict(), config, "", None) if config else _defaults_dict()
    text = None

    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
        try:
            user = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed JSON: {e.msg}", line=e.lineno) from e
        if not isinstance(user, dict):
            raise ConfigError("top level must be an object", line=1)
        data = _merge(data, user, "", text)

    for key, value in (overrides or {}).items():
        if value is not None:
            _apply_override(data, key, value)

    major = str(data.get("version", "")).split(".")[0]
    if major != CONFIG_VERSION.split(".")[0]:
        raise ConfigError(
            f"unsupported config version {data.get('version')!r}",
            key="version",
            line=_line_of(text, "version"),
        )

    cfg = _build(PipelineConfig, data, "", text)

    if cfg.imageproc.t_low >= cfg.imageproc.t_high:
        raise ConfigError("t_low must be below t_high", key="imageproc.t_low", line=_line_of(text, "t_low"))
    if cfg.imageproc.min_area > cfg.imageproc.max_area:
        raise ConfigError("min_area exceeds max_area", key="imageproc.min_area", line=_line_of(text, "min_area"))
    if not (0 <= cfg.camera.cx < cfg.camera.width and 0 <= cfg.camera.cy < cfg.camera.height):
        raise ConfigError("principal point outside the image", key="camera.cx")

    log.debug("Pipeline config loaded (version %s, user file %s)", cfg.version, path)
    return cfg
