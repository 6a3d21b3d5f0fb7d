# ======================================================
# backend/scenario.py
# Contact scenarios for the synthetic sensor
#
# JSON schema (version 1):
#
# {
#   "schema_version": 1,
#   "name": "press-center",            optional
#   "frames": 30,
#   "hardness": "soft" | "hard",
#   "compliance": 0.5,                 optional, mm/N (default per class)
#   "indenter": {
#     "shape": "sphere" | "cylinder" | "box",
#     "radius": 5.0,                   mm (sphere/cylinder radius, box half-size)
#     "polar_deg": 0.0,                contact centre, angle from the dome apex
#     "azimuth_deg": 0.0,
#     "axis_deg": 0.0                  optional, cylinder/box orientation
#   },
#   "keyframes": [                     linear interpolation between keyframes
#     {"frame": 0,  "wrench": [0, 0, 0, 0, 0, 0], "depth": 0.0},
#     {"frame": 29, "wrench": [0, 0, 4, 0, 0, 0], "depth": 1.0}
#   ]
# }
#
# wrench = (Fx, Fy, Fz [N], Tx, Ty, Tz [N*mm]) in the platform frame.
# Frame 0 is the reference: zero wrench and zero depth.
# ======================================================

import json
import logging
from dataclasses import dataclass
from typing import Any, List, Optional

import numpy as np

from backend.errors import ScenarioError

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

SOFT = "soft"
HARD = "hard"
HARDNESS_CLASSES = (SOFT, HARD)     # label 0 = soft, 1 = hard

SHAPES = ("sphere", "cylinder", "box")


# ======================================================
# TYPES
# ======================================================

@dataclass(frozen=True)
class Indenter:
    shape: str = "sphere"
    radius: float = 5.0
    polar_deg: float = 0.0
    azimuth_deg: float = 0.0
    axis_deg: float = 0.0

    def to_json(self) -> dict:
        return {
            "shape": self.shape,
            "radius": self.radius,
            "polar_deg": self.polar_deg,
            "azimuth_deg": self.azimuth_deg,
            "axis_deg": self.axis_deg,
        }


@dataclass(frozen=True)
class ContactScenario:
    frames: int
    wrenches: np.ndarray        # (N, 6)
    depths: np.ndarray          # (N,) mm
    indenter: Indenter
    hardness: str = HARD
    compliance: Optional[float] = None
    name: str = "scenario"

    def __post_init__(self):
        w = np.asarray(self.wrenches, dtype=float).reshape(-1, 6)
        d = np.asarray(self.depths, dtype=float).reshape(-1)
        if len(w) != self.frames or len(d) != self.frames:
            raise ScenarioError(f"trajectories must have {self.frames} frames", "/keyframes")
        if np.any(d < 0):
            raise ScenarioError("depth must be >= 0", "/keyframes")
        if np.any(w[0] != 0) or d[0] != 0:
            raise ScenarioError("frame 0 must have zero wrench and zero depth", "/keyframes/0")
        w.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "wrenches", w)
        object.__setattr__(self, "depths", d)

    @property
    def label(self) -> int:
        return HARDNESS_CLASSES.index(self.hardness)

    @classmethod
    def static(cls, frames: int, indenter: Indenter = Indenter(), hardness: str = HARD) -> "ContactScenario":
        """No load, no indentation."""
        return cls(frames, np.zeros((frames, 6)), np.zeros(frames), indenter, hardness, name="static")

    def to_json(self) -> dict:
        """Schema v1 with one keyframe per frame."""
        out = {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "frames": self.frames,
            "hardness": self.hardness,
            "indenter": self.indenter.to_json(),
            "keyframes": [
                {"frame": k, "wrench": [float(v) for v in self.wrenches[k]], "depth": float(self.depths[k])}
                for k in range(self.frames)
            ],
        }
        if self.compliance is not None:
            out["compliance"] = self.compliance
        return out


# ======================================================
# VALIDATION
# ======================================================

def _number(data: dict, key: str, pointer: str, default: Any = None, minimum: Optional[float] = None) -> float:
    if key not in data:
        if default is None:
            raise ScenarioError("required", f"{pointer}/{key}")
        return default
    v = data[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
        raise ScenarioError(f"expected a number, got {v!r}", f"{pointer}/{key}")
    if minimum is not None and v < minimum:
        raise ScenarioError(f"must be >= {minimum}", f"{pointer}/{key}")
    return float(v)


def _check_keys(data: dict, allowed: tuple, pointer: str):
    for key in data:
        if key not in allowed:
            raise ScenarioError("unknown key", f"{pointer}/{key}")


def _parse_indenter(data: Any) -> Indenter:
    if not isinstance(data, dict):
        raise ScenarioError("expected an object", "/indenter")
    _check_keys(data, ("shape", "radius", "polar_deg", "azimuth_deg", "axis_deg"), "/indenter")

    shape = data.get("shape", "sphere")
    if shape not in SHAPES:
        raise ScenarioError(f"must be one of {', '.join(SHAPES)}", "/indenter/shape")
    radius = _number(data, "radius", "/indenter")
    if radius <= 0:
        raise ScenarioError("must be > 0", "/indenter/radius")
    polar = _number(data, "polar_deg", "/indenter", 0.0)
    if not 0.0 <= polar <= 180.0:
        raise ScenarioError("must be in [0, 180]", "/indenter/polar_deg")

    return Indenter(
        shape=shape,
        radius=radius,
        polar_deg=polar,
        azimuth_deg=_number(data, "azimuth_deg", "/indenter", 0.0),
        axis_deg=_number(data, "axis_deg", "/indenter", 0.0),
    )


def _parse_keyframes(data: Any, frames: int):
    if not isinstance(data, list) or not data:
        raise ScenarioError("expected a non-empty array", "/keyframes")

    idx, wr, dp = [], [], []
    for n, kf in enumerate(data):
        ptr = f"/keyframes/{n}"
        if not isinstance(kf, dict):
            raise ScenarioError("expected an object", ptr)
        _check_keys(kf, ("frame", "wrench", "depth"), ptr)

        frame = kf.get("frame")
        if isinstance(frame, bool) or not isinstance(frame, int):
            raise ScenarioError("expected an integer", f"{ptr}/frame")
        if not 0 <= frame < frames:
            raise ScenarioError(f"must be in [0, {frames - 1}]", f"{ptr}/frame")
        if idx and frame <= idx[-1]:
            raise ScenarioError("keyframes must be strictly increasing", f"{ptr}/frame")

        w = kf.get("wrench", [0.0] * 6)
        if not isinstance(w, list) or len(w) != 6:
            raise ScenarioError("expected 6 numbers", f"{ptr}/wrench")
        for j, v in enumerate(w):
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
                raise ScenarioError(f"expected a number, got {v!r}", f"{ptr}/wrench/{j}")

        idx.append(frame)
        wr.append([float(v) for v in w])
        dp.append(_number(kf, "depth", ptr, 0.0, minimum=0.0))

    if idx[0] != 0:
        raise ScenarioError("first keyframe must be frame 0", "/keyframes/0/frame")
    if any(wr[0]) or dp[0] != 0:
        raise ScenarioError("frame 0 must have zero wrench and zero depth", "/keyframes/0")

    ks = np.arange(frames)
    wr = np.asarray(wr)
    wrenches = np.stack([np.interp(ks, idx, wr[:, j]) for j in range(6)], axis=1)
    depths = np.interp(ks, idx, dp)
    return wrenches, depths


def scenario_from_json(data: Any) -> ContactScenario:
    if not isinstance(data, dict):
        raise ScenarioError("expected an object", "")
    _check_keys(data, ("schema_version", "name", "frames", "hardness", "compliance", "indenter", "keyframes"), "")

    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ScenarioError(f"unsupported schema version {version!r}", "/schema_version")

    frames = data.get("frames")
    if isinstance(frames, bool) or not isinstance(frames, int) or frames < 1:
        raise ScenarioError("expected a positive integer", "/frames")

    hardness = data.get("hardness", HARD)
    if hardness not in HARDNESS_CLASSES:
        raise ScenarioError("must be 'soft' or 'hard'", "/hardness")

    compliance = None
    if "compliance" in data:
        compliance = _number(data, "compliance", "", minimum=0.0)

    name = data.get("name", "scenario")
    if not isinstance(name, str):
        raise ScenarioError("expected a string", "/name")

    indenter = _parse_indenter(data.get("indenter", {"radius": 5.0}))
    wrenches, depths = _parse_keyframes(data.get("keyframes"), frames)
    return ContactScenario(frames, wrenches, depths, indenter, hardness, compliance, name)


def load_scenario(path: str) -> ContactScenario:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ScenarioError(f"scenario file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ScenarioError(f"malformed JSON at line {e.lineno}: {e.msg}") from e
    sc = scenario_from_json(data)
    log.info("Scenario loaded: %s (%d frames, %s, %s indenter)", sc.name, sc.frames, sc.hardness, sc.indenter.shape)
    return sc


def save_scenario(sc: ContactScenario, path: str):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(sc.to_json(), f, indent=2)


# ======================================================
# RANDOM SCENARIOS
# ======================================================

def random_scenario(rng: np.random.Generator, hardness: str, frames: int, sim_cfg,
                    name: str = "random") -> ContactScenario:
    """
    Ramp-hold-release press with a random peak force, mostly normal,
    with small shear and torque. Depth follows the normal force through
    the contact stiffness.
    """
    if hardness not in HARDNESS_CLASSES:
        raise ScenarioError("must be 'soft' or 'hard'", "/hardness")
    if frames < 4:
        raise ScenarioError("random scenarios need at least 4 frames", "/frames")

    peak_f = rng.uniform(2.0, 8.0)
    shear = rng.uniform(-0.1, 0.1, size=2) * peak_f
    torque = rng.uniform(-0.5, 0.5, size=3)
    peak = np.array([shear[0], shear[1], peak_f, torque[0], torque[1], torque[2]])

    t_up = int(rng.integers(max(2, frames // 5), max(3, frames // 2)))
    t_hold = int(rng.integers(t_up, max(t_up + 1, (3 * frames) // 4)))
    ks = np.arange(frames)
    envelope = np.interp(ks, [0, t_up, t_hold, frames - 1], [0.0, 1.0, 1.0, rng.uniform(0.0, 0.5)])
    envelope[0] = 0.0

    wrenches = envelope[:, None] * peak[None, :]
    depths = wrenches[:, 2].clip(min=0.0) / sim_cfg.contact_stiffness

    indenter = Indenter(
        shape="sphere",
        radius=float(rng.uniform(4.0, 5.0)),
        polar_deg=float(rng.uniform(0.0, 15.0)),
        azimuth_deg=float(rng.uniform(0.0, 360.0)),
    )
    return ContactScenario(frames, wrenches, depths, indenter, hardness, None, name)
