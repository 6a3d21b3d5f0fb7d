# ======================================================
# backend/wrench.py
# Platform deflection → 6-axis force/torque
#
# Linear stiffness model w = S·d with d = (dx, dy, dz, rx, ry, rz)
# (mm, rotation-vector rad) and w = (Fx, Fy, Fz, Tx, Ty, Tz)
# (N, N·mm). S comes from the ideal spring model or from a
# least-squares calibration.
# ======================================================

import json
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from backend.errors import CalibrationError, ConfigError, SingularLayoutError
from backend.pose import Pose6D

log = logging.getLogger(__name__)

DELTA_AXES = ("dx", "dy", "dz", "rx", "ry", "rz")
WRENCH_AXES = ("Fx", "Fy", "Fz", "Tx", "Ty", "Tz")

SMALL_ANGLE_LIMIT = 0.35    # rad
DEFAULT_F_MAX = 17.0        # N

UNITS = {
    "rows": "Fx Fy Fz [N], Tx Ty Tz [N*mm]",
    "cols": "dx dy dz [mm], rx ry rz [rad]",
    "blocks": {
        "force/translation": "N/mm",
        "force/rotation": "N/rad",
        "torque/translation": "N*mm/mm",
        "torque/rotation": "N*mm/rad",
    },
}


# ======================================================
# TYPES
# ======================================================

@dataclass(frozen=True)
class PoseDelta:
    vector: np.ndarray      # (6,)

    def __post_init__(self):
        object.__setattr__(self, "vector", np.asarray(self.vector, dtype=float).reshape(6))

    @property
    def translation(self) -> np.ndarray:
        return self.vector[:3]

    @property
    def rotation(self) -> np.ndarray:
        return self.vector[3:]

    @property
    def large_rotation(self) -> bool:
        return bool(np.linalg.norm(self.rotation) >= SMALL_ANGLE_LIMIT)

    @classmethod
    def zero(cls) -> "PoseDelta":
        return cls(np.zeros(6))

    def to_json(self) -> dict:
        return {k: float(v) for k, v in zip(DELTA_AXES, self.vector)}


@dataclass(frozen=True)
class Wrench:
    force: np.ndarray       # (3,) N
    torque: np.ndarray      # (3,) N·mm
    saturated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "force", np.asarray(self.force, dtype=float).reshape(3))
        object.__setattr__(self, "torque", np.asarray(self.torque, dtype=float).reshape(3))

    @classmethod
    def from_vector(cls, w, f_max: Optional[float] = None) -> "Wrench":
        w = np.asarray(w, dtype=float).reshape(6)
        saturated = f_max is not None and float(np.linalg.norm(w[:3])) > f_max
        return cls(w[:3], w[3:], saturated)

    @classmethod
    def zero(cls) -> "Wrench":
        return cls(np.zeros(3), np.zeros(3))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.force, self.torque])

    @property
    def force_magnitude(self) -> float:
        return float(np.linalg.norm(self.force))

    def to_json(self) -> dict:
        out = {k: float(v) for k, v in zip(WRENCH_AXES, self.vector)}
        out["saturated"] = self.saturated
        return out


@dataclass(frozen=True)
class StiffnessMatrix:
    matrix: np.ndarray      # (6, 6)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float).reshape(6, 6)
        if not np.all(np.isfinite(m)):
            raise CalibrationError("stiffness matrix has non-finite entries")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def diagonal(cls, values: Sequence[float]) -> "StiffnessMatrix":
        return cls(np.diag(np.asarray(values, dtype=float)))

    @property
    def condition_number(self) -> float:
        return float(np.linalg.cond(self.matrix))

    def compliance(self) -> np.ndarray:
        """S⁻¹ (pose delta per unit wrench)."""
        if not np.isfinite(self.condition_number) or self.condition_number > 1e12:
            raise CalibrationError(f"stiffness matrix not invertible (cond={self.condition_number:.3e})")
        return np.linalg.inv(self.matrix)

    def is_symmetric_positive_definite(self, tol: float = 1e-9) -> bool:
        m = self.matrix
        if not np.allclose(m, m.T, atol=tol * max(1.0, np.abs(m).max())):
            return False
        return bool(np.all(np.linalg.eigvalsh(0.5 * (m + m.T)) > 0))


# ======================================================
# OPERATIONS
# ======================================================

def pose_delta(current: Pose6D, reference: Pose6D) -> PoseDelta:
    """reference⁻¹·current as (translation, rotation vector)."""
    rel = reference.inverse().compose(current)
    return PoseDelta(np.concatenate([rel.t, rel.rotation.as_rotvec()]))


def apply_delta(reference: Pose6D, d: PoseDelta) -> Pose6D:
    """Inverse of pose_delta: reference ∘ exp(d)."""
    return reference.compose(Pose6D.from_rotation(d.translation, Rotation.from_rotvec(d.rotation)))


def wrench_from_pose(d: PoseDelta, s: StiffnessMatrix, f_max: float = DEFAULT_F_MAX) -> Wrench:
    w = Wrench.from_vector(s.matrix @ d.vector, f_max)
    if w.saturated:
        log.warning("Wrench saturated: |F| = %.2f N exceeds %.1f N", w.force_magnitude, f_max)
    if d.large_rotation:
        log.warning("Pose delta rotation %.3f rad outside small-angle range", float(np.linalg.norm(d.rotation)))
    return w


def pose_from_wrench(w: Wrench, s: StiffnessMatrix) -> PoseDelta:
    """Compliance direction, used by the simulator."""
    return PoseDelta(s.compliance() @ w.vector)


# ======================================================
# CALIBRATION
# ======================================================

@dataclass
class CalibrationReport:
    samples: int
    rms_residual: Dict[str, float]
    condition_number: float
    rank: int = 6

    def to_json(self) -> dict:
        return {
            "samples": self.samples,
            "rank": self.rank,
            "condition_number": self.condition_number,
            "rms_residual": dict(self.rms_residual),
        }


def _deficient_axes(null_vectors: np.ndarray) -> List[str]:
    if null_vectors.size == 0:
        return []
    weight = np.sqrt((null_vectors ** 2).sum(axis=0))
    return [DELTA_AXES[i] for i in np.nonzero(weight >= 0.1 * weight.max())[0]]


def calibrate_stiffness(samples: Sequence[Tuple[PoseDelta, Wrench]],
                        rank_tol: float = 1e-10) -> Tuple[StiffnessMatrix, CalibrationReport]:
    """
    Row-wise least squares for S from (delta, wrench) pairs.

    Raises CalibrationError naming the delta axes that the samples
    fail to excite.
    """
    D = np.array([d.vector for d, _ in samples], dtype=float).reshape(-1, 6)
    W = np.array([w.vector for _, w in samples], dtype=float).reshape(-1, 6)
    n = len(D)

    _, sv, vt = np.linalg.svd(D, full_matrices=True) if n else (None, np.zeros(0), np.eye(6))
    sv_full = np.zeros(6)
    sv_full[:len(sv)] = sv[:6]
    top = sv_full[0] if sv_full[0] > 0 else 1.0
    deficient = sv_full / top < rank_tol
    rank = int((~deficient).sum())

    if n < 6 or rank < 6:
        axes = _deficient_axes(vt[deficient])
        raise CalibrationError(f"{n} samples span rank {rank} of 6", deficient_axes=axes)

    St, *_ = np.linalg.lstsq(D, W, rcond=None)
    S = StiffnessMatrix(St.T)

    resid = W - D @ St
    rms = {axis: float(np.sqrt(np.mean(resid[:, i] ** 2))) for i, axis in enumerate(WRENCH_AXES)}
    report = CalibrationReport(n, rms, float(sv_full[0] / sv_full[5]), rank)

    log.info(
        "Stiffness calibrated from %d samples | cond=%.3e | max rms=%.3e",
        n, report.condition_number, max(rms.values()),
    )
    return S, report


# ======================================================
# IDEAL SPRING MODEL
# ======================================================

def helical_spring_rate(wire_diameter: float, coil_diameter: float,
                        active_coils: float, shear_modulus: float) -> float:
    """
    Axial rate (N/mm) of a helical compression spring, k = G d⁴ / (8 D³ n),
    D = mean coil diameter (outer diameter minus wire).
    """
    D = coil_diameter - wire_diameter
    if D <= 0:
        raise ConfigError("coil diameter must exceed wire diameter", key="wrench.coil_diameter")
    return shear_modulus * wire_diameter ** 4 / (8.0 * D ** 3 * active_coils)


def circular_layout(count: int, radius: float) -> np.ndarray:
    ang = 2.0 * np.pi * np.arange(count) / count
    return np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)


def ideal_spring_stiffness(layout, rate, shear_ratio: float = 0.3) -> StiffnessMatrix:
    """
    Rigid plate on vertical springs at planar positions ``layout`` (N, 2) mm.

    Each spring is axially ``rate`` N/mm (scalar or per spring) and
    laterally ``shear_ratio``·rate. Small rotations: a spring at p moves
    by d + r × p.
    """
    p = np.asarray(layout, dtype=float).reshape(-1, 2)
    k = np.broadcast_to(np.asarray(rate, dtype=float), (len(p),)).astype(float)
    if np.any(k <= 0):
        raise ConfigError("spring rates must be positive", key="wrench")

    A = np.c_[np.ones(len(p)), p]
    if len(p) < 3 or np.linalg.matrix_rank(A) < 3:
        raise SingularLayoutError("springs are collinear or too few to resist torsion", key="wrench")

    x, y = p[:, 0], p[:, 1]
    ks = shear_ratio * k
    S = np.zeros((6, 6))

    # (Fz, Tx, Ty) ← (dz, rx, ry)
    z = [2, 3, 4]
    S[np.ix_(z, z)] = [
        [k.sum(), (k * y).sum(), -(k * x).sum()],
        [(k * y).sum(), (k * y * y).sum(), -(k * x * y).sum()],
        [-(k * x).sum(), -(k * x * y).sum(), (k * x * x).sum()],
    ]

    # (Fx, Fy, Tz) ← (dx, dy, rz)
    s = [0, 1, 5]
    S[np.ix_(s, s)] = [
        [ks.sum(), 0.0, -(ks * y).sum()],
        [0.0, ks.sum(), (ks * x).sum()],
        [-(ks * y).sum(), (ks * x).sum(), (ks * (x * x + y * y)).sum()],
    ]
    return StiffnessMatrix(S)


def default_stiffness(wcfg) -> StiffnessMatrix:
    """Stiffness from config: a calibrated file if given, else the ideal spring model."""
    if wcfg.stiffness_file:
        return load_stiffness(wcfg.stiffness_file)
    rate = helical_spring_rate(wcfg.wire_diameter, wcfg.coil_diameter, wcfg.active_coils, wcfg.shear_modulus)
    layout = circular_layout(wcfg.spring_count, wcfg.spring_circle_radius)
    log.debug("Ideal spring model: %d springs at %.1f mm, k=%.4f N/mm", wcfg.spring_count, wcfg.spring_circle_radius, rate)
    return ideal_spring_stiffness(layout, rate, wcfg.shear_ratio)


# ======================================================
# JSON
# ======================================================

def stiffness_to_json(s: StiffnessMatrix, report: Optional[CalibrationReport] = None) -> dict:
    out = {
        "values": [float(v) for v in s.matrix.ravel()],
        "units": UNITS,
        "condition_number": s.condition_number,
    }
    if report is not None:
        out["calibration"] = report.to_json()
    return out


def stiffness_from_json(data: dict) -> StiffnessMatrix:
    values = data.get("values")
    if not isinstance(values, list) or len(values) != 36:
        raise CalibrationError("stiffness JSON needs 36 row-major values")
    return StiffnessMatrix(np.asarray(values, dtype=float).reshape(6, 6))


def load_stiffness(path: str) -> StiffnessMatrix:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"stiffness file not found: {path}", key="wrench.stiffness_file") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed stiffness JSON: {e.msg}", key="wrench.stiffness_file", line=e.lineno) from e
    return stiffness_from_json(data)
