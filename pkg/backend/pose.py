# ======================================================
# backend/pose.py
# Planar PnP for the four white platform markers
#
# Homography (normalized DLT) → planar decomposition
# → both candidates of the two-fold ambiguity
# → Levenberg–Marquardt on reprojection error
#
# Rotations are quaternions internally; Euler (Z-Y-X intrinsic)
# only appears at the reporting boundary.
# ======================================================

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from backend.camera import CameraIntrinsics, DistortionCoefficients, project
from backend.errors import ConfigError, ConvergenceError, DegenerateConfigurationError

log = logging.getLogger(__name__)

EULER_SEQ = "ZYX"


# ======================================================
# POSE
# ======================================================

@dataclass(frozen=True)
class Pose6D:
    t: np.ndarray                       # (3,) mm
    q: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))  # x, y, z, w

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).reshape(3)
        q = np.asarray(self.q, dtype=float).reshape(4)
        q = q / np.linalg.norm(q)
        if q[3] < 0:
            q = -q
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "q", q)

    # ---------- constructors ----------
    @classmethod
    def identity(cls) -> "Pose6D":
        return cls(np.zeros(3))

    @classmethod
    def from_rotation(cls, t, rot: Rotation) -> "Pose6D":
        return cls(t, rot.as_quat())

    @classmethod
    def from_euler(cls, t, euler_deg) -> "Pose6D":
        """euler_deg = (yaw, pitch, roll) about Z, Y', X''."""
        return cls(t, Rotation.from_euler(EULER_SEQ, euler_deg, degrees=True).as_quat())

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose6D":
        return cls(m[:3, 3], Rotation.from_matrix(m[:3, :3]).as_quat())

    # ---------- views ----------
    @property
    def rotation(self) -> Rotation:
        return Rotation.from_quat(self.q)

    @property
    def R(self) -> np.ndarray:
        return self.rotation.as_matrix()

    def euler_deg(self) -> np.ndarray:
        """(yaw, pitch, roll) degrees."""
        return self.rotation.as_euler(EULER_SEQ, degrees=True)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    # ---------- algebra ----------
    def compose(self, other: "Pose6D") -> "Pose6D":
        """self ∘ other (apply other first)."""
        return Pose6D(self.R @ other.t + self.t, (self.rotation * other.rotation).as_quat())

    def inverse(self) -> "Pose6D":
        inv = self.rotation.inv()
        return Pose6D(-inv.apply(self.t), inv.as_quat())

    def transform(self, points) -> np.ndarray:
        return self.rotation.apply(np.asarray(points, dtype=float)) + self.t

    def perturb(self, delta) -> "Pose6D":
        """Left rotation-vector perturbation then translation increment."""
        delta = np.asarray(delta, dtype=float)
        rot = Rotation.from_rotvec(delta[:3]) * self.rotation
        return Pose6D(self.t + delta[3:], rot.as_quat())

    # ---------- serialization ----------
    def to_json(self) -> dict:
        yaw, pitch, roll = self.euler_deg()
        return {
            "tx": float(self.t[0]), "ty": float(self.t[1]), "tz": float(self.t[2]),
            "rx": float(roll), "ry": float(pitch), "rz": float(yaw),
        }

    @classmethod
    def from_json(cls, data: dict) -> "Pose6D":
        return cls.from_euler(
            [data["tx"], data["ty"], data["tz"]],
            [data["rz"], data["ry"], data["rx"]],
        )


# ======================================================
# PLATFORM MODEL
# ======================================================

@dataclass(frozen=True)
class PlatformModel:
    s1: np.ndarray          # (4, 3) marker coordinates in the platform frame, mm
    rest_pose: Pose6D

    def __post_init__(self):
        s1 = np.asarray(self.s1, dtype=float).reshape(4, 3)
        object.__setattr__(self, "s1", s1)
        centered = s1 - s1.mean(axis=0)
        sv = np.linalg.svd(centered, compute_uv=False)
        if sv[2] > 1e-9:
            raise ConfigError("platform markers must be coplanar", key="pose.markers")
        if sv[1] <= 1e-9:
            raise ConfigError("platform markers must not be collinear", key="pose.markers")

    @classmethod
    def from_config(cls, pose_cfg) -> "PlatformModel":
        # rest_euler_deg is (yaw, pitch, roll), the order Rotation.from_euler takes
        rest = Pose6D.from_euler(pose_cfg.rest_translation, pose_cfg.rest_euler_deg)
        return cls(np.asarray(pose_cfg.markers, dtype=float), rest)

    def plane_frame(self) -> Tuple[np.ndarray, np.ndarray]:
        """(origin, B) with B = [e1 e2 n] spanning the marker plane."""
        origin = self.s1.mean(axis=0)
        _, _, vt = np.linalg.svd(self.s1 - origin)
        B = vt.T.copy()
        if np.linalg.det(B) < 0:
            B[:, 2] = -B[:, 2]
        return origin, B


# ======================================================
# REPROJECTION
# ======================================================

_ZERO_DIST = DistortionCoefficients()


def project_model(model: PlatformModel, pose: Pose6D, intr: CameraIntrinsics) -> np.ndarray:
    return project(pose.transform(model.s1), intr, _ZERO_DIST)


def reprojection_rms(model: PlatformModel, pose: Pose6D, image_pts, intr: CameraIntrinsics) -> float:
    diff = project_model(model, pose, intr) - np.asarray(image_pts, dtype=float).reshape(-1, 2)
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))


def reprojection_jacobian(model: PlatformModel, pose: Pose6D, intr: CameraIntrinsics) -> np.ndarray:
    """
    (2N, 6) Jacobian of the stacked residuals w.r.t. (δ, Δt), where δ
    is a left rotation-vector perturbation (see Pose6D.perturb).
    """
    RX = pose.rotation.apply(model.s1)
    X = RX + pose.t
    J = np.zeros((2 * len(X), 6))
    for i, (x, y, z) in enumerate(X):
        a, b, c = RX[i]
        dproj = np.array([
            [intr.fx / z, 0.0, -intr.fx * x / (z * z)],
            [0.0, intr.fy / z, -intr.fy * y / (z * z)],
        ])
        skew = np.array([
            [0.0, -c, b],
            [c, 0.0, -a],
            [-b, a, 0.0],
        ])
        J[2 * i:2 * i + 2, :3] = dproj @ (-skew)
        J[2 * i:2 * i + 2, 3:] = dproj
    return J


def _residuals(model, pose, image_pts, intr) -> np.ndarray:
    return (project_model(model, pose, intr) - image_pts).ravel()


# ======================================================
# HOMOGRAPHY INITIALIZATION
# ======================================================

def _normalizer(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def homography_dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Normalized DLT homography mapping src (N, 2) → dst (N, 2)."""
    Ts = _normalizer(src)
    Td = _normalizer(dst)
    s = (Ts @ np.c_[src, np.ones(len(src))].T).T
    d = (Td @ np.c_[dst, np.ones(len(dst))].T).T

    rows = []
    for (x, y, w), (u, v, z) in zip(s, d):
        rows.append([0, 0, 0, -z * x, -z * y, -z * w, v * x, v * y, v * w])
        rows.append([z * x, z * y, z * w, 0, 0, 0, -u * x, -u * y, -u * w])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    return H / H[2, 2]


def _check_degenerate(image_pts: np.ndarray):
    centered = image_pts - image_pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] <= 0 or sv[1] / sv[0] < 1e-6:
        raise DegenerateConfigurationError("image points are collinear")
    # any three collinear points also break the homography
    for skip in range(4):
        tri = np.delete(image_pts, skip, axis=0)
        e1, e2 = tri[1] - tri[0], tri[2] - tri[0]
        a = e1[0] * e2[1] - e1[1] * e2[0]
        if abs(a) < 1e-9 * max(1.0, sv[0] ** 2):
            raise DegenerateConfigurationError("three image points are collinear")


def _candidates(model: PlatformModel, image_pts: np.ndarray, intr: CameraIntrinsics):
    origin, B = model.plane_frame()
    ab = (model.s1 - origin) @ B[:, :2]

    Kinv = np.linalg.inv(intr.K)
    norm = (Kinv @ np.c_[image_pts, np.ones(len(image_pts))].T).T[:, :2]
    H = homography_dlt(ab, norm)

    h1, h2, h3 = H[:, 0], H[:, 1], H[:, 2]
    lam = 2.0 / (np.linalg.norm(h1) + np.linalg.norm(h2))
    if h3[2] * lam < 0:
        lam = -lam
    m1, m2 = lam * h1, lam * h2
    M = np.column_stack([m1, m2, np.cross(m1, m2)])
    U, _, Vt = np.linalg.svd(M)
    M = U @ np.diag([1.0, 1.0, np.linalg.det(U @ Vt)]) @ Vt

    R1 = M @ B.T
    t1 = lam * h3 - R1 @ origin
    first = Pose6D.from_rotation(t1, Rotation.from_matrix(R1))

    # Mirror candidate: plane normal reflected about the line of sight
    centre = R1 @ origin + t1
    v = centre / np.linalg.norm(centre)
    n = M[:, 2]
    n2 = 2.0 * (n @ v) * v - n
    axis = np.cross(n, n2)
    s = np.linalg.norm(axis)
    if s < 1e-12:
        return [first]
    angle = np.arctan2(s, n @ n2)
    align = Rotation.from_rotvec(axis / s * angle)
    rot2 = align * first.rotation
    t2 = centre - rot2.apply(origin)
    return [first, Pose6D.from_rotation(t2, rot2)]


# ======================================================
# LEVENBERG–MARQUARDT
# ======================================================

@dataclass(frozen=True)
class LMSettings:
    damping: float = 1e-3
    factor: float = 10.0
    max_iters: int = 100
    step_tol: float = 1e-10

    @classmethod
    def from_config(cls, pose_cfg) -> "LMSettings":
        return cls(pose_cfg.lm_damping, pose_cfg.lm_factor, pose_cfg.lm_max_iters, pose_cfg.lm_step_tol)


def refine_pose(model: PlatformModel, pose: Pose6D, image_pts: np.ndarray,
                intr: CameraIntrinsics, lm: LMSettings = LMSettings()) -> Pose6D:
    """
    Levenberg–Marquardt on summed squared reprojection error.
    Only cost-decreasing steps are accepted.
    """
    r = _residuals(model, pose, image_pts, intr)
    cost = float(r @ r)
    lam = lm.damping

    for it in range(lm.max_iters):
        if cost == 0.0:
            return pose

        J = reprojection_jacobian(model, pose, intr)
        A = J.T @ J
        g = J.T @ r
        step = np.linalg.solve(A + lam * np.diag(np.diag(A)), -g)

        candidate = pose.perturb(step)
        r_new = _residuals(model, candidate, image_pts, intr)
        cost_new = float(r_new @ r_new)

        if cost_new < cost:
            pose, r, cost = candidate, r_new, cost_new
            lam /= lm.factor
        else:
            lam *= lm.factor

        if np.linalg.norm(step) < lm.step_tol:
            log.debug("LM converged after %d iterations (cost %.3e)", it + 1, cost)
            return pose

    raise ConvergenceError(
        f"Levenberg–Marquardt did not converge in {lm.max_iters} iterations",
        best=pose,
        residual=float(np.sqrt(cost / (len(r) // 2))),
    )


def _pose_distance(a: Pose6D, b: Pose6D) -> float:
    ang = (a.rotation.inv() * b.rotation).magnitude()
    return float(np.linalg.norm(a.t - b.t) + ang)


def solve_planar_pnp(model: PlatformModel, image_pts, intr: CameraIntrinsics,
                     lm: LMSettings = LMSettings()) -> Pose6D:
    """
    Pose of the marker plane from its four undistorted image points
    (same order as model.s1). Zero distortion inside the solver.
    """
    pts = np.asarray(image_pts, dtype=float).reshape(-1, 2)
    if len(pts) != len(model.s1):
        raise DegenerateConfigurationError(f"expected {len(model.s1)} image points, got {len(pts)}")
    _check_degenerate(pts)

    results = []
    failure: Optional[ConvergenceError] = None
    for cand in _candidates(model, pts, intr):
        if np.any(cand.transform(model.s1)[:, 2] <= 0):
            continue
        try:
            refined = refine_pose(model, cand, pts, intr, lm)
        except ConvergenceError as e:
            failure = e
            continue
        results.append((reprojection_rms(model, refined, pts, intr), refined))

    if not results:
        if failure is not None:
            raise failure
        raise DegenerateConfigurationError("no candidate pose places the markers in front of the camera")

    best_rms = min(r for r, _ in results)
    tied = [p for r, p in results if r <= best_rms + 1e-9]
    best = min(tied, key=lambda p: _pose_distance(p, model.rest_pose))

    log.debug("PnP solved | rms=%.4f px | candidates=%d", best_rms, len(results))
    return best
