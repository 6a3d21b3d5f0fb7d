import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from backend.camera import CameraIntrinsics
from backend.errors import ConfigError, ConvergenceError, DegenerateConfigurationError
from backend.pose import (
    LMSettings,
    PlatformModel,
    Pose6D,
    _residuals,
    homography_dlt,
    project_model,
    refine_pose,
    reprojection_jacobian,
    reprojection_rms,
    solve_planar_pnp,
)


@pytest.fixture
def intr(cfg):
    return CameraIntrinsics.from_config(cfg.camera)


@pytest.fixture
def platform(cfg):
    return PlatformModel.from_config(cfg.pose)


def _moved(platform, delta):
    """Rest pose moved by a small (rx, ry, rz, tx, ty, tz) perturbation."""
    return platform.rest_pose.perturb(delta)


# ---------- Pose6D ----------

def test_quaternion_is_normalized_with_non_negative_w():
    p = Pose6D(np.zeros(3), [0.0, 0.0, 0.0, -2.0])
    assert np.allclose(p.q, [0.0, 0.0, 0.0, 1.0])


def test_euler_round_trip():
    p = Pose6D.from_euler([1.0, 2.0, 3.0], [30.0, -20.0, 10.0])
    assert np.allclose(p.euler_deg(), [30.0, -20.0, 10.0])


def test_json_reports_roll_pitch_yaw_and_round_trips():
    p = Pose6D.from_euler([1.0, -2.0, 14.0], [5.0, -3.0, 170.0])
    data = p.to_json()
    assert data["rz"] == pytest.approx(5.0)
    assert data["ry"] == pytest.approx(-3.0)
    assert data["rx"] == pytest.approx(170.0)
    q = Pose6D.from_json(data)
    assert np.allclose(q.matrix(), p.matrix())


def test_compose_with_inverse_is_identity():
    p = Pose6D.from_euler([1.0, 2.0, 3.0], [10.0, 20.0, 30.0])
    assert np.allclose(p.compose(p.inverse()).matrix(), np.eye(4), atol=1e-12)
    assert np.allclose(p.inverse().compose(p).matrix(), np.eye(4), atol=1e-12)


def test_transform_matches_matrix():
    p = Pose6D.from_euler([1.0, 2.0, 3.0], [10.0, 20.0, 30.0])
    x = np.array([[0.5, -1.0, 2.0]])
    assert np.allclose(p.transform(x)[0], (p.matrix() @ [0.5, -1.0, 2.0, 1.0])[:3])


def test_perturb_is_left_rotation_then_translation():
    p = Pose6D.from_euler([0.0, 0.0, 10.0], [0.0, 0.0, 180.0])
    d = np.array([0.0, 0.0, 0.1, 1.0, 0.0, 0.0])
    q = p.perturb(d)
    assert np.allclose(q.t, [1.0, 0.0, 10.0])
    assert np.allclose(q.R, Rotation.from_rotvec([0.0, 0.0, 0.1]).as_matrix() @ p.R)


# ---------- platform ----------

def test_rest_pose_faces_the_camera(platform):
    assert np.allclose(platform.rest_pose.t, [0.0, 0.0, 14.0])
    assert np.allclose(platform.rest_pose.R @ [0.0, 0.0, 1.0], [0.0, 0.0, -1.0])


def test_rest_markers_image_inside_the_frame(platform, intr):
    px = project_model(platform, platform.rest_pose, intr)
    radius = np.linalg.norm(px - [240.0, 240.0], axis=1)
    assert np.allclose(radius, 320.0 * 6.0 * np.sqrt(2.0) / 14.0)


def test_non_coplanar_markers_are_rejected(platform):
    s1 = platform.s1.copy()
    s1[0, 2] = 1.0
    with pytest.raises(ConfigError):
        PlatformModel(s1, platform.rest_pose)


def test_collinear_markers_are_rejected(platform):
    s1 = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0]])
    with pytest.raises(ConfigError):
        PlatformModel(s1, platform.rest_pose)


# ---------- homography / Jacobian ----------

def test_homography_dlt_recovers_known_map():
    H = np.array([[1.2, 0.1, 5.0], [-0.05, 0.9, -3.0], [1e-3, 2e-3, 1.0]])
    src = np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0], [3.0, 7.0]])
    h = np.c_[src, np.ones(len(src))] @ H.T
    dst = h[:, :2] / h[:, 2:]
    assert np.allclose(homography_dlt(src, dst), H, atol=1e-8)


def test_jacobian_matches_finite_differences(platform, intr):
    pose = _moved(platform, [0.02, -0.03, 0.05, 0.3, -0.2, 0.4])
    pts = project_model(platform, platform.rest_pose, intr)
    J = reprojection_jacobian(platform, pose, intr)

    eps = 1e-6
    num = np.zeros_like(J)
    for k in range(6):
        d = np.zeros(6)
        d[k] = eps
        num[:, k] = (_residuals(platform, pose.perturb(d), pts, intr)
                     - _residuals(platform, pose.perturb(-d), pts, intr)) / (2 * eps)
    assert np.allclose(J, num, rtol=1e-5, atol=1e-4)


# ---------- PnP ----------

@pytest.mark.parametrize("delta", [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.02, -0.01, 0.03, 0.2, -0.1, -0.3],
    [-0.05, 0.04, -0.1, -0.4, 0.3, 0.5],
])
def test_pnp_recovers_exact_pose(platform, intr, delta):
    truth = _moved(platform, delta)
    pts = project_model(platform, truth, intr)
    pose = solve_planar_pnp(platform, pts, intr)
    assert np.allclose(pose.t, truth.t, atol=1e-6)
    assert (pose.rotation.inv() * truth.rotation).magnitude() < 1e-6
    assert reprojection_rms(platform, pose, pts, intr) < 1e-6


def test_pnp_with_pixel_noise_stays_close(platform, intr, rng):
    truth = _moved(platform, [0.01, 0.02, -0.02, 0.1, 0.2, -0.3])
    pts = project_model(platform, truth, intr) + rng.normal(0.0, 0.1, size=(4, 2))
    pose = solve_planar_pnp(platform, pts, intr)
    assert np.linalg.norm(pose.t - truth.t) < 0.05
    assert np.degrees((pose.rotation.inv() * truth.rotation).magnitude()) < 0.5


def test_pnp_rejects_collinear_points(platform, intr):
    pts = np.array([[100.0, 100.0], [150.0, 150.0], [200.0, 200.0], [250.0, 250.0]])
    with pytest.raises(DegenerateConfigurationError):
        solve_planar_pnp(platform, pts, intr)


def test_pnp_needs_one_point_per_marker(platform, intr):
    with pytest.raises(DegenerateConfigurationError):
        solve_planar_pnp(platform, np.zeros((3, 2)), intr)


def test_refine_reports_best_pose_when_out_of_iterations(platform, intr):
    pts = project_model(platform, _moved(platform, [0.1, 0.0, 0.0, 1.0, 0.0, 0.0]), intr)
    with pytest.raises(ConvergenceError) as err:
        refine_pose(platform, platform.rest_pose, pts, intr, LMSettings(max_iters=1))
    assert isinstance(err.value.best, Pose6D)
    assert err.value.residual is not None


# ---------- properties ----------

def _angle_deg(a, b):
    return float(np.degrees((a.rotation.inv() * b.rotation).magnitude()))


def test_reprojection_rms_examples(platform, intr):
    pts = project_model(platform, platform.rest_pose, intr)
    assert reprojection_rms(platform, platform.rest_pose, pts, intr) == 0.0
    assert reprojection_rms(platform, platform.rest_pose, pts + (3.0, 4.0), intr) == pytest.approx(5.0)
    one = pts.copy()
    one[2, 0] += 2.0
    assert reprojection_rms(platform, platform.rest_pose, one, intr) == pytest.approx(1.0)


def test_pnp_recovers_random_poses(platform, intr, rng):
    scale = np.array([0.1, 0.1, 0.1, 1.15, 1.15, 1.15])
    for delta in rng.uniform(-1.0, 1.0, size=(1000, 6)) * scale:
        truth = _moved(platform, delta)
        pose = solve_planar_pnp(platform, project_model(platform, truth, intr), intr)
        assert np.linalg.norm(pose.t - truth.t) <= 1e-4
        assert _angle_deg(pose, truth) <= 1e-4


def test_pnp_noise_median_error(platform, intr, rng):
    truth = _moved(platform, [0.01, -0.02, 0.05, 0.2, -0.1, 0.3])
    clean = project_model(platform, truth, intr)
    t_err, r_err = [], []
    for _ in range(1000):
        pose = solve_planar_pnp(platform, clean + rng.normal(0.0, 0.1, size=clean.shape), intr)
        t_err.append(np.linalg.norm(pose.t - truth.t))
        r_err.append(_angle_deg(pose, truth))
    assert np.median(t_err) <= 0.05
    assert np.median(r_err) <= 0.1


def test_rotating_the_image_about_the_axis_rotates_the_pose(platform, intr):
    truth = _moved(platform, [0.03, -0.02, 0.1, 0.5, -0.4, 0.2])
    pts = project_model(platform, truth, intr)
    spin = Rotation.from_euler("z", 30.0, degrees=True)
    c = np.array([intr.cx, intr.cy])
    turned = (pts - c) @ spin.as_matrix()[:2, :2].T + c

    pose = solve_planar_pnp(platform, turned, intr)
    expected = Pose6D.from_rotation(spin.apply(truth.t), spin * truth.rotation)
    assert np.allclose(pose.t, expected.t, atol=1e-6)
    assert _angle_deg(pose, expected) < 1e-5


def test_levenberg_marquardt_never_increases_the_error(platform, intr, rng):
    truth = _moved(platform, [0.04, -0.03, 0.1, 0.6, -0.5, 0.8])
    pts = project_model(platform, truth, intr) + rng.normal(0.0, 0.2, size=(4, 2))
    start = platform.rest_pose

    history = [reprojection_rms(platform, start, pts, intr)]
    for iters in range(1, 16):
        try:
            pose = refine_pose(platform, start, pts, intr, LMSettings(max_iters=iters))
        except ConvergenceError as e:
            pose = e.best
        history.append(reprojection_rms(platform, pose, pts, intr))
    assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))
    assert history[-1] < history[0]
