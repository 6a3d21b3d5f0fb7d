import json

import numpy as np
import pytest

from backend.errors import CalibrationError, ConfigError, SingularLayoutError
from backend.pose import Pose6D
from backend.wrench import (
    PoseDelta,
    StiffnessMatrix,
    Wrench,
    apply_delta,
    calibrate_stiffness,
    circular_layout,
    default_stiffness,
    helical_spring_rate,
    ideal_spring_stiffness,
    load_stiffness,
    pose_delta,
    pose_from_wrench,
    stiffness_from_json,
    stiffness_to_json,
    wrench_from_pose,
)


@pytest.fixture
def stiffness(cfg):
    return default_stiffness(cfg.wrench)


def test_default_spring_rate():
    # G d⁴ / (8 D³ n) with D = 3.0 − 0.3 mm
    k = helical_spring_rate(0.3, 3.0, 4.0, 79300.0)
    assert k == pytest.approx(79300.0 * 0.3 ** 4 / (8 * 2.7 ** 3 * 4.0))
    assert k == pytest.approx(1.02, abs=0.01)


def test_spring_wire_must_fit_inside_coil():
    with pytest.raises(ConfigError):
        helical_spring_rate(3.0, 3.0, 4.0, 79300.0)


def test_ideal_stiffness_is_symmetric_positive_definite(stiffness, cfg):
    assert stiffness.is_symmetric_positive_definite()
    k = helical_spring_rate(0.3, 3.0, 4.0, 79300.0)
    assert stiffness.matrix[2, 2] == pytest.approx(cfg.wrench.spring_count * k)
    assert stiffness.matrix[0, 0] == pytest.approx(cfg.wrench.spring_count * k * cfg.wrench.shear_ratio)


def test_symmetric_layout_decouples_axes(stiffness):
    off = stiffness.matrix - np.diag(np.diag(stiffness.matrix))
    assert np.allclose(off, 0.0, atol=1e-9)


def test_too_few_springs_is_singular():
    with pytest.raises(SingularLayoutError):
        ideal_spring_stiffness(circular_layout(2, 7.0), 1.0)


def test_collinear_springs_are_singular():
    layout = np.array([[-5.0, 0.0], [0.0, 0.0], [5.0, 0.0], [10.0, 0.0]])
    with pytest.raises(SingularLayoutError):
        ideal_spring_stiffness(layout, 1.0)


def test_zero_delta_gives_zero_wrench(stiffness):
    w = wrench_from_pose(PoseDelta.zero(), stiffness)
    assert np.all(w.vector == 0.0)
    assert not w.saturated


def test_wrench_and_compliance_are_inverse(stiffness):
    w = Wrench.from_vector([0.3, -0.2, 4.0, 1.0, -2.0, 0.5])
    d = pose_from_wrench(w, stiffness)
    assert np.allclose(wrench_from_pose(d, stiffness).vector, w.vector)


def test_saturation_flag_above_f_max(stiffness):
    d = pose_from_wrench(Wrench.from_vector([0.0, 0.0, 20.0, 0.0, 0.0, 0.0]), stiffness)
    w = wrench_from_pose(d, stiffness, f_max=17.0)
    assert w.saturated
    assert w.to_json()["saturated"] is True
    assert w.force_magnitude == pytest.approx(20.0)


def test_large_rotation_is_flagged():
    assert PoseDelta([0, 0, 0, 0.4, 0, 0]).large_rotation
    assert not PoseDelta([0, 0, 0, 0.1, 0, 0]).large_rotation


def test_pose_delta_and_apply_delta_are_inverse():
    ref = Pose6D.from_euler([0.0, 0.0, 14.0], [0.0, 0.0, 180.0])
    d = PoseDelta([0.1, -0.2, 0.3, 0.01, 0.02, -0.03])
    moved = apply_delta(ref, d)
    assert np.allclose(pose_delta(moved, ref).vector, d.vector)
    assert np.allclose(pose_delta(ref, ref).vector, 0.0)


def test_pose_delta_is_in_the_platform_frame():
    ref = Pose6D.from_euler([0.0, 0.0, 14.0], [0.0, 0.0, 180.0])
    # moving the platform 1 mm toward the camera is −1 mm along its own z
    moved = Pose6D(ref.t - [0.0, 0.0, 1.0], ref.q)
    assert np.allclose(pose_delta(moved, ref).vector, [0, 0, 1.0, 0, 0, 0])


def test_calibration_recovers_stiffness(stiffness, rng):
    deltas = rng.normal(0.0, 0.1, size=(30, 6))
    samples = [(PoseDelta(d), Wrench.from_vector(stiffness.matrix @ d)) for d in deltas]
    s, report = calibrate_stiffness(samples)
    assert np.allclose(s.matrix, stiffness.matrix, atol=1e-9)
    assert report.rank == 6
    assert max(report.rms_residual.values()) < 1e-9


def test_calibration_names_unexcited_axes(stiffness, rng):
    deltas = rng.normal(0.0, 0.1, size=(30, 6))
    deltas[:, 5] = 0.0
    samples = [(PoseDelta(d), Wrench.from_vector(stiffness.matrix @ d)) for d in deltas]
    with pytest.raises(CalibrationError) as err:
        calibrate_stiffness(samples)
    assert err.value.deficient_axes == ("rz",)


def test_calibration_needs_six_samples(stiffness):
    samples = [(PoseDelta(np.eye(6)[k]), Wrench.from_vector(stiffness.matrix[:, k])) for k in range(5)]
    with pytest.raises(CalibrationError):
        calibrate_stiffness(samples)


def test_singular_stiffness_has_no_compliance():
    with pytest.raises(CalibrationError):
        StiffnessMatrix(np.diag([1.0, 1.0, 1.0, 1.0, 1.0, 0.0])).compliance()


def test_stiffness_json_round_trip(stiffness, tmp_path):
    path = tmp_path / "stiffness.json"
    path.write_text(json.dumps(stiffness_to_json(stiffness)))
    assert np.array_equal(load_stiffness(str(path)).matrix, stiffness.matrix)
    with pytest.raises(CalibrationError):
        stiffness_from_json({"values": [1.0] * 35})


def test_missing_stiffness_file_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_stiffness(str(tmp_path / "missing.json"))


# ---------- properties ----------

def test_wrench_is_linear_in_the_pose_delta(stiffness, rng):
    d1, d2 = rng.normal(0.0, 0.05, size=(2, 6))
    w1 = wrench_from_pose(PoseDelta(d1), stiffness, f_max=1e6).vector
    w2 = wrench_from_pose(PoseDelta(d2), stiffness, f_max=1e6).vector
    mixed = wrench_from_pose(PoseDelta(2.5 * d1 - 0.7 * d2), stiffness, f_max=1e6).vector
    assert np.allclose(mixed, 2.5 * w1 - 0.7 * w2, atol=1e-12)
    assert np.all(wrench_from_pose(PoseDelta.zero(), stiffness).vector == 0.0)


def test_calibration_with_one_percent_noise(stiffness, rng):
    worst = []
    for _ in range(100):
        deltas = rng.normal(0.0, 0.1, size=(36, 6))
        clean = deltas @ stiffness.matrix.T
        noisy = clean * (1.0 + 0.01 * rng.standard_normal(clean.shape))
        s, report = calibrate_stiffness([(PoseDelta(d), Wrench.from_vector(w)) for d, w in zip(deltas, noisy)])
        assert report.rank == 6
        row_err = np.linalg.norm(s.matrix - stiffness.matrix, axis=1) / np.linalg.norm(stiffness.matrix, axis=1)
        worst.append(row_err.max())
    assert np.median(worst) <= 0.03
