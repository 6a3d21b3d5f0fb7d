import numpy as np
import pytest

from backend.camera import (
    CameraIntrinsics,
    DistortionCoefficients,
    DomeGeometry,
    generate_dome_pattern,
    project,
    ray_sphere_intersect,
    silhouette_mask,
    undistort_frame,
    undistort_map,
    undistort_points,
)
from backend.errors import ConfigError, DimensionMismatchError, ProjectionDomainError
from backend.imageproc import Frame

NO_DIST = DistortionCoefficients()
DIST = DistortionCoefficients(-0.12, 0.03, 0.001, -0.0005, 0.0)


@pytest.fixture
def intr():
    return CameraIntrinsics(320.0, 320.0, 240.0, 240.0, 480, 480)


def test_optical_axis_projects_to_principal_point(intr):
    assert np.allclose(project([0.0, 0.0, 10.0], intr, NO_DIST), [240.0, 240.0])


def test_project_rejects_points_behind_camera(intr):
    with pytest.raises(ProjectionDomainError):
        project(np.array([[0.0, 0.0, 1.0], [1.0, 1.0, 0.0]]), intr, NO_DIST)


def test_undistort_points_inverts_forward_distortion(intr):
    pts = np.array([[1.0, -2.0, 20.0], [-3.0, 2.5, 18.0], [0.5, 0.5, 30.0]])
    ideal = project(pts, intr, NO_DIST)
    distorted = project(pts, intr, DIST)
    assert not np.allclose(ideal, distorted)
    assert np.allclose(undistort_points(distorted, intr, DIST), ideal, atol=1e-6)


def test_zero_distortion_undistort_is_identity(intr):
    px = np.array([[10.0, 20.0], [240.0, 240.0], [479.0, 0.0]])
    assert np.allclose(undistort_points(px, intr, NO_DIST), px)


def test_undistort_map_points_at_distorted_source(intr):
    grid = undistort_map(intr, DIST)
    u, v = 300, 200
    expected = project([(u - 240) / 320, (v - 240) / 320, 1.0], intr, DIST)
    assert grid.map_x[v, u] == pytest.approx(expected[0])
    assert grid.map_y[v, u] == pytest.approx(expected[1])


def test_undistort_frame_without_distortion_is_identity(intr, rng):
    frame = Frame(rng.integers(0, 256, size=(480, 480, 3), dtype=np.uint8), index=3)
    out = undistort_frame(frame, undistort_map(intr, NO_DIST))
    assert out.index == 3
    assert np.array_equal(out.pixels, frame.pixels)


def test_undistort_frame_rejects_other_sizes(intr):
    with pytest.raises(DimensionMismatchError):
        undistort_frame(Frame(np.zeros((100, 100, 3), dtype=np.uint8)), undistort_map(intr, NO_DIST))


def test_ray_along_axis_hits_dome_apex():
    pts, hit = ray_sphere_intersect(np.array([[0.0, 0.0, 1.0]]), DomeGeometry())
    assert hit[0]
    assert np.allclose(pts[0], [0.0, 0.0, 16.0])


def test_ray_outside_dome_misses():
    pts, hit = ray_sphere_intersect(np.array([[1.0, 0.0, 1.0]]), DomeGeometry())
    assert not hit[0]
    assert np.all(np.isnan(pts[0]))


def test_silhouette_is_the_tangent_cone_disc(intr):
    mask = silhouette_mask(intr, DomeGeometry())
    radius = 320.0 * 10.0 / np.sqrt(26.0 ** 2 - 10.0 ** 2)
    assert mask.sum() == pytest.approx(np.pi * radius ** 2, rel=0.01)
    assert mask[240, 240]
    assert not mask[0, 0]


def test_dome_apex_faces_camera():
    assert np.allclose(DomeGeometry().apex, [0.0, 0.0, 16.0])


def test_dome_must_be_in_front_of_camera():
    with pytest.raises(ConfigError):
        DomeGeometry(radius=10.0, center=(0.0, 0.0, 5.0))


def test_pattern_has_one_dot_per_grid_node_inside_silhouette(intr):
    dome = DomeGeometry()
    pattern = generate_dome_pattern(intr, NO_DIST, dome, 32.0)

    nodes = 240 + 32 * np.arange(-7, 8)
    mask = silhouette_mask(intr, dome)
    assert len(pattern) == int(mask[np.ix_(nodes, nodes)].sum())

    # dots lie on the sphere and image exactly onto their grid node
    assert np.allclose(np.linalg.norm(pattern.dots3d - dome.center_array, axis=1), 10.0)
    assert np.allclose(project(pattern.dots3d, intr, NO_DIST), pattern.dots2d, atol=1e-6)
    assert np.allclose((pattern.dots2d - 240.0) / 32.0, pattern.grid_ij)


def test_pattern_arcs_grow_toward_the_rim(intr):
    pattern = generate_dome_pattern(intr, NO_DIST, DomeGeometry(), 32.0)
    arcs = pattern.neighbor_arcs
    assert len(arcs) == len(pattern.neighbors) > 0
    # 32 px at the apex (z = 16 mm) is 1.6 mm
    assert arcs.min() == pytest.approx(1.6, rel=0.02)
    assert arcs.max() > 1.5 * arcs.min()


def test_pattern_with_distortion_still_images_on_grid(intr):
    pattern = generate_dome_pattern(intr, DIST, DomeGeometry(), 32.0)
    assert np.allclose(project(pattern.dots3d, intr, DIST), pattern.dots2d, atol=1e-6)


def test_grid_step_larger_than_image_gives_empty_pattern(intr):
    assert len(generate_dome_pattern(intr, NO_DIST, DomeGeometry(), 1000.0)) == 0


def test_grid_step_below_two_pixels_is_rejected(intr):
    with pytest.raises(ConfigError):
        generate_dome_pattern(intr, NO_DIST, DomeGeometry(), 1.0)


# ---------- geometric properties ----------

def _marched_arc(a, b, dome, steps=4000):
    c = dome.center_array
    u, v = a - c, b - c
    theta = np.arccos(np.clip(u @ v / dome.radius ** 2, -1.0, 1.0))
    t = np.linspace(0.0, 1.0, steps + 1)[:, None]
    path = (np.sin((1.0 - t) * theta) * u + np.sin(t * theta) * v) / np.sin(theta)
    return np.linalg.norm(np.diff(path, axis=0), axis=1).sum()


def test_pattern_geometry_matches_arc_marching(intr):
    dome = DomeGeometry()
    pattern = generate_dome_pattern(intr, NO_DIST, dome, 32.0)
    assert np.abs(project(pattern.dots3d, intr, NO_DIST) - pattern.dots2d).max() <= 1e-9

    pick = np.r_[np.arange(0, len(pattern.neighbors), 7), np.argmax(pattern.neighbor_arcs)]
    for m in pick:
        i, j = pattern.neighbors[m]
        marched = _marched_arc(pattern.dots3d[i], pattern.dots3d[j], dome)
        assert pattern.neighbor_arcs[m] == pytest.approx(marched, abs=1e-6)


def test_undistortion_straightens_lines(intr):
    s = np.linspace(-1.0, 1.0, 41)[:, None]
    line = np.array([-2.0, 3.0, 10.0]) + s * np.array([6.0, 2.5, 0.0])

    def deviation(px):
        centred = px - px.mean(axis=0)
        return np.linalg.svd(centred, compute_uv=False)[1] / np.sqrt(len(px))

    curved = project(line, intr, DIST)
    assert deviation(curved) > 0.5
    assert deviation(undistort_points(curved, intr, DIST)) < 1e-6


def test_distortion_round_trip_on_random_pixels(intr, rng):
    r = 200.0 * np.sqrt(rng.random(100))
    a = rng.uniform(0.0, 2.0 * np.pi, 100)
    px = np.stack([240.0 + r * np.cos(a), 240.0 + r * np.sin(a)], axis=1)

    ideal = undistort_points(px, intr, DIST)
    rays = np.column_stack([(ideal - 240.0) / 320.0, np.ones(100)])
    back = project(rays, intr, DIST)
    assert np.linalg.norm(back - px, axis=1).max() <= 0.1
