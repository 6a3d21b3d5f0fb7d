import dataclasses

import numpy as np
import pytest

from backend.errors import DimensionMismatchError, OverSegmentationError
from backend.imageproc import (
    BLACK,
    WHITE,
    Frame,
    GrayFrame,
    circular_mask,
    extract_markers,
    gaussian_blur,
    marker_mask,
    order_by_angle,
    sharpen,
    to_gray,
)
from backend.simulator import render_frame


def _gray_with_discs(centers, level, background=140, radius=5, size=120):
    yy, xx = np.mgrid[0:size, 0:size]
    img = np.full((size, size), background, dtype=np.uint8)
    for cx, cy in centers:
        img[(xx - cx) ** 2 + (yy - cy) ** 2 <= radius * radius] = level
    return GrayFrame(img, index=7)


def test_frame_requires_rgb_uint8():
    with pytest.raises(DimensionMismatchError):
        Frame(np.zeros((4, 4), dtype=np.uint8))
    with pytest.raises(DimensionMismatchError):
        Frame(np.zeros((4, 4, 3), dtype=np.float32))


def test_blur_keeps_constant_image_and_index():
    f = Frame(np.full((32, 32, 3), 90, dtype=np.uint8), index=5)
    out = gaussian_blur(f, 1.0)
    assert out.index == 5
    assert np.array_equal(out.pixels, f.pixels)


def test_blur_rejects_non_positive_sigma():
    with pytest.raises(ValueError):
        gaussian_blur(np.zeros((8, 8)), 0.0)


def test_blur_spreads_an_impulse_and_keeps_its_mass():
    img = np.zeros((21, 21))
    img[10, 10] = 100.0
    out = gaussian_blur(img, 1.0)
    assert out[10, 10] < 100.0
    assert out.sum() == pytest.approx(100.0, rel=1e-6)


def test_circular_mask_blacks_out_corners_only():
    f = Frame(np.full((40, 40, 3), 200, dtype=np.uint8))
    out = circular_mask(f)
    assert np.all(out.pixels[0, 0] == 0)
    assert np.all(out.pixels[20, 20] == 200)
    assert np.all(out.pixels[20, 0] == 200)


def test_sharpen_with_zero_amount_is_identity():
    f = Frame(np.arange(48, dtype=np.uint8).reshape(4, 4, 3))
    assert sharpen(f, 0.0, 1.5) is f


def test_sharpen_increases_edge_contrast():
    img = np.zeros((20, 20))
    img[:, 10:] = 100.0
    out = sharpen(img, 1.0, 1.5)
    assert out[10, 10] > 100.0
    assert out[10, 9] < 0.0


def test_gray_uses_luma_weights():
    px = np.array([[[255, 0, 0], [0, 255, 0], [0, 0, 255]]], dtype=np.uint8)
    g = to_gray(Frame(px, index=2))
    assert g.index == 2
    assert g.pixels.tolist() == [[76, 150, 29]]


def test_black_markers_found_at_disc_centres(cfg):
    centers = [(30, 30), (80, 40), (60, 90)]
    found = extract_markers(_gray_with_discs(centers, 10), BLACK, cfg.imageproc)
    assert len(found) == 3
    got = found.centroids[np.lexsort((found.centroids[:, 1], found.centroids[:, 0]))]
    want = np.array(sorted(centers), dtype=float)
    assert np.allclose(got, want, atol=1e-9)
    assert np.all(found.areas == found.areas[0])


def test_white_markers_found_at_disc_centres(cfg):
    found = extract_markers(_gray_with_discs([(50, 60)], 255), WHITE, cfg.imageproc)
    assert len(found) == 1
    assert np.allclose(found.centroids[0], [50.0, 60.0])


def test_single_pixel_speck_is_removed(cfg):
    g = _gray_with_discs([(30, 30)], 10)
    g.pixels[90, 90] = 0
    assert not marker_mask(g, BLACK, cfg.imageproc)[90, 90]
    assert len(extract_markers(g, BLACK, cfg.imageproc)) == 1


def test_components_outside_area_bounds_are_dropped(cfg, with_section):
    small = with_section(cfg, "imageproc", max_area=20.0).imageproc
    assert len(extract_markers(_gray_with_discs([(30, 30)], 10), BLACK, small)) == 0


def test_too_many_components_is_oversegmentation(cfg):
    ip = dataclasses.replace(cfg.imageproc, max_markers=3)
    g = _gray_with_discs([(15, 15), (45, 15), (75, 15), (15, 60), (45, 60)], 10)
    with pytest.raises(OverSegmentationError) as err:
        extract_markers(g, BLACK, ip)
    assert err.value.count == 5


def test_blank_frame_has_no_markers(cfg):
    g = GrayFrame(np.full((50, 50), 140, dtype=np.uint8))
    assert len(extract_markers(g, BLACK, cfg.imageproc)) == 0
    assert len(extract_markers(g, WHITE, cfg.imageproc)) == 0


def test_order_by_angle_sorts_by_ascending_angle():
    pts = np.array([[10.0, 0.0], [0.0, 10.0], [-10.0, 0.1], [0.0, -10.0]])
    assert order_by_angle(pts, (0.0, 0.0)).tolist() == [3, 0, 1, 2]


# ---------- properties ----------

def test_blurred_impulse_peaks_at_the_gaussian_normaliser():
    img = np.zeros((21, 21))
    img[10, 10] = 1.0
    out = gaussian_blur(img, 1.0)
    assert out[10, 10] == pytest.approx(1.0 / (2.0 * np.pi), abs=1e-3)
    assert out.argmax() == 10 * 21 + 10


def test_two_blurs_equal_one_wider_blur():
    img = np.zeros((41, 41))
    img[20, 20] = 1.0
    img[12, 25] = 0.5
    twice = gaussian_blur(gaussian_blur(img, 1.0), 1.0)
    once = gaussian_blur(img, np.sqrt(2.0))
    assert np.allclose(twice, once, atol=1e-3)


def test_centroids_move_with_the_image(cfg):
    yy, xx = np.mgrid[0:120, 0:120]
    img = np.full((120, 120), 140.0)
    for cx, cy in [(30.3, 40.6), (75.8, 70.1)]:
        img -= 120.0 * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / 18.0)
    px = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    base = extract_markers(GrayFrame(px), BLACK, cfg.imageproc)
    moved = extract_markers(GrayFrame(np.roll(px, (-4, 7), axis=(0, 1))), BLACK, cfg.imageproc)
    assert len(base) == len(moved) == 2
    order = np.argsort(base.centroids[:, 0])
    assert np.allclose(moved.centroids[np.argsort(moved.centroids[:, 0])], base.centroids[order] + (7, -4), atol=1e-9)


def test_cleaning_a_clean_mask_changes_nothing(cfg, rng):
    img = np.full((80, 80), 140, dtype=np.uint8)
    noise = np.zeros((80, 80), dtype=bool)
    noise[10:70, 10:70] = rng.random((60, 60)) < 0.3
    img[noise] = 20
    img[20:35, 30:50] = 20
    first = marker_mask(GrayFrame(img), BLACK, cfg.imageproc)
    again = marker_mask(GrayFrame(np.where(first, 20, 140).astype(np.uint8)), BLACK, cfg.imageproc)
    assert first.any()
    assert np.array_equal(first, again)


def test_black_and_white_masks_never_overlap(cfg, sensor, press):
    frame = render_frame(sensor, press(frames=2, fz=4.0), 1)
    g = to_gray(frame)
    black = marker_mask(g, BLACK, cfg.imageproc)
    white = marker_mask(g, WHITE, cfg.imageproc)
    assert black.any() and white.any()
    assert not (black & white).any()
