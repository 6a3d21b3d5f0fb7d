"""
End-to-end loops on simulated data. Slow; run with ``pytest -m slow``.
"""

import dataclasses
import time

import numpy as np
import pytest

from backend.hardness import build_dataset, run_experiment
from backend.pipeline import process_sequence
from backend.scenario import ContactScenario, Indenter
from backend.simulator import render_sequence


def _random_loads(rng, frames):
    """Mostly normal loads with |F| <= 10 N; frame 0 unloaded."""
    w = np.zeros((frames, 6))
    w[1:, 2] = rng.uniform(0.0, 9.5, size=frames - 1)
    w[1:, :2] = rng.uniform(-1.0, 1.0, size=(frames - 1, 2))
    w[1:, 3:] = rng.uniform(-4.0, 4.0, size=(frames - 1, 3))
    return w


@pytest.mark.slow
def test_pose_and_wrench_loop(cfg, sensor):
    rng = np.random.default_rng(42)
    wrenches = _random_loads(rng, 200)
    sc = ContactScenario(200, wrenches, np.zeros(200), Indenter(), name="loads")
    frames, truth = render_sequence(sensor, sc, threads=4)

    start = time.perf_counter()
    result = process_sequence(frames, cfg, stiffness=sensor.stiffness, with_shape=False)
    assert time.perf_counter() - start < 60.0

    for r, gt in zip(result.results, truth.frames):
        assert np.linalg.norm(r.pose.t - gt.pose.t) < 0.05
        assert np.degrees((r.pose.rotation.inv() * gt.pose.rotation).magnitude()) < 0.1
        err = np.linalg.norm(r.wrench.force - gt.wrench.force)
        assert err <= 0.02 * gt.wrench.force_magnitude + 0.02


@pytest.mark.slow
def test_pose_loop_with_noise_and_jitter(cfg, sensor):
    noisy = dataclasses.replace(sensor, noise_sigma=0.5, jitter_px=0.1, seed=3)
    rng = np.random.default_rng(7)
    wrenches = _random_loads(rng, 200)
    sc = ContactScenario(200, wrenches, np.zeros(200), Indenter(), name="noisy-loads")
    frames, truth = render_sequence(noisy, sc, threads=4)
    result = process_sequence(frames, cfg, stiffness=sensor.stiffness, with_shape=False)

    t_err = [np.linalg.norm(r.pose.t - gt.pose.t) for r, gt in zip(result.results, truth.frames)]
    r_err = [
        np.degrees((r.pose.rotation.inv() * gt.pose.rotation).magnitude())
        for r, gt in zip(result.results, truth.frames)
    ]
    assert np.median(t_err) <= 0.1
    assert np.median(r_err) <= 0.2


@pytest.mark.slow
def test_flow_loop(cfg, sensor):
    frames_n = 10
    wrenches = np.zeros((frames_n, 6))
    wrenches[:, 2] = np.linspace(0.0, 4.0, frames_n)
    sc = ContactScenario(frames_n, wrenches, wrenches[:, 2] / 4.0, Indenter(radius=5.0), name="ramp")
    frames, truth = render_sequence(sensor, sc)
    result = process_sequence(frames, cfg, stiffness=sensor.stiffness, with_shape=False)

    origins = result.results[0].flow.origins
    match = np.linalg.norm(origins[:, None, :] - sensor.reference_dots[None, :, :], axis=2).argmin(axis=1)
    for r, gt in zip(result.results[1:], truth.frames[1:]):
        assert r.tracked.mean() >= 0.98
        err = np.linalg.norm(r.cumulative - gt.black_displacement[match], axis=1)[r.tracked]
        assert err.mean() <= 0.3


@pytest.mark.slow
def test_hardness_experiment_on_simulated_sequences(cfg, tmp_path):
    manifest = build_dataset(cfg, str(tmp_path), threads=8)
    model, metrics = run_experiment(manifest, cfg.hardness)
    assert metrics["test"]["count"] == 100
    assert metrics["test"]["accuracy"] >= 0.95

    again, _ = run_experiment(manifest, cfg.hardness)
    assert np.array_equal(again.weights, model.weights)


@pytest.mark.perf
def test_processing_throughput(cfg, sensor):
    frames, _ = render_sequence(sensor, ContactScenario.static(30), threads=4)
    start = time.perf_counter()
    process_sequence(frames, cfg, stiffness=sensor.stiffness, with_shape=False)
    fps = len(frames) / (time.perf_counter() - start)
    assert fps >= 30.0
