# ======================================================
# main.py
# Dome tactile sensor toolkit
# ======================================================

"""
Command-line entry point.

Subcommands:
- pattern    export the dome dot pattern (CSV + SVG)
- simulate   render a contact scenario to frames + ground truth
- process    run the per-frame pipeline over a frame directory
- calibrate  least-squares stiffness from (delta, wrench) samples
- dataset    simulate a labeled soft/hard dataset
- hardness   train and evaluate the hardness classifier

Exit codes: 0 ok, 1 usage/config, 2 data, 3 non-convergence.
"""

import argparse
import logging
import os
import sys
from typing import List, Optional

from backend.logger import setup_logging
from backend.errors import TactileError
from config.app_config import APP_NAME, VERSION, load_pipeline_config

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


# ======================================================
# ARGUMENTS
# ======================================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file merged over the defaults")
    common.add_argument("--out", help="output directory (default: paths.out_dir)")
    common.add_argument("--seed", type=int, help="seed for every random draw")
    common.add_argument("--threads", type=int, help="worker threads for frame-independent work")
    common.add_argument("--log-level", choices=("DEBUG", "INFO", "WARNING", "ERROR"))

    parser = argparse.ArgumentParser(prog="tactile", description=f"{APP_NAME} {VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("pattern", parents=[common], help="export the dome dot pattern")

    p = sub.add_parser("simulate", parents=[common], help="render a scenario")
    p.add_argument("--scenario", help="scenario JSON (default: static, zero wrench)")
    p.add_argument("--frames", type=int, help="frame count for the default scenario")

    p = sub.add_parser("process", parents=[common], help="process a frame sequence")
    p.add_argument("--frames", required=True, help="directory of frame_NNNN.ppm files")
    p.add_argument("--overlay", choices=("on", "off"), help="write overlay frames")
    p.add_argument("--no-shape", action="store_true", help="skip normal/height recovery")
    p.add_argument("--heights", action="store_true", help="write per-frame height maps")

    p = sub.add_parser("calibrate", parents=[common], help="fit a stiffness matrix")
    p.add_argument("--samples", required=True, help="CSV of dx..rz, Fx..Tz rows")

    p = sub.add_parser("dataset", parents=[common], help="simulate a hardness dataset")
    p.add_argument("--sequences", type=int, help="sequence count (default: hardness.sequences)")
    p.add_argument("--source", choices=("render", "truth"), default="render")

    p = sub.add_parser("hardness", parents=[common], help="train/evaluate the hardness classifier")
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")

    return parser


def _overrides(args) -> dict:
    out = {
        "sim.seed": args.seed,
        "hardness.seed": args.seed,
        "app.threads": args.threads,
        "app.log_level": args.log_level,
    }
    overlay = getattr(args, "overlay", None)
    if overlay is not None:
        out["overlay.enabled"] = overlay == "on"
    return out


# ======================================================
# COMMANDS
# ======================================================

def cmd_pattern(cfg, out_dir: str) -> int:
    from backend.camera import CameraIntrinsics, DistortionCoefficients, DomeGeometry, generate_dome_pattern
    from backend.results_dao import write_pattern_csv, write_pattern_svg

    intr = CameraIntrinsics.from_config(cfg.camera)
    dome = DomeGeometry.from_config(cfg.dome)
    pattern = generate_dome_pattern(intr, DistortionCoefficients.from_config(cfg.camera), dome, cfg.pattern.grid_step)
    if len(pattern) == 0:
        log.warning("Pattern is empty (grid_step=%.1f)", cfg.pattern.grid_step)

    radius_px = cfg.pattern.dot_radius_mm * intr.fx / float(dome.apex[2])
    write_pattern_csv(os.path.join(out_dir, "pattern.csv"), pattern)
    write_pattern_svg(os.path.join(out_dir, "pattern.svg"), pattern, intr.width, intr.height, radius_px)
    log.info("Pattern: %d dots → %s", len(pattern), out_dir)
    return EXIT_OK


def cmd_simulate(cfg, out_dir: str, scenario_path: Optional[str], frames: Optional[int]) -> int:
    from backend.frames_dao import frame_name, write_frames
    from backend.results_dao import write_json, write_marker_table, write_truth_table
    from backend.scenario import ContactScenario, load_scenario
    from backend.simulator import SensorModel, render_sequence

    if scenario_path:
        sc = load_scenario(scenario_path)
    else:
        sc = ContactScenario.static(frames or 30)

    model = SensorModel.from_config(cfg)
    rendered, truth = render_sequence(model, sc, threads=cfg.app.threads)

    threshold = cfg.shape.contact_threshold_mm
    write_frames(os.path.join(out_dir, "frames"), rendered)
    write_json(os.path.join(out_dir, "truth.json"), truth.to_json(threshold))
    write_marker_table(os.path.join(out_dir, "markers.csv"), truth.frames)
    write_truth_table(os.path.join(out_dir, "truth.csv"), truth.frames, threshold)
    write_json(os.path.join(out_dir, "manifest.json"), {
        "scenario": sc.to_json(),
        "seed": model.seed,
        "frame_count": len(rendered),
        "frames": [os.path.join("frames", frame_name(f.index)) for f in rendered],
        "config_version": cfg.version,
    })
    log.info("Simulated %d frames → %s", len(rendered), out_dir)
    return EXIT_OK


def cmd_process(cfg, out_dir: str, frames_dir: str, with_shape: bool, heights: bool) -> int:
    from backend.frames_dao import read_sequence, write_ppm
    from backend.pipeline import process_sequence
    from backend.results_dao import (
        write_flow_csv,
        write_frame_table,
        write_height_csv,
        write_height_map,
        write_json,
        write_marker_csv,
    )

    frames = read_sequence(frames_dir)
    result = process_sequence(
        frames, cfg,
        threads=cfg.app.threads,
        with_shape=with_shape,
        overlay=cfg.overlay.enabled,
    )
    summary = result.to_json()
    write_json(os.path.join(out_dir, "summary.json"), summary)
    write_frame_table(os.path.join(out_dir, "frames.csv"), summary["records"])

    for r in result.results:
        write_marker_csv(os.path.join(out_dir, "markers", f"markers_{r.index:04d}.csv"), r.markers)
        write_flow_csv(os.path.join(out_dir, "flow", f"flow_{r.index:04d}.csv"), r.flow)

    if result.overlays:
        odir = os.path.join(out_dir, "overlays")
        os.makedirs(odir, exist_ok=True)
        for ov in result.overlays:
            write_ppm(os.path.join(odir, f"overlay_{ov.index:04d}.ppm"), ov)

    if heights and with_shape:
        hdir = os.path.join(out_dir, "heights")
        for r in result.results:
            if r.height is not None:
                stem = os.path.join(hdir, f"height_{r.index:04d}")
                write_height_map(stem, r.height)
                write_height_csv(f"{stem}.csv", r.height)

    log.info("Processed %d frames → %s (%d flagged)", len(frames), out_dir, summary["flagged_frames"])
    return EXIT_OK


def cmd_calibrate(cfg, out_dir: str, samples_path: str) -> int:
    from backend.results_dao import read_calibration_samples, write_json
    from backend.wrench import PoseDelta, Wrench, WRENCH_AXES, calibrate_stiffness, stiffness_to_json

    rows = read_calibration_samples(samples_path)
    samples = [(PoseDelta(r[:6]), Wrench.from_vector(r[6:])) for r in rows]
    s, report = calibrate_stiffness(samples)

    for axis in WRENCH_AXES:
        log.info("Residual RMS %s: %.4g", axis, report.rms_residual[axis])
    log.info("Condition number: %.4g", report.condition_number)

    write_json(os.path.join(out_dir, "stiffness.json"), stiffness_to_json(s, report))
    return EXIT_OK


def cmd_dataset(cfg, out_dir: str, sequences: Optional[int], source: str) -> int:
    from backend.hardness import build_dataset

    build_dataset(cfg, out_dir, sequences, source, threads=cfg.app.threads)
    return EXIT_OK


def cmd_hardness(cfg, out_dir: str, manifest: str) -> int:
    from backend.hardness import run_experiment
    from backend.results_dao import write_json

    model, metrics = run_experiment(manifest, cfg.hardness)
    write_json(os.path.join(out_dir, "model.json"), model.to_json())
    write_json(os.path.join(out_dir, "metrics.json"), metrics)
    return EXIT_OK


# ======================================================
# MAIN
# ======================================================

def run(args) -> int:
    from backend.startup_checks import require_startup_checks

    cfg = load_pipeline_config(args.config, _overrides(args))
    setup_logging(cfg.paths.log_dir, cfg.app.log_level)
    out_dir = args.out or cfg.paths.out_dir

    log.info("%s %s | command=%s | out=%s", APP_NAME, VERSION, args.command, out_dir)
    require_startup_checks(cfg, out_dir)

    if args.command == "pattern":
        return cmd_pattern(cfg, out_dir)
    if args.command == "simulate":
        return cmd_simulate(cfg, out_dir, args.scenario, args.frames)
    if args.command == "process":
        return cmd_process(cfg, out_dir, args.frames, not args.no_shape, args.heights)
    if args.command == "calibrate":
        return cmd_calibrate(cfg, out_dir, args.samples)
    if args.command == "dataset":
        return cmd_dataset(cfg, out_dir, args.sequences, args.source)
    if args.command == "hardness":
        return cmd_hardness(cfg, out_dir, args.manifest)
    raise AssertionError(args.command)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK

    # logging first, before config is known
    setup_logging(level=args.log_level)

    try:
        return run(args)
    except TactileError as e:
        log.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except OSError as e:
        log.error("I/O error: %s", e)
        return EXIT_DATA


# ======================================================
if __name__ == "__main__":
    sys.exit(main())
