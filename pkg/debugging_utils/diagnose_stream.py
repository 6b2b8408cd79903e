#!/usr/bin/env python3
"""
Stream Diagnostic Script for crossgap

Helps find out why training or detection misbehaves on a given input by checking:
1. The frame source opens and decodes
2. Frame geometry, count and brightness
3. Model compatibility (image size, sample points)
4. Optical flow health at the model's sample points
5. Activity level on the first frames

Usage:
    python3 debugging_utils/diagnose_stream.py --input runs/test/frames [--model model.json]
"""

import argparse
import itertools
import os
import sys

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from crossgap.activity import compute_activity  # noqa: E402
from crossgap.errors import CrossGapError  # noqa: E402
from crossgap.frame_io import StreamConfig, open_stream  # noqa: E402
from crossgap.model import load_model  # noqa: E402
from crossgap.optflow import sparse_flow  # noqa: E402


def print_section(title):
    """Print a formatted section header."""
    print("\n" + "=" * 60)
    print(f"  {title}")
    print("=" * 60)


def check_source(cfg, limit):
    """Read up to limit frames. Return them or None."""
    print_section("Frame Source")
    print(f"Source: {cfg.source} ({cfg.format.name}, {cfg.fps:g} fps)")
    try:
        frames = list(itertools.islice(open_stream(cfg), limit))
    except CrossGapError as error:
        print(f"✗ Cannot read frames: {error}")
        return None
    if not frames:
        print("✗ Source holds no frames")
        return None
    print(f"✓ Read {len(frames)} frames (limit {limit})")
    return frames


def check_frames(frames):
    """Print geometry and brightness statistics."""
    print_section("Frames")
    first = frames[0]
    print(f"Size: {first.width}x{first.height}")
    means = np.array([frame.luma.mean() for frame in frames])
    print(f"Mean luma: min {means.min():.3f}, max {means.max():.3f}")
    if means.max() - means.min() > 0.2:
        print("⚠ Brightness changes a lot; exposure changes show up as activity")
    stds = np.array([frame.luma.std() for frame in frames])
    if stds.mean() < 0.02:
        print("⚠ Very low texture; optical flow will reject most points")
    else:
        print(f"✓ Texture std {stds.mean():.3f}")


def check_model(model, frames):
    """Check that the model fits the stream."""
    print_section("Model")
    first = frames[0]
    print(f"Model image: {model.width}x{model.height}, trained at {model.fps:g} fps")
    print(f"Point of first appearance: {model.influx.pfa}")
    print(f"Sample points: {len(model.points)} of {model.points.requested}")
    if (first.width, first.height) != (model.width, model.height):
        print("✗ Stream size differs from the model; detection will refuse to run")
        return False
    print("✓ Stream size matches the model")
    return True


def check_flow(model, frames):
    """Track the first frame pairs and report tracking failures and activity."""
    print_section("Optical Flow and Activity")
    values = []
    invalid = []
    for prev, nxt in zip(frames, frames[1:]):
        flow = sparse_flow(prev, nxt, model.points.points, model.lk)
        invalid.append(flow.invalid_count / max(len(model.points), 1))
        values.append(compute_activity(flow, model.points))
    if not values:
        print("⚠ Need at least two frames")
        return
    print(f"Invalid tracks: mean {np.mean(invalid):.1%}, worst {np.max(invalid):.1%}")
    if np.mean(invalid) > 0.5:
        print("⚠ Most points fail to track; check focus, noise or window size")
    print(f"Activity: mean {np.mean(values):.4g}, max {np.max(values):.4g}")
    print(f"Noise sigma from model: {model.noise.sigma:.4g}")


def main():
    """Run all diagnostics."""
    parser = argparse.ArgumentParser(description="Diagnose a crossgap frame source.")
    parser.add_argument("--input", required=True)
    parser.add_argument("--format", default="PGM")
    parser.add_argument("--fps", type=float, default=8.0)
    parser.add_argument("--width", type=int)
    parser.add_argument("--height", type=int)
    parser.add_argument("--model")
    parser.add_argument("--frames", type=int, default=40, help="Frames to inspect")
    args = parser.parse_args()

    print("\n" + "=" * 60)
    print("  crossgap Stream Diagnostics")
    print("=" * 60)

    try:
        cfg = StreamConfig(args.input, args.format, args.fps, 1, args.width, args.height)
    except ValueError as error:
        print(f"✗ {error}")
        return 2
    frames = check_source(cfg, args.frames)
    if frames is None:
        return 3
    check_frames(frames)
    if args.model:
        try:
            model = load_model(args.model)
        except CrossGapError as error:
            print(f"✗ {error}")
            return 3
        if check_model(model, frames):
            check_flow(model, frames)

    print_section("Summary")
    print("Diagnostics complete.")
    return 0


if __name__ == "__main__":
    sys.exit(main())
