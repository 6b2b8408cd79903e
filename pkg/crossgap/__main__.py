"""Command line entry points for crossgap."""
from __future__ import annotations
import argparse
import dataclasses
import logging
import pathlib
import sys
import threading
import time
from typing import Optional, Sequence

from .__version__ import VERSION
from .config import Settings, load_settings
from .const import CONFIG_FILE, PRESETS, ExitCode, FrameFormat, State
from .errors import ConfigError, CrossGapError
from .evaluate import evaluate_files
from .frame_io import STDIN, FrameStream, StreamConfig, open_stream, write_pgm_dir, write_raw8, write_y4m
from .model import load_model, save_model
from .peer import MergedIndication, Role, StateSlot, run_link
from .runtime import TrainingOptions, run_detection, train
from .simgen import load_script, preset, render, save_script
from .util import setup_logging

_LOGGER = logging.getLogger(__name__)

DEFAULT_MODEL = "model.json"
_print_lock = threading.Lock()


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", default=CONFIG_FILE, help="YAML or JSON settings file")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    parser.add_argument("--log-file", default=None, help="Also append logs to this file")


def _add_stream(parser: argparse.ArgumentParser):
    parser.add_argument("--input", default=STDIN, help="PGM directory, Y4M or RAW8 file, '-' for stdin")
    parser.add_argument(
        "--format", default=None, choices=[item.name.lower() for item in FrameFormat], help="Input format"
    )
    parser.add_argument("--fps", type=float, default=None, help="Input frame rate")
    parser.add_argument("--decimation", type=int, default=None, help="Keep every k-th frame")
    parser.add_argument("--width", type=int, default=None, help="RAW8 frame width")
    parser.add_argument("--height", type=int, default=None, help="RAW8 frame height")


def _add_detector(parser: argparse.ArgumentParser):
    parser.add_argument("--pfa", type=float, default=None, help="False alarm probability per window")
    parser.add_argument("--rate", type=float, default=None, help="Detector rate in Hz")


def build_parser() -> argparse.ArgumentParser:
    """Return argument parser with all subcommands."""
    parser = argparse.ArgumentParser(prog="crossgap", description="Detect gaps in crossing traffic.")
    parser.add_argument("-v", "--version", action="version", version=VERSION)
    commands = parser.add_subparsers(dest="command", required=True)

    train_parser = commands.add_parser("train", help="Learn a model from training footage")
    _add_common(train_parser)
    _add_stream(train_parser)
    _add_detector(train_parser)
    train_parser.add_argument("--out", default=DEFAULT_MODEL, help="Model file to write")
    train_parser.add_argument(
        "--two-way", action="store_true", default=None, help="Drop outbound lane flow from the influx map"
    )
    train_parser.add_argument("--seed", type=int, default=0, help="Sample point seed")
    train_parser.add_argument("--trace-out", default=None, help="Write plain vs intensified activity CSV")

    detect_parser = commands.add_parser("detect", help="Run the online detector")
    _add_common(detect_parser)
    _add_stream(detect_parser)
    _add_detector(detect_parser)
    detect_parser.add_argument("--model", default=DEFAULT_MODEL, help="Model file from train")
    detect_parser.add_argument(
        "--out", "--events", dest="events", default=None, help="Write per-step event CSV"
    )
    detect_parser.add_argument("--trace-out", default=None, help="Write activity trace CSV")

    sim_parser = commands.add_parser("simulate", help="Render a synthetic scene")
    _add_common(sim_parser)
    scene = sim_parser.add_mutually_exclusive_group(required=True)
    scene.add_argument("--preset", choices=PRESETS, help="Named scene")
    scene.add_argument("--script", help="YAML or JSON scene script")
    sim_parser.add_argument("--out", required=True, help="Output directory")
    sim_parser.add_argument("--seed", type=int, default=None, help="Scene seed")
    sim_parser.add_argument("--duration", type=float, default=None, help="Preset duration in seconds")
    sim_parser.add_argument("--fps", type=float, default=None, help="Frame rate")
    sim_parser.add_argument("--width", type=int, default=None, help="Image width")
    sim_parser.add_argument("--height", type=int, default=None, help="Image height")
    sim_parser.add_argument("--y4m", action="store_true", help="Also write scene.y4m")
    sim_parser.add_argument("--raw8", action="store_true", help="Also write scene.raw")

    eval_parser = commands.add_parser("eval", help="Score an event log against ground truth")
    _add_common(eval_parser)
    eval_parser.add_argument("--events", required=True, help="Event CSV from detect")
    eval_parser.add_argument("--truth", required=True, help="truth.csv from simulate")
    eval_parser.add_argument("--out", required=True, help="Report directory")
    eval_parser.add_argument("--max-warning", type=float, default=None, help="Longest credited warning")
    eval_parser.add_argument("--bin", type=float, default=None, help="Histogram bin width in seconds")
    eval_parser.add_argument(
        "--allow-empty-truth", action="store_true", help="Score a truth file without vehicles"
    )

    peer_parser = commands.add_parser("peer", help="Detect and cooperate with the opposite node")
    _add_common(peer_parser)
    _add_stream(peer_parser)
    _add_detector(peer_parser)
    peer_parser.add_argument("--model", default=DEFAULT_MODEL, help="Model file from train")
    peer_parser.add_argument(
        "--out", "--events", dest="events", default=None, help="Write per-step event CSV"
    )
    role = peer_parser.add_mutually_exclusive_group(required=True)
    role.add_argument("--listen", metavar="[HOST:]PORT", help="Wait for the opposite node")
    role.add_argument("--connect", metavar="HOST[:PORT]", help="Dial the opposite node")
    peer_parser.add_argument(
        "--linger", type=float, default=0.0, help="Seconds to keep the link up after input ends"
    )
    return parser


def _settings(args: argparse.Namespace) -> Settings:
    settings = load_settings(args.config)
    if "input" in args:
        settings = settings.override(
            "stream",
            format=args.format.upper() if args.format else None,
            fps=args.fps,
            decimation=args.decimation,
            width=args.width,
            height=args.height,
        )
    if "pfa" in args:
        settings = settings.override("detector", p_fa=args.pfa, rate=args.rate)
    if getattr(args, "two_way", None):
        settings = settings.override("influx", two_way=True)
    return settings


def _open_input(args: argparse.Namespace, settings: Settings) -> FrameStream:
    stream = settings.stream
    try:
        cfg = StreamConfig(
            source=args.input,
            format=stream.format,
            fps=stream.fps,
            decimation=stream.decimation,
            width=stream.width,
            height=stream.height,
            queue_size=stream.queue_size,
        )
    except ValueError as error:
        raise ConfigError(str(error)) from error
    return open_stream(cfg)


def _detector_cfg(args: argparse.Namespace, model_cfg):
    values = {key: value for key, value in (("p_fa", args.pfa), ("rate", args.rate)) if value is not None}
    try:
        return dataclasses.replace(model_cfg, **values)
    except ValueError as error:
        raise ConfigError(f"Invalid detector setting: {error}") from error


def cmd_train(args: argparse.Namespace, settings: Settings) -> int:
    """Train a model and write it."""
    options = TrainingOptions(
        lk=settings.flow,
        influx=settings.influx,
        activity=settings.activity,
        detector=settings.detector,
        seed=args.seed,
        queue_size=settings.stream.queue_size,
    )
    report = train(_open_input(args, settings), options, args.trace_out)
    save_model(report.model, args.out)
    print(report.summary())
    return ExitCode.OK


def cmd_detect(args: argparse.Namespace, settings: Settings) -> int:
    """Run the detector over the input."""
    model = load_model(args.model)
    run_detection(
        _open_input(args, settings),
        model,
        _detector_cfg(args, model.detector),
        events_out=args.events,
        trace_out=args.trace_out,
        queue_size=settings.stream.queue_size,
    )
    return ExitCode.OK


def cmd_simulate(args: argparse.Namespace, settings: Settings) -> int:
    """Render a preset or script to PGM frames and truth.csv."""
    if args.preset:
        seed = args.seed if args.seed is not None else 0
        script = settings.simulate.apply(preset(args.preset, seed, args.duration))
    else:
        script = load_script(args.script)
        if args.seed is not None:
            script = dataclasses.replace(script, seed=args.seed)
    overrides = {
        key: value
        for key, value in (("fps", args.fps), ("width", args.width), ("height", args.height))
        if value is not None
    }
    if overrides:
        resized = "width" in overrides or "height" in overrides
        script = dataclasses.replace(
            script, **overrides, **({"entry": None, "exit_x": None} if resized and args.preset else {})
        )
    script.validate()
    out_dir = pathlib.Path(args.out)
    stream, truth = render(script)
    count = write_pgm_dir(stream, out_dir / "frames")
    if args.y4m:
        write_y4m(stream, out_dir / "scene.y4m", script.fps)
    if args.raw8:
        write_raw8(stream, out_dir / "scene.raw")
    truth.to_csv(out_dir / "truth.csv")
    save_script(script, out_dir / "scene.json")
    _LOGGER.info("Simulated %s: %s frames, %s vehicles in %s", script.name, count, len(truth), out_dir)
    print(f"frames: {count} ({script.width}x{script.height} at {script.fps:g} fps)")
    print(f"vehicles: {len(truth)}")
    return ExitCode.OK


def cmd_eval(args: argparse.Namespace, _settings: Settings) -> int:
    """Score events against ground truth and write the report."""
    kwargs = {}
    if args.max_warning is not None:
        kwargs["max_warning"] = args.max_warning
    if args.bin is not None:
        kwargs["bin_width"] = args.bin
    report = evaluate_files(args.events, args.truth, args.allow_empty_truth, **kwargs)
    report.write(args.out)
    summary = report.to_dict()
    for key in ("vehicles", "detections", "misses", "covered", "false_alarms", "warning_median"):
        print(f"{key}: {summary[key]}")
    return ExitCode.OK


def parse_endpoint(value: str, role: Role, default_port: int) -> tuple[str, int]:
    """Return (host, port) from PORT, HOST or HOST:PORT."""
    default_host = "0.0.0.0" if role == Role.LISTEN else "127.0.0.1"
    host, _, port = value.rpartition(":")
    if not host and not port.isdigit():
        host, port = port, ""
    try:
        return host or default_host, int(port) if port else default_port
    except ValueError as error:
        raise ConfigError(f"Invalid endpoint {value!r}") from error


def format_merged_line(indication: MergedIndication, timestamp: Optional[float]) -> str:
    """Return stdout line for a merged state change."""
    stamp = "t=-" if timestamp is None else f"t={timestamp:.3f}"
    return f"{stamp} MERGED={indication.state.name} staleness={indication.staleness:.3f}"


def cmd_peer(args: argparse.Namespace, settings: Settings) -> int:
    """Run the detector and publish its state to the opposite node."""
    model = load_model(args.model)
    role = Role.LISTEN if args.listen else Role.CONNECT
    endpoint = parse_endpoint(args.listen or args.connect, role, settings.peer.port)
    slot = StateSlot()

    def _on_merged(indication: MergedIndication):
        local = slot.get()
        with _print_lock:
            print(format_merged_line(indication, local.timestamp if local else None), flush=True)

    link = run_link(role, endpoint, slot, _on_merged, settings.peer)
    try:
        run_detection(
            _open_input(args, settings),
            model,
            _detector_cfg(args, model.detector),
            events_out=args.events,
            state_sink=slot.set,
            stdout=sys.stderr,
            queue_size=settings.stream.queue_size,
        )
        if args.linger > 0:
            time.sleep(args.linger)
    finally:
        link.stop()
    final = link.merged.get()
    _LOGGER.info("Peer session ended; merged state %s", State(final.state).name)
    return ExitCode.OK


_COMMANDS = {
    "train": cmd_train,
    "detect": cmd_detect,
    "simulate": cmd_simulate,
    "eval": cmd_eval,
    "peer": cmd_peer,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entrypoint. Return exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as error:
        return int(error.code or 0)
    try:
        setup_logging(args.log_level, args.log_file)
    except ValueError as error:
        print(f"Error: {error}", file=sys.stderr)
        return ExitCode.USAGE
    try:
        settings = _settings(args)
        return int(_COMMANDS[args.command](args, settings))
    except CrossGapError as error:
        _LOGGER.error("%s", error)
        return int(error.exit_code)
    except KeyboardInterrupt:
        _LOGGER.info("Interrupted")
        return ExitCode.RUNTIME
    # pylint: disable=broad-except
    except Exception as error:
        _LOGGER.exception("Unexpected failure: %s", error)
        return ExitCode.RUNTIME


if __name__ == "__main__":
    sys.exit(main())
