"""Command line entry point.

Verbs: run, replay, bench, maze, contrast, record. Exit codes: 0 success,
2 configuration error, 3 runtime stage failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import sys
from pathlib import Path

from .calib import DegenerateFiducialError
from .pipeline import (EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, ConfigError,
                       Pipeline, Scenario, StageError, bench_latency,
                       builtin_scenario_path, contrast_report, load_scenario,
                       run_maze)
from .twin import CalibrationMissingError
from .world import GeometryError


def _add_common(p):
    p.add_argument("--scenario", help="scenario file or bundled name")
    p.add_argument("--duration", type=float, help="run duration, seconds")
    p.add_argument("--seed", type=int, help="master seed for all randomness")
    p.add_argument("--bind", help="host:port for the bus endpoint "
                                  "(WS bridge on port+1, HTTP on port+2)")
    p.add_argument("--record", help="directory to record frames into")
    p.add_argument("--replay", help="recorded frame directory to replay")
    p.add_argument("--headless", action="store_true",
                   help="never serve network endpoints")


def _load(args) -> Scenario:
    if not args.scenario:
        raise ConfigError("--scenario is required")
    src = args.scenario
    if not Path(src).exists():
        src = builtin_scenario_path(src)
    return load_scenario(src, duration_s=args.duration, seed=args.seed)


@contextlib.contextmanager
def _maybe_serve(args, pipe: Pipeline | None):
    if args.headless or not args.bind or pipe is None:
        yield None
        return
    from .server import BusServer, StaticHTTPServer
    host, _, port = args.bind.rpartition(":")
    host = host or "127.0.0.1"
    port = int(port)
    srv = BusServer(pipe.bus, host, port).start()
    http = StaticHTTPServer(pipe.scenario.geometry_doc, host, port + 2).start()
    print(f"bus: tcp://{host}:{srv.port}  ws://{host}:{srv.ws_port}  "
          f"http://{host}:{http.port}/scenario/geometry", file=sys.stderr)
    try:
        yield srv
    finally:
        http.close()
        srv.close()


def _open_logs(args):
    det_log = pose_log = None
    if getattr(args, "detections_out", None):
        det_log = open(args.detections_out, "w", encoding="utf-8")
    if getattr(args, "poses_out", None):
        pose_log = open(args.poses_out, "w", encoding="utf-8")
    return det_log, pose_log


def _cmd_run(args) -> int:
    scenario = _load(args)
    det_log, pose_log = _open_logs(args)
    try:
        pipe = Pipeline(scenario, detection_log=det_log, pose_log=pose_log,
                        record_dir=args.record)
        with _maybe_serve(args, pipe):
            result = pipe.run_live()
    finally:
        for fh in (det_log, pose_log):
            if fh:
                fh.close()
    print(json.dumps({
        "frames": result.frames, "detections": result.detections,
        "poses": result.poses,
        "containment_violations": result.containment_violations,
        "latency": result.latency}, indent=2))
    return EXIT_OK


def _cmd_replay(args) -> int:
    if not args.replay:
        raise ConfigError("--replay <dir> is required")
    scenario = _load(args)
    det_log, pose_log = _open_logs(args)
    try:
        pipe = Pipeline(scenario, detection_log=det_log, pose_log=pose_log)
        result = pipe.run_replay(args.replay)
    finally:
        for fh in (det_log, pose_log):
            if fh:
                fh.close()
    print(json.dumps({"frames": result.frames, "detections": result.detections,
                      "poses": result.poses}, indent=2))
    return EXIT_OK


def _cmd_record(args) -> int:
    if not args.record:
        raise ConfigError("--record <dir> is required")
    scenario = _load(args)
    pipe = Pipeline(scenario, record_dir=args.record)
    result = pipe.run_live()
    print(json.dumps({"frames": result.frames, "directory": args.record}, indent=2))
    return EXIT_OK


def _cmd_bench(args) -> int:
    scenario = _load(args)
    report = bench_latency(scenario, duration_s=args.duration)
    print(json.dumps(report, indent=2))
    return EXIT_OK


def _cmd_maze(args) -> int:
    scenario = _load(args) if args.scenario else load_scenario(
        builtin_scenario_path("maze"))
    result = run_maze(scenario)
    print(json.dumps({
        "steps": result.extra["steps"],
        "waypoints": [list(w) for w in result.extra["waypoints"]],
        "completed": result.extra["completed"],
        "containment_violations": result.containment_violations,
        "final_distance_mm": result.extra["final_distance_mm"]}, indent=2))
    if not result.extra["completed"]:
        raise StageError("autopilot", "maze run did not reach END")
    return EXIT_OK


def _cmd_contrast(args) -> int:
    report = contrast_report(args.frame, args.rois)
    print(json.dumps(report, indent=2))
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="fluorotwin",
                                 description=__doc__.strip().splitlines()[0])
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="live pipeline for a scenario")
    _add_common(p)
    p.add_argument("--detections-out", help="detection log (JSON lines)")
    p.add_argument("--poses-out", help="twin pose log (JSON lines)")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("replay", help="deterministic pass over a recording")
    _add_common(p)
    p.add_argument("--detections-out", help="detection log (JSON lines)")
    p.add_argument("--poses-out", help="twin pose log (JSON lines)")
    p.set_defaults(fn=_cmd_replay)

    p = sub.add_parser("record", help="run live and record frames to disk")
    _add_common(p)
    p.set_defaults(fn=_cmd_record)

    p = sub.add_parser("bench", help="end-to-end and per-hop latency report")
    _add_common(p)
    p.set_defaults(fn=_cmd_bench)

    p = sub.add_parser("maze", help="solve the maze and autopilot through it")
    _add_common(p)
    p.set_defaults(fn=_cmd_maze)

    p = sub.add_parser("contrast", help="relative-contrast table for a frame")
    p.add_argument("--frame", required=True, help="PGM frame file")
    p.add_argument("--rois", required=True, help="ROI spec JSON file")
    p.set_defaults(fn=_cmd_contrast)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, GeometryError, DegenerateFiducialError,
            CalibrationMissingError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:    # noqa: BLE001 - any stage crash is exit 3
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
