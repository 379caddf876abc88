"""Scenario loading and full-pipeline wiring: camera -> detector -> bus ->
twin sync, with live (threaded, wall clock) and sim (single-threaded,
virtual clock) execution, recording/replay, the latency bench, the maze
autopilot and contrast reports.

Stage lifecycles are owned here: the camera stops first and twin sync last,
so no stage ever reads from a dead peer.
"""

from __future__ import annotations

import json
import math
import threading
import queue
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import bus as busmod
from .bus import Bus
from .calib import FiducialPair, calibrate, load_record
from .clocks import RealClock, SimClock
from .detect import Detection, Detector, DetectorParams, relative_contrast
from .maze import MazeGraph, solve_maze
from .pgmio import StreamRecorder, load_prime, load_stream, read_pgm
from .render import Frame, FluoroRenderer, RenderConfig, render_ds, MODE_CINE, MODE_DS
from .twin import TwinSync, latency_report
from .world import (ActuationCommand, KinematicParams, RobotState,
                    WorldGeometry, load_geometry, state_contained, step)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

_PRIME_SEQ = 1 << 30     # noise stream for the robot-free initial image


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, message):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


# ---------------------------------------------------------------------------
# scenario documents


@dataclass(frozen=True)
class DrivePhase:
    t_s: float
    command: ActuationCommand


@dataclass
class Scenario:
    name: str
    geometry_doc: dict
    mode: str = "live"                       # live | replay | maze
    imaging_mode: str = MODE_CINE
    duration_s: float = 10.0
    seed: int = 0
    render: RenderConfig = field(default_factory=RenderConfig)
    detector: DetectorParams = field(default_factory=DetectorParams)
    kinematics: KinematicParams = field(default_factory=KinematicParams)
    robot: RobotState = field(default_factory=lambda: RobotState(
        (10.0, 0.0), 0.0, 5.0, 2.0, 0))
    calibration: object = "auto"             # "auto" | {"record": path}
    drive: tuple[DrivePhase, ...] = ()

    def command_at(self, t_s: float) -> ActuationCommand:
        cmd = ActuationCommand()
        for phase in self.drive:
            if phase.t_s <= t_s:
                cmd = phase.command
        return cmd


def _scenario_dir():
    return Path(__file__).parent / "scenarios"


def builtin_scenario_path(name: str) -> Path:
    stem = name.replace("-", "_")
    p = _scenario_dir() / f"{stem}.scenario.json"
    if not p.exists():
        raise ConfigError(f"no bundled scenario '{name}'")
    return p


def load_scenario(source, duration_s=None, seed=None) -> Scenario:
    """Parse a scenario file/dict; overrides win over the document."""
    base = Path(".")
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"scenario file not found: {path}")
        base = path.parent
        doc = json.loads(path.read_text(encoding="utf-8"))
    else:
        doc = dict(source)

    try:
        geom_ref = doc["geometry"]
        if isinstance(geom_ref, dict):
            geometry_doc = geom_ref
        else:
            gpath = Path(geom_ref)
            if not gpath.is_absolute():
                cand = base / gpath
                gpath = cand if cand.exists() else _scenario_dir() / gpath
            if not gpath.exists():
                raise ConfigError(f"geometry file not found: {geom_ref}")
            geometry_doc = json.loads(gpath.read_text(encoding="utf-8"))

        seed_val = int(doc.get("seed", 0)) if seed is None else int(seed)
        render_doc = dict(doc.get("render", {}))
        render_doc.setdefault("noise_seed", seed_val)
        occl = render_doc.pop("occlusion_events", [])
        from .render import OcclusionEvent
        render_cfg = RenderConfig(**render_doc, occlusion_events=tuple(
            OcclusionEvent(int(o["t_start_us"]), int(o["t_end_us"]),
                           tuple(o["region_px"]), float(o["level_shift"]))
            for o in occl))

        det_params = DetectorParams(**doc.get("detector", {}))
        kin = KinematicParams(**doc.get("kinematics", {}))

        robot_doc = doc.get("robot", {})
        robot = RobotState(
            tuple(robot_doc.get("start_mm", (10.0, 0.0))),
            float(robot_doc.get("heading_rad", 0.0)),
            float(robot_doc.get("body_length_mm", 5.0)),
            float(robot_doc.get("body_width_mm", 2.0)),
            0)

        drive = []
        for ph in doc.get("drive", []):
            drive.append(DrivePhase(float(ph["t_s"]), ActuationCommand(
                float(ph.get("axis_angle_rad", 0.0)),
                float(ph.get("frequency_hz", 0.0)),
                bool(ph.get("enabled", False)))))
        drive.sort(key=lambda p: p.t_s)

        calibration = doc.get("calibration")
        if isinstance(calibration, dict) and "record" in calibration:
            rec = Path(calibration["record"])
            if not rec.is_absolute():
                rec = base / rec
            calibration = {"record": rec}

        return Scenario(
            name=doc.get("name", "unnamed"),
            geometry_doc=geometry_doc,
            mode=doc.get("mode", "live"),
            imaging_mode=doc.get("imaging_mode", MODE_CINE),
            duration_s=float(doc.get("duration_s", 10.0)) if duration_s is None
            else float(duration_s),
            seed=seed_val,
            render=render_cfg,
            detector=det_params,
            kinematics=kin,
            robot=robot,
            calibration=calibration,
            drive=tuple(drive),
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad scenario document: {exc}") from exc


def make_transform(scenario: Scenario, geom: WorldGeometry,
                   renderer: FluoroRenderer):
    """Calibration from a persisted record or the configured fiducials."""
    cal = scenario.calibration
    if isinstance(cal, dict) and "record" in cal:
        rec = Path(cal["record"])
        if not rec.exists():
            raise ConfigError(f"calibration record not found: {rec}")
        return load_record(rec)
    if cal == "auto":
        p1 = renderer.proj.to_px(geom.fiducials[0])
        p2 = renderer.proj.to_px(geom.fiducials[1])
        fid = FiducialPair(p1, p2, geom.reference_length_mm)
        axis = math.atan2(geom.fiducials[1][1] - geom.fiducials[0][1],
                          geom.fiducials[1][0] - geom.fiducials[0][0])
        return calibrate(fid, tuple(geom.fiducials[0]), axis)
    raise ConfigError(
        "calibration missing: scenario needs 'auto' or {'record': path}")


# ---------------------------------------------------------------------------
# hop instrumentation


class HopLog:
    """Per-frame timestamps along the chain for the latency breakdown."""

    def __init__(self):
        self.rows = []   # (t_frame, t_detect_done, t_publish, t_apply)

    def add(self, t_frame, t_detect, t_publish, t_apply):
        self.rows.append((t_frame, t_detect, t_publish, t_apply))

    def report(self):
        if not self.rows:
            return {"hops": {}, "count": 0}
        arr = np.asarray(self.rows, dtype=np.float64)
        spans = {
            "render_to_detect": arr[:, 1] - arr[:, 0],
            "detect_to_bus": arr[:, 2] - arr[:, 1],
            "bus_to_apply": arr[:, 3] - arr[:, 2],
        }
        out = {}
        for name, vals in spans.items():
            out[name] = {
                "median_us": float(np.median(vals)),
                "p99_us": float(np.percentile(vals, 99, method="higher")),
            }
        return {"hops": out, "count": len(self.rows)}


# ---------------------------------------------------------------------------
# the pipeline


@dataclass
class RunResult:
    exit_code: int
    stage: str = ""
    message: str = ""
    frames: int = 0
    detections: int = 0
    poses: int = 0
    containment_violations: int = 0
    latency: dict | None = None
    hops: dict | None = None
    extra: dict = field(default_factory=dict)


class Pipeline:
    """One wired scenario instance. Use run_live / run_sim / run_replay."""

    def __init__(self, scenario: Scenario, clock=None, bus=None,
                 detection_log=None, pose_log=None, record_dir=None):
        self.scenario = scenario
        self.clock = clock or RealClock()
        self.bus = bus or Bus(clock=self.clock)
        self.geom = load_geometry(scenario.geometry_doc)
        self.renderer = FluoroRenderer(self.geom, scenario.render)
        self.transform = make_transform(scenario, self.geom, self.renderer)
        self.detector = Detector(scenario.detector)
        self._prime_frame = self.renderer.render_background(0, _PRIME_SEQ)
        if scenario.imaging_mode == MODE_CINE:
            self.detector.prime(self._prime_frame)
        self.sync = TwinSync(self.transform, bus=self.bus, log_fh=pose_log)
        self.detection_log = detection_log
        self.record_dir = record_dir
        self.hops = HopLog()
        self.state = replace(scenario.robot, t=0)
        if not state_contained(self.geom, self.state):
            raise ConfigError(
                f"robot start {scenario.robot.position} not inside free space")
        self.containment_violations = 0
        self.frames = 0
        self.detections = 0

    # -- shared stage logic --------------------------------------------------

    def _step_world(self, cmd: ActuationCommand, dt_s: float):
        self.state = step(self.state, cmd, self.scenario.kinematics, dt_s, self.geom)
        if not state_contained(self.geom, self.state):
            self.containment_violations += 1

    def _emit_detection(self, det: Detection, t_detect_done):
        payload = det.record()
        payload["t_detect_done_us"] = int(t_detect_done)
        self.bus.publish(busmod.TOPIC_DETECTION, payload)
        if self.detection_log is not None:
            self.detection_log.write(json.dumps(det.record()) + "\n")
        self.detections += 1

    @staticmethod
    def detection_from_payload(payload) -> Detection:
        return Detection(tuple(payload["bbox"]),
                         tuple(payload["centroid"]),
                         float(payload["confidence"]),
                         int(payload["seq"]), int(payload["t_mono_us"]))

    # -- sim (deterministic, virtual clock) ----------------------------------

    def run_sim(self, controller=None) -> RunResult:
        """Single-threaded tick loop on a virtual clock.

        controller(pipeline, t_us) -> ActuationCommand | None overrides the
        scenario drive schedule (used by the maze autopilot).
        """
        sc = self.scenario
        period_us = 1e6 / sc.render.fps
        n_frames = int(round(sc.duration_s * sc.render.fps))
        recorder = StreamRecorder(self.record_dir) if self.record_dir else None
        if recorder:
            recorder.set_prime(self._prime_frame.pixels)
        ds_reference = None
        try:
            for seq in range(n_frames):
                t_us = int(round(seq * period_us))
                self.clock.sleep_until_us(t_us)
                t_s = t_us / 1e6
                cmd = None
                if controller is not None:
                    cmd = controller(self, t_us)
                if cmd is None:
                    cmd = sc.command_at(t_s)
                if seq > 0:
                    self._step_world(cmd, period_us / 1e6)
                frame = self.renderer.render_cine(self.state, t_us, seq)
                if sc.imaging_mode == MODE_DS:
                    if ds_reference is None:
                        ds_reference = frame
                    frame = render_ds(frame, ds_reference)
                self.frames += 1
                self.bus.publish(busmod.TOPIC_FRAME_META, {
                    "seq": frame.seq, "t_mono_us": frame.t_mono_us,
                    "mode": frame.mode})
                if recorder:
                    recorder.add(frame)
                det = self.detector.detect(frame)
                if det is not None:
                    self._emit_detection(det, t_us)
                    self.sync.apply_detection(det, det.t_mono_us)
                    self.hops.add(t_us, t_us, t_us, t_us)
        finally:
            if recorder:
                recorder.close()
        return self._result()

    # -- live (threaded, wall clock) ------------------------------------------

    def run_live(self) -> RunResult:
        sc = self.scenario
        period_us = 1e6 / sc.render.fps
        n_frames = int(round(sc.duration_s * sc.render.fps))
        frame_q: "queue.Queue[Frame | None]" = queue.Queue(maxsize=8)
        errors: list[StageError] = []
        recorder = StreamRecorder(self.record_dir) if self.record_dir else None
        if recorder:
            recorder.set_prime(self._prime_frame.pixels)

        actuation_sub = self.bus.subscribe(busmod.TOPIC_ACTUATION)
        detection_sub = self.bus.subscribe(busmod.TOPIC_DETECTION)

        def camera():
            ds_reference = None
            operator_cmd = None      # once an operator command arrives, it wins
            try:
                t0 = self.clock.now_us()
                for seq in range(n_frames):
                    self.clock.sleep_until_us(int(t0 + seq * period_us))
                    while True:     # newest actuation command wins
                        env = actuation_sub.get_nowait()
                        if env is None:
                            break
                        operator_cmd = ActuationCommand(env.payload["axis_angle"],
                                                        env.payload["frequency"],
                                                        env.payload["enabled"])
                    t_s = (self.clock.now_us() - t0) / 1e6
                    active = operator_cmd if operator_cmd is not None \
                        else self.scenario.command_at(t_s)
                    if seq > 0:
                        self._step_world(active, period_us / 1e6)
                    t_us = self.clock.now_us()
                    frame = self.renderer.render_cine(self.state, t_us, seq)
                    if sc.imaging_mode == MODE_DS:
                        if ds_reference is None:
                            ds_reference = frame
                        frame = render_ds(frame, ds_reference)
                    self.frames += 1
                    self.bus.publish(busmod.TOPIC_FRAME_META, {
                        "seq": frame.seq, "t_mono_us": frame.t_mono_us,
                        "mode": frame.mode})
                    if recorder:
                        recorder.add(frame)
                    try:
                        frame_q.put_nowait(frame)
                    except queue.Full:
                        try:
                            frame_q.get_nowait()    # drop oldest, keep flowing
                        except queue.Empty:
                            pass
                        frame_q.put_nowait(frame)
            except Exception as exc:    # noqa: BLE001 - surfaced as stage error
                errors.append(StageError("camera", str(exc)))
            finally:
                while True:
                    try:
                        frame_q.put_nowait(None)
                        break
                    except queue.Full:
                        try:
                            frame_q.get_nowait()
                        except queue.Empty:
                            pass

        def detect_stage():
            try:
                while True:
                    frame = frame_q.get()
                    if frame is None:
                        return
                    det = self.detector.detect(frame)
                    if det is not None:
                        self._emit_detection(det, self.clock.now_us())
            except Exception as exc:    # noqa: BLE001
                errors.append(StageError("detector", str(exc)))

        def twin_stage():
            try:
                while True:
                    env = detection_sub.get()
                    if env is None:
                        return
                    det = self.detection_from_payload(env.payload)
                    now = self.clock.now_us()
                    self.sync.apply_detection(det, now)
                    self.hops.add(env.payload["t_mono_us"],
                                  env.payload.get("t_detect_done_us",
                                                  env.t_mono_us),
                                  env.t_mono_us, now)
            except Exception as exc:    # noqa: BLE001
                errors.append(StageError("twin-sync", str(exc)))

        threads = [threading.Thread(target=f, daemon=True, name=n)
                   for f, n in ((camera, "camera"), (detect_stage, "detector"),
                                (twin_stage, "twin"))]
        for t in threads:
            t.start()
        threads[0].join()                      # camera finishes first
        threads[1].join()                      # detector drains the queue
        detection_sub.close()                  # then twin sees end-of-stream
        threads[2].join()
        actuation_sub.close()
        if recorder:
            recorder.close()
        if errors:
            raise errors[0]
        return self._result()

    def run_replay(self, replay_dir) -> RunResult:
        """Deterministic offline pass over a recorded stream."""
        replay_dir = Path(replay_dir)
        prime = load_prime(replay_dir)
        if prime is not None:
            self.detector.prime(prime)
        n = 0
        for frame in load_stream(replay_dir):
            n += 1
            self.frames += 1
            det = self.detector.detect(frame)
            if det is not None:
                self._emit_detection(det, det.t_mono_us)
                self.sync.apply_detection(det, det.t_mono_us)
        if n == 0:
            raise StageError("replay", f"{replay_dir} holds no frames")
        return self._result()

    def _result(self) -> RunResult:
        lat = latency_report(self.sync.latencies_us) if self.sync.latencies_us else None
        return RunResult(
            exit_code=EXIT_OK,
            frames=self.frames,
            detections=self.detections,
            poses=len(self.sync.latencies_us),
            containment_violations=self.containment_violations,
            latency=lat,
            hops=self.hops.report(),
        )


# ---------------------------------------------------------------------------
# maze autopilot


class Autopilot:
    """Drives straight steps between waypoint cells, turning at each one."""

    CRUISE_HZ = 25.0
    GAIN_HZ_PER_MM = 10.0
    FLOOR_HZ = 1.0

    def __init__(self, waypoints_mm, tolerance_mm=1.0, stale_abort_us=2_000_000):
        self.waypoints = list(waypoints_mm)
        self.tolerance = tolerance_mm
        self.stale_abort_us = stale_abort_us
        self.index = 0
        self.aborted = False

    @property
    def done(self):
        return self.index >= len(self.waypoints)

    def command_for(self, pose_mm) -> ActuationCommand:
        while not self.done:
            wp = self.waypoints[self.index]
            dx, dy = wp[0] - pose_mm[0], wp[1] - pose_mm[1]
            dist = math.hypot(dx, dy)
            if dist <= self.tolerance:
                self.index += 1
                continue
            f = min(self.CRUISE_HZ, max(self.FLOOR_HZ, self.GAIN_HZ_PER_MM * dist))
            return ActuationCommand(math.atan2(dy, dx), f, True)
        return ActuationCommand(0.0, 0.0, False)


def run_maze(scenario: Scenario, max_duration_s=120.0) -> RunResult:
    """Solve the maze, then drive it closed-loop on the virtual clock."""
    geom = load_geometry(scenario.geometry_doc)
    graph = MazeGraph.from_geometry(geom)
    waypoint_cells = solve_maze(graph)
    waypoints = [graph.center_mm(c) for c in waypoint_cells]

    start = graph.center_mm(graph.start)
    sc = replace(scenario, duration_s=max_duration_s,
                 robot=replace(scenario.robot, position=start))
    pipe = Pipeline(sc, clock=SimClock())
    pilot = Autopilot(waypoints)

    def controller(pipeline: Pipeline, t_us):
        if pilot.done:
            raise _MazeDone()
        if pipeline.sync.state is None:
            if pipeline.sync.is_stale(t_us) and t_us > pilot.stale_abort_us:
                pilot.aborted = True
                raise _MazeDone()
            return ActuationCommand(0.0, 0.0, False)
        if t_us - pipeline.sync.state.t_mono_us > pilot.stale_abort_us:
            pilot.aborted = True
            pipeline.bus.publish(busmod.TOPIC_TELEMETRY, {
                "event": "autopilot_abort_stale", "t_us": t_us})
            raise _MazeDone()
        return pilot.command_for(pipeline.sync.state.pose)

    try:
        result = pipe.run_sim(controller=controller)
    except _MazeDone:
        result = pipe._result()
    result.extra["steps"] = len(waypoint_cells)
    result.extra["waypoints"] = waypoint_cells
    result.extra["completed"] = pilot.done and not pilot.aborted
    result.extra["aborted"] = pilot.aborted
    result.extra["final_pose_twin"] = pipe.sync.state.pose if pipe.sync.state else None
    result.extra["final_distance_mm"] = math.hypot(
        pipe.state.position[0] - waypoints[-1][0],
        pipe.state.position[1] - waypoints[-1][1]) if waypoints else 0.0
    return result


class _MazeDone(Exception):
    pass


# ---------------------------------------------------------------------------
# verbs used by the CLI and acceptance suite


def run_scenario(scenario: Scenario, live=True, detection_log=None,
                 pose_log=None, record_dir=None) -> RunResult:
    pipe = Pipeline(scenario, clock=RealClock() if live else SimClock(),
                    detection_log=detection_log, pose_log=pose_log,
                    record_dir=record_dir)
    return pipe.run_live() if live else pipe.run_sim()


def bench_latency(scenario: Scenario, duration_s=None) -> dict:
    sc = scenario if duration_s is None else replace(scenario, duration_s=duration_s)
    pipe = Pipeline(sc, clock=RealClock())
    result = pipe.run_live()
    if result.poses == 0:
        raise StageError("bench", "no detections were applied")
    report = {
        "frames": result.frames,
        "poses": result.poses,
        "end_to_end": result.latency,
        "hops": result.hops["hops"],
    }
    rows = np.asarray(pipe.hops.rows, dtype=np.float64)
    report["hop_sum_median_us"] = float(np.median(rows[:, 3] - rows[:, 0]))
    return report


def contrast_report(frame_path, roi_spec) -> dict:
    """Relative-contrast table: one row per object ROI against the reference."""
    pixels = read_pgm(frame_path)
    h, w = pixels.shape
    frame = Frame(w, h, pixels, 0, 0, MODE_CINE)
    if isinstance(roi_spec, (str, Path)):
        roi_spec = json.loads(Path(roi_spec).read_text(encoding="utf-8"))
    ref = tuple(roi_spec["reference"])
    bg = tuple(roi_spec["background"])
    rows = []
    for obj in roi_spec["objects"]:
        name = obj.get("name", "object")
        roi = tuple(obj["roi"])
        ratio = relative_contrast(frame, roi, ref, bg)
        rows.append({"name": name, "roi": list(roi), "ratio": ratio,
                     "exceeds_reference": ratio > 1.0})
    return {"reference": list(ref), "background": list(bg), "rows": rows}
