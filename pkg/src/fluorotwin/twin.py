"""Virtual-twin state: pose from detections, velocity windows, latency stats.

The twin pose is the latest detection centroid mapped through the spatial
calibration. Velocities come in three flavors: instantaneous (consecutive
samples) and 1 s / 10 s windowed estimates, where a windowed estimate is the
trajectory arc length inside the window divided by the window duration (or
the trail span while shorter). Missed detections hold the pose; nothing is
extrapolated.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import bus as busmod
from .calib import CalibrationTransform, px_to_world, world_to_px
from .detect import Detection

STALE_AFTER_US = 500_000
TRAIL_HORIZON_US = 11_000_000    # keep a little more than the 10 s window

LATENCY_BUCKETS_US = (1_000, 2_000, 5_000, 10_000, 20_000, 50_000,
                      100_000, 200_000, 500_000, 1_000_000)


class CalibrationMissingError(RuntimeError):
    """Twin sync refuses to run before spatial calibration is done."""


class EmptyHistoryError(ValueError):
    pass


@dataclass(frozen=True)
class TwinState:
    pose: tuple[float, float]        # mm
    last_detection_seq: int
    v_inst: float                    # mm/s
    v_1s: float
    v_10s: float
    mismatch_px: float
    latency_us: int
    t_mono_us: int                   # when this state was applied

    def pose_payload(self) -> dict:
        return {
            "x_mm": self.pose[0],
            "y_mm": self.pose[1],
            "v_inst": self.v_inst,
            "v_1s": self.v_1s,
            "v_10s": self.v_10s,
            "mismatch_px": self.mismatch_px,
            "latency_us": self.latency_us,
        }


class VelocityWindows:
    """Windowed arc-length speed estimates; 0 until a window has 2 samples."""

    def __init__(self, windows_us=(1_000_000, 10_000_000)):
        self.windows_us = tuple(windows_us)
        self._samples = deque()      # (t_us, x, y), shared across windows

    def add(self, t_us, pose):
        self._samples.append((t_us, pose[0], pose[1]))
        horizon = max(self.windows_us) + 1_000_000
        while self._samples and self._samples[0][0] < t_us - horizon:
            self._samples.popleft()

    def estimates(self, now_us):
        out = []
        for w_us in self.windows_us:
            lo = now_us - w_us
            pts = [s for s in self._samples if s[0] >= lo]
            if len(pts) < 2:
                out.append(0.0)
                continue
            arc = 0.0
            for (t0, x0, y0), (t1, x1, y1) in zip(pts, pts[1:]):
                arc += math.hypot(x1 - x0, y1 - y0)
            span_us = self._samples[-1][0] - self._samples[0][0]
            denom_us = min(w_us, span_us)
            out.append(arc * 1e6 / denom_us if denom_us > 0 else 0.0)
        return tuple(out)


def velocity_estimates(trail, now_us):
    """(v_inst, v_1s, v_10s) in mm/s from a time-ordered (t_us, (x, y)) trail."""
    trail = list(trail)
    if len(trail) < 2:
        return (0.0, 0.0, 0.0)
    (t0, p0), (t1, p1) = trail[-2], trail[-1]
    dt = (t1 - t0) / 1e6
    v_inst = math.hypot(p1[0] - p0[0], p1[1] - p0[1]) / dt if dt > 0 else 0.0
    vw = VelocityWindows()
    for t, p in trail:
        vw.add(t, p)
    v_1s, v_10s = vw.estimates(now_us)
    return (v_inst, v_1s, v_10s)


class TwinSync:
    """Single-writer twin state fed by the detection stream."""

    def __init__(self, transform: CalibrationTransform | None, bus=None,
                 log_fh=None):
        if transform is None:
            raise CalibrationMissingError(
                "spatial calibration required before twin synchronization")
        self.transform = transform
        self.bus = bus
        self.log_fh = log_fh
        self.trail: deque[tuple[int, tuple[float, float]]] = deque()
        self.windows = VelocityWindows()
        self.latencies_us: list[int] = []
        self.state: TwinState | None = None
        self.out_of_order_drops = 0
        self._last_applied_us = None

    # -- staleness ----------------------------------------------------------

    def is_stale(self, now_us) -> bool:
        if self._last_applied_us is None:
            return True
        return now_us - self._last_applied_us > STALE_AFTER_US

    # -- detection stream ---------------------------------------------------

    def apply_detection(self, det: Detection, now_mono_us: int) -> TwinState:
        """Fold one detection into the twin; publishes the new pose."""
        if det.t_mono_us > now_mono_us:
            raise ValueError(
                f"detection timestamp {det.t_mono_us} is in the future of {now_mono_us}")
        if self.state is not None and det.frame_seq <= self.state.last_detection_seq:
            self.out_of_order_drops += 1
            if self.bus is not None:
                self.bus.publish(busmod.TOPIC_TELEMETRY, {
                    "event": "detection_out_of_order",
                    "seq": det.frame_seq,
                    "drops": self.out_of_order_drops,
                })
            return self.state

        pose = px_to_world(self.transform, det.centroid)
        if self.state is None:
            mismatch_px = 0.0
        else:
            prev_px = world_to_px(self.transform, self.state.pose)
            mismatch_px = math.hypot(prev_px[0] - det.centroid[0],
                                     prev_px[1] - det.centroid[1])

        self.trail.append((det.t_mono_us, pose))
        while self.trail and self.trail[0][0] < det.t_mono_us - TRAIL_HORIZON_US:
            self.trail.popleft()
        self.windows.add(det.t_mono_us, pose)

        if len(self.trail) >= 2:
            (t0, p0), (t1, p1) = self.trail[-2], self.trail[-1]
            dt = (t1 - t0) / 1e6
            v_inst = math.hypot(p1[0] - p0[0], p1[1] - p0[1]) / dt if dt > 0 else 0.0
        else:
            v_inst = 0.0
        v_1s, v_10s = self.windows.estimates(det.t_mono_us)

        latency_us = int(now_mono_us - det.t_mono_us)
        self.latencies_us.append(latency_us)
        self._last_applied_us = now_mono_us
        self.state = TwinState(pose, det.frame_seq, v_inst, v_1s, v_10s,
                               mismatch_px, latency_us, int(now_mono_us))
        if self.bus is not None:
            self.bus.publish(busmod.TOPIC_TWIN_POSE, self.state.pose_payload())
        if self.log_fh is not None:
            self.log_fh.write(json.dumps(
                {"seq": det.frame_seq, "t_mono_us": det.t_mono_us,
                 **self.state.pose_payload()}) + "\n")
        return self.state


def latency_report(latencies_us) -> dict:
    """Exact order statistics plus fixed telemetry buckets."""
    lat = np.asarray(list(latencies_us), dtype=np.int64)
    if lat.size == 0:
        raise EmptyHistoryError("no latency samples recorded")
    counts = []
    for le in LATENCY_BUCKETS_US:
        counts.append({"le_us": le, "count": int((lat <= le).sum())})
    counts.append({"le_us": None, "count": int(lat.size)})
    return {
        "count": int(lat.size),
        "median_us": float(np.median(lat)),
        "p99_us": float(np.percentile(lat, 99, method="higher")),
        "max_us": int(lat.max()),
        "histogram": counts,
    }
