"""Pixel-to-world spatial calibration from two fiducial points.

Two fiducial pixel locations plus the known physical distance between them
determine a rigid similarity: scale (mm/px), rotation, and anchor. Image
coordinates are y-down, world coordinates y-up; the transform carries the
axis flip, so it is orientation-reversing by construction.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

MIN_FIDUCIAL_SEPARATION_PX = 1.0


class DegenerateFiducialError(ValueError):
    """Fiducial points too close to define a scale."""


@dataclass(frozen=True)
class FiducialPair:
    p1: tuple[float, float]          # px
    p2: tuple[float, float]          # px
    reference_length_mm: float

    def __post_init__(self):
        if self.reference_length_mm <= 0:
            raise ValueError("reference_length_mm must be > 0")
        if self.p1 == self.p2:
            raise ValueError("fiducial points must differ")


@dataclass(frozen=True)
class CalibrationTransform:
    scale: float                     # mm per px
    rotation: float                  # rad
    anchor_px: tuple[float, float]
    anchor_world: tuple[float, float]   # mm


def _wrap(angle):
    """Wrap to (-pi, pi]."""
    a = math.fmod(angle + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


def calibrate(fid: FiducialPair, anchor_world, world_axis: float) -> CalibrationTransform:
    """Build the px->mm similarity anchoring fid.p1 at anchor_world.

    fid.p2 lands reference_length_mm away from anchor_world along world_axis.
    """
    dx = fid.p2[0] - fid.p1[0]
    dy = fid.p2[1] - fid.p1[1]
    dist = math.hypot(dx, dy)
    if dist < MIN_FIDUCIAL_SEPARATION_PX:
        raise DegenerateFiducialError(
            f"fiducials {dist:.3g} px apart; need >= {MIN_FIDUCIAL_SEPARATION_PX}")
    scale = fid.reference_length_mm / dist
    # Pixel frame is y-down: the flip built into px_to_world mirrors angles,
    # hence the minus on the whole sum rather than axis - atan2.
    rotation = _wrap(-(world_axis + math.atan2(dy, dx)))
    return CalibrationTransform(scale, rotation,
                                (float(fid.p1[0]), float(fid.p1[1])),
                                (float(anchor_world[0]), float(anchor_world[1])))


def px_to_world(t: CalibrationTransform, p) -> tuple[float, float]:
    """Map an image pixel to world mm: rotate, flip y, scale, translate."""
    ux = p[0] - t.anchor_px[0]
    uy = p[1] - t.anchor_px[1]
    c, s = math.cos(t.rotation), math.sin(t.rotation)
    rx = c * ux - s * uy
    ry = s * ux + c * uy
    return (t.anchor_world[0] + t.scale * rx,
            t.anchor_world[1] - t.scale * ry)


def world_to_px(t: CalibrationTransform, w) -> tuple[float, float]:
    """Exact inverse of px_to_world."""
    vx = (w[0] - t.anchor_world[0]) / t.scale
    vy = -(w[1] - t.anchor_world[1]) / t.scale
    c, s = math.cos(-t.rotation), math.sin(-t.rotation)
    return (t.anchor_px[0] + c * vx - s * vy,
            t.anchor_px[1] + s * vx + c * vy)


# ---------------------------------------------------------------------------
# persisted calibration record


def save_record(path, fid: FiducialPair, anchor_world, world_axis: float,
                t_wall_us: int | None = None):
    """Persist the operator-supplied calibration inputs as JSON."""
    rec = {
        "p1_px": [float(fid.p1[0]), float(fid.p1[1])],
        "p2_px": [float(fid.p2[0]), float(fid.p2[1])],
        "reference_length_mm": float(fid.reference_length_mm),
        "anchor_world_mm": [float(anchor_world[0]), float(anchor_world[1])],
        "world_axis_rad": float(world_axis),
        "created_t_wall_us": int(time.time_ns() // 1000) if t_wall_us is None else int(t_wall_us),
    }
    Path(path).write_text(json.dumps(rec, indent=2) + "\n", encoding="utf-8")
    return rec


def load_record(source) -> CalibrationTransform:
    """Load a persisted record and rebuild the transform."""
    if isinstance(source, (str, Path)):
        rec = json.loads(Path(source).read_text(encoding="utf-8"))
    else:
        rec = source
    fid = FiducialPair(tuple(rec["p1_px"]), tuple(rec["p2_px"]),
                       rec["reference_length_mm"])
    return calibrate(fid, tuple(rec["anchor_world_mm"]), rec["world_axis_rad"])
