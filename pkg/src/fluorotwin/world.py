"""Ground-truth world: phantom/maze geometry and magnetic swimmer kinematics.

All geometry lives in millimeters, world y-up. The swimmer follows a linear
frequency-velocity law with a hard step-out clamp and slides along channel
walls instead of penetrating or bouncing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

F_MAX_HZ = 100.0          # rotating-field frequency ceiling
_SUBSTEP_MM = 0.25        # max displacement per containment substep
_GRID_TOL = 1e-6          # wall endpoints must sit on the grid within this


class GeometryError(ValueError):
    """Geometry document violates a structural invariant."""


class GeometryParseError(GeometryError):
    """Geometry document failed schema validation; names the offending key."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"geometry key '{key}': {message}")


@dataclass(frozen=True)
class Channel:
    """Centerline polyline with linearly interpolated per-vertex width."""

    points: np.ndarray   # (N, 2) mm
    widths: np.ndarray   # (N,) mm

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=float))
        object.__setattr__(self, "widths", np.asarray(self.widths, dtype=float))


@dataclass(frozen=True)
class WorldGeometry:
    channels: tuple[Channel, ...]
    walls: np.ndarray            # (M, 4) mm, axis-aligned [x1, y1, x2, y2]
    fiducials: np.ndarray        # (2, 2) mm, phantom start/end anchors
    reference_length_mm: float
    extent: tuple[float, float, float, float]   # xmin, ymin, xmax, ymax

    @property
    def has_walls(self):
        return len(self.walls) > 0


@dataclass(frozen=True)
class RobotState:
    """Immutable swimmer pose snapshot; safe to hand across stages."""

    position: tuple[float, float]   # mm
    heading: float                  # rad, direction of travel
    body_length: float              # mm
    body_width: float               # mm
    t: int                          # simulation time, microseconds


@dataclass(frozen=True)
class ActuationCommand:
    axis_angle: float = 0.0     # rad, in-plane rotating-field axis
    frequency: float = 0.0      # Hz in [0, F_MAX_HZ]
    enabled: bool = False

    def __post_init__(self):
        if not 0.0 <= self.frequency <= F_MAX_HZ:
            raise ValueError(f"frequency {self.frequency} Hz outside [0, {F_MAX_HZ}]")


@dataclass(frozen=True)
class KinematicParams:
    pitch_per_rev: float = 2.0      # mm advanced per field revolution
    step_out_freq: float = 50.0     # Hz; speed collapses above this
    damping: float = 0.0            # residual speed factor above step-out

    def __post_init__(self):
        if self.pitch_per_rev <= 0:
            raise ValueError("pitch_per_rev must be > 0")
        if not 0 < self.step_out_freq <= F_MAX_HZ:
            raise ValueError(f"step_out_freq must be in (0, {F_MAX_HZ}]")
        if not 0.0 <= self.damping <= 1.0:
            raise ValueError("damping must be in [0, 1]")


# ---------------------------------------------------------------------------
# geometry document loading


def _require(doc, key, typ, ctx=""):
    name = f"{ctx}{key}"
    if key not in doc:
        raise GeometryParseError(name, "missing")
    val = doc[key]
    if typ is float:
        if not isinstance(val, (int, float)) or isinstance(val, bool):
            raise GeometryParseError(name, "expected a number")
        return float(val)
    if not isinstance(val, typ):
        raise GeometryParseError(name, f"expected {typ.__name__}")
    return val


def _parse_point(val, key):
    if (not isinstance(val, (list, tuple)) or len(val) != 2
            or not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in val)):
        raise GeometryParseError(key, "expected [x, y] numbers")
    return (float(val[0]), float(val[1]))


def _parse_channels(doc):
    raw = _require(doc, "channels", list)
    channels = []
    for i, ch in enumerate(raw):
        ctx = f"channels[{i}]."
        if not isinstance(ch, dict):
            raise GeometryParseError(f"channels[{i}]", "expected object")
        pts = _require(ch, "points", list, ctx)
        widths = _require(ch, "widths", list, ctx)
        if len(pts) < 2:
            raise GeometryParseError(ctx + "points", "need at least 2 vertices")
        if len(widths) != len(pts):
            raise GeometryParseError(ctx + "widths", "must match points length")
        points = np.array([_parse_point(p, f"{ctx}points[{k}]") for k, p in enumerate(pts)])
        w = []
        for k, width in enumerate(widths):
            if not isinstance(width, (int, float)) or isinstance(width, bool) or width <= 0:
                raise GeometryParseError(f"{ctx}widths[{k}]", "width must be > 0")
            w.append(float(width))
        seg = np.diff(points, axis=0)
        if np.any(np.hypot(seg[:, 0], seg[:, 1]) < 1e-12):
            raise GeometryParseError(ctx + "points", "zero-length segment")
        channels.append(Channel(points, np.array(w)))
    return tuple(channels)


def _parse_walls(doc):
    raw = _require(doc, "walls", list)
    walls = []
    for i, seg in enumerate(raw):
        key = f"walls[{i}]"
        if not isinstance(seg, (list, tuple)) or len(seg) != 4:
            raise GeometryParseError(key, "expected [x1, y1, x2, y2]")
        x1, y1, x2, y2 = (float(v) for v in seg)
        if abs(x1 - x2) > 1e-12 and abs(y1 - y2) > 1e-12:
            raise GeometryParseError(key, "wall must be axis-aligned")
        if abs(x1 - x2) < 1e-12 and abs(y1 - y2) < 1e-12:
            raise GeometryParseError(key, "zero-length wall")
        walls.append((x1, y1, x2, y2))
    return np.array(walls, dtype=float).reshape(-1, 4)


def load_geometry(source) -> WorldGeometry:
    """Load and validate a geometry document (dict, JSON text, or path).

    Raises GeometryParseError naming the offending key on schema violations
    and GeometryError when maze walls do not close the boundary.
    """
    if isinstance(source, (str, Path)) and "\n" not in str(source):
        with open(source, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    elif isinstance(source, str):
        doc = json.loads(source)
    else:
        doc = source
    if not isinstance(doc, dict):
        raise GeometryParseError("<root>", "expected a JSON object")

    units = _require(doc, "units", str)
    if units != "mm":
        raise GeometryParseError("units", f"must be 'mm', got '{units}'")

    channels = _parse_channels(doc)
    walls = _parse_walls(doc)
    if not channels and len(walls) == 0:
        raise GeometryParseError("channels", "need channels or walls")

    fid_raw = _require(doc, "fiducials", list)
    if len(fid_raw) != 2:
        raise GeometryParseError("fiducials", "exactly two anchor points required")
    fiducials = np.array([_parse_point(p, f"fiducials[{i}]") for i, p in enumerate(fid_raw)])

    ref_len = _require(doc, "reference_length_mm", float)
    if ref_len <= 0:
        raise GeometryParseError("reference_length_mm", "must be > 0")
    fid_dist = float(np.hypot(*(fiducials[1] - fiducials[0])))
    if abs(fid_dist - ref_len) > 1e-9:
        raise GeometryParseError(
            "reference_length_mm",
            f"fiducial distance {fid_dist!r} != declared {ref_len!r}")

    pts = [fiducials]
    for ch in channels:
        half = ch.widths[:, None] / 2.0
        pts.append(ch.points - half)
        pts.append(ch.points + half)
    if len(walls):
        pts.append(walls[:, 0:2])
        pts.append(walls[:, 2:4])
    allpts = np.vstack(pts)
    extent = (float(allpts[:, 0].min()), float(allpts[:, 1].min()),
              float(allpts[:, 0].max()), float(allpts[:, 1].max()))

    geom = WorldGeometry(channels, walls, fiducials, ref_len, extent)
    if geom.has_walls:
        _check_maze_closed(geom)
    return geom


# ---------------------------------------------------------------------------
# maze wall grid


def wall_grid(geom: WorldGeometry):
    """Infer the uniform grid behind axis-aligned wall segments.

    Returns (origin, cell, cols, rows, blocked) where blocked is a set of
    edge keys ('V', i, j) for the edge between cells (i-1, j)/(i, j) and
    ('H', i, j) for the edge between (i, j-1)/(i, j).
    """
    walls = geom.walls
    if not len(walls):
        raise GeometryError("geometry has no walls")
    lengths = np.abs(walls[:, 2] - walls[:, 0]) + np.abs(walls[:, 3] - walls[:, 1])
    cell = float(lengths.min())
    if np.any(np.abs(lengths - cell) > _GRID_TOL):
        raise GeometryError("wall segments must all span exactly one grid cell")
    x0 = float(min(walls[:, 0].min(), walls[:, 2].min()))
    y0 = float(min(walls[:, 1].min(), walls[:, 3].min()))
    x1 = float(max(walls[:, 0].max(), walls[:, 2].max()))
    y1 = float(max(walls[:, 1].max(), walls[:, 3].max()))
    cols = int(round((x1 - x0) / cell))
    rows = int(round((y1 - y0) / cell))

    blocked = set()
    for wx1, wy1, wx2, wy2 in walls:
        iu = (wx1 - x0) / cell
        ju = (wy1 - y0) / cell
        i, j = round(iu), round(ju)
        if abs(iu - i) > _GRID_TOL or abs(ju - j) > _GRID_TOL:
            raise GeometryError("wall endpoint off the uniform grid")
        if abs(wx1 - wx2) < _GRID_TOL:      # vertical wall: blocks E/W crossing
            blocked.add(("V", i, min(j, round((wy2 - y0) / cell))))
        else:                               # horizontal wall: blocks N/S crossing
            blocked.add(("H", min(i, round((wx2 - x0) / cell)), j))
    return (x0, y0), cell, cols, rows, blocked


def cell_of(origin, cell, p):
    return (int(math.floor((p[0] - origin[0]) / cell)),
            int(math.floor((p[1] - origin[1]) / cell)))


def cell_center(origin, cell, ij):
    return (origin[0] + (ij[0] + 0.5) * cell, origin[1] + (ij[1] + 0.5) * cell)


def free_neighbors(ij, cols, rows, blocked, include_exterior=False):
    """Cells reachable from ij in one move. Exterior cells signal leakage."""
    i, j = ij
    out = []
    moves = ((i + 1, j, ("V", i + 1, j)), (i - 1, j, ("V", i, j)),
             (i, j + 1, ("H", i, j + 1)), (i, j - 1, ("H", i, j)))
    for ni, nj, edge in moves:
        if edge in blocked:
            continue
        if 0 <= ni < cols and 0 <= nj < rows:
            out.append((ni, nj))
        elif include_exterior:
            out.append((ni, nj))
    return out


def _check_maze_closed(geom):
    origin, cell, cols, rows, blocked = wall_grid(geom)
    start = cell_of(origin, cell, geom.fiducials[0])
    if not (0 <= start[0] < cols and 0 <= start[1] < rows):
        raise GeometryError("first fiducial lies outside the wall grid")
    seen = {start}
    stack = [start]
    while stack:
        cur = stack.pop()
        for nb in free_neighbors(cur, cols, rows, blocked, include_exterior=True):
            if not (0 <= nb[0] < cols and 0 <= nb[1] < rows):
                raise GeometryError(
                    f"maze boundary open: flood fill escaped at cell {cur}")
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    if len(seen) != cols * rows:
        missing = cols * rows - len(seen)
        raise GeometryError(f"maze has {missing} cells unreachable from START")


# ---------------------------------------------------------------------------
# containment


def _channel_clearance(ch: Channel, p):
    """Max over segments of (local half-width - distance to centerline).

    Positive means p is inside the channel lumen with that much slack for
    the given point; the caller subtracts the body radius.
    """
    a = ch.points[:-1]
    b = ch.points[1:]
    ab = b - a
    ab2 = np.einsum("ij,ij->i", ab, ab)
    ap = np.asarray(p, dtype=float) - a
    t = np.clip(np.einsum("ij,ij->i", ap, ab) / ab2, 0.0, 1.0)
    proj = a + t[:, None] * ab
    d = np.hypot(*(np.asarray(p) - proj).T)
    w = ch.widths[:-1] * (1.0 - t) + ch.widths[1:] * t
    slack = w / 2.0 - d
    k = int(np.argmax(slack))
    return float(slack[k]), k, float(t[k])


def _wall_distances(walls, p):
    a = walls[:, 0:2]
    b = walls[:, 2:4]
    ab = b - a
    ab2 = np.einsum("ij,ij->i", ab, ab)
    ap = np.asarray(p, dtype=float) - a
    t = np.clip(np.einsum("ij,ij->i", ap, ab) / ab2, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.hypot(*(np.asarray(p) - proj).T)


def contains(geom: WorldGeometry, p, radius: float) -> bool:
    """True when a body disk of the given radius at p sits in free space."""
    for ch in geom.channels:
        slack, _, _ = _channel_clearance(ch, p)
        if slack >= radius:
            return True
    if geom.has_walls:
        x0, y0, x1, y1 = geom.extent
        if x0 <= p[0] <= x1 and y0 <= p[1] <= y1:
            if float(_wall_distances(geom.walls, p).min()) >= radius:
                return True
    return False


def state_contained(geom: WorldGeometry, state: RobotState) -> bool:
    return contains(geom, state.position, state.body_width / 2.0)


# ---------------------------------------------------------------------------
# stepping


def _slide_channel(geom, p, delta, radius):
    """Move by delta, projecting back into the nearest channel lumen."""
    target = (p[0] + delta[0], p[1] + delta[1])
    if contains(geom, target, radius):
        return target
    # nearest channel by clearance at the current position
    best = None
    for ch in geom.channels:
        slack, seg, t = _channel_clearance(ch, p)
        if best is None or slack > best[0]:
            best = (slack, ch)
    if best is None:
        return p
    ch = best[1]
    frac = 1.0
    for _ in range(24):
        cand = (p[0] + frac * delta[0], p[1] + frac * delta[1])
        slack, seg, t = _channel_clearance(ch, cand)
        a, b = ch.points[seg], ch.points[seg + 1]
        proj = a + t * (b - a)
        w = ch.widths[seg] * (1.0 - t) + ch.widths[seg + 1] * t
        d = math.hypot(cand[0] - proj[0], cand[1] - proj[1])
        bound = w / 2.0 - radius
        if bound >= 0.0:
            if d > bound:
                if d < 1e-12:
                    cand = proj
                else:
                    s = bound / d
                    cand = (proj[0] + s * (cand[0] - proj[0]),
                            proj[1] + s * (cand[1] - proj[1]))
            if contains(geom, cand, radius):
                return cand
        frac *= 0.5     # channel narrows faster than the clamp; shorten move
    return p


def _max_free_advance(geom, p, delta, radius):
    """Largest t in [0,1] with p + t*delta contained (bisection, t=0 valid)."""
    if contains(geom, (p[0] + delta[0], p[1] + delta[1]), radius):
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(48):
        mid = 0.5 * (lo + hi)
        if contains(geom, (p[0] + mid * delta[0], p[1] + mid * delta[1]), radius):
            lo = mid
        else:
            hi = mid
    return lo


def _slide_walls(geom, p, delta, radius):
    """Axis-decomposed slide for axis-aligned maze walls."""
    target = (p[0] + delta[0], p[1] + delta[1])
    if contains(geom, target, radius):
        return target
    cur = p
    for axis_delta in ((delta[0], 0.0), (0.0, delta[1])):
        if axis_delta == (0.0, 0.0):
            continue
        t = _max_free_advance(geom, cur, axis_delta, radius)
        cur = (cur[0] + t * axis_delta[0], cur[1] + t * axis_delta[1])
    return cur


def command_speed(cmd: ActuationCommand, params: KinematicParams) -> float:
    """Forward speed (mm/s) under the step-out clamped frequency law."""
    if not cmd.enabled or cmd.frequency == 0.0:
        return 0.0
    if cmd.frequency <= params.step_out_freq:
        return params.pitch_per_rev * cmd.frequency
    return params.pitch_per_rev * params.step_out_freq * params.damping


def step(state: RobotState, cmd: ActuationCommand, params: KinematicParams,
         dt: float, geom: WorldGeometry) -> RobotState:
    """Advance the swimmer by dt seconds; never leaves free space."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    speed = command_speed(cmd, params)
    t_next = state.t + int(round(dt * 1e6))
    if speed == 0.0:
        return replace(state, t=t_next)

    dist = speed * dt
    ux, uy = math.cos(cmd.axis_angle), math.sin(cmd.axis_angle)
    n_sub = max(1, int(math.ceil(dist / _SUBSTEP_MM)))
    ddist = dist / n_sub
    radius = state.body_width / 2.0
    p = state.position
    slide = _slide_walls if geom.has_walls else _slide_channel
    for _ in range(n_sub):
        p = slide(geom, p, (ddist * ux, ddist * uy), radius)

    moved = math.hypot(p[0] - state.position[0], p[1] - state.position[1])
    heading = math.atan2(p[1] - state.position[1], p[0] - state.position[0]) \
        if moved > 1e-12 else state.heading
    return replace(state, position=p, heading=heading, t=t_next)


def ground_truth(state: RobotState):
    """Oracle access to the exact simulated pose."""
    return (state.position, state.heading)
