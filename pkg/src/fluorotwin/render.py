"""Synthetic grayscale fluoroscopy of the world, cine and digital-subtraction.

The static scene (faint channel/maze outlines, fiducial dots) is rasterized
once and cached; per frame only the swimmer capsule, occlusion shifts and
seeded Gaussian noise are applied. Image coordinates are y-down; pixel (x, y)
has its center at exactly (x, y).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .world import RobotState, WorldGeometry

MAX_WALL_CONTRAST = 5.0     # phantom structure stays nearly invisible
_SOFT_EDGE_PX = 1.0         # linear coverage falloff at object boundaries

MODE_CINE = "cine"
MODE_DS = "ds"


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class Frame:
    width: int
    height: int
    pixels: np.ndarray          # (height, width) uint8, row-major
    seq: int
    t_mono_us: int
    mode: str = MODE_CINE

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width):
            raise ValueError(
                f"pixels shape {self.pixels.shape} != {(self.height, self.width)}")
        if self.pixels.dtype != np.uint8:
            raise ValueError("pixels must be uint8")
        if self.pixels.flags.writeable:      # frames are shared across stages
            self.pixels.flags.writeable = False


@dataclass(frozen=True)
class OcclusionEvent:
    """High-contrast object (magnet, arm) crossing part of the image."""

    t_start_us: int
    t_end_us: int
    region_px: tuple[int, int, int, int]    # x, y, w, h
    level_shift: float


@dataclass(frozen=True)
class RenderConfig:
    width: int = 640
    height: int = 480
    background_level: float = 200.0
    robot_attenuation: float = 80.0
    fiducial_attenuation: float = 60.0
    fiducial_radius_px: float = 3.0
    wall_contrast: float = 4.0          # clamped to MAX_WALL_CONTRAST
    noise_sigma: float = 3.0
    noise_seed: int = 0
    mm_per_px: float = 0.5
    fps: float = 30.0
    occlusion_events: tuple[OcclusionEvent, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.mm_per_px <= 0:
            raise ValueError("mm_per_px must be > 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.fps <= 0:
            raise ValueError("fps must be > 0")


class Projector:
    """World mm (y-up) to image px (y-down), centered on the geometry extent."""

    def __init__(self, geom: WorldGeometry, cfg: RenderConfig):
        x0, y0, x1, y1 = geom.extent
        self.center_mm = ((x0 + x1) / 2.0, (y0 + y1) / 2.0)
        self.center_px = ((cfg.width - 1) / 2.0, (cfg.height - 1) / 2.0)
        self.mm_per_px = cfg.mm_per_px

    def to_px(self, p_mm):
        return (self.center_px[0] + (p_mm[0] - self.center_mm[0]) / self.mm_per_px,
                self.center_px[1] - (p_mm[1] - self.center_mm[1]) / self.mm_per_px)

    def to_mm(self, p_px):
        return (self.center_mm[0] + (p_px[0] - self.center_px[0]) * self.mm_per_px,
                self.center_mm[1] - (p_px[1] - self.center_px[1]) * self.mm_per_px)


def _segment_field(xs, ys, a, b):
    """Distance and projection parameter from grid points to segment a-b."""
    ax, ay = a
    bx, by = b
    abx, aby = bx - ax, by - ay
    ab2 = abx * abx + aby * aby
    if ab2 < 1e-18:
        return np.hypot(xs - ax, ys - ay), np.zeros_like(xs)
    t = np.clip(((xs - ax) * abx + (ys - ay) * aby) / ab2, 0.0, 1.0)
    return np.hypot(xs - (ax + t * abx), ys - (ay + t * aby)), t


def _segment_distance_field(xs, ys, a, b):
    return _segment_field(xs, ys, a, b)[0]


class FluoroRenderer:
    """Renders timestamped frames of one geometry under one config."""

    def __init__(self, geom: WorldGeometry, cfg: RenderConfig):
        self.geom = geom
        self.cfg = cfg
        self.proj = Projector(geom, cfg)
        self._static = self._rasterize_static()

    # -- static scene ------------------------------------------------------

    def _rasterize_static(self):
        cfg = self.cfg
        ys, xs = np.mgrid[0:cfg.height, 0:cfg.width].astype(np.float64)
        img = np.full((cfg.height, cfg.width), cfg.background_level, dtype=np.float64)
        wall_deficit = min(cfg.wall_contrast, MAX_WALL_CONTRAST)

        if wall_deficit > 0:
            outline = np.zeros_like(img)
            for ch in self.geom.channels:
                pts_px = np.array([self.proj.to_px(p) for p in ch.points])
                half_px = ch.widths / (2.0 * cfg.mm_per_px)
                for k in range(len(pts_px) - 1):
                    d, t = _segment_field(xs, ys, pts_px[k], pts_px[k + 1])
                    local_half = half_px[k] * (1.0 - t) + half_px[k + 1] * t
                    cov = np.clip(1.0 - np.abs(d - local_half) / _SOFT_EDGE_PX, 0.0, 1.0)
                    np.maximum(outline, wall_deficit * cov, out=outline)
            for wall in self.geom.walls:
                a = self.proj.to_px(wall[0:2])
                b = self.proj.to_px(wall[2:4])
                d = _segment_distance_field(xs, ys, a, b)
                cov = np.clip(0.5 - (d - 0.5) / _SOFT_EDGE_PX, 0.0, 1.0)
                np.maximum(outline, wall_deficit * cov, out=outline)
            img -= outline

        for f in self.geom.fiducials:
            fx, fy = self.proj.to_px(f)
            d = np.hypot(xs - fx, ys - fy)
            cov = np.clip(0.5 - (d - cfg.fiducial_radius_px) / _SOFT_EDGE_PX, 0.0, 1.0)
            img -= cfg.fiducial_attenuation * cov
        return img

    def render_background(self, t_us: int = 0, seq: int = 0) -> Frame:
        """Robot-free frame (the pre-navigation initial image), noise included."""
        return self._finish(self._static.copy(), t_us, seq)

    # -- per-frame ---------------------------------------------------------

    def _capsule_deficit(self, img, state: RobotState):
        cfg = self.cfg
        r_px = (state.body_width / 2.0) / cfg.mm_per_px
        half_spine = max(state.body_length / 2.0 - state.body_width / 2.0, 0.0)
        hx = half_spine * math.cos(state.heading)
        hy = half_spine * math.sin(state.heading)
        a = self.proj.to_px((state.position[0] - hx, state.position[1] - hy))
        b = self.proj.to_px((state.position[0] + hx, state.position[1] + hy))

        pad = r_px + _SOFT_EDGE_PX + 1.0
        x_lo = int(max(0, math.floor(min(a[0], b[0]) - pad)))
        x_hi = int(min(cfg.width, math.ceil(max(a[0], b[0]) + pad) + 1))
        y_lo = int(max(0, math.floor(min(a[1], b[1]) - pad)))
        y_hi = int(min(cfg.height, math.ceil(max(a[1], b[1]) + pad) + 1))
        if x_lo >= x_hi or y_lo >= y_hi:
            return
        ys, xs = np.mgrid[y_lo:y_hi, x_lo:x_hi].astype(np.float64)
        d = _segment_distance_field(xs, ys, a, b)
        cov = np.clip(0.5 - (d - r_px) / _SOFT_EDGE_PX, 0.0, 1.0)
        img[y_lo:y_hi, x_lo:x_hi] -= cfg.robot_attenuation * cov

    def _finish(self, img, t_us, seq):
        cfg = self.cfg
        for ev in cfg.occlusion_events:
            if ev.t_start_us <= t_us < ev.t_end_us:
                x, y, w, h = ev.region_px
                img[y:y + h, x:x + w] += ev.level_shift
        if cfg.noise_sigma > 0:
            rng = np.random.default_rng((cfg.noise_seed, seq))
            img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
        np.clip(img, 0.0, 255.0, out=img)
        return Frame(cfg.width, cfg.height, np.rint(img).astype(np.uint8),
                     seq, int(t_us), MODE_CINE)

    def render_cine(self, state: RobotState, t_us: int, seq: int) -> Frame:
        """Render one cine frame; the swimmer must project inside the frame."""
        cx, cy = self.proj.to_px(state.position)
        if not (0 <= cx < self.cfg.width and 0 <= cy < self.cfg.height):
            raise RenderError(
                f"robot pose {state.position} mm projects to ({cx:.1f}, {cy:.1f}) px, "
                f"outside {self.cfg.width}x{self.cfg.height}")
        img = self._static.copy()
        self._capsule_deficit(img, state)
        return self._finish(img, t_us, seq)


def render_cine(geom: WorldGeometry, state: RobotState, cfg: RenderConfig,
                t_us: int, seq: int) -> Frame:
    """One-shot convenience wrapper; prefer FluoroRenderer for streams."""
    return FluoroRenderer(geom, cfg).render_cine(state, t_us, seq)


def render_ds(current: Frame, reference: Frame) -> Frame:
    """Digital subtraction: 128 + (current - reference), clamped to [0, 255].

    An attenuating swimmer that left its start shows a bright (>128) residual
    there (the white mark where the dark body used to be) and a dark (<128)
    blob at its current position. Self-subtraction is uniformly 128.
    """
    if (current.width, current.height) != (reference.width, reference.height):
        raise RenderError(
            f"dimension mismatch: {current.width}x{current.height} vs "
            f"{reference.width}x{reference.height}")
    if current.mode != MODE_CINE or reference.mode != MODE_CINE:
        raise RenderError("digital subtraction expects two cine frames")
    diff = 128 + current.pixels.astype(np.int16) - reference.pixels.astype(np.int16)
    return Frame(current.width, current.height,
                 np.clip(diff, 0, 255).astype(np.uint8),
                 current.seq, current.t_mono_us, MODE_DS)


class FrameStream:
    """Paced frame source: cine or digital-subtraction at cfg.fps.

    state_provider(t_us) returns the RobotState to draw. The clock provides
    now_us() and sleep_until_us(); a virtual clock makes streams deterministic.
    """

    def __init__(self, renderer: FluoroRenderer, clock, state_provider,
                 mode: str = MODE_CINE):
        if mode not in (MODE_CINE, MODE_DS):
            raise ValueError(f"unknown mode '{mode}'")
        self.renderer = renderer
        self.clock = clock
        self.state_provider = state_provider
        self.mode = mode
        self.seq = 0
        self._reference: Frame | None = None
        self._t0_us = None

    def frame_period_us(self):
        return 1e6 / self.renderer.cfg.fps

    def next_frame(self) -> Frame:
        """Sleep to the next frame slot, then capture."""
        if self._t0_us is None:
            self._t0_us = self.clock.now_us()
        due = int(round(self._t0_us + self.seq * self.frame_period_us()))
        self.clock.sleep_until_us(due)
        t_us = self.clock.now_us()
        state = self.state_provider(t_us)
        frame = self.renderer.render_cine(state, t_us, self.seq)
        if self.mode == MODE_DS:
            if self._reference is None:
                self._reference = frame
            frame = render_ds(frame, self._reference)
        self.seq += 1
        return frame

    def run(self, duration_s: float):
        """Yield frames for duration_s seconds of clock time."""
        start = self.clock.now_us()
        end = start + duration_s * 1e6
        while True:
            due = (self._t0_us if self._t0_us is not None else start) \
                + self.seq * self.frame_period_us()
            if due >= end:
                return
            yield self.next_frame()
