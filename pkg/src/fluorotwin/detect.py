"""Deterministic background-subtraction blob detector.

Replaces a trained network with the same output contract: bounding box,
sub-pixel intensity-weighted centroid, and a bounded confidence score.
Detection state (the background model) is single-writer per stream.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .render import MODE_DS, Frame

_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)

BACKGROUND_FIRST_FRAME = "first-frame"
BACKGROUND_RUNNING_MEDIAN = "running-median"


class DetectorError(ValueError):
    pass


class DegenerateReferenceError(DetectorError):
    """Reference ROI does not attenuate relative to the background ROI."""


@dataclass(frozen=True)
class Detection:
    bbox: tuple[int, int, int, int]      # x, y, w, h px
    centroid: tuple[float, float]        # sub-pixel px
    confidence: float                    # [0, 1]
    frame_seq: int
    t_mono_us: int

    def record(self) -> dict:
        """Line-delimited log / bus payload form."""
        return {
            "seq": self.frame_seq,
            "t_mono_us": self.t_mono_us,
            "bbox": list(self.bbox),
            "centroid": [self.centroid[0], self.centroid[1]],
            "confidence": self.confidence,
        }


@dataclass(frozen=True)
class DetectorParams:
    background: str = BACKGROUND_FIRST_FRAME
    median_window: int = 9              # frames, running-median only
    median_update_every: int = 1        # feed the median every Nth frame
    threshold: float = 40.0             # gray levels
    min_area: int = 12                  # px^2
    max_area: int = 5000                # px^2

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("threshold must be > 0")
        if not 0 < self.min_area < self.max_area:
            raise ValueError("need 0 < min_area < max_area")
        if self.background not in (BACKGROUND_FIRST_FRAME, BACKGROUND_RUNNING_MEDIAN):
            raise ValueError(f"unknown background estimator '{self.background}'")
        if self.median_window < 1:
            raise ValueError("median_window must be >= 1")
        if self.median_update_every < 1:
            raise ValueError("median_update_every must be >= 1")


class _FirstFrameBackground:
    def __init__(self):
        self.model = None

    def prime(self, pixels):
        self.model = pixels.astype(np.float64)

    def update(self, pixels):
        if self.model is None:
            self.prime(pixels)


class _RunningMedianBackground:
    """Windowed per-pixel median, fed every `stride` frames so a slowly
    moving object cannot absorb itself into the model."""

    def __init__(self, window, stride=1):
        self.window = window
        self.stride = stride
        self.buffer = deque(maxlen=window)
        self.model = None
        self._count = 0

    def prime(self, pixels):
        self.buffer.append(np.asarray(pixels, dtype=np.uint8))
        self.model = np.median(np.stack(self.buffer), axis=0)

    def update(self, pixels):
        self._count += 1
        if self._count % self.stride == 0:
            self.prime(pixels)


class Detector:
    """Per-stream detector; detect() calls for one stream are serialized."""

    def __init__(self, params: DetectorParams | None = None):
        self.params = params or DetectorParams()
        if self.params.background == BACKGROUND_FIRST_FRAME:
            self._bg = _FirstFrameBackground()
        else:
            self._bg = _RunningMedianBackground(self.params.median_window,
                                                self.params.median_update_every)

    def prime(self, frame_or_pixels):
        """Seed the background with a robot-free initial image."""
        pixels = getattr(frame_or_pixels, "pixels", frame_or_pixels)
        self._bg.prime(np.asarray(pixels))
        return self

    @property
    def background(self):
        return self._bg.model

    def detect(self, frame: Frame) -> Detection | None:
        """Best candidate blob in the frame, or None when nothing qualifies."""
        p = self.params
        if self._bg.model is None:
            # first frame establishes the background: uniform 128 for DS
            # (the subtraction null level), the frame itself for cine
            if frame.mode == MODE_DS:
                self._bg.prime(np.full_like(frame.pixels, 128))
            else:
                self._bg.prime(frame.pixels)
        bg = self._bg.model
        if bg.shape != frame.pixels.shape:
            raise DetectorError(
                f"frame {frame.pixels.shape} does not match background {bg.shape}")

        diff = np.abs(frame.pixels.astype(np.float64) - bg)
        mask = diff >= p.threshold
        detection = None
        if mask.any():
            labels, n = ndimage.label(mask, structure=_EIGHT_CONNECTED)
            idx = np.flatnonzero(mask)
            lbl_at = labels.ravel()[idx]
            w_at = diff.ravel()[idx]
            xs = (idx % frame.width).astype(np.float64)
            ys = (idx // frame.width).astype(np.float64)
            areas = np.bincount(lbl_at, minlength=n + 1)
            wsum = np.bincount(lbl_at, weights=w_at, minlength=n + 1)
            wx = np.bincount(lbl_at, weights=w_at * xs, minlength=n + 1)
            wy = np.bincount(lbl_at, weights=w_at * ys, minlength=n + 1)
            slices = ndimage.find_objects(labels)

            candidates = []
            for lbl in range(1, n + 1):
                area = int(areas[lbl])
                if not p.min_area <= area <= p.max_area:
                    continue
                mean_deficit = wsum[lbl] / area
                conf = min(mean_deficit / 255.0, 1.0) * min(area / p.min_area, 1.0)
                sy, sx = slices[lbl - 1]
                bbox = (int(sx.start), int(sy.start),
                        int(sx.stop - sx.start), int(sy.stop - sy.start))
                centroid = (float(wx[lbl] / wsum[lbl]), float(wy[lbl] / wsum[lbl]))
                candidates.append((-conf, bbox[1], bbox[0], bbox, centroid, conf))
            if candidates:
                candidates.sort(key=lambda c: c[:3])
                _, _, _, bbox, centroid, conf = candidates[0]
                detection = Detection(bbox, centroid, float(conf),
                                      frame.seq, frame.t_mono_us)
        self._bg.update(frame.pixels)
        return detection


def detect(frame: Frame, params: DetectorParams, detector: Detector | None = None):
    """Single-shot detection; pass a Detector to keep background state."""
    det = detector or Detector(params)
    return det.detect(frame)


# ---------------------------------------------------------------------------
# ROI contrast analysis


def _roi_mean(pixels, rect, name):
    x, y, w, h = rect
    hh, ww = pixels.shape
    if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > ww or y + h > hh:
        raise DetectorError(f"ROI {name}={rect} outside {ww}x{hh} frame")
    return float(pixels[y:y + h, x:x + w].mean())


def _disjoint(r1, r2):
    return (r1[0] + r1[2] <= r2[0] or r2[0] + r2[2] <= r1[0]
            or r1[1] + r1[3] <= r2[1] or r2[1] + r2[3] <= r1[1])


def relative_contrast(frame: Frame, roi_obj, roi_ref, roi_bg) -> float:
    """Contrast of an object ROI relative to a reference ROI.

    (mean_bg - mean_obj) / (mean_bg - mean_ref); > 1 means the object
    attenuates more strongly than the reference material.
    """
    rois = {"obj": tuple(roi_obj), "ref": tuple(roi_ref), "bg": tuple(roi_bg)}
    pairs = [("obj", "ref"), ("obj", "bg"), ("ref", "bg")]
    for a, b in pairs:
        if rois[a] != rois[b] and not _disjoint(rois[a], rois[b]):
            raise DetectorError(f"ROIs {a}={rois[a]} and {b}={rois[b]} overlap")
    m_obj = _roi_mean(frame.pixels, rois["obj"], "obj")
    m_ref = _roi_mean(frame.pixels, rois["ref"], "ref")
    m_bg = _roi_mean(frame.pixels, rois["bg"], "bg")
    denom = m_bg - m_ref
    if denom <= 0:
        raise DegenerateReferenceError(
            f"reference ROI mean {m_ref} not below background {m_bg}")
    return (m_bg - m_obj) / denom


# ---------------------------------------------------------------------------
# batch mode over recorded streams


def batch_detect(replay_dir, params: DetectorParams | None = None,
                 out_path=None, prime_with=None):
    """Detect over a recorded PGM directory; returns detection records.

    Writes line-delimited JSON records when out_path is given.
    """
    from .pgmio import load_stream

    det = Detector(params)
    if prime_with is not None:
        det.prime(prime_with)
    records = []
    n_frames = 0
    for frame in load_stream(replay_dir):
        n_frames += 1
        d = det.detect(frame)
        if d is not None:
            records.append(d.record())
    if n_frames == 0:
        raise DetectorError(f"{replay_dir}: recorded stream is empty")
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    return records
