"""Binary PGM (P5) frame recording with a JSON manifest; bit-exact round trip.

A recorded stream is a directory of frame_%06d.pgm files plus manifest.json
mapping every file to its seq, capture timestamp and imaging mode.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .render import Frame

MANIFEST_NAME = "manifest.json"
FRAME_PATTERN = "frame_%06d.pgm"
PRIME_NAME = "background.pgm"


class PgmError(ValueError):
    pass


def write_pgm(path, pixels: np.ndarray):
    """Write a (h, w) uint8 array as binary PGM, maxval 255."""
    if pixels.dtype != np.uint8 or pixels.ndim != 2:
        raise PgmError("expected a 2-D uint8 array")
    h, w = pixels.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (P5, maxval 255) into a (h, w) uint8 array."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise PgmError(f"{path}: not a binary PGM (P5)")
    # header tokens: magic, width, height, maxval; '#' comments allowed
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1    # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise PgmError(f"{path}: maxval {maxval} unsupported, need 255")
    body = data[pos:pos + w * h]
    if len(body) != w * h:
        raise PgmError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


class StreamRecorder:
    """Writes frames and finalizes the manifest on close."""

    def __init__(self, directory):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.entries = []
        self.prime_file = None

    def set_prime(self, pixels):
        """Store the robot-free initial image used to seed detection."""
        self.prime_file = PRIME_NAME
        write_pgm(self.dir / PRIME_NAME, pixels)

    def add(self, frame: Frame):
        name = FRAME_PATTERN % frame.seq
        write_pgm(self.dir / name, frame.pixels)
        self.entries.append({
            "seq": frame.seq,
            "t_mono_us": frame.t_mono_us,
            "mode": frame.mode,
            "file": name,
        })

    def close(self):
        manifest = {"frames": self.entries}
        if self.prime_file:
            manifest["prime_file"] = self.prime_file
        (self.dir / MANIFEST_NAME).write_text(
            json.dumps(manifest, indent=2) + "\n", encoding="utf-8")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def save_stream(directory, frames) -> int:
    """Record an iterable of frames; returns the frame count."""
    with StreamRecorder(directory) as rec:
        n = 0
        for frame in frames:
            rec.add(frame)
            n += 1
    return n


def _read_manifest(directory):
    manifest_path = Path(directory) / MANIFEST_NAME
    if not manifest_path.exists():
        raise PgmError(f"{directory}: no {MANIFEST_NAME}")
    return json.loads(manifest_path.read_text(encoding="utf-8"))


def load_stream(directory):
    """Yield frames from a recorded directory in manifest order."""
    directory = Path(directory)
    manifest = _read_manifest(directory)
    for entry in manifest["frames"]:
        pixels = read_pgm(directory / entry["file"])
        h, w = pixels.shape
        yield Frame(w, h, pixels, int(entry["seq"]),
                    int(entry["t_mono_us"]), entry["mode"])


def load_prime(directory):
    """Robot-free initial image from a recording, or None if absent."""
    manifest = _read_manifest(directory)
    name = manifest.get("prime_file")
    if not name:
        return None
    return read_pgm(Path(directory) / name)
