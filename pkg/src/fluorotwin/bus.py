"""Topic-based pub/sub transport with per-topic sequencing and dual timestamps.

Envelopes carry a monotonic timestamp for latency math and a wall-clock
timestamp for logs. The wire form is one JSON envelope per line with fixed
field order (topic, seq, t_mono_us, t_wall_us, payload). Publishers are never
blocked: a subscriber that falls more than QUEUE_LIMIT messages behind is
dropped and a telemetry event is emitted.
"""

from __future__ import annotations

import json
import queue
import threading
from dataclasses import dataclass

from .clocks import RealClock

QUEUE_LIMIT = 1024

TOPIC_DETECTION = "detection"
TOPIC_TWIN_POSE = "twin_pose"
TOPIC_ACTUATION = "actuation"
TOPIC_TELEMETRY = "telemetry"
TOPIC_FRAME_META = "frame_meta"


class BusError(Exception):
    pass


class UnknownTopicError(BusError):
    pass


class SchemaError(BusError):
    pass


@dataclass(frozen=True)
class Envelope:
    topic: str
    seq: int
    t_mono_us: int
    t_wall_us: int
    payload: dict


def encode_envelope(env: Envelope) -> str:
    """Canonical one-line wire form; field order is part of the protocol."""
    return json.dumps(
        {"topic": env.topic, "seq": env.seq, "t_mono_us": env.t_mono_us,
         "t_wall_us": env.t_wall_us, "payload": env.payload},
        separators=(",", ":"))


def decode_envelope(line: str) -> Envelope:
    doc = json.loads(line)
    try:
        return Envelope(doc["topic"], doc["seq"], doc["t_mono_us"],
                        doc["t_wall_us"], doc["payload"])
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"malformed envelope: {exc}") from exc


# ---------------------------------------------------------------------------
# topic schemas


def _number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_fields(payload, fields):
    if not isinstance(payload, dict):
        raise SchemaError("payload must be an object")
    for name, pred, desc in fields:
        if name not in payload:
            raise SchemaError(f"payload missing '{name}'")
        if not pred(payload[name]):
            raise SchemaError(f"payload field '{name}' must be {desc}")


def _validate_detection(p):
    _check_fields(p, [
        ("seq", lambda v: isinstance(v, int), "an integer"),
        ("t_mono_us", lambda v: isinstance(v, int), "an integer"),
        ("bbox", lambda v: isinstance(v, list) and len(v) == 4 and all(_number(c) for c in v),
         "[x, y, w, h]"),
        ("centroid", lambda v: isinstance(v, list) and len(v) == 2 and all(_number(c) for c in v),
         "[cx, cy]"),
        ("confidence", lambda v: _number(v) and 0.0 <= v <= 1.0, "a number in [0, 1]"),
    ])


def _validate_twin_pose(p):
    _check_fields(p, [(k, _number, "a number") for k in
                      ("x_mm", "y_mm", "v_inst", "v_1s", "v_10s",
                       "mismatch_px", "latency_us")])


def _validate_actuation(p):
    _check_fields(p, [
        ("axis_angle", _number, "a number"),
        ("frequency", lambda v: _number(v) and 0.0 <= v <= 100.0, "a number in [0, 100]"),
        ("enabled", lambda v: isinstance(v, bool), "a boolean"),
    ])


def _validate_frame_meta(p):
    _check_fields(p, [
        ("seq", lambda v: isinstance(v, int), "an integer"),
        ("t_mono_us", lambda v: isinstance(v, int), "an integer"),
        ("mode", lambda v: v in ("cine", "ds"), "'cine' or 'ds'"),
    ])


def _validate_telemetry(p):
    if not isinstance(p, dict) or "event" not in p:
        raise SchemaError("telemetry payload needs an 'event' field")


TOPIC_SCHEMAS = {
    TOPIC_DETECTION: _validate_detection,
    TOPIC_TWIN_POSE: _validate_twin_pose,
    TOPIC_ACTUATION: _validate_actuation,
    TOPIC_TELEMETRY: _validate_telemetry,
    TOPIC_FRAME_META: _validate_frame_meta,
}


# ---------------------------------------------------------------------------
# in-process bus


class Subscription:
    """Ordered live message stream for one (subscriber, topic) pair."""

    _END = object()

    def __init__(self, bus, topic, maxsize):
        self.bus = bus
        self.topic = topic
        self._maxsize = maxsize
        self._q = queue.Queue(maxsize=maxsize + 1)   # +1 slot reserved for END
        self.dropped = False

    def get(self, timeout=None) -> Envelope | None:
        """Next envelope, or None at end-of-stream."""
        try:
            item = self._q.get(timeout=timeout)
        except queue.Empty:
            return None
        return None if item is self._END else item

    def get_nowait(self) -> Envelope | None:
        try:
            item = self._q.get_nowait()
        except queue.Empty:
            return None
        return None if item is self._END else item

    def __iter__(self):
        while True:
            item = self._q.get()
            if item is self._END:
                return
            yield item

    def _offer(self, env) -> bool:
        if self._q.qsize() >= self._maxsize:    # serialized by the bus lock
            return False
        self._q.put_nowait(env)
        return True

    def _end(self):
        try:
            self._q.put_nowait(self._END)       # fits in the reserved slot
        except queue.Full:
            pass

    def close(self):
        self.bus.unsubscribe(self)


class Bus:
    """Thread-safe in-process pub/sub hub over the fixed topic registry."""

    def __init__(self, clock=None, topics=None):
        self.clock = clock or RealClock()
        self.topics = dict(topics or TOPIC_SCHEMAS)
        self._lock = threading.Lock()
        self._seq = {t: 0 for t in self.topics}
        self._subs: dict[str, list[Subscription]] = {t: [] for t in self.topics}
        self.drop_counts = {t: 0 for t in self.topics}
        self._closed = False

    def _check_topic(self, topic):
        if topic not in self.topics:
            raise UnknownTopicError(f"topic '{topic}' is not registered")

    def subscribe(self, topic, maxsize=QUEUE_LIMIT) -> Subscription:
        self._check_topic(topic)
        sub = Subscription(self, topic, maxsize)
        with self._lock:
            if self._closed:
                raise BusError("bus is closed")
            self._subs[topic].append(sub)
        return sub

    def unsubscribe(self, sub: Subscription):
        with self._lock:
            subs = self._subs.get(sub.topic, [])
            if sub in subs:
                subs.remove(sub)
        sub._end()

    def publish(self, topic, payload) -> int:
        """Validate, stamp, and fan out; returns the assigned per-topic seq."""
        self._check_topic(topic)
        self.topics[topic](payload)
        overflowed = []
        with self._lock:
            if self._closed:
                raise BusError("bus is closed")
            seq = self._seq[topic]
            self._seq[topic] = seq + 1
            env = Envelope(topic, seq, self.clock.now_us(), self.clock.wall_us(),
                           payload)
            for sub in list(self._subs[topic]):
                if not sub._offer(env):
                    self._subs[topic].remove(sub)
                    self.drop_counts[topic] += 1
                    overflowed.append(sub)
        for sub in overflowed:
            sub.dropped = True
            sub._end()
            if topic != TOPIC_TELEMETRY:
                self.publish(TOPIC_TELEMETRY, {
                    "event": "subscriber_dropped",
                    "topic": topic,
                    "drop_counts": dict(self.drop_counts),
                })
        return seq

    def next_seq(self, topic) -> int:
        with self._lock:
            return self._seq[topic]

    def close(self):
        """End-of-stream for every subscriber; further publishes fail."""
        with self._lock:
            self._closed = True
            subs = [s for lst in self._subs.values() for s in lst]
            for lst in self._subs.values():
                lst.clear()
        for sub in subs:
            sub._end()
