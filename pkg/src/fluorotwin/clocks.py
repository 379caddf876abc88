"""Monotonic clock sources: the host clock for live runs, a virtual clock
for deterministic simulation and replay."""

from __future__ import annotations

import time


class RealClock:
    """Host monotonic clock in microseconds."""

    def now_us(self) -> int:
        return time.monotonic_ns() // 1000

    def wall_us(self) -> int:
        return time.time_ns() // 1000

    def sleep_until_us(self, t_us: int):
        while True:
            remaining = t_us - self.now_us()
            if remaining <= 0:
                return
            time.sleep(remaining / 1e6)


class SimClock:
    """Virtual clock: sleeping jumps time forward instantly."""

    def __init__(self, start_us: int = 0):
        self._now = int(start_us)

    def now_us(self) -> int:
        return self._now

    def wall_us(self) -> int:
        return self._now

    def sleep_until_us(self, t_us: int):
        if t_us > self._now:
            self._now = int(t_us)

    def advance_us(self, dt_us: int):
        self._now += int(dt_us)
