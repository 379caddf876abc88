import math

import numpy as np
import pytest

from fluorotwin.bus import Bus
from fluorotwin.calib import FiducialPair, calibrate, world_to_px
from fluorotwin.clocks import SimClock
from fluorotwin.detect import Detection
from fluorotwin.twin import (CalibrationMissingError, EmptyHistoryError,
                             TwinSync, latency_report, velocity_estimates)

FPS_DT_US = 33_333


def transform():
    return calibrate(FiducialPair((100.0, 240.0), (472.0, 240.0), 186.0),
                     (0.0, 0.0), 0.0)


def det_at(px, seq, t_us, conf=0.5):
    return Detection((int(px[0]) - 5, int(px[1]) - 2, 10, 4),
                     (float(px[0]), float(px[1])), conf, seq, t_us)


def walk_detections(start_px, step_px, n, dt_us=FPS_DT_US):
    return [det_at((start_px[0] + i * step_px[0], start_px[1] + i * step_px[1]),
                   i, i * dt_us) for i in range(n)]


# ---------------------------------------------------------------------------
# apply_detection


def test_missing_calibration_refused():
    with pytest.raises(CalibrationMissingError):
        TwinSync(None)


def test_first_detection_sets_pose_zero_velocity():
    sync = TwinSync(transform())
    d = det_at((150.0, 240.0), 0, 0)
    state = sync.apply_detection(d, 1000)
    assert state.pose == pytest.approx((25.0, 0.0))
    assert state.v_inst == 0.0
    assert state.v_1s == 0.0
    assert state.mismatch_px == 0.0
    assert state.latency_us == 1000


def test_pose_fidelity_round_trip():
    sync = TwinSync(transform())
    rng = np.random.default_rng(8)
    t = 0
    for seq in range(200):
        t += FPS_DT_US
        c = (float(rng.uniform(0, 640)), float(rng.uniform(0, 480)))
        state = sync.apply_detection(det_at(c, seq, t), t)
        back = world_to_px(sync.transform, state.pose)
        assert math.hypot(back[0] - c[0], back[1] - c[1]) < 1e-6


def test_v_inst_at_30fps():
    # 0.3 mm between consecutive detections at 30 fps -> ~9 mm/s
    sync = TwinSync(transform())
    step_px = (0.3 / 0.5, 0.0)
    for d in walk_detections((100.0, 240.0), step_px, 10):
        state = sync.apply_detection(d, d.t_mono_us)
    assert state.v_inst == pytest.approx(9.0, rel=0.01)


def test_latency_is_apply_minus_capture():
    sync = TwinSync(transform())
    d = det_at((120.0, 240.0), 0, 100_000)
    state = sync.apply_detection(d, 120_000)
    assert state.latency_us == 20_000


def test_detection_from_future_rejected():
    sync = TwinSync(transform())
    with pytest.raises(ValueError):
        sync.apply_detection(det_at((120.0, 240.0), 0, 2000), 1000)


def test_out_of_order_detections_dropped_and_counted():
    bus = Bus(clock=SimClock())
    tele = bus.subscribe("telemetry")
    sync = TwinSync(transform(), bus=bus)
    sync.apply_detection(det_at((120.0, 240.0), 5, 1000), 1000)
    before = sync.state
    after = sync.apply_detection(det_at((150.0, 240.0), 4, 2000), 2000)
    assert after is before
    assert sync.out_of_order_drops == 1
    events = []
    while True:
        env = tele.get_nowait()
        if env is None:
            break
        events.append(env.payload["event"])
    assert "detection_out_of_order" in events


def test_mismatch_px_between_updates():
    sync = TwinSync(transform())
    sync.apply_detection(det_at((100.0, 240.0), 0, 0), 0)
    state = sync.apply_detection(det_at((103.0, 244.0), 1, FPS_DT_US), FPS_DT_US)
    assert state.mismatch_px == pytest.approx(5.0)


def test_twin_pose_published_on_bus():
    bus = Bus(clock=SimClock())
    sub = bus.subscribe("twin_pose")
    sync = TwinSync(transform(), bus=bus)
    sync.apply_detection(det_at((150.0, 240.0), 0, 0), 0)
    env = sub.get(timeout=1.0)
    assert env.payload["x_mm"] == pytest.approx(25.0)
    assert set(env.payload) == {"x_mm", "y_mm", "v_inst", "v_1s", "v_10s",
                                "mismatch_px", "latency_us"}


def test_staleness_flag():
    sync = TwinSync(transform())
    assert sync.is_stale(0)
    sync.apply_detection(det_at((120.0, 240.0), 0, 0), 0)
    assert not sync.is_stale(400_000)
    assert sync.is_stale(600_000)


def test_trail_monotonic_and_evicted():
    sync = TwinSync(transform())
    t = 0
    for seq in range(400):              # ~13 s at 30 fps
        t = seq * FPS_DT_US
        sync.apply_detection(det_at((100.0 + (seq % 5), 240.0), seq, t), t)
    times = [s[0] for s in sync.trail]
    assert times == sorted(times)
    assert all(tt >= t - 11_000_000 for tt in times)
    # in-window samples were not evicted: 10 s of samples remain
    assert times[0] <= t - 10_000_000


# ---------------------------------------------------------------------------
# velocity estimates


def test_constant_speed_windows():
    # 9 mm/s straight motion sampled at 30 fps for 1 s
    trail = []
    for i in range(31):
        t = i * FPS_DT_US
        trail.append((t, (9.0 * t / 1e6, 0.0)))
    v_inst, v_1s, v_10s = velocity_estimates(trail, trail[-1][0])
    assert v_inst == pytest.approx(9.0, rel=0.02)
    assert v_1s == pytest.approx(9.0, rel=0.02)


def test_stationary_robot_zero_everywhere():
    trail = [(i * FPS_DT_US, (50.0, -3.0)) for i in range(40)]
    assert velocity_estimates(trail, trail[-1][0]) == (0.0, 0.0, 0.0)


def test_windows_zero_until_two_samples():
    assert velocity_estimates([], 0) == (0.0, 0.0, 0.0)
    assert velocity_estimates([(0, (1.0, 1.0))], 0) == (0.0, 0.0, 0.0)


def test_zigzag_noise_inflates_v_inst_smoothed_by_windows():
    rng = np.random.default_rng(17)
    v1_series, v10_series = [], []
    trail = []
    for i in range(1800):               # 60 s at 30 fps
        t = i * FPS_DT_US
        jitter = 0.1 if i % 2 == 0 else -0.1
        trail.append((t, (20.0 + jitter, 5.0)))
        if i >= 600:                    # after both windows fill
            v_inst, v_1s, v_10s = velocity_estimates(trail[-400:], t)
            v1_series.append(v_1s)
            v10_series.append(v_10s)
    v_inst, v_1s, v_10s = velocity_estimates(trail[-400:], trail[-1][0])
    assert v_inst == pytest.approx(6.0, rel=0.02)    # 0.2 mm * 30 fps
    assert v_1s == pytest.approx(6.0, rel=0.05)
    assert np.var(v10_series) <= np.var(v1_series) + 1e-12


# ---------------------------------------------------------------------------
# latency report


def test_latency_report_constant():
    rep = latency_report([20_000] * 50)
    assert rep["median_us"] == 20_000
    assert rep["p99_us"] == 20_000


def test_latency_report_uniform_order_stats():
    lat = [ms * 1000 for ms in range(10, 110, 10)]   # 10..100 ms in microseconds
    rep = latency_report(lat)
    assert rep["median_us"] == pytest.approx(55_000)
    assert rep["p99_us"] == 100_000
    bucket_100ms = next(b for b in rep["histogram"] if b["le_us"] == 100_000)
    assert bucket_100ms["count"] == 10


def test_latency_report_empty_errors():
    with pytest.raises(EmptyHistoryError):
        latency_report([])
