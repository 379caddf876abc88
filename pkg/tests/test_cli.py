import json

import numpy as np
import pytest

from fluorotwin.cli import main
from fluorotwin.pgmio import write_pgm


def test_missing_scenario_is_config_error(capsys):
    assert main(["run"]) == 2
    assert "config error" in capsys.readouterr().err


def test_unknown_bundled_scenario(capsys):
    assert main(["run", "--scenario", "does-not-exist"]) == 2


def test_run_headless_short(capsys):
    rc = main(["run", "--scenario", "branched-phantom", "--duration", "1",
               "--headless"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["frames"] == 30
    assert out["poses"] >= 27
    assert out["latency"]["p99_us"] < 100_000


def test_record_then_replay_roundtrip(tmp_path, capsys):
    rec = tmp_path / "rec"
    rc = main(["record", "--scenario", "branched-phantom", "--duration", "1",
               "--record", str(rec)])
    assert rc == 0
    capsys.readouterr()

    det1 = tmp_path / "d1.jsonl"
    det2 = tmp_path / "d2.jsonl"
    for out in (det1, det2):
        rc = main(["replay", "--scenario", "branched-phantom",
                   "--replay", str(rec), "--detections-out", str(out)])
        assert rc == 0
        capsys.readouterr()
    assert det1.read_bytes() == det2.read_bytes()
    assert len(det1.read_bytes().splitlines()) >= 25


def test_replay_without_dir_is_config_error(capsys):
    assert main(["replay", "--scenario", "branched-phantom"]) == 2


def test_replay_bad_dir_is_runtime_error(tmp_path, capsys):
    rc = main(["replay", "--scenario", "branched-phantom",
               "--replay", str(tmp_path / "empty")])
    assert rc == 3
    assert "failure" in capsys.readouterr().err


def test_maze_verb(capsys):
    rc = main(["maze"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["steps"] == 7
    assert out["completed"]
    assert out["containment_violations"] == 0


def test_contrast_verb(tmp_path, capsys):
    img = np.full((40, 160), 200, dtype=np.uint8)
    img[10:30, 10:40] = 50
    img[10:30, 60:90] = 100
    fp = tmp_path / "f.pgm"
    write_pgm(fp, img)
    spec = tmp_path / "rois.json"
    spec.write_text(json.dumps({
        "reference": [60, 10, 30, 20],
        "background": [110, 10, 40, 20],
        "objects": [{"name": "hms", "roi": [10, 10, 30, 20]}],
    }))
    rc = main(["contrast", "--frame", str(fp), "--rois", str(spec)])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["rows"][0]["ratio"] == pytest.approx(1.5)
    assert out["rows"][0]["exceeds_reference"]


def test_bench_verb_smoke(capsys):
    rc = main(["bench", "--scenario", "branched-phantom", "--duration", "1"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["end_to_end"]["p99_us"] < 100_000
    assert set(out["hops"]) == {"render_to_detect", "detect_to_bus",
                                "bus_to_apply"}
