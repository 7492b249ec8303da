import json

import numpy as np
import pytest

from cqdet.cli import main
from cqdet.io import load_queue, save_attention
from cqdet.attention import AttentionParams

SMALL = {
    "pipeline": {"n_layers": 1, "n_global": 20, "d": 32, "heads": 4, "ffn_hidden": 32,
                 "queue_size": 4, "temporal_budget": 16, "feature_channels": 8},
    "scene": {"n_boxes": 3, "n_frames": 2, "channels": 8},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def _lines(text):
    return [json.loads(line) for line in text.strip().splitlines()]


def test_project(capsys):
    assert main(["project", "--points", "[[10, 0, 1.6]]"]) == 0
    recs = _lines(capsys.readouterr().out)
    assert len(recs) == 6
    front = [r for r in recs if r["camera_id"] == 0][0]
    assert front["in_image"] and front["depth"] == pytest.approx(9.0)
    behind = [r for r in recs if r["camera_id"] == 3][0]
    assert behind["u"] is None and not behind["in_front"]


def test_gen_scene_lift_sample(tmp_path, config, capsys):
    out = tmp_path / "scene"
    assert main(["gen-scene", "--config", config, "--seed", "4", "--out", str(out),
                 "--figures", str(tmp_path / "figs")]) == 0
    assert (out / "rig.json").exists() and (out / "pyramid_001.bin").exists()
    assert (tmp_path / "figs" / "scene_frame000.png").stat().st_size > 0
    truth = json.loads((out / "truth.json").read_text())
    capsys.readouterr()

    assert main(["lift", "--rig", str(out / "rig.json"),
                 "--detections", str(out / "detections_000.json")]) == 0
    states = np.array(_lines(capsys.readouterr().out))
    boxes = np.array(truth["frames"][0]["boxes"])
    for s in states:
        assert np.min(np.linalg.norm(boxes[:, :3] - s[:3], axis=1)) < 1e-6

    assert main(["sample", "--pyramid", str(out / "pyramid_000.bin"), "--u", "10", "--v", "10"]) == 0
    recs = _lines(capsys.readouterr().out)
    assert [r["level"] for r in recs] == [0, 1, 2, 3] and len(recs[0]["value"]) == 8


def test_propagate(capsys):
    assert main(["propagate", "--states", "[[0,0,0,1,1,1,0,2,0]]", "--dt", "1"]) == 0
    (s,) = _lines(capsys.readouterr().out)
    assert s == [2, 0, 0, 1, 1, 1, 0, 2, 0]


def test_attend(tmp_path, config, capsys):
    wpath = tmp_path / "w.bin"
    save_attention(wpath, AttentionParams.random(32, 4, seed=1))
    assert main(["attend", "--config", config, "--weights", str(wpath), "--queries", "8",
                 "--figures", str(tmp_path / "f")]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["row_sum_max_err"] < 1e-12
    assert (tmp_path / "f" / "modulation_kernels.png").exists()


def test_pipeline_metrics(tmp_path, config):
    metrics = tmp_path / "m.jsonl"
    figs = tmp_path / "figs"
    rc = main(["pipeline", "--config", config, "--seed", "2", "--emit-metrics", str(metrics),
               "--figures", str(figs), "--out", str(tmp_path / "p.bin"),
               "--save-queue", str(tmp_path / "q.bin")])
    assert rc == 0
    recs = _lines(metrics.read_text())
    assert [r["frame"] for r in recs] == [0, 1]
    assert recs[1]["n_temporal"] == 4
    assert all(r["n_queries"] == r["n_global"] + r["n_adaptive"] + r["n_temporal"] for r in recs)
    assert all(r["adaptive_recall"] == 1.0 for r in recs)
    assert (figs / "bev_frame001.png").exists() and (figs / "metrics.png").exists()
    assert len(load_queue(tmp_path / "q.bin")) == 8


def test_pipeline_deterministic(tmp_path, config):
    for name in ("a", "b"):
        assert main(["pipeline", "--config", config, "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_pipeline_from_pyramid(tmp_path, config, capsys):
    out = tmp_path / "s"
    main(["gen-scene", "--config", config, "--out", str(out)])
    capsys.readouterr()
    assert main(["pipeline", "--config", config, "--pyramid", str(out / "pyramid_000.bin"),
                 "--rig", str(out / "rig.json"), "--detections", str(out / "detections_000.json")]) == 0
    (rec,) = _lines(capsys.readouterr().out)
    assert rec["n_global"] == 20 and rec["n_adaptive"] >= 3


def test_gradcheck(tmp_path, capsys):
    assert main(["gradcheck", "--kernel", "softmax", "--trials", "10"]) == 0
    (rec,) = _lines(capsys.readouterr().out)
    assert rec["passed"] and rec["kernel"] == "softmax"
    assert main(["gradcheck", "--kernel", "gaussian", "--trials", "10", "--step", "0.3"]) == 1


def test_errors_exit_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"pipeline": {"heads": 5}}))
    assert main(["attend", "--config", str(bad)]) == 2
    assert "error" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["pipeline", "--seed", "-1"])


def test_verify_exit_code(monkeypatch, capsys):
    from cqdet import verify
    from cqdet.verify import CheckResult
    monkeypatch.setattr(verify, "CHECKS", (lambda seed: CheckResult("X1", "ok", True),))
    assert main(["verify"]) == 0
    monkeypatch.setattr(verify, "CHECKS", (lambda seed: CheckResult("X1", "ok", True),
                                           lambda seed: CheckResult("X2", "bad", False)))
    assert main(["verify"]) == 1
    out = capsys.readouterr().out
    assert "[FAIL] X2" in out and "1/2 checks passed" in out
