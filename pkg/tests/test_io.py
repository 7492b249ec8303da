import json

import numpy as np
import pytest

from cqdet.attention import AttentionParams, asa_forward
from cqdet.errors import FormatError
from cqdet.io import (attention_from_bytes, attention_to_bytes, load_config, load_detections,
                      load_rig, pyramid_from_bytes, pyramid_to_bytes, queue_from_bytes,
                      queue_to_bytes, save_detections, save_rig)
from cqdet.pipeline import PipelineConfig
from cqdet.queries import QuerySet
from cqdet.scene import SceneConfig, gen_scene
from cqdet.temporal import MemoryQueue, queue_push


@pytest.fixture(scope="module")
def scene():
    return gen_scene(9, SceneConfig(n_boxes=3, channels=4))


def test_rig_round_trip(tmp_path, scene):
    save_rig(tmp_path / "rig.json", scene.rig)
    assert load_rig(tmp_path / "rig.json") == scene.rig


def test_rig_duplicate_ids(tmp_path, scene):
    recs = json.loads(json.dumps([{"id": 0, "fx": 1, "fy": 1, "cx": 0, "cy": 0, "width": 4,
                                   "height": 4, "rotation": np.eye(3).ravel().tolist(),
                                   "translation": [0, 0, 0]}] * 2))
    (tmp_path / "r.json").write_text(json.dumps(recs))
    with pytest.raises(FormatError):
        load_rig(tmp_path / "r.json")


def test_detections_round_trip(tmp_path, scene):
    dets = scene.frames[0].detections
    save_detections(tmp_path / "d.json", dets)
    back = load_detections(tmp_path / "d.json")
    assert len(back) == len(dets)
    for a, b in zip(dets, back):
        assert (a.camera_id, a.u, a.v, a.w, a.h, a.score, a.depth) == (b.camera_id, b.u, b.v, b.w, b.h, b.score, b.depth)
        np.testing.assert_array_equal(a.depth_probs, b.depth_probs)


def test_detection_missing_field(tmp_path):
    (tmp_path / "d.json").write_text(json.dumps([{"camera_id": 0, "u": 1}]))
    with pytest.raises(FormatError):
        load_detections(tmp_path / "d.json")


def test_config(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"pipeline": {"d": 32, "heads": 4},
                                                 "scene": {"n_boxes": 2}}))
    p, s = load_config(tmp_path / "c.json")
    assert p == PipelineConfig(d=32, heads=4) and s == SceneConfig(n_boxes=2)
    assert load_config(None) == (PipelineConfig(), SceneConfig())
    (tmp_path / "bad.json").write_text(json.dumps({"model": {}}))
    with pytest.raises(FormatError):
        load_config(tmp_path / "bad.json")


def test_queue_round_trip(rng):
    q = MemoryQueue(3, 4, 18)
    for k in range(4):
        states = np.abs(rng.normal(size=(6, 9)))
        fs = QuerySet(states, rng.normal(size=(6, 18)), ("global",) * 6, rng.uniform(size=6))
        q = queue_push(q, fs, 0.5 * k)
    buf = queue_to_bytes(q)
    assert buf[:8] == b"CAM3DMQ1"
    back = queue_from_bytes(buf)
    assert (back.length, back.size, back.d) == (3, 4, 18)
    assert [g.timestamp for g in back.groups] == [0.5, 1.0, 1.5]
    for a, b in zip(q.groups, back.groups):
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.embeddings, b.embeddings)
        np.testing.assert_array_equal(b.scores, 1.0)
    assert queue_to_bytes(back) == buf


def test_queue_truncated(rng):
    q = queue_push(MemoryQueue(1, 2, 18), QuerySet(np.ones((2, 9)), np.ones((2, 18)),
                                                   ("global",) * 2, np.ones(2)), 0.0)
    with pytest.raises(FormatError):
        queue_from_bytes(queue_to_bytes(q)[:-3])
    with pytest.raises(FormatError):
        queue_from_bytes(b"NOTMAGIC" + queue_to_bytes(q)[8:])


@pytest.mark.parametrize("layers", [1, 2])
def test_attention_round_trip(rng, layers):
    p = AttentionParams.random(32, 4, seed=3, eps_layers=layers)
    back = attention_from_bytes(attention_to_bytes(p))
    assert len(back.eps_net) == layers
    x, c = rng.normal(size=(5, 32)), rng.normal(size=(5, 3))
    # stored as float32
    np.testing.assert_allclose(asa_forward(x, c, back), asa_forward(x, c, p), rtol=1e-5, atol=1e-5)


def test_attention_bad_size():
    buf = attention_to_bytes(AttentionParams.random(32, 4))
    with pytest.raises(FormatError):
        attention_from_bytes(buf[:-4])


def test_pyramid_round_trip(scene):
    pyr = scene.frames[0].pyramid
    buf = pyramid_to_bytes(pyr)
    assert buf[:8] == b"CAM3DFM1"
    back = pyramid_from_bytes(buf)
    assert back.nominal_size == pyr.nominal_size
    for a, b in zip(pyr.maps, back.maps):
        assert (a.camera_id, a.level) == (b.camera_id, b.level)
        np.testing.assert_array_equal(a.data, b.data)


def test_pyramid_layout():
    """Hand-built two-by-two map: header fields then channel-major float32."""
    import struct
    from cqdet.sampling import FeatureMap, FeaturePyramid
    maps = [FeatureMap(7, k, np.arange(2 * h * w, dtype=np.float32).reshape(2, h, w))
            for k, (h, w) in enumerate([(8, 8), (4, 4), (2, 2), (1, 1)])]
    buf = pyramid_to_bytes(FeaturePyramid(tuple(maps), (32, 32)))
    assert struct.unpack("<I", buf[8:12]) == (4,)
    assert struct.unpack("<5I", buf[12:32]) == (7, 0, 2, 8, 8)
    assert np.frombuffer(buf[32:32 + 4 * 128], "<f4")[65] == 65.0


def test_pyramid_bad_level():
    import struct
    buf = b"CAM3DFM1" + struct.pack("<I", 1) + struct.pack("<5I", 0, 4, 1, 1, 1) + b"\0" * 4
    with pytest.raises(FormatError):
        pyramid_from_bytes(buf)
