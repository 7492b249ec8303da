"""Readers and writers for rig/detection JSON and the binary dump formats.

Binary layouts (all little-endian):

* queue snapshot ``CAM3DMQ1``: u32 L, S, d; then per entry float64 state[9],
  float32 embedding[d], float64 timestamp.  Entries run oldest group first.
* attention weights ``CAM3DWT1``: u32 d, H; then float32 Wq, bq, Wk, bk, Wv,
  bv, Wo, bo and the eps-net layers (weight then bias each).  Weights are
  stored (in, out), row-major.
* feature pyramid ``CAM3DFM1``: u32 count; per map u32 camera_id, level
  (0..3), C, H, W then C*H*W float32 channel-major.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .attention import AttentionParams
from .errors import FormatError
from .geometry import STATE_DIM, CameraModel, Detection2D
from .nn import Affine
from .pipeline import PipelineConfig
from .sampling import FeatureMap, FeaturePyramid, level_shape
from .scene import SceneConfig
from .temporal import FrameGroup, MemoryQueue

QUEUE_MAGIC = b"CAM3DMQ1"
WEIGHTS_MAGIC = b"CAM3DWT1"
PYRAMID_MAGIC = b"CAM3DFM1"


# ----------------------------------------------------------------------- JSON

def rig_to_records(rig) -> list[dict]:
    return [{
        "id": cam.camera_id, "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
        "rotation": cam.rotation.ravel().tolist(), "translation": cam.translation.tolist(),
    } for cam in rig]


def rig_from_records(records) -> tuple:
    rig = []
    try:
        for r in records:
            rot = np.asarray(r["rotation"], dtype=np.float64)
            if rot.size != 9:
                raise FormatError(f"camera {r.get('id')}: rotation needs 9 values")
            rig.append(CameraModel(r["fx"], r["fy"], r["cx"], r["cy"], rot.reshape(3, 3),
                                   r["translation"], r["width"], r["height"], r["id"]))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed camera record: {exc}") from exc
    ids = [c.camera_id for c in rig]
    if len(set(ids)) != len(ids):
        raise FormatError("duplicate camera ids in rig")
    return tuple(rig)


def save_rig(path, rig) -> None:
    Path(path).write_text(json.dumps(rig_to_records(rig), indent=2))


def load_rig(path) -> tuple:
    return rig_from_records(json.loads(Path(path).read_text()))


def detection_to_record(det: Detection2D) -> dict:
    rec = {"camera_id": det.camera_id, "u": det.u, "v": det.v, "w": det.w, "h": det.h,
           "z_sem": det.z_sem.tolist(), "score": det.score, "depth": det.depth}
    if det.depth_probs is not None:
        rec["depth_bins"] = det.depth_bins.tolist()
        rec["depth_probs"] = det.depth_probs.tolist()
    return rec


def detection_from_record(rec: dict) -> Detection2D:
    try:
        return Detection2D(
            int(rec["camera_id"]), float(rec["u"]), float(rec["v"]), float(rec["w"]),
            float(rec["h"]), np.asarray(rec["z_sem"], dtype=np.float64), float(rec["score"]),
            float(rec["depth"]), rec.get("depth_bins"), rec.get("depth_probs"),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed detection record: {exc}") from exc


def save_detections(path, dets) -> None:
    Path(path).write_text(json.dumps([detection_to_record(d) for d in dets], indent=2))


def load_detections(path) -> list[Detection2D]:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list):
        raise FormatError("detections file must hold a JSON list")
    return [detection_from_record(r) for r in data]


def load_config(path) -> tuple[PipelineConfig, SceneConfig]:
    """Read ``{"pipeline": {...}, "scene": {...}}``; either section may be omitted."""
    data = json.loads(Path(path).read_text()) if path else {}
    if not isinstance(data, dict):
        raise FormatError("config file must hold a JSON object")
    unknown = set(data) - {"pipeline", "scene"}
    if unknown:
        raise FormatError(f"unknown config sections: {sorted(unknown)}")
    return (PipelineConfig.from_dict(data.get("pipeline", {})),
            SceneConfig.from_dict(data.get("scene", {})))


# --------------------------------------------------------------------- binary

class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {self.what} file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).astype(dt.newbyteorder("="))

    @property
    def remaining(self) -> int:
        return len(self.buf) - self.pos


def _check_magic(r: _Reader, magic: bytes) -> None:
    if r.take(len(magic)) != magic:
        raise FormatError(f"bad magic for {r.what} file")


def queue_to_bytes(q: MemoryQueue) -> bytes:
    out = [QUEUE_MAGIC, struct.pack("<3I", q.length, q.size, q.d)]
    for g in q.groups:
        for i in range(len(g)):
            out.append(g.states[i].astype("<f8").tobytes())
            out.append(g.embeddings[i].astype("<f4").tobytes())
            out.append(struct.pack("<d", g.timestamp))
    return b"".join(out)


def queue_from_bytes(buf: bytes) -> MemoryQueue:
    """Groups are rebuilt from runs of equal timestamps (split at S entries).

    The format carries no scores or frame indices: loaded scores are 1.0 and
    frame indices count up from 0.
    """
    r = _Reader(buf, "queue")
    _check_magic(r, QUEUE_MAGIC)
    length, size, d = r.u32(3)
    entry = 8 * STATE_DIM + 4 * d + 8
    if r.remaining % entry:
        raise FormatError("queue payload is not a whole number of entries")
    rows = []
    while r.remaining:
        rows.append((r.array("<f8", STATE_DIM), r.array("<f4", d), float(r.array("<f8", 1)[0])))
    groups, run = [], []
    for row in rows:
        if run and (row[2] != run[-1][2] or len(run) == size):
            groups.append(run)
            run = []
        run.append(row)
    if run:
        groups.append(run)
    frame_groups = tuple(
        FrameGroup(np.stack([e[0] for e in grp]), np.stack([e[1] for e in grp]),
                   np.ones(len(grp)), grp[0][2], k)
        for k, grp in enumerate(groups)
    )
    return MemoryQueue(length, size, d, frame_groups)


def save_queue(path, q: MemoryQueue) -> None:
    Path(path).write_bytes(queue_to_bytes(q))


def load_queue(path) -> MemoryQueue:
    return queue_from_bytes(Path(path).read_bytes())


def _affine_bytes(lin: Affine) -> bytes:
    bias = lin.bias if lin.bias is not None else np.zeros(lin.out_features)
    return lin.weight.astype("<f4").tobytes() + bias.astype("<f4").tobytes()


def attention_to_bytes(p: AttentionParams) -> bytes:
    out = [WEIGHTS_MAGIC, struct.pack("<2I", p.d, p.heads)]
    for lin in (p.wq, p.wk, p.wv, p.wo, *p.eps_net):
        out.append(_affine_bytes(lin))
    return b"".join(out)


def attention_from_bytes(buf: bytes, modulation: str = "gaussian",
                         log_space: bool = False) -> AttentionParams:
    """The eps-net depth (one or two layers) is inferred from the payload size."""
    r = _Reader(buf, "weights")
    _check_magic(r, WEIGHTS_MAGIC)
    d, heads = r.u32(2)

    def affine(n_in, n_out):
        w = r.array("<f4", n_in * n_out).reshape(n_in, n_out)
        return Affine(w, r.array("<f4", n_out))

    lins = [affine(d, d) for _ in range(4)]
    floats = r.remaining // 4
    if floats == d * d + d + d * heads + heads:
        eps = (affine(d, d), affine(d, heads))
    elif floats == d * heads + heads:
        eps = (affine(d, heads),)
    else:
        raise FormatError("weights payload does not match a one- or two-layer eps net")
    return AttentionParams(d, heads, *lins, eps, modulation, log_space)


def save_attention(path, p: AttentionParams) -> None:
    Path(path).write_bytes(attention_to_bytes(p))


def load_attention(path, modulation: str = "gaussian", log_space: bool = False) -> AttentionParams:
    return attention_from_bytes(Path(path).read_bytes(), modulation, log_space)


def pyramid_to_bytes(pyr: FeaturePyramid) -> bytes:
    out = [PYRAMID_MAGIC, struct.pack("<I", len(pyr.maps))]
    for fm in pyr.maps:
        c, h, w = fm.data.shape
        out.append(struct.pack("<5I", fm.camera_id, fm.level, c, h, w))
        out.append(fm.data.astype("<f4").tobytes())
    return b"".join(out)


def pyramid_from_bytes(buf: bytes, nominal_size=None) -> FeaturePyramid:
    """Rebuild a pyramid; the nominal size is inferred from level 0 if not given."""
    r = _Reader(buf, "pyramid")
    _check_magic(r, PYRAMID_MAGIC)
    count = r.u32()
    maps = []
    for _ in range(count):
        cam, level, c, h, w = r.u32(5)
        if level > 3:
            raise FormatError(f"level code {level} out of range")
        maps.append(FeatureMap(cam, level, r.array("<f4", c * h * w).reshape(c, h, w)))
    if r.remaining:
        raise FormatError("trailing bytes after the last feature map")
    if nominal_size is None:
        base = next((fm for fm in maps if fm.level == 0), None)
        if base is None:
            raise FormatError("pyramid has no level-0 map to infer the image size from")
        nominal_size = (base.width * 4, base.height * 4)
        if any(level_shape(nominal_size, fm.level) != (fm.height, fm.width) for fm in maps):
            raise FormatError("cannot infer a nominal size consistent with every level")
    return FeaturePyramid(tuple(maps), nominal_size)


def save_pyramid(path, pyr: FeaturePyramid) -> None:
    Path(path).write_bytes(pyramid_to_bytes(pyr))


def load_pyramid(path, nominal_size=None) -> FeaturePyramid:
    return pyramid_from_bytes(Path(path).read_bytes(), nominal_size)
