"""Hybrid 3D sampling points, multi-camera projection and deformable feature aggregation.

Pixel convention: pixel (i, j) of a level map is centered at (j + 0.5, i + 0.5)
in that level's continuous coordinates, and image pixel (u, v) maps to level
coordinates (u * scale, v * scale).  Out-of-range bilinear neighbours read
as zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .errors import ConfigurationError, ShapeError
from .geometry import STATE_DIM, CameraModel, RefState, project_many
from .nn import Affine, relu, sigmoid, softmax

LEVEL_SCALES = (1 / 4, 1 / 8, 1 / 16, 1 / 32)
FIXED_POINT_COUNTS = {"edge": 7, "corner": 9, "center": 1}
DEFAULT_LEARNABLE_POINTS = 13
DEFAULT_FFN_HIDDEN = 2048


# ---------------------------------------------------------------- feature maps

@dataclass(frozen=True, eq=False)
class FeatureMap:
    camera_id: int
    level: int
    data: np.ndarray  # (C, H, W)

    def __post_init__(self):
        if self.level not in range(len(LEVEL_SCALES)):
            raise ConfigurationError(f"level code must be 0..3, got {self.level}")
        data = np.array(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"feature map must be a nonempty (C, H, W) array, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ConfigurationError("feature map values must be finite")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "camera_id", int(self.camera_id))

    @property
    def scale(self) -> float:
        return LEVEL_SCALES[self.level]

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def level_shape(nominal_size, level: int) -> tuple[int, int]:
    """(height, width) of a level for a nominal (width, height) image."""
    w, h = nominal_size
    s = LEVEL_SCALES[level]
    return int(np.floor(h * s)), int(np.floor(w * s))


@dataclass(frozen=True, eq=False)
class FeaturePyramid:
    """Maps for every (camera, level) pair; ``nominal_size`` is (width, height) in pixels."""

    maps: tuple
    nominal_size: tuple

    def __post_init__(self):
        maps = tuple(self.maps)
        if not maps:
            raise ConfigurationError("feature pyramid is empty")
        index = {}
        for fm in maps:
            key = (fm.camera_id, fm.level)
            if key in index:
                raise ConfigurationError(f"duplicate feature map for camera {key[0]} level {key[1]}")
            index[key] = fm
        cams = sorted({k[0] for k in index})
        channels = {fm.channels for fm in maps}
        if len(channels) != 1:
            raise ShapeError("feature maps disagree on channel count")
        for cam in cams:
            for level in range(len(LEVEL_SCALES)):
                fm = index.get((cam, level))
                if fm is None:
                    raise ConfigurationError(f"camera {cam} is missing level {level}")
                expect = level_shape(self.nominal_size, level)
                if (fm.height, fm.width) != expect:
                    raise ShapeError(
                        f"camera {cam} level {level}: shape {(fm.height, fm.width)} != {expect}")
        object.__setattr__(self, "maps", maps)
        object.__setattr__(self, "nominal_size", tuple(int(v) for v in self.nominal_size))
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "camera_ids", tuple(cams))

    @property
    def channels(self) -> int:
        return self.maps[0].channels

    def get(self, camera_id: int, level: int) -> FeatureMap:
        try:
            return self._index[(camera_id, level)]
        except KeyError:
            raise ConfigurationError(f"no feature map for camera {camera_id} level {level}") from None


# ------------------------------------------------------------ bilinear lookup

def _corners(x, y):
    x0 = np.floor(x)
    y0 = np.floor(y)
    ax = x - x0
    ay = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    return (
        (y0, x0, (1.0 - ax) * (1.0 - ay)),
        (y0, x0 + 1, ax * (1.0 - ay)),
        (y0 + 1, x0, (1.0 - ax) * ay),
        (y0 + 1, x0 + 1, ax * ay),
    ), ax, ay


def _level_coords(u, v, scale):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    finite = np.isfinite(u) & np.isfinite(v)
    x = np.where(finite, u * scale - 0.5, -10.0)
    y = np.where(finite, v * scale - 0.5, -10.0)
    return x, y


def bilinear_sample_many(data, scale: float, u, v) -> np.ndarray:
    """Bilinear lookup of a (C, H, W) map at image-pixel coordinates; returns (N, C)."""
    data = np.asarray(data)
    _, hgt, wid = data.shape
    x, y = _level_coords(np.ravel(u), np.ravel(v), scale)
    corners, _, _ = _corners(x, y)
    out = np.zeros((x.shape[0], data.shape[0]))
    for yi, xi, w in corners:
        ok = (xi >= 0) & (xi < wid) & (yi >= 0) & (yi < hgt)
        vals = data[:, np.clip(yi, 0, hgt - 1), np.clip(xi, 0, wid - 1)].T.astype(np.float64)
        out += vals * np.where(ok, w, 0.0)[:, None]
    return out


def bilinear_sample(fm: FeatureMap, u: float, v: float) -> np.ndarray:
    """C-vector at image pixel (u, v) of one feature map level."""
    return bilinear_sample_many(fm.data, fm.scale, [u], [v])[0]


def bilinear_sample_grad(fm: FeatureMap, u: float, v: float):
    """Value and analytic partials (d/du, d/dv), each a C-vector.

    The interpolant is piecewise bilinear; at integer level coordinates the
    one-sided derivative from the right is returned.
    """
    data = fm.data
    _, hgt, wid = data.shape
    x, y = _level_coords(np.array([u]), np.array([v]), fm.scale)
    corners, ax, ay = _corners(x, y)
    dwx = (-(1.0 - ay), (1.0 - ay), -ay, ay)
    dwy = (-(1.0 - ax), -ax, (1.0 - ax), ax)
    val = np.zeros(data.shape[0])
    gu = np.zeros(data.shape[0])
    gv = np.zeros(data.shape[0])
    for (yi, xi, w), gx, gy in zip(corners, dwx, dwy):
        if 0 <= xi[0] < wid and 0 <= yi[0] < hgt:
            vals = data[:, yi[0], xi[0]].astype(np.float64)
            val += w[0] * vals
            gu += gx[0] * fm.scale * vals
            gv += gy[0] * fm.scale * vals
    return val, gu, gv


# --------------------------------------------------------- 3D sampling points

def _box_to_world(local, states):
    """Rotate box-frame offsets (Q, P, 3) by yaw and add the center."""
    theta = states[:, 6]
    c, s = np.cos(theta)[:, None], np.sin(theta)[:, None]
    out = np.empty_like(local)
    out[..., 0] = c * local[..., 0] - s * local[..., 1] + states[:, None, 0]
    out[..., 1] = s * local[..., 0] + c * local[..., 1] + states[:, None, 1]
    out[..., 2] = local[..., 2] + states[:, None, 2]
    return out


def _fixed_unit_offsets(mode: str) -> np.ndarray:
    if mode == "edge":
        return np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0],
                         [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=np.float64)
    if mode == "corner":
        corners = [[sx, sy, sz] for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)]
        return np.array([[0, 0, 0]] + corners, dtype=np.float64)
    if mode == "center":
        return np.zeros((1, 3))
    raise ConfigurationError(f"unknown fixed point layout {mode!r}")


def fixed_points_batch(states, mode: str = "edge") -> np.ndarray:
    states = np.asarray(states, dtype=np.float64).reshape(-1, STATE_DIM)
    half = 0.5 * states[:, 3:6]
    local = _fixed_unit_offsets(mode)[None] * half[:, None, :]
    return _box_to_world(local, states)


def fixed_points(state: RefState, mode: str = "edge") -> np.ndarray:
    """Box center plus the six face centers (``edge``), or the ``corner`` / ``center`` variants."""
    return fixed_points_batch(state.as_array()[None], mode)[0]


def learnable_points_batch(embeddings, states, net: Affine) -> np.ndarray:
    x = np.asarray(embeddings, dtype=np.float64).reshape(-1, net.in_features)
    states = np.asarray(states, dtype=np.float64).reshape(-1, STATE_DIM)
    if net.out_features % 3:
        raise ShapeError("learnable point net output must be a multiple of 3")
    k = net.out_features // 3
    raw = np.tanh(net(x)).reshape(-1, k, 3)
    local = raw * (0.5 * states[:, 3:6])[:, None, :]
    return _box_to_world(local, states)


def learnable_offsets(embedding, state: RefState, net: Affine) -> np.ndarray:
    """k points inside the query's box, predicted from its embedding."""
    emb = np.asarray(embedding, dtype=np.float64)
    if emb.shape != (net.in_features,):
        raise ShapeError(f"embedding width {emb.shape} does not match net input {net.in_features}")
    return learnable_points_batch(emb[None], state.as_array()[None], net)[0]


def blend_points(fixed, learned, alpha) -> np.ndarray:
    """Convex-blend index-paired points; unpaired points are appended as-is.

    Works on single sets (F, 3)/(k, 3) with scalar alpha, or batches
    (Q, F, 3)/(Q, k, 3) with alpha of shape (Q,).
    """
    fixed = np.asarray(fixed, dtype=np.float64)
    learned = np.asarray(learned, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha < 0) or np.any(alpha > 1):
        raise ConfigurationError("alpha must lie in [0, 1]")
    a = alpha[..., None, None] if alpha.ndim else alpha
    n = min(fixed.shape[-2], learned.shape[-2])
    paired = a * fixed[..., :n, :] + (1.0 - a) * learned[..., :n, :]
    if learned.shape[-2] > n:
        rest = learned[..., n:, :]
    else:
        rest = fixed[..., n:, :]
    return np.concatenate([paired, rest], axis=-2)


@dataclass(frozen=True, eq=False)
class HybridPointParams:
    learn_net: Affine  # d -> k * 3
    alpha_net: Affine  # d -> 1
    fixed_mode: str = "edge"

    def __post_init__(self):
        _fixed_unit_offsets(self.fixed_mode)
        if self.alpha_net.out_features != 1:
            raise ShapeError("alpha net must output one value")
        if self.learn_net.in_features != self.alpha_net.in_features:
            raise ShapeError("point nets disagree on input width")

    @property
    def n_learnable(self) -> int:
        return self.learn_net.out_features // 3

    @classmethod
    def random(cls, d: int, n_learnable: int = DEFAULT_LEARNABLE_POINTS, seed: int = 0,
               fixed_mode: str = "edge") -> "HybridPointParams":
        rng = np.random.default_rng(seed)
        return cls(Affine.random(d, 3 * n_learnable, rng), Affine.random(d, 1, rng), fixed_mode)

    @classmethod
    def zeros(cls, d: int, n_learnable: int = DEFAULT_LEARNABLE_POINTS,
              fixed_mode: str = "edge") -> "HybridPointParams":
        return cls(Affine.zeros(d, 3 * n_learnable), Affine.zeros(d, 1), fixed_mode)


def predict_alpha(embeddings, net: Affine) -> np.ndarray:
    return sigmoid(net(np.asarray(embeddings, dtype=np.float64))[..., 0])


class ProjectedPoints(NamedTuple):
    camera_ids: tuple
    uv: np.ndarray       # (M, ..., 2) pixels, NaN when behind the camera
    depth: np.ndarray    # (M, ...)
    visible: np.ndarray  # (M, ...) in front and inside the image


@dataclass(frozen=True, eq=False)
class SamplingPointSet:
    fixed: np.ndarray    # (Q, F, 3)
    learned: np.ndarray  # (Q, k, 3)
    alpha: np.ndarray    # (Q,)
    points: np.ndarray   # (Q, max(F, k), 3)
    projected: ProjectedPoints | None = None


def project_points(pts, rig: Sequence[CameraModel]) -> ProjectedPoints:
    """Project points of any leading shape (..., 3) into every camera of the rig."""
    pts = np.asarray(pts, dtype=np.float64)
    lead = pts.shape[:-1]
    flat = pts.reshape(-1, 3)
    uvs, depths, vis = [], [], []
    for cam in rig:
        uv, depth, front = project_many(cam, flat)
        inside = front & (uv[:, 0] >= 0) & (uv[:, 0] < cam.width) \
            & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height)
        uvs.append(uv.reshape(lead + (2,)))
        depths.append(depth.reshape(lead))
        vis.append(inside.reshape(lead))
    m = len(rig)
    return ProjectedPoints(
        tuple(cam.camera_id for cam in rig),
        np.stack(uvs) if m else np.zeros((0,) + lead + (2,)),
        np.stack(depths) if m else np.zeros((0,) + lead),
        np.stack(vis) if m else np.zeros((0,) + lead, dtype=bool),
    )


def hybrid_points(embeddings, states, params: HybridPointParams,
                  rig: Sequence[CameraModel] | None = None) -> SamplingPointSet:
    fixed = fixed_points_batch(states, params.fixed_mode)
    learned = learnable_points_batch(embeddings, states, params.learn_net)
    alpha = predict_alpha(embeddings, params.alpha_net)
    pts = blend_points(fixed, learned, alpha)
    proj = project_points(pts, rig) if rig is not None else None
    return SamplingPointSet(fixed, learned, alpha, pts, proj)


# ------------------------------------------------------- deformable attention

@dataclass(frozen=True, eq=False)
class DeformableParams:
    """Weights of the multi-head deformable aggregation.

    value_proj (H, C, d/H) and out_proj (H, d/H, d) are bias-free linear
    maps.  offset_net predicts per-head, per-key pixel offsets; weight_net
    per-head logits over (key, level).
    """

    heads: int
    keys: int
    levels: int
    value_proj: np.ndarray
    out_proj: np.ndarray
    offset_net: Affine
    weight_net: Affine

    def __post_init__(self):
        if self.heads < 1 or self.keys < 1 or not 1 <= self.levels <= len(LEVEL_SCALES):
            raise ConfigurationError("heads, keys and levels must be positive (levels <= 4)")
        vp = np.asarray(self.value_proj, dtype=np.float64)
        op = np.asarray(self.out_proj, dtype=np.float64)
        if vp.ndim != 3 or vp.shape[0] != self.heads:
            raise ShapeError("value_proj must be (H, C, d/H)")
        if op.ndim != 3 or op.shape[:2] != (self.heads, vp.shape[2]):
            raise ShapeError("out_proj must be (H, d/H, d)")
        d = op.shape[2]
        if self.offset_net.weight.shape != (d, self.heads * self.keys * 2):
            raise ShapeError("offset_net must map d -> H*keys*2")
        if self.weight_net.weight.shape != (d, self.heads * self.keys * self.levels):
            raise ShapeError("weight_net must map d -> H*keys*levels")
        object.__setattr__(self, "value_proj", vp)
        object.__setattr__(self, "out_proj", op)

    @property
    def d(self) -> int:
        return self.out_proj.shape[2]

    @property
    def channels(self) -> int:
        return self.value_proj.shape[1]

    @classmethod
    def random(cls, d: int, heads: int, keys: int = 4, levels: int = 4, channels: int | None = None,
               seed: int = 0, offset_scale: float = 2.0) -> "DeformableParams":
        if d % heads:
            raise ConfigurationError(f"model width {d} not divisible by {heads} heads")
        channels = d if channels is None else channels
        rng = np.random.default_rng(seed)
        dh = d // heads
        vp = rng.normal(0.0, 1.0 / np.sqrt(channels), size=(heads, channels, dh))
        op = rng.normal(0.0, 1.0 / np.sqrt(d), size=(heads, dh, d))
        off = Affine.random(d, heads * keys * 2, rng, scale=offset_scale / np.sqrt(d))
        wts = Affine.random(d, heads * keys * levels, rng)
        return cls(heads, keys, levels, vp, op, off, wts)

    @classmethod
    def zeros(cls, d: int, heads: int, keys: int = 4, levels: int = 4,
              channels: int | None = None) -> "DeformableParams":
        channels = d if channels is None else channels
        dh = d // heads
        return cls(heads, keys, levels, np.zeros((heads, channels, dh)), np.zeros((heads, dh, d)),
                   Affine.zeros(d, heads * keys * 2), Affine.zeros(d, heads * keys * levels))


def deformable_weights(embeddings, visible, p: DeformableParams) -> np.ndarray:
    """Normalized sampling weights, shape (Q, H, keys, levels).

    Logits are shared by every visible (camera, point) projection of a query,
    so a softmax over keys x levels x visible projections factorizes into a
    softmax over keys x levels divided by the visible count.  Queries with no
    visible projection get all-zero weights.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    n = x.shape[0]
    logits = p.weight_net(x).reshape(n, p.heads, p.keys * p.levels)
    a = softmax(logits, axis=-1).reshape(n, p.heads, p.keys, p.levels)
    vis = np.asarray(visible, dtype=bool)
    n_vis = vis.reshape(vis.shape[0], n, -1).sum(axis=(0, 2)).astype(np.float64)
    scale = np.divide(1.0, n_vis, out=np.zeros_like(n_vis), where=n_vis > 0)
    return a * scale[:, None, None, None]


def deformable_attention(embeddings, projected: ProjectedPoints, pyramid: FeaturePyramid,
                         p: DeformableParams, return_weights: bool = False):
    """Aggregate pyramid features at projected sampling points.

    embeddings (Q, d); ``projected.uv`` (M, Q, P, 2) and ``projected.visible``
    (M, Q, P).  Returns (Q, d) without residual.
    """
    if pyramid is None or not pyramid.maps:
        raise ConfigurationError("deformable attention needs a feature pyramid")
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != p.d:
        raise ShapeError(f"embeddings must be (Q, {p.d}), got {x.shape}")
    if pyramid.channels != p.channels:
        raise ShapeError(f"pyramid has {pyramid.channels} channels, value projection expects {p.channels}")
    n = x.shape[0]
    uv = np.asarray(projected.uv, dtype=np.float64)
    vis = np.asarray(projected.visible, dtype=bool)
    if uv.shape[:2] != (len(projected.camera_ids), n) or vis.shape != uv.shape[:-1]:
        raise ShapeError("projection arrays do not match the query count")

    offsets = p.offset_net(x).reshape(n, p.heads, p.keys, 2)
    weights = deformable_weights(x, vis, p)
    dh = p.value_proj.shape[2]
    acc = np.zeros((n, p.heads, dh))
    vp_flat = p.value_proj.transpose(1, 0, 2).reshape(p.channels, -1)

    for m, cam_id in enumerate(projected.camera_ids):
        q_idx, pt_idx = np.nonzero(vis[m])
        if q_idx.size == 0:
            continue
        base = uv[m, q_idx, pt_idx]  # (T, 2)
        loc = base[:, None, None, :] + offsets[q_idx]  # (T, H, K, 2)
        for level in range(p.levels):
            fm = pyramid.get(cam_id, level)
            # project values per pixel first: (H, h, w, dh)
            c, hgt, wid = fm.data.shape
            flat = fm.data.reshape(c, -1).T.astype(np.float64) @ vp_flat  # (h*w, H*dh)
            values = np.ascontiguousarray(flat.reshape(hgt, wid, p.heads, dh).transpose(2, 0, 1, 3))
            x_lv, y_lv = _level_coords(loc[..., 0], loc[..., 1], fm.scale)
            corners, _, _ = _corners(x_lv, y_lv)
            a = weights[q_idx, :, :, level]  # (T, H, K)
            head_off = (np.arange(p.heads) * (hgt * wid))[None, :, None]
            idx = np.stack([head_off + np.clip(yi, 0, hgt - 1) * wid + np.clip(xi, 0, wid - 1)
                            for yi, xi, _ in corners], axis=2)  # (T, H, 4, K)
            coeff = np.stack([np.where((xi >= 0) & (xi < wid) & (yi >= 0) & (yi < hgt), w, 0.0)
                              for yi, xi, w in corners], axis=2) * a[:, :, None, :]
            t_count = idx.shape[0]
            vals = values.reshape(-1, dh)[idx.reshape(t_count, p.heads, -1)]  # (T, H, 4K, dh)
            contrib = (coeff.reshape(t_count, p.heads, 1, -1) @ vals)[:, :, 0, :]  # (T, H, dh)
            # q_idx is sorted, so per-query sums are contiguous segments
            starts = np.flatnonzero(np.r_[True, q_idx[1:] != q_idx[:-1]])
            acc[q_idx[starts]] += np.add.reduceat(contrib, starts, axis=0)

    out = acc.reshape(n, -1) @ p.out_proj.reshape(-1, p.d)
    if return_weights:
        return out, weights
    return out


# ------------------------------------------------------------------------ FFN

@dataclass(frozen=True, eq=False)
class FFNWeights:
    layer1: Affine
    layer2: Affine

    def __post_init__(self):
        if self.layer1.out_features != self.layer2.in_features:
            raise ShapeError("FFN hidden widths disagree")
        if self.layer1.in_features != self.layer2.out_features:
            raise ShapeError("FFN must map d -> d")

    @property
    def hidden(self) -> int:
        return self.layer1.out_features

    @classmethod
    def random(cls, d: int, hidden: int = DEFAULT_FFN_HIDDEN, seed: int = 0,
               scale: float = 1.0) -> "FFNWeights":
        rng = np.random.default_rng(seed)
        return cls(Affine.random(d, hidden, rng, scale=scale / np.sqrt(d)),
                   Affine.random(hidden, d, rng, scale=scale / np.sqrt(hidden)))

    @classmethod
    def zeros(cls, d: int, hidden: int = DEFAULT_FFN_HIDDEN) -> "FFNWeights":
        return cls(Affine.zeros(d, hidden), Affine.zeros(hidden, d))


def ffn(x, weights: FFNWeights) -> np.ndarray:
    """Two-layer ReLU feed-forward block with residual connection."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != weights.layer1.in_features:
        raise ShapeError(f"FFN expects width {weights.layer1.in_features}, got {x.shape[-1]}")
    return x + weights.layer2(relu(weights.layer1(x)))


def rig_order(rig) -> list[CameraModel]:
    if isinstance(rig, Mapping):
        return [rig[k] for k in sorted(rig)]
    return list(rig)
