"""Decoder stack and per-frame driver.

Each decoder layer runs distance-modulated self-attention, hybrid-point
deformable sampling and the FFN, then refines every query's box through
additive regression and classification heads.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attention import MODULATIONS, AttentionParams, asa_forward
from .errors import ConfigurationError, ShapeError
from .geometry import STATE_DIM, EgoMotion, wrap_angles
from .nn import Affine, sigmoid
from .queries import (
    EmbedWeights,
    QuerySet,
    compose_queries,
    make_adaptive_queries,
    make_global_queries,
)
from .sampling import (
    DEFAULT_FFN_HIDDEN,
    FIXED_POINT_COUNTS,
    DeformableParams,
    FeaturePyramid,
    FFNWeights,
    HybridPointParams,
    deformable_attention,
    ffn,
    hybrid_points,
    rig_order,
)
from .temporal import MemoryQueue, make_temporal_queries, queue_push

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    n_layers: int = 6
    n_global: int = 644
    temporal_budget: int = 256
    queue_length: int = 4
    queue_size: int = 64
    d: int = 64
    heads: int = 8
    modulation: str = "gaussian"
    eps_layers: int = 2
    log_space: bool = False
    fixed_mode: str = "edge"
    n_fixed: int = 7
    n_learnable: int = 13
    keys: int = 4
    levels: int = 4
    ffn_hidden: int = DEFAULT_FFN_HIDDEN
    num_classes: int = 10
    c_sem: int = 10
    feature_channels: int = 64
    score_min: float = 0.3
    depth_confidence_min: float = 0.3
    bev_range: tuple = (-51.2, 51.2, -51.2, 51.2, -5.0, 3.0)
    seed: int = 0

    def validate(self) -> "PipelineConfig":
        if self.n_layers < 1:
            raise ConfigurationError("n_layers must be >= 1")
        counts = ("n_global", "temporal_budget", "queue_length", "queue_size", "n_fixed",
                  "n_learnable", "num_classes", "c_sem")
        for name in counts:
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")
        if self.heads < 1 or self.d % self.heads:
            raise ConfigurationError(f"d={self.d} must be divisible by heads={self.heads}")
        if self.d < 18:
            raise ConfigurationError("d must be at least 18 for the positional encoding")
        if self.temporal_budget != self.queue_length * self.queue_size:
            raise ConfigurationError(
                f"temporal_budget {self.temporal_budget} != queue_length*queue_size "
                f"{self.queue_length * self.queue_size}")
        if self.modulation not in MODULATIONS:
            raise ConfigurationError(f"unknown modulation {self.modulation!r}")
        if self.fixed_mode not in FIXED_POINT_COUNTS:
            raise ConfigurationError(f"unknown fixed point layout {self.fixed_mode!r}")
        if FIXED_POINT_COUNTS[self.fixed_mode] != self.n_fixed:
            raise ConfigurationError(
                f"fixed layout {self.fixed_mode!r} has {FIXED_POINT_COUNTS[self.fixed_mode]} points, "
                f"n_fixed is {self.n_fixed}")
        if self.n_learnable < 1 or self.keys < 1 or not 1 <= self.levels <= 4:
            raise ConfigurationError("n_learnable and keys must be >= 1, levels in 1..4")
        if self.eps_layers not in (1, 2):
            raise ConfigurationError("eps_layers must be 1 or 2")
        if len(self.bev_range) != 6:
            raise ConfigurationError("bev_range needs six values")
        return self

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigurationError(f"unknown pipeline config keys: {sorted(unknown)}")
        data = dict(data)
        if "bev_range" in data:
            data["bev_range"] = tuple(float(v) for v in data["bev_range"])
        return cls(**data).validate()

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["bev_range"] = list(self.bev_range)
        return out


@dataclass(frozen=True, eq=False)
class LayerWeights:
    attention: AttentionParams
    points: HybridPointParams
    deform: DeformableParams
    ffn: FFNWeights
    cls_head: Affine
    reg_head: Affine


@dataclass(frozen=True, eq=False)
class ModelWeights:
    embed: EmbedWeights
    layers: tuple

    @classmethod
    def random(cls, cfg: PipelineConfig, seed: int | None = None) -> "ModelWeights":
        cfg.validate()
        seed = cfg.seed if seed is None else seed
        children = np.random.SeedSequence(seed).spawn(cfg.n_layers + 1)
        embed = EmbedWeights.random(cfg.c_sem, cfg.d, seed=int(children[0].generate_state(1)[0]))
        layers = []
        for child in children[1:]:
            s = child.generate_state(6)
            rng = np.random.default_rng(int(s[5]))
            layers.append(LayerWeights(
                AttentionParams.random(cfg.d, cfg.heads, int(s[0]), cfg.modulation,
                                       cfg.eps_layers, cfg.log_space),
                HybridPointParams.random(cfg.d, cfg.n_learnable, int(s[1]), cfg.fixed_mode),
                DeformableParams.random(cfg.d, cfg.heads, cfg.keys, cfg.levels,
                                        cfg.feature_channels, int(s[2])),
                FFNWeights.random(cfg.d, cfg.ffn_hidden, int(s[3]), scale=0.5),
                Affine.random(cfg.d, cfg.num_classes, rng, scale=0.1 / np.sqrt(cfg.d)),
                Affine.random(cfg.d, STATE_DIM, rng, scale=0.01 / np.sqrt(cfg.d)),
            ))
        return cls(embed, tuple(layers))

    @classmethod
    def zeros(cls, cfg: PipelineConfig) -> "ModelWeights":
        cfg.validate()
        layer = LayerWeights(
            AttentionParams.zeros(cfg.d, cfg.heads, cfg.modulation),
            HybridPointParams.zeros(cfg.d, cfg.n_learnable, cfg.fixed_mode),
            DeformableParams.zeros(cfg.d, cfg.heads, cfg.keys, cfg.levels, cfg.feature_channels),
            FFNWeights.zeros(cfg.d, cfg.ffn_hidden),
            Affine.zeros(cfg.d, cfg.num_classes),
            Affine.zeros(cfg.d, STATE_DIM),
        )
        return cls(EmbedWeights.zeros(cfg.c_sem, cfg.d), (layer,) * cfg.n_layers)

    def check(self, cfg: PipelineConfig) -> None:
        if len(self.layers) != cfg.n_layers:
            raise ConfigurationError(f"weights have {len(self.layers)} layers, config wants {cfg.n_layers}")
        if self.embed.d != cfg.d or self.embed.c_sem != cfg.c_sem:
            raise ShapeError("embedding weights do not match the config widths")
        for lw in self.layers:
            if lw.attention.d != cfg.d or lw.deform.d != cfg.d:
                raise ShapeError("layer weights do not match the config width")
            if lw.deform.channels != cfg.feature_channels:
                raise ShapeError("value projection does not match feature_channels")


def reg_cls_head(embedding, lw: LayerWeights):
    """Class logits and additive 9-dim state delta from embeddings."""
    return lw.cls_head(embedding), lw.reg_head(embedding)


def refine_states(states, delta) -> np.ndarray:
    """states + delta with sizes clamped at zero and yaw re-wrapped."""
    out = np.asarray(states, dtype=np.float64) + np.asarray(delta, dtype=np.float64)
    out[:, 3:6] = np.maximum(out[:, 3:6], 0.0)
    out[:, 6] = wrap_angles(out[:, 6])
    return out


def decoder_layer(qs: QuerySet, pyramid: FeaturePyramid, rig, lw: LayerWeights):
    """One ASA -> hybrid sampling -> FFN pass; returns (refined QuerySet, class logits)."""
    cams = rig_order(rig)
    x = qs.embeddings
    x = x + asa_forward(x, qs.centers, lw.attention)
    pts = hybrid_points(x, qs.states, lw.points, cams)
    x = x + deformable_attention(x, pts.projected, pyramid, lw.deform)
    x = ffn(x, lw.ffn)
    logits, delta = reg_cls_head(x, lw)
    states = refine_states(qs.states, delta)
    scores = sigmoid(np.max(logits, axis=1)) if logits.shape[1] else np.zeros(len(qs))
    return qs.replace(states=states, embeddings=x, scores=scores), logits


def run_decoder(qs: QuerySet, pyramid: FeaturePyramid, rig, weights: ModelWeights):
    logits = np.zeros((len(qs), weights.layers[0].cls_head.out_features))
    for lw in weights.layers:
        qs, logits = decoder_layer(qs, pyramid, rig, lw)
    return qs, logits


@dataclass(frozen=True, eq=False)
class FramePrediction:
    frame_index: int
    states: np.ndarray
    logits: np.ndarray
    scores: np.ndarray
    kinds: tuple
    n_global: int
    n_adaptive: int
    n_temporal: int
    initial: QuerySet | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def centers(self) -> np.ndarray:
        return self.states[:, :3]

    def to_bytes(self) -> bytes:
        parts = [
            np.array([self.frame_index, self.n_global, self.n_adaptive, self.n_temporal],
                     dtype="<i8").tobytes(),
            np.ascontiguousarray(self.states, dtype="<f8").tobytes(),
            np.ascontiguousarray(self.logits, dtype="<f8").tobytes(),
            np.ascontiguousarray(self.scores, dtype="<f8").tobytes(),
            ",".join(self.kinds).encode(),
        ]
        return b"".join(parts)


def run_frame(frame, queue: MemoryQueue, cfg: PipelineConfig, weights: ModelWeights, rig,
              ego_chain: Sequence[EgoMotion] = ()):
    """Build composite queries for one frame, decode them and update the memory queue.

    ``frame`` needs ``index``, ``timestamp``, ``detections`` and ``pyramid``
    attributes (see :class:`cqdet.scene.SceneFrame`).  ``ego_chain[-1]`` maps
    the previous frame into this one.
    """
    cfg.validate()
    weights.check(cfg)
    if frame.pyramid is None:
        raise ConfigurationError("frame has no feature pyramid")
    if frame.pyramid.channels != cfg.feature_channels:
        raise ConfigurationError(
            f"pyramid has {frame.pyramid.channels} channels, config expects {cfg.feature_channels}")
    if (queue.length, queue.size, queue.d) != (cfg.queue_length, cfg.queue_size, cfg.d):
        raise ConfigurationError("memory queue shape does not match the config")
    cams = rig_order(rig)
    missing = {c.camera_id for c in cams} - set(frame.pyramid.camera_ids)
    if missing:
        raise ConfigurationError(f"pyramid lacks cameras {sorted(missing)}")

    g = make_global_queries(cfg.n_global, cfg.bev_range, cfg.seed, cfg.d)
    a = make_adaptive_queries(frame.detections, cams, weights.embed, cfg.score_min,
                              cfg.depth_confidence_min)
    t = make_temporal_queries(queue, ego_chain, frame.timestamp)
    qs = compose_queries(g, a, t)
    log.debug("frame %d: %d global, %d adaptive, %d temporal queries",
              frame.index, len(g), len(a), len(t))

    decoded, logits = run_decoder(qs, frame.pyramid, cams, weights)
    pred = FramePrediction(frame.index, decoded.states, logits, decoded.scores, decoded.kinds,
                           len(g), len(a), len(t), initial=qs)
    new_queue = queue_push(queue, decoded, frame.timestamp, frame.index)
    return pred, new_queue


def empty_queue(cfg: PipelineConfig) -> MemoryQueue:
    return MemoryQueue(cfg.queue_length, cfg.queue_size, cfg.d)


def run_sequence(scene, cfg: PipelineConfig, weights: ModelWeights):
    """Run every frame of a synthetic scene in order; returns (predictions, final queue)."""
    queue = empty_queue(cfg)
    chain: list[EgoMotion] = []
    preds = []
    for k, frame in enumerate(scene.frames):
        if k > 0:
            chain.append(frame.ego_from_prev)
        chain = chain[-max(cfg.queue_length, 1):]
        pred, queue = run_frame(frame, queue, cfg, weights, scene.rig, chain)
        preds.append(pred)
    return preds, queue
