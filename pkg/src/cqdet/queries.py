"""Query construction: positional/semantic embeddings and the three query sources."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, MissingReferenceError, ShapeError
from .geometry import (
    STATE_DIM,
    CameraModel,
    Detection2D,
    RefState,
    lift_detection,
)
from .nn import Affine, relu

KINDS = ("global", "adaptive", "temporal")
POS_TEMPERATURE = 10000.0
DEFAULT_DEPTH_CONFIDENCE = 0.3


def sin_pos_embed(state, d: int) -> np.ndarray:
    """Sinusoidal encoding of a 9-scalar state (or a (Q, 9) batch) into width ``d``.

    Every scalar gets ``d // 9`` channels laid out as interleaved (sin, cos)
    pairs over geometric frequencies 1/10000^(2i/k).  An odd channel left over
    per scalar, and the tail up to ``d``, are zero.
    """
    if d < 2 * STATE_DIM:
        raise ConfigurationError(f"model width {d} too small for positional encoding (need >= 18)")
    if isinstance(state, RefState):
        s = state.as_array()
    else:
        s = np.asarray(state, dtype=np.float64)
    single = s.ndim == 1
    s = s.reshape(-1, STATE_DIM)

    per_scalar = d // STATE_DIM
    n_pairs = per_scalar // 2
    freqs = POS_TEMPERATURE ** (-np.arange(n_pairs) * 2.0 / (2 * n_pairs))
    phase = s[:, :, None] * freqs  # (Q, 9, n_pairs)
    block = np.zeros((s.shape[0], STATE_DIM, per_scalar))
    block[:, :, 0:2 * n_pairs:2] = np.sin(phase)
    block[:, :, 1:2 * n_pairs:2] = np.cos(phase)
    out = np.zeros((s.shape[0], d))
    out[:, :STATE_DIM * per_scalar] = block.reshape(s.shape[0], -1)
    return out[0] if single else out


@dataclass(frozen=True, eq=False)
class EmbedWeights:
    """Two-layer MLP mapping [z_sem, score] to a d-dim semantic embedding."""

    layer1: Affine
    layer2: Affine
    seed: int | None = None

    def __post_init__(self):
        if self.layer1.out_features != self.layer2.in_features:
            raise ShapeError("semantic MLP hidden widths disagree")
        if self.layer2.in_features != self.layer2.out_features:
            raise ShapeError("semantic MLP must map d -> d in its second layer")

    @property
    def c_sem(self) -> int:
        return self.layer1.in_features - 1

    @property
    def d(self) -> int:
        return self.layer2.out_features

    @classmethod
    def random(cls, c_sem: int, d: int, seed: int = 0) -> "EmbedWeights":
        rng = np.random.default_rng(seed)
        return cls(Affine.random(c_sem + 1, d, rng), Affine.random(d, d, rng), seed)

    @classmethod
    def zeros(cls, c_sem: int, d: int) -> "EmbedWeights":
        return cls(Affine.zeros(c_sem + 1, d), Affine.zeros(d, d))


def semantic_embed(z_sem, score, w: EmbedWeights) -> np.ndarray:
    z = np.asarray(z_sem, dtype=np.float64)
    if z.shape[-1] != w.c_sem:
        raise ShapeError(f"semantic vector has length {z.shape[-1]}, weights expect {w.c_sem}")
    s = np.asarray(score, dtype=np.float64)[..., None]
    x = np.concatenate([z, np.broadcast_to(s, z.shape[:-1] + (1,))], axis=-1)
    return w.layer2(relu(w.layer1(x)))


@dataclass(frozen=True, eq=False)
class Query:
    state: RefState
    embedding: np.ndarray
    kind: str
    score: float


@dataclass(frozen=True, eq=False)
class QuerySet:
    """Ordered queries stored column-wise.

    ``states`` is (Q, 9), ``embeddings`` (Q, d), ``kinds`` a tuple of tags,
    ``scores`` (Q,).
    """

    states: np.ndarray
    embeddings: np.ndarray
    kinds: tuple
    scores: np.ndarray

    def __post_init__(self):
        states = np.array(self.states, dtype=np.float64).reshape(-1, STATE_DIM)
        emb = np.array(self.embeddings, dtype=np.float64)
        if emb.ndim != 2:
            raise ShapeError("embeddings must be a (Q, d) matrix")
        scores = np.array(self.scores, dtype=np.float64).reshape(-1)
        kinds = tuple(self.kinds)
        n = states.shape[0]
        if emb.shape[0] != n or scores.shape[0] != n or len(kinds) != n:
            raise ShapeError("query columns differ in length")
        bad = set(kinds) - set(KINDS)
        if bad:
            raise ConfigurationError(f"unknown query kinds {sorted(bad)}")
        for a in (states, emb, scores):
            a.setflags(write=False)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "kinds", kinds)

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    @property
    def centers(self) -> np.ndarray:
        return self.states[:, :3]

    def __len__(self) -> int:
        return self.states.shape[0]

    def __getitem__(self, i: int) -> Query:
        return Query(RefState.from_array(self.states[i]), self.embeddings[i].copy(),
                     self.kinds[i], float(self.scores[i]))

    def __iter__(self) -> Iterator[Query]:
        for i in range(len(self)):
            yield self[i]

    def count(self, kind: str) -> int:
        return sum(k == kind for k in self.kinds)

    def take(self, index) -> "QuerySet":
        index = np.asarray(index, dtype=np.intp)
        return QuerySet(self.states[index], self.embeddings[index],
                        tuple(self.kinds[i] for i in index), self.scores[index])

    def replace(self, states=None, embeddings=None, scores=None) -> "QuerySet":
        return QuerySet(
            self.states if states is None else states,
            self.embeddings if embeddings is None else embeddings,
            self.kinds,
            self.scores if scores is None else scores,
        )

    @classmethod
    def empty(cls, d: int) -> "QuerySet":
        return cls(np.zeros((0, STATE_DIM)), np.zeros((0, d)), (), np.zeros(0))

    @classmethod
    def from_queries(cls, queries: Iterable[Query], d: int) -> "QuerySet":
        queries = list(queries)
        if not queries:
            return cls.empty(d)
        return cls(
            np.stack([q.state.as_array() for q in queries]),
            np.stack([np.asarray(q.embedding, dtype=np.float64) for q in queries]),
            tuple(q.kind for q in queries),
            np.array([q.score for q in queries]),
        )


def _rig_index(rig) -> Mapping[int, CameraModel]:
    if isinstance(rig, Mapping):
        return rig
    return {cam.camera_id: cam for cam in rig}


def make_adaptive_queries(
    dets: Sequence[Detection2D],
    rig,
    w: EmbedWeights,
    score_min: float = 0.0,
    depth_confidence_min: float = DEFAULT_DEPTH_CONFIDENCE,
) -> QuerySet:
    """Lift surviving detections into adaptive queries (embedding = pos + sem)."""
    cams = _rig_index(rig)
    for det in dets:
        if det.camera_id not in cams:
            raise MissingReferenceError(f"detection references unknown camera {det.camera_id}")
    kept = [det for det in dets
            if det.score >= score_min and det.depth_confidence >= depth_confidence_min]
    if not kept:
        return QuerySet.empty(w.d)
    states = np.stack([lift_detection(cams[det.camera_id], det).as_array() for det in kept])
    z = np.stack([det.z_sem for det in kept])
    scores = np.array([det.score for det in kept])
    emb = sin_pos_embed(states, w.d) + semantic_embed(z, scores, w)
    return QuerySet(states, emb, ("adaptive",) * len(kept), scores)


def make_global_queries(n: int, bev_range, seed: int, d: int) -> QuerySet:
    """``n`` unit boxes with centers drawn uniformly over ``bev_range``.

    ``bev_range`` is (x_min, x_max, y_min, y_max, z_min, z_max).
    """
    if n < 0:
        raise ConfigurationError("global query count must be nonnegative")
    lo = np.asarray(bev_range[0::2], dtype=np.float64)
    hi = np.asarray(bev_range[1::2], dtype=np.float64)
    if lo.shape != (3,) or np.any(hi <= lo):
        raise ConfigurationError(f"empty or malformed BEV range {bev_range!r}")
    if n == 0:
        return QuerySet.empty(d)
    rng = np.random.default_rng(seed)
    centers = rng.uniform(lo, hi, size=(n, 3))
    states = np.zeros((n, STATE_DIM))
    states[:, :3] = centers
    states[:, 3:6] = 1.0
    return QuerySet(states, sin_pos_embed(states, d), ("global",) * n, np.ones(n))


def compose_queries(g: QuerySet, a: QuerySet, t: QuerySet) -> QuerySet:
    """Concatenate global, adaptive and temporal queries in that order."""
    if not (g.d == a.d == t.d):
        raise ShapeError(f"query widths differ: {g.d}, {a.d}, {t.d}")
    return QuerySet(
        np.concatenate([g.states, a.states, t.states]),
        np.concatenate([g.embeddings, a.embeddings, t.embeddings]),
        g.kinds + a.kinds + t.kinds,
        np.concatenate([g.scores, a.scores, t.scores]),
    )
