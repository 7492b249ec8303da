"""Memory queue of past queries and their ego-motion propagation to the current frame."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, MissingReferenceError, ShapeError
from .geometry import STATE_DIM, EgoMotion, RefState, compose_ego, wrap_angles
from .queries import QuerySet, sin_pos_embed

# A learned refiner would map (propagated states (N, 9), semantics (N, d)) to states.
StateRefiner = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class MemoryEntry:
    state: RefState
    embedding: np.ndarray
    timestamp: float
    frame_index: int
    score: float = 1.0


@dataclass(frozen=True, eq=False)
class FrameGroup:
    """Top-S queries of one frame.  ``embeddings`` hold the semantic part only."""

    states: np.ndarray
    embeddings: np.ndarray
    scores: np.ndarray
    timestamp: float
    frame_index: int

    def __post_init__(self):
        states = np.array(self.states, dtype=np.float64).reshape(-1, STATE_DIM)
        emb = np.array(self.embeddings, dtype=np.float32)
        scores = np.array(self.scores, dtype=np.float64).reshape(-1)
        if emb.ndim != 2 or emb.shape[0] != states.shape[0] or scores.shape[0] != states.shape[0]:
            raise ShapeError("frame group columns differ in length")
        if not math.isfinite(self.timestamp):
            raise ConfigurationError("timestamp must be finite")
        for a in (states, emb, scores):
            a.setflags(write=False)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "timestamp", float(self.timestamp))
        object.__setattr__(self, "frame_index", int(self.frame_index))

    def __len__(self) -> int:
        return self.states.shape[0]

    def entries(self) -> Iterator[MemoryEntry]:
        for i in range(len(self)):
            yield MemoryEntry(RefState.from_array(self.states[i]), self.embeddings[i],
                              self.timestamp, self.frame_index, float(self.scores[i]))


@dataclass(frozen=True, eq=False)
class MemoryQueue:
    """At most ``length`` frame groups of at most ``size`` entries, oldest first."""

    length: int
    size: int
    d: int
    groups: tuple = ()

    def __post_init__(self):
        if self.length < 0 or self.size < 0:
            raise ConfigurationError("queue length and size must be nonnegative")
        groups = tuple(self.groups)
        if len(groups) > self.length:
            raise ConfigurationError("more frame groups than the queue length")
        for g in groups:
            if len(g) > self.size:
                raise ConfigurationError("frame group exceeds the per-frame size")
            if len(g) and g.embeddings.shape[1] != self.d:
                raise ShapeError("frame group embedding width does not match the queue")
        object.__setattr__(self, "groups", groups)

    @property
    def capacity(self) -> int:
        return self.length * self.size

    def __len__(self) -> int:
        return sum(len(g) for g in self.groups)

    def entries(self) -> Iterator[MemoryEntry]:
        for g in self.groups:
            yield from g.entries()


def top_s_indices(scores, s: int) -> np.ndarray:
    """Indices of the ``s`` highest scores, ties kept in input order."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return order[:s]


def queue_push(q: MemoryQueue, frame: QuerySet, timestamp: float,
               frame_index: int | None = None) -> MemoryQueue:
    """Return a new queue with the top-S queries of ``frame`` appended.

    Stored embeddings are the semantic residual ``embedding - pos_embed(state)``
    so that re-adding the propagated positional code does not count it twice.
    The oldest group is evicted once ``length`` groups are held.
    """
    if len(frame) and frame.d != q.d:
        raise ShapeError(f"frame width {frame.d} does not match queue width {q.d}")
    if q.length == 0:
        return q
    if frame_index is None:
        frame_index = q.groups[-1].frame_index + 1 if q.groups else 0
    keep = top_s_indices(frame.scores, q.size)
    states = frame.states[keep]
    if len(keep):
        sem = frame.embeddings[keep] - sin_pos_embed(states, q.d)
    else:
        sem = np.zeros((0, q.d))
    group = FrameGroup(states, sem, frame.scores[keep], timestamp, frame_index)
    groups = (q.groups + (group,))[-q.length:]
    return MemoryQueue(q.length, q.size, q.d, groups)


def propagate_states(states, e: EgoMotion, dt) -> np.ndarray:
    """Constant-velocity + ego-motion update on a (N, 9) state array.

    center <- R (center + dt [vx, vy, 0]) + T, theta <- wrap(theta + yaw(R));
    size and velocity columns are copied unchanged.
    """
    s = np.asarray(states, dtype=np.float64).reshape(-1, STATE_DIM)
    dt = np.broadcast_to(np.asarray(dt, dtype=np.float64), (s.shape[0],))
    if np.any(dt < 0):
        raise ConfigurationError("propagation interval must be nonnegative")
    moved = s[:, :3].copy()
    moved[:, 0] += dt * s[:, 7]
    moved[:, 1] += dt * s[:, 8]
    out = s.copy()
    out[:, :3] = moved @ e.rotation.T + e.translation
    yaw = e.yaw
    if yaw != 0.0:
        out[:, 6] = wrap_angles(s[:, 6] + yaw)
    return out


def propagate_state(s: RefState, e: EgoMotion, dt: float) -> RefState:
    return RefState.from_array(propagate_states(s.as_array()[None], e, dt)[0])


def chain_to_now(ego_chain: Sequence[EgoMotion], n_groups: int) -> list[EgoMotion]:
    """Per-group motions to the current frame.

    ``ego_chain[-1]`` maps the newest stored frame to now, ``ego_chain[-2]``
    the frame before it to the newest one, and so on.  Extra leading entries
    are ignored.
    """
    if len(ego_chain) < n_groups:
        raise MissingReferenceError(
            f"ego chain has {len(ego_chain)} segments, queue holds {n_groups} frames")
    out = []
    acc = EgoMotion.identity()
    for k in range(1, n_groups + 1):
        acc = compose_ego(acc, ego_chain[-k])
        out.append(acc)
    return out[::-1]


def make_temporal_queries(
    q: MemoryQueue,
    ego_chain: Sequence[EgoMotion],
    now: float,
    refiner: StateRefiner | None = None,
) -> QuerySet:
    """Propagate every stored entry to ``now``; embedding = pos(propagated) + stored semantics."""
    groups = [g for g in q.groups]
    if not groups or len(q) == 0:
        return QuerySet.empty(q.d)
    motions = chain_to_now(ego_chain, len(groups))
    states, sems, scores = [], [], []
    for g, e in zip(groups, motions):
        if len(g) == 0:
            continue
        dt = now - g.timestamp
        if dt < 0:
            raise ConfigurationError(f"stored frame at t={g.timestamp} lies after now={now}")
        states.append(propagate_states(g.states, e, dt))
        sems.append(g.embeddings.astype(np.float64))
        scores.append(g.scores)
    states = np.concatenate(states)
    sems = np.concatenate(sems)
    if refiner is not None:
        states = np.asarray(refiner(states, sems), dtype=np.float64)
    emb = sin_pos_embed(states, q.d) + sems
    return QuerySet(states, emb, ("temporal",) * len(states), np.concatenate(scores))
