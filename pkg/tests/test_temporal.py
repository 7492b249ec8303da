import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cqdet.errors import ConfigurationError, MissingReferenceError
from cqdet.geometry import EgoMotion, RefState
from cqdet.oracles import stable_top_k
from cqdet.queries import QuerySet, sin_pos_embed
from cqdet.temporal import (MemoryQueue, chain_to_now, make_temporal_queries, propagate_state,
                            propagate_states, queue_push, top_s_indices)
from cqdet.verify import random_rotation

D = 32


def _frame(rng, n, scores=None):
    states = np.zeros((n, 9))
    states[:, :3] = rng.uniform(-20, 20, size=(n, 3))
    states[:, 3:6] = rng.uniform(0.5, 3, size=(n, 3))
    states[:, 7:9] = rng.normal(size=(n, 2))
    emb = rng.normal(size=(n, D))
    scores = rng.uniform(size=n) if scores is None else np.asarray(scores, dtype=float)
    return QuerySet(states, emb, ("global",) * n, scores)


class TestPush:
    def test_top_s(self, rng):
        f = _frame(rng, 3, [0.2, 0.8, 0.5])
        q = queue_push(MemoryQueue(4, 2, D), f, 0.0)
        np.testing.assert_array_equal(q.groups[0].states, f.states[[1, 2]])
        np.testing.assert_array_equal(q.groups[0].scores, [0.8, 0.5])

    def test_stable_ties(self, rng):
        f = _frame(rng, 3, [0.9, 0.1, 0.9])
        q = queue_push(MemoryQueue(4, 2, D), f, 0.0)
        np.testing.assert_array_equal(q.groups[0].states, f.states[[0, 2]])

    def test_eviction(self, rng):
        q = MemoryQueue(3, 4, D)
        for k in range(4):
            q = queue_push(q, _frame(rng, 6), float(k))
        assert len(q.groups) == 3
        assert [g.timestamp for g in q.groups] == [1.0, 2.0, 3.0]

    def test_capacity_bound(self, rng):
        q = MemoryQueue(4, 64, D)
        for k in range(9):
            q = queue_push(q, _frame(rng, 100), float(k))
            assert len(q) <= q.capacity
        assert len(q) == 256

    def test_stores_semantic_residual(self, rng):
        f = _frame(rng, 5)
        q = queue_push(MemoryQueue(1, 5, D), f, 0.0)
        order = top_s_indices(f.scores, 5)
        expect = f.embeddings[order] - sin_pos_embed(f.states[order], D)
        assert q.groups[0].embeddings.dtype == np.float32
        np.testing.assert_allclose(q.groups[0].embeddings, expect, rtol=1e-6, atol=1e-6)

    def test_zero_length_queue(self, rng):
        q = MemoryQueue(0, 4, D)
        assert len(queue_push(q, _frame(rng, 3), 0.0)) == 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from([0.0, 0.25, 0.5, 1.0]), max_size=20), st.integers(0, 25))
def test_top_s_matches_oracle(scores, s):
    assert list(top_s_indices(scores, s)) == stable_top_k(scores, s)


class TestPropagate:
    def test_constant_velocity(self):
        s = RefState(0, 0, 0, 1, 2, 3, 0.2, 2, 0)
        out = propagate_state(s, EgoMotion.identity(), 1.0)
        np.testing.assert_array_equal(out.center, [2, 0, 0])
        np.testing.assert_array_equal(out.as_array()[3:], s.as_array()[3:])

    def test_zero_dt(self):
        s = RefState(1, 2, 3, 1, 2, 3, 0.2, 2, -1)
        assert propagate_state(s, EgoMotion.identity(), 0.0) == s

    def test_pure_translation(self):
        s = RefState(1, 1, 1, 1, 1, 1, 0, 0, 0)
        out = propagate_state(s, EgoMotion(np.eye(3), (0, 5, 0)), 0.3)
        np.testing.assert_array_equal(out.center, [1, 6, 1])

    def test_yaw_adds(self):
        s = RefState(0, 0, 0, 1, 1, 1, 3.0, 0, 0)
        out = propagate_state(s, EgoMotion.from_yaw(0.5), 0.0)
        assert out.theta == pytest.approx(3.5 - 2 * math.pi)

    def test_size_velocity_bit_stable(self, rng):
        states = rng.normal(size=(50, 9))
        states[:, 3:6] = np.abs(states[:, 3:6])
        e = EgoMotion(random_rotation(rng), rng.normal(size=3))
        out = propagate_states(states, e, 0.7)
        np.testing.assert_array_equal(out[:, 3:6], states[:, 3:6])
        np.testing.assert_array_equal(out[:, 7:9], states[:, 7:9])

    def test_negative_dt(self):
        with pytest.raises(ConfigurationError):
            propagate_states(np.zeros((1, 9)), EgoMotion.identity(), -1.0)


class TestTemporalQueries:
    def test_empty(self):
        assert len(make_temporal_queries(MemoryQueue(4, 8, D), [], 0.0)) == 0

    def test_identity_static(self, rng):
        f = _frame(rng, 1)
        f = f.replace(states=np.where(np.arange(9) >= 7, 0.0, f.states))
        q = queue_push(MemoryQueue(4, 8, D), f, 1.0)
        t = make_temporal_queries(q, [EgoMotion.identity()], 1.0)
        np.testing.assert_array_equal(t.states, f.states)
        assert t.kinds == ("temporal",)
        np.testing.assert_allclose(t.embeddings, f.embeddings, rtol=0, atol=1e-5)

    def test_steady_state_count(self, rng):
        q = MemoryQueue(4, 64, D)
        chain = []
        for k in range(5):
            if k:
                chain = (chain + [EgoMotion.from_yaw(0.01, (1.0, 0, 0))])[-4:]
            q = queue_push(q, _frame(rng, 80), 0.5 * k)
        t = make_temporal_queries(q, chain, 2.5)
        assert len(t) == 256

    def test_chain_alignment(self):
        a = EgoMotion(np.eye(3), (1, 0, 0))
        b = EgoMotion(np.eye(3), (0, 2, 0))
        motions = chain_to_now([a, b], 2)
        np.testing.assert_array_equal(motions[0].translation, [1, 2, 0])
        np.testing.assert_array_equal(motions[1].translation, [0, 2, 0])

    def test_chain_too_short(self):
        with pytest.raises(MissingReferenceError):
            chain_to_now([EgoMotion.identity()], 2)

    def test_dt_per_group(self, rng):
        f = _frame(rng, 1).replace(states=np.array([[0, 0, 0, 1, 1, 1, 0, 1.0, 0]]))
        q = queue_push(MemoryQueue(2, 1, D), f, 0.0)
        q = queue_push(q, f, 0.5)
        ident = EgoMotion.identity()
        t = make_temporal_queries(q, [ident, ident], 1.0)
        np.testing.assert_allclose(t.states[:, 0], [1.0, 0.5])

    def test_refiner_hook(self, rng):
        q = queue_push(MemoryQueue(1, 2, D), _frame(rng, 2), 0.0)
        t = make_temporal_queries(q, [EgoMotion.identity()], 0.0,
                                  refiner=lambda s, e: s + np.r_[0, 0, 1.0, np.zeros(6)])
        np.testing.assert_allclose(t.states[:, 2], q.groups[0].states[:, 2] + 1.0)


def test_translation_composes(rng):
    s = rng.normal(size=(20, 9))
    s[:, 3:6] = np.abs(s[:, 3:6])
    t1, t2 = rng.normal(size=3), rng.normal(size=3)
    two = propagate_states(propagate_states(s, EgoMotion(np.eye(3), t1), 0.2),
                           EgoMotion(np.eye(3), t2), 0.3)
    one = propagate_states(s, EgoMotion(np.eye(3), t1 + t2), 0.5)
    np.testing.assert_allclose(two, one, rtol=0, atol=1e-12)
