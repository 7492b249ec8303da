"""Oracle- and property-based acceptance checks.

Each ``check_*`` function runs one criterion at its fixed tolerance and
returns a :class:`CheckResult`; :func:`run_all` runs every criterion.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionParams, asa_forward, modulation_kernel, pairwise_distance
from .geometry import (
    CameraModel,
    Detection2D,
    EgoMotion,
    RefState,
    compose_ego,
    lift_detection,
    project_point,
)
from .gradcheck import check_gradients
from .nn import Affine
from .oracles import bilinear_oracle, naive_distance, vanilla_mhsa
from .pipeline import ModelWeights, PipelineConfig, empty_queue, run_frame
from .queries import QuerySet
from .sampling import (
    DeformableParams,
    FeatureMap,
    FeaturePyramid,
    HybridPointParams,
    ProjectedPoints,
    blend_points,
    deformable_attention,
    deformable_weights,
    fixed_points_batch,
    learnable_points_batch,
    level_shape,
)
from .scene import SceneConfig, evaluate, gen_scene
from .temporal import MemoryQueue, make_temporal_queries, propagate_state, queue_push


@dataclass
class CheckResult:
    key: str
    title: str
    passed: bool
    details: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = ", ".join(f"{k}={_fmt(v)}" for k, v in self.details.items())
        return f"[{status}] {self.key} {self.title} ({extra})"


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.3g}"
    return str(v)


def random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_camera(rng, camera_id: int = 0) -> CameraModel:
    w, h = int(rng.integers(320, 1600)), int(rng.integers(240, 900))
    return CameraModel(rng.uniform(200, 2000), rng.uniform(200, 2000), rng.uniform(0, w),
                       rng.uniform(0, h), random_rotation(rng), rng.uniform(-5, 5, size=3),
                       w, h, camera_id)


def _mhsa_oracle(x, p: AttentionParams):
    return vanilla_mhsa(x, p.wq.weight, p.wq.bias, p.wk.weight, p.wk.bias, p.wv.weight,
                        p.wv.bias, p.wo.weight, p.wo.bias, p.heads)


def check_degeneration(seed: int = 0, instances: int = 20) -> CheckResult:
    """ASA with modulation none / eps=1e9 equals vanilla MHSA (Q=32, d=64, H=8)."""
    rng = np.random.default_rng(seed)
    worst_none = worst_big = 0.0
    for k in range(instances):
        p = AttentionParams.random(64, 8, seed=int(rng.integers(2**31)))
        eps_out = p.eps_net[-1]
        # zero weight + huge bias pins every scale at 1e9 after softplus
        big_eps = (p.eps_net[0], Affine(np.zeros_like(eps_out.weight), np.full(8, 1e9)))
        p_big = AttentionParams(p.d, p.heads, p.wq, p.wk, p.wv, p.wo, big_eps, "gaussian")
        x = rng.normal(size=(32, 64))
        centers = rng.uniform(-50, 50, size=(32, 3))
        ref = _mhsa_oracle(x, p)
        worst_none = max(worst_none, np.max(np.abs(asa_forward(x, centers, p.with_modulation("none")) - ref)))
        worst_big = max(worst_big, np.max(np.abs(asa_forward(x, centers, p_big) - ref)))
    ok = worst_none <= 1e-6 and worst_big <= 1e-6
    return CheckResult("AC1", "ASA degenerates to vanilla MHSA", ok,
                       {"max_err_none": worst_none, "max_err_eps1e9": worst_big, "tol": 1e-6})


def check_geometry_round_trip(seed: int = 0, pairs: int = 1000) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    contract = True
    for _ in range(pairs):
        cam = random_camera(rng)
        det = Detection2D(0, rng.uniform(0, cam.width), rng.uniform(0, cam.height),
                          rng.uniform(1, 300), rng.uniform(1, 300), np.zeros(3),
                          rng.uniform(), rng.uniform(0.5, 100.0))
        s = lift_detection(cam, det)
        u, v, d, vis = project_point(cam, s.center)
        for got, want in ((u, det.u), (v, det.v), (d, det.depth)):
            worst = max(worst, abs(got - want) / max(abs(want), 1.0))
        contract &= vis and s.l == s.w and s.theta == 0.0 and s.vx == 0.0 and s.vy == 0.0
    ok = worst <= 1e-9 and contract
    return CheckResult("AC2", "project(lift(det)) recovers (u, v, d)", ok,
                       {"max_rel_err": worst, "tol": 1e-9, "lift_contract": contract})


def _random_queryset(rng, n, d, score=None):
    states = np.zeros((n, 9))
    states[:, :3] = rng.uniform(-20, 20, size=(n, 3))
    states[:, 3:6] = rng.uniform(0.5, 4, size=(n, 3))
    states[:, 6] = rng.uniform(-3, 3, size=n)
    states[:, 7:] = rng.uniform(-3, 3, size=(n, 2))
    scores = rng.uniform(size=n) if score is None else np.full(n, score)
    return QuerySet(states, rng.normal(size=(n, d)), ("global",) * n, scores)


def check_temporal(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    d = 32
    q = MemoryQueue(4, 64, d)
    cap_ok = True
    for k in range(7):
        q = queue_push(q, _random_queryset(rng, int(rng.integers(10, 120)), d), 0.5 * k, k)
        cap_ok &= len(q) <= q.capacity
    q = MemoryQueue(4, 64, d)
    for k in range(4):
        q = queue_push(q, _random_queryset(rng, 100, d), 0.5 * k, k)
    egos = [EgoMotion.from_yaw(0.02, (1.0, 0.1, 0.0))] * 4
    n_temporal = len(make_temporal_queries(q, egos, 2.0))

    worst = 0.0
    stable = True
    for _ in range(200):
        s = RefState(*rng.uniform(-10, 10, 3), *rng.uniform(0.1, 5, 3), rng.uniform(-3, 3),
                     *rng.uniform(-5, 5, 2))
        e1 = EgoMotion(np.eye(3), rng.uniform(-5, 5, 3))
        e2 = EgoMotion(np.eye(3), rng.uniform(-5, 5, 3))
        dt1, dt2 = rng.uniform(0, 2, 2)
        seq = propagate_state(propagate_state(s, e1, dt1), e2, dt2)
        once = propagate_state(s, compose_ego(e2, e1), dt1 + dt2)
        worst = max(worst, float(np.max(np.abs(seq.as_array() - once.as_array()))))
        rot = propagate_state(s, EgoMotion(random_rotation(rng), rng.uniform(-5, 5, 3)), dt1)
        stable &= (rot.size.tobytes() == s.size.tobytes()
                   and rot.velocity.tobytes() == s.velocity.tobytes())
    ok = cap_ok and n_temporal == 256 and worst <= 1e-12 and stable
    return CheckResult("AC3", "memory queue and propagation contracts", ok,
                       {"capacity_ok": cap_ok, "temporal_count": n_temporal,
                        "compose_err": worst, "size_velocity_bitstable": stable})


def check_distance_kernels(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    states = rng.uniform(-50, 50, size=(50, 9))
    err = float(np.max(np.abs(pairwise_distance(states) - naive_distance(states))))
    D = np.concatenate([[0.0], rng.uniform(0, 100, 2000)])
    eps = rng.uniform(1e-3, 20, 2001)
    range_ok = True
    for kind in ("gaussian", "laplacian", "reciprocal"):
        f = modulation_kernel(D, eps, kind)
        range_ok &= bool(np.all(f <= 1.0) and np.all(f >= 0.0))
        range_ok &= bool(np.all(modulation_kernel(np.zeros(10), eps[:10], kind) == 1.0))
    # strict positivity where the kernel is representable
    small = rng.uniform(0, 5, 500)
    range_ok &= all(bool(np.all(modulation_kernel(small, 1.0, k) > 0))
                    for k in ("gaussian", "laplacian", "reciprocal"))
    ok = err <= 1e-12 and range_ok
    return CheckResult("AC4", "distance oracle and kernel range", ok,
                       {"distance_err": err, "tol": 1e-12, "kernels_in_(0,1]": range_ok})


def check_gradients_all(seed: int = 0, trials: int = 100) -> CheckResult:
    reports = [check_gradients(k, trials=trials, seed=seed)
               for k in ("gaussian", "laplacian", "reciprocal", "softmax", "bilinear")]
    details = {r.kernel: r.max_rel_error for r in reports}
    details["tol"] = 1e-5
    return CheckResult("AC5", "analytic gradients match central differences",
                       all(r.passed for r in reports), details)


def _single_camera_pyramid(rng, channels, size=(64, 32)):
    maps = tuple(FeatureMap(0, lv, rng.normal(size=(channels,) + level_shape(size, lv)))
                 for lv in range(4))
    return FeaturePyramid(maps, size)


def check_deformable_single_term(seed: int = 0, trials: int = 20) -> CheckResult:
    rng = np.random.default_rng(seed)
    d = 16
    worst = 0.0
    sums_ok = True
    for _ in range(trials):
        pyr = _single_camera_pyramid(rng, d)
        p = DeformableParams.random(d, 1, keys=1, levels=1, seed=int(rng.integers(2**31)))
        p = DeformableParams(1, 1, 1, p.value_proj, p.out_proj,
                             Affine.zeros(d, 2), p.weight_net)
        n = 5
        x = rng.normal(size=(n, d))
        uv = np.stack([rng.uniform(2, 62, n), rng.uniform(2, 30, n)], axis=1)
        proj = ProjectedPoints((0,), uv[None, :, None, :], np.ones((1, n, 1)),
                               np.ones((1, n, 1), dtype=bool))
        out = deformable_attention(x, proj, pyr, p)
        fm = pyr.get(0, 0)
        for i in range(n):
            ref = bilinear_oracle(fm.data, fm.scale, *uv[i]) @ p.value_proj[0] @ p.out_proj[0]
            worst = max(worst, float(np.max(np.abs(out[i] - ref))))

        # weight normalization with a random visibility pattern
        pm = DeformableParams.random(d, 4, keys=3, levels=4, seed=int(rng.integers(2**31)))
        vis = rng.uniform(size=(3, n, 7)) < 0.3
        vis[:, 0, :] = False
        sums = deformable_weights(x, vis, pm).sum(axis=(2, 3)) * vis.sum(axis=(0, 2))[:, None]
        # normalization is over keys x levels x visible projections
        any_vis = vis.any(axis=(0, 2))
        sums_ok &= bool(np.allclose(sums[any_vis], 1.0, atol=1e-12))
        sums_ok &= bool(np.all(deformable_weights(x, vis, pm)[~any_vis] == 0.0))
    ok = worst <= 1e-6 and sums_ok
    return CheckResult("AC6", "deformable aggregation single-term reduction", ok,
                       {"max_err": worst, "tol": 1e-6, "weights_normalized": sums_ok})


def check_hybrid_points(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    n, d = 200, 32
    qs = _random_queryset(rng, n, d)
    params = HybridPointParams.random(d, seed=seed)
    fixed = fixed_points_batch(qs.states)
    learned = learnable_points_batch(qs.embeddings, qs.states,
                                     Affine.random(d, 21, rng, scale=5.0))
    ends_ok = (np.array_equal(blend_points(fixed, learned, np.ones(n)), fixed)
               and np.array_equal(blend_points(fixed, learned, np.zeros(n)), learned))
    pts = learnable_points_batch(qs.embeddings, qs.states, Affine.random(d, 39, rng, scale=10.0))
    local = pts - qs.states[:, None, :3]
    c, s = np.cos(qs.states[:, 6])[:, None], np.sin(qs.states[:, 6])[:, None]
    bx = c * local[..., 0] + s * local[..., 1]
    by = -s * local[..., 0] + c * local[..., 1]
    half = 0.5 * qs.states[:, 3:6] * (1 + 1e-12)
    inside = bool(np.all(np.abs(bx) <= half[:, None, 0]) and np.all(np.abs(by) <= half[:, None, 1])
                  and np.all(np.abs(local[..., 2]) <= half[:, None, 2]))
    cfg = PipelineConfig()
    counts_ok = (cfg.n_fixed == 7 and cfg.n_learnable == 13 and fixed.shape[1] == 7
                 and params.n_learnable == 13)
    ok = ends_ok and inside and counts_ok
    return CheckResult("AC7", "hybrid sampling point contracts", ok,
                       {"alpha_endpoints": ends_ok, "learned_inside_box": inside,
                        "default_counts_7_13": counts_ok})


def check_end_to_end(seed: int = 0) -> CheckResult:
    cfg = PipelineConfig(seed=seed)
    scene = gen_scene(seed, SceneConfig(n_frames=1))
    frame = scene.frames[0]
    weights = ModelWeights.random(cfg)
    p1, q1 = run_frame(frame, empty_queue(cfg), cfg, weights, scene.rig)
    p2, _ = run_frame(frame, empty_queue(cfg), cfg, weights, scene.rig)
    deterministic = p1.to_bytes() == p2.to_bytes()
    # second frame exercises the temporal share of the accounting
    p3, _ = run_frame(frame, q1, cfg, weights, scene.rig, [EgoMotion.identity()])
    counts_ok = all(len(p) == 644 + p.n_adaptive + p.n_temporal and p.n_global == 644
                    for p in (p1, p3)) and p3.n_temporal == cfg.queue_size
    pz, _ = run_frame(frame, empty_queue(cfg), cfg, ModelWeights.zeros(cfg), scene.rig)
    zero_ok = cfg.n_layers == 6 and np.array_equal(pz.states, pz.initial.states)
    ok = deterministic and counts_ok and zero_ok
    return CheckResult("AC8", "end-to-end determinism and query accounting", ok,
                       {"byte_identical": deterministic, "count_accounting": counts_ok,
                        "zero_weight_identity_N6": zero_ok, "queries": len(p1)})


def check_oracle_scene(seed: int = 0) -> CheckResult:
    cfg = PipelineConfig(seed=seed)
    scene = gen_scene(seed, SceneConfig(n_boxes=12, n_frames=1))
    frame = scene.frames[0]
    pred, _ = run_frame(frame, empty_queue(cfg), cfg, ModelWeights.random(cfg), scene.rig)
    initial = pred.initial
    adaptive = initial.states[[k == "adaptive" for k in initial.kinds]]
    dist = np.sqrt(((adaptive[:, None, :3] - frame.boxes[None, :, :3]) ** 2).sum(-1))
    center_err = float(dist.min(axis=1).max()) if len(adaptive) else math.inf
    rec = evaluate(adaptive, frame.boxes, threshold=1.0)
    ok = center_err <= 1e-6 and rec.recall == 1.0
    return CheckResult("AC9", "noise-free scene: adaptive queries hit ground truth", ok,
                       {"max_center_err": center_err, "tol": 1e-6, "recall@1m": rec.recall,
                        "adaptive": len(adaptive), "boxes": len(frame.boxes)})


CHECKS = (
    check_degeneration,
    check_geometry_round_trip,
    check_temporal,
    check_distance_kernels,
    check_gradients_all,
    check_deformable_single_term,
    check_hybrid_points,
    check_end_to_end,
    check_oracle_scene,
)


def run_all(seed: int = 0) -> list[CheckResult]:
    results = []
    for fn in CHECKS:
        t0 = time.perf_counter()
        res = fn(seed=seed)
        res.seconds = time.perf_counter() - t0
        results.append(res)
    return results
