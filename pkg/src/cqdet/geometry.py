"""Pinhole cameras, 2D-to-3D lifting of detections and rigid ego motion.

Conventions: the world (ego) frame is x forward, y left, z up.  Camera
frames are x right, y down, z along the optical axis.  ``CameraModel``
stores the world->camera transform; its inverse is computed once.
All geometry is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigurationError, RejectionError

ORTHO_TOL = 1e-9
MIN_DEPTH = 1e-6
STATE_DIM = 9
STATE_FIELDS = ("x", "y", "z", "w", "l", "h", "theta", "vx", "vy")


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi].  Values already in range are returned as-is."""
    theta = float(theta)
    if -math.pi < theta <= math.pi:
        return theta
    wrapped = math.remainder(theta, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


def wrap_angles(theta):
    """Vectorized :func:`wrap_angle`; in-range entries keep their exact bits."""
    theta = np.asarray(theta, dtype=np.float64)
    out = theta.copy()
    bad = ~((theta > -np.pi) & (theta <= np.pi))
    if np.any(bad):
        w = np.remainder(theta[bad] + np.pi, 2.0 * np.pi) - np.pi
        w[w <= -np.pi] += 2.0 * np.pi
        out[bad] = w
    return out


def check_rotation(rotation, tol: float = ORTHO_TOL) -> np.ndarray:
    r = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
    if not np.all(np.isfinite(r)):
        raise ConfigurationError("rotation contains non-finite values")
    if np.max(np.abs(r @ r.T - np.eye(3))) > tol:
        raise ConfigurationError("rotation is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > tol:
        raise ConfigurationError("rotation determinant is not +1")
    return r


def yaw_rotation(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int
    camera_id: int = 0
    _world_to_cam: np.ndarray = field(init=False, repr=False)
    _cam_to_world: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigurationError(f"camera {self.camera_id}: focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ConfigurationError(f"camera {self.camera_id}: image extent must be positive")
        r = check_rotation(self.rotation)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(t))
        object.__setattr__(self, "fx", float(self.fx))
        object.__setattr__(self, "fy", float(self.fy))
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "camera_id", int(self.camera_id))

        w2c = np.eye(4)
        w2c[:3, :3] = r
        w2c[:3, 3] = t
        # closed-form rigid inverse, not np.linalg.inv
        c2w = np.eye(4)
        c2w[:3, :3] = r.T
        c2w[:3, 3] = -r.T @ t
        object.__setattr__(self, "_world_to_cam", _frozen(w2c))
        object.__setattr__(self, "_cam_to_world", _frozen(c2w))

    @property
    def intrinsic(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def world_to_cam(self) -> np.ndarray:
        return self._world_to_cam

    @property
    def cam_to_world(self) -> np.ndarray:
        return self._cam_to_world

    @property
    def position(self) -> np.ndarray:
        return self._cam_to_world[:3, 3].copy()

    def to_camera(self, points) -> np.ndarray:
        # explicit column sums: results do not depend on batch size (BLAS may reorder)
        p = np.asarray(points, dtype=np.float64)
        r = self.rotation
        return (p[..., 0:1] * r[:, 0] + p[..., 1:2] * r[:, 1] + p[..., 2:3] * r[:, 2]
                + self.translation)

    def to_world(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - self.translation) @ self.rotation

    def __eq__(self, other):
        if not isinstance(other, CameraModel):
            return NotImplemented
        return (
            (self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.camera_id)
            == (other.fx, other.fy, other.cx, other.cy, other.width, other.height, other.camera_id)
            and np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    __hash__ = None


class Projection(NamedTuple):
    u: float
    v: float
    depth: float
    visible: bool


def project_point(cam: CameraModel, p) -> Projection:
    """Project a world point.  ``visible`` is False for points behind the camera,
    in which case u and v are NaN."""
    uv, depth, front = project_many(cam, np.asarray(p, dtype=np.float64).reshape(1, 3))
    if not front[0]:
        return Projection(math.nan, math.nan, float(depth[0]), False)
    return Projection(float(uv[0, 0]), float(uv[0, 1]), float(depth[0]), True)


def project_many(cam: CameraModel, points):
    """Vectorized projection: returns (uv (N, 2), depth (N,), in_front (N,))."""
    pc = cam.to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    depth = pc[:, 2]
    in_front = depth > MIN_DEPTH
    safe = np.where(in_front, depth, 1.0)
    uv = np.stack([cam.fx * pc[:, 0] / safe + cam.cx, cam.fy * pc[:, 1] / safe + cam.cy], axis=1)
    uv[~in_front] = np.nan
    return uv, depth, in_front


@dataclass(frozen=True, eq=False)
class RefState:
    """BEV box state (x, y, z, w, l, h, theta, vx, vy)."""

    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    w: float = 0.0
    l: float = 0.0
    h: float = 0.0
    theta: float = 0.0
    vx: float = 0.0
    vy: float = 0.0

    def __post_init__(self):
        vals = [float(getattr(self, f)) for f in STATE_FIELDS]
        if not all(math.isfinite(v) for v in vals):
            raise RejectionError("state values must be finite")
        if min(vals[3], vals[4], vals[5]) < 0.0:
            raise RejectionError("box size must be nonnegative")
        vals[6] = wrap_angle(vals[6])
        for name, val in zip(STATE_FIELDS, vals):
            object.__setattr__(self, name, val)

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def size(self) -> np.ndarray:
        return np.array([self.w, self.l, self.h])

    @property
    def velocity(self) -> np.ndarray:
        return np.array([self.vx, self.vy])

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in STATE_FIELDS], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "RefState":
        a = np.asarray(a, dtype=np.float64).reshape(STATE_DIM)
        return cls(*(float(v) for v in a))

    def __eq__(self, other):
        if not isinstance(other, RefState):
            return NotImplemented
        return all(getattr(self, f) == getattr(other, f) for f in STATE_FIELDS)

    def __hash__(self):
        return hash(tuple(getattr(self, f) for f in STATE_FIELDS))


def states_to_array(states: Sequence[RefState]) -> np.ndarray:
    if len(states) == 0:
        return np.zeros((0, STATE_DIM))
    return np.stack([s.as_array() for s in states])


@dataclass(frozen=True, eq=False)
class Detection2D:
    """A 2D box with semantics, confidence and estimated depth.

    ``depth`` is the expected depth used for lifting.  ``depth_bins`` /
    ``depth_probs`` optionally carry the discrete distribution it came from;
    its peak probability acts as a depth-quality score for filtering.
    """

    camera_id: int
    u: float
    v: float
    w: float
    h: float
    z_sem: np.ndarray
    score: float
    depth: float
    depth_bins: np.ndarray | None = None
    depth_probs: np.ndarray | None = None

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise RejectionError("detection box size must be positive")
        if not (0.0 <= self.score <= 1.0):
            raise RejectionError("detection score must lie in [0, 1]")
        if not (self.depth > 0):
            raise RejectionError("detection depth must be positive")
        object.__setattr__(self, "z_sem", _frozen(np.asarray(self.z_sem, dtype=np.float64).ravel()))
        if (self.depth_bins is None) != (self.depth_probs is None):
            raise RejectionError("depth_bins and depth_probs must be given together")
        if self.depth_probs is not None:
            bins = _frozen(np.asarray(self.depth_bins, dtype=np.float64).ravel())
            probs = _frozen(np.asarray(self.depth_probs, dtype=np.float64).ravel())
            if bins.shape != probs.shape or bins.size == 0:
                raise RejectionError("depth distribution bins and probabilities differ in length")
            if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
                raise RejectionError("depth probabilities must be nonnegative and sum to 1")
            object.__setattr__(self, "depth_bins", bins)
            object.__setattr__(self, "depth_probs", probs)

    @property
    def depth_confidence(self) -> float:
        """Peak bin probability, or 1.0 without a distribution."""
        if self.depth_probs is None:
            return 1.0
        return float(np.max(self.depth_probs))

    @classmethod
    def from_distribution(cls, camera_id, u, v, w, h, z_sem, score, bins, probs) -> "Detection2D":
        bins = np.asarray(bins, dtype=np.float64)
        probs = np.asarray(probs, dtype=np.float64)
        return cls(camera_id, u, v, w, h, z_sem, score, float(bins @ probs), bins, probs)


def lift_detection(cam: CameraModel, det: Detection2D) -> RefState:
    """Back-project a 2D detection to a 3D reference state.

    center = cam_to_world @ intrinsic^-1 @ [u*d, v*d, d, 1]; the metric width
    and height follow from similar triangles and length copies width.
    Orientation and velocity start at zero.
    """
    d = float(det.depth)
    if not d > 0:
        raise RejectionError("cannot lift a detection with nonpositive depth")
    # homogeneous intrinsic inverse, written out to keep round trips exact
    k_inv = np.array([
        [1.0 / cam.fx, 0.0, -cam.cx / cam.fx, 0.0],
        [0.0, 1.0 / cam.fy, -cam.cy / cam.fy, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ])
    ray = np.array([det.u * d, det.v * d, d, 1.0])
    p_cam = k_inv @ ray
    p_world = cam.cam_to_world @ p_cam
    pw = d * det.w / cam.fx
    ph = d * det.h / cam.fy
    return RefState(p_world[0], p_world[1], p_world[2], pw, pw, ph, 0.0, 0.0, 0.0)


@dataclass(frozen=True, eq=False)
class EgoMotion:
    """Rigid motion p -> R p + T mapping points of an earlier frame into a later one."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(check_rotation(self.rotation)))
        object.__setattr__(self, "translation",
                           _frozen(np.asarray(self.translation, dtype=np.float64).reshape(3)))

    @classmethod
    def identity(cls) -> "EgoMotion":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "EgoMotion":
        return cls(yaw_rotation(yaw), translation)

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def apply(self, p) -> np.ndarray:
        return apply_ego(self, p)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __eq__(self, other):
        if not isinstance(other, EgoMotion):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    __hash__ = None


def apply_ego(e: EgoMotion, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return p @ e.rotation.T + e.translation


def compose_ego(a: EgoMotion, b: EgoMotion) -> EgoMotion:
    """Motion equivalent to applying ``b`` first, then ``a``."""
    return EgoMotion(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)
