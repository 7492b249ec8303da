"""Distance-modulated multi-head self-attention over queries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ShapeError
from .nn import Affine, relu, softmax, softplus

MODULATIONS = ("gaussian", "laplacian", "reciprocal", "none")
EPS_FLOOR = 1e-3


def pairwise_distance(states) -> np.ndarray:
    """Euclidean distances between query centers.

    Accepts a (Q, 9) state array, a (Q, 3) center array or a list of RefState.
    """
    if isinstance(states, (list, tuple)):
        c = np.array([[s.x, s.y, s.z] for s in states], dtype=np.float64).reshape(-1, 3)
    else:
        c = np.asarray(states, dtype=np.float64)
        c = c.reshape(-1, c.shape[-1])[:, :3]
    diff = c[:, None, :] - c[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


@dataclass(frozen=True, eq=False)
class AttentionParams:
    """Projections of one ASA block plus the per-query scale network.

    ``eps_net`` holds either two affine layers (d -> d -> H with ReLU between)
    or a single d -> H layer for the single-linear variant.  ``log_space``
    switches the modulation from multiplying logits to adding log(factor).
    """

    d: int
    heads: int
    wq: Affine
    wk: Affine
    wv: Affine
    wo: Affine
    eps_net: tuple
    modulation: str = "gaussian"
    log_space: bool = False

    def __post_init__(self):
        if self.heads < 1 or self.d % self.heads:
            raise ConfigurationError(f"model width {self.d} not divisible by {self.heads} heads")
        if self.modulation not in MODULATIONS:
            raise ConfigurationError(f"unknown modulation {self.modulation!r}")
        for name in ("wq", "wk", "wv", "wo"):
            lin = getattr(self, name)
            if lin.weight.shape != (self.d, self.d):
                raise ShapeError(f"{name} must be {self.d}x{self.d}, got {lin.weight.shape}")
        layers = tuple(self.eps_net)
        if len(layers) not in (1, 2):
            raise ShapeError("eps_net must have one or two layers")
        if layers[0].in_features != self.d or layers[-1].out_features != self.heads:
            raise ShapeError("eps_net must map d -> H")
        if len(layers) == 2 and layers[0].out_features != layers[1].in_features:
            raise ShapeError("eps_net hidden widths disagree")
        object.__setattr__(self, "eps_net", layers)

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    def with_modulation(self, modulation: str, log_space: bool | None = None) -> "AttentionParams":
        return AttentionParams(self.d, self.heads, self.wq, self.wk, self.wv, self.wo, self.eps_net,
                               modulation, self.log_space if log_space is None else log_space)

    @classmethod
    def random(cls, d: int, heads: int, seed: int = 0, modulation: str = "gaussian",
               eps_layers: int = 2, log_space: bool = False) -> "AttentionParams":
        rng = np.random.default_rng(seed)
        lins = [Affine.random(d, d, rng) for _ in range(4)]
        if eps_layers == 2:
            eps = (Affine.random(d, d, rng), Affine.random(d, heads, rng))
        elif eps_layers == 1:
            eps = (Affine.random(d, heads, rng),)
        else:
            raise ConfigurationError("eps_layers must be 1 or 2")
        return cls(d, heads, *lins, eps, modulation, log_space)

    @classmethod
    def zeros(cls, d: int, heads: int, modulation: str = "gaussian") -> "AttentionParams":
        lins = [Affine.zeros(d, d) for _ in range(4)]
        return cls(d, heads, *lins, (Affine.zeros(d, d), Affine.zeros(d, heads)), modulation)


def compute_epsilons(embeddings, p: AttentionParams) -> np.ndarray:
    """Per-query, per-head positive distance scales, shape (Q, H)."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != p.d:
        raise ShapeError(f"embeddings must be (Q, {p.d}), got {x.shape}")
    h = x
    for i, layer in enumerate(p.eps_net):
        h = layer(h)
        if i < len(p.eps_net) - 1:
            h = relu(h)
    return softplus(h) + EPS_FLOOR


def modulation_kernel(D, eps, kind: str) -> np.ndarray:
    """Elementwise distance weight in (0, 1]; equals 1 at D = 0."""
    D = np.asarray(D, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if kind == "gaussian":
        return np.exp(-(D * D) / (2.0 * eps * eps))
    if kind == "laplacian":
        return np.exp(-D / eps)
    if kind == "reciprocal":
        return 1.0 / (1.0 + D / eps)
    if kind == "none":
        return np.ones(np.broadcast(D, eps).shape)
    raise ConfigurationError(f"unknown modulation {kind!r}")


def modulation_factor(D, eps, kind: str, head: int) -> np.ndarray:
    """Q x Q factor for one head, using the attending (row) query's scale."""
    eps = np.asarray(eps, dtype=np.float64)
    return modulation_kernel(D, eps[:, head][:, None], kind)


def asa_kernel_grad(D, eps, kind: str):
    """Analytic (df/dD, df/deps) of :func:`modulation_kernel`."""
    D = np.asarray(D, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    f = modulation_kernel(D, eps, kind)
    if kind == "gaussian":
        return -f * D / eps**2, f * D**2 / eps**3
    if kind == "laplacian":
        return -f / eps, f * D / eps**2
    if kind == "reciprocal":
        return -f * f / eps, f * f * D / eps**2
    raise ConfigurationError(f"no gradient for modulation {kind!r}")


def modulated_softmax(logits, factor, log_space: bool = False) -> np.ndarray:
    """Row softmax of logits combined with a (0, 1] factor."""
    if log_space:
        return softmax(logits + np.log(factor), axis=-1)
    return softmax(logits * factor, axis=-1)


def asa_forward(x, centers, p: AttentionParams, return_weights: bool = False):
    """Adaptive self-attention on raw arrays: x (Q, d), centers (Q, 3)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != p.d:
        raise ShapeError(f"embeddings must be (Q, {p.d}), got {x.shape}")
    if x.shape[0] < 1:
        raise ShapeError("attention needs at least one query")
    n, dh = x.shape[0], p.head_dim
    q = p.wq(x).reshape(n, p.heads, dh).transpose(1, 0, 2)
    k = p.wk(x).reshape(n, p.heads, dh).transpose(1, 0, 2)
    v = p.wv(x).reshape(n, p.heads, dh).transpose(1, 0, 2)
    logits = q @ k.transpose(0, 2, 1) / np.sqrt(dh)  # (H, Q, Q)

    if p.modulation == "none":
        weights = softmax(logits, axis=-1)
    else:
        D = pairwise_distance(centers)
        eps = compute_epsilons(x, p)
        factor = modulation_kernel(D[None], eps.T[:, :, None], p.modulation)
        weights = modulated_softmax(logits, factor, p.log_space)

    heads = weights @ v  # (H, Q, dh)
    out = p.wo(heads.transpose(1, 0, 2).reshape(n, p.d))
    if return_weights:
        return out, weights
    return out


def adaptive_self_attention(qs, p: AttentionParams) -> np.ndarray:
    """ASA over a QuerySet; returns the (Q, d) attention output (no residual)."""
    return asa_forward(qs.embeddings, qs.centers, p)
