"""Analytic-vs-central-difference checks for the differentiable kernels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import asa_kernel_grad, modulation_kernel
from .errors import MissingReferenceError
from .nn import softmax, softmax_jacobian
from .sampling import FeatureMap, bilinear_sample, bilinear_sample_grad

KERNELS = ("gaussian", "laplacian", "reciprocal", "softmax", "bilinear")
DEFAULT_STEPS = {"gaussian": 1e-5, "laplacian": 1e-5, "reciprocal": 1e-5,
                 "softmax": 1e-5, "bilinear": 1e-4}
TOLERANCE = 1e-5
# magnitudes below this are compared absolutely (relative error is noise there)
REL_FLOOR = 1e-6


@dataclass(frozen=True)
class GradReport:
    kernel: str
    probes: int
    max_rel_error: float
    step: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def to_dict(self) -> dict:
        return {"kernel": self.kernel, "probes": self.probes, "step": self.step,
                "max_rel_error": self.max_rel_error, "tolerance": self.tolerance,
                "passed": self.passed}


def central_difference(f, x: float, step: float) -> float:
    return (f(x + step) - f(x - step)) / (2.0 * step)


def relative_error(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return np.abs(analytic - numeric) / scale


def _check_modulation(kind, trials, step, rng):
    errs = []
    for _ in range(trials):
        eps = rng.uniform(0.5, 5.0)
        D = eps * rng.uniform(0.05, 2.5)
        gD, ge = asa_kernel_grad(D, eps, kind)
        nD = central_difference(lambda t: float(modulation_kernel(t, eps, kind)), D, step)
        ne = central_difference(lambda t: float(modulation_kernel(D, t, kind)), eps, step)
        errs.append(relative_error([gD, ge], [nD, ne]).max())
    return max(errs)


def _check_softmax(trials, step, rng):
    errs = []
    for _ in range(trials):
        x = rng.normal(0.0, 2.0, size=8)
        jac = softmax_jacobian(x)
        num = np.empty((8, 8))
        for j in range(8):
            e = np.zeros(8)
            e[j] = step
            num[:, j] = (softmax(x + e) - softmax(x - e)) / (2.0 * step)
        errs.append(relative_error(jac, num).max())
    return max(errs)


def _check_bilinear(trials, step, rng):
    """Probes stay at least 0.05 level pixels from the integer kinks."""
    errs = []
    for _ in range(trials):
        level = int(rng.integers(4))
        scale = 0.25 / 2**level
        h, w = 6, 9
        fm = FeatureMap(0, level, rng.normal(size=(3, h, w)).astype(np.float32))
        while True:
            x = rng.uniform(-0.9, w - 0.1)
            y = rng.uniform(-0.9, h - 0.1)
            fx, fy = x - np.floor(x), y - np.floor(y)
            margin = 0.05
            if margin < fx < 1 - margin and margin < fy < 1 - margin:
                break
        u, v = (x + 0.5) / scale, (y + 0.5) / scale
        _, gu, gv = bilinear_sample_grad(fm, u, v)
        nu = (bilinear_sample(fm, u + step, v) - bilinear_sample(fm, u - step, v)) / (2 * step)
        nv = (bilinear_sample(fm, u, v + step) - bilinear_sample(fm, u, v - step)) / (2 * step)
        errs.append(max(relative_error(gu, nu).max(), relative_error(gv, nv).max()))
    return max(errs)


def check_gradients(kernel: str, trials: int = 100, step: float | None = None,
                    seed: int = 0) -> GradReport:
    """Compare analytic gradients with central differences over ``trials`` random probes."""
    if kernel not in KERNELS:
        raise MissingReferenceError(f"unknown kernel {kernel!r}; choose from {KERNELS}")
    step = DEFAULT_STEPS[kernel] if step is None else step
    rng = np.random.default_rng(seed)
    if kernel == "softmax":
        err = _check_softmax(trials, step, rng)
    elif kernel == "bilinear":
        err = _check_bilinear(trials, step, rng)
    else:
        err = _check_modulation(kernel, trials, step, rng)
    return GradReport(kernel, trials, float(err), step)
