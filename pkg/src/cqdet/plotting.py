"""Report figures written next to the CLI's line-delimited output."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Polygon  # noqa: E402

from .attention import modulation_kernel  # noqa: E402

KIND_STYLE = {
    "global": dict(color="0.75", s=4, marker="."),
    "adaptive": dict(color="tab:orange", s=18, marker="^"),
    "temporal": dict(color="tab:blue", s=10, marker="s"),
}

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _figure(width=5.0, height=None):
    if height is None:
        height = width * (math.sqrt(5) - 1.0) / 2.0
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(width, height))
    return fig, ax


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(RC):
        fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def box_footprint(state) -> np.ndarray:
    """BEV rectangle corners (4, 2) of a (x, y, z, w, l, h, theta, ...) state."""
    x, y, _, w, l, _, theta = state[:7]
    local = np.array([[w, l], [w, -l], [-w, -l], [-w, l]]) * 0.5
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


def plot_bev(frame, prediction=None, rig=None, path=None, score_min: float = 0.5):
    """Ground-truth footprints, pre-decoder queries by kind and confident predictions."""
    fig, ax = _figure(5.5, 5.5)
    for state in frame.boxes:
        ax.add_patch(Polygon(box_footprint(state), closed=True, fill=False, lw=1.2, ec="k"))
    if prediction is not None:
        init = prediction.initial
        if init is not None:
            for kind, style in KIND_STYLE.items():
                mask = np.array([k == kind for k in init.kinds], dtype=bool)
                if mask.any():
                    ax.scatter(init.states[mask, 0], init.states[mask, 1], label=f"{kind} query",
                               **style)
        keep = prediction.scores >= score_min
        if keep.any():
            ax.scatter(prediction.states[keep, 0], prediction.states[keep, 1], s=14,
                       facecolors="none", edgecolors="tab:red", label=f"prediction (score>={score_min})")
    if rig is not None:
        pos = np.array([cam.position for cam in rig])
        ax.scatter(pos[:, 0], pos[:, 1], marker="*", s=40, c="tab:green", label="cameras")
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(f"frame {frame.index}")
    if ax.get_legend_handles_labels()[0]:
        ax.legend(loc="upper left", bbox_to_anchor=(1.01, 1.0), frameon=False)
    if path is not None:
        return _save(fig, path)
    return fig


def plot_kernels(path=None, eps: float = 1.0, d_max: float = 5.0):
    """The three distance modulation variants against distance for one scale."""
    fig, ax = _figure()
    D = np.linspace(0.0, d_max, 300)
    for kind in ("gaussian", "laplacian", "reciprocal"):
        ax.plot(D, modulation_kernel(D, eps, kind), label=kind)
    ax.set_xlabel("distance D [m]")
    ax.set_ylabel("modulation factor")
    ax.set_title(f"distance modulation, eps = {eps:g} m")
    ax.set_ylim(0, 1.05)
    ax.legend(frameon=False)
    if path is not None:
        return _save(fig, path)
    return fig


def plot_attention(weights, path=None, head: int = 0):
    """Heat map of one head's attention matrix."""
    fig, ax = _figure(4.5, 4.0)
    im = ax.imshow(np.asarray(weights)[head], cmap="viridis", interpolation="nearest")
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.set_xlabel("key query")
    ax.set_ylabel("attending query")
    ax.set_title(f"attention weights, head {head}")
    if path is not None:
        return _save(fig, path)
    return fig


def plot_metrics(records, path=None):
    """Recall / precision per frame from a list of metric dicts."""
    fig, ax = _figure()
    frames = [r["frame"] for r in records]
    for key in ("recall", "precision"):
        ax.plot(frames, [r[key] for r in records], marker="o", label=key)
    ax.set_xlabel("frame")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(frameon=False)
    if path is not None:
        return _save(fig, path)
    return fig


def plot_gradcheck(reports, path=None):
    fig, ax = _figure()
    names = [r.kernel for r in reports]
    errs = [max(r.max_rel_error, 1e-18) for r in reports]
    ax.bar(names, np.log10(errs), color=["tab:green" if r.passed else "tab:red" for r in reports])
    ax.axhline(math.log10(reports[0].tolerance), color="k", ls="--", lw=1, label="tolerance")
    ax.set_ylabel("log10 max relative error")
    ax.legend(frameon=False)
    if path is not None:
        return _save(fig, path)
    return fig
