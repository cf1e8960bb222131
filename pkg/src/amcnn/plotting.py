"""Report figures.  Uses the non-interactive Agg backend; every function writes one PNG."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .losses import EvalReport  # noqa: E402

# no version string or timestamp in the file, so reruns give identical bytes
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def count_scatter(report: EvalReport, path, title="Predicted vs ground-truth count"):
    gt = np.array([y for y, _ in report.per_image])
    pred = np.array([p for _, p in report.per_image])
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.scatter(gt, pred, s=14)
    hi = max(gt.max(initial=0.0), pred.max(initial=0.0), 1.0) * 1.05
    ax.plot([0, hi], [0, hi], "k--", lw=0.8)
    ax.set_xlim(0, hi)
    ax.set_ylim(0, hi)
    ax.set_xlabel("ground-truth count")
    ax.set_ylabel("predicted count")
    ax.set_title(f"{title}\nMAE {report.mae:.3g}  MSE {report.mse:.3g}", fontsize=9)
    _save(fig, path)


def probability_overlay(image, prob_map, path, points=None, title="Probability map"):
    """Probability map upsampled to image size and blended over the grey image."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0)
    h, w = img.shape
    m = np.asarray(prob_map, dtype=np.float64)
    fy, fx = h // m.shape[0], w // m.shape[1]
    up = np.kron(m, np.ones((fy, fx)))
    fig, ax = plt.subplots(figsize=(5, 5 * h / w))
    ax.imshow(img, cmap="gray", vmin=0, vmax=1)
    ax.imshow(up, cmap="jet", alpha=0.45, extent=(-0.5, up.shape[1] - 0.5, up.shape[0] - 0.5, -0.5))
    if points is not None and len(points):
        pts = np.asarray(points)
        ax.scatter(pts[:, 0], pts[:, 1], s=6, c="white", marker="+", linewidths=0.6)
    ax.set_axis_off()
    ax.set_title(title, fontsize=9)
    _save(fig, path)


def training_curve(log, path):
    """Loss per step, one line per stage, log scale."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    stages = list(dict.fromkeys(r.stage for r in log.rows))
    for stage in stages:
        rows = [r for r in log.rows if r.stage == stage]
        ax.plot([r.step for r in rows], [max(r.loss, 1e-300) for r in rows], lw=0.8, label=stage)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if stages:
        ax.legend(fontsize=7)
    _save(fig, path)
