"""Ground-truth density maps from head annotations.

Each head contributes a unit-mass isotropic Gaussian, so a map integrates to
the number of annotated people.  Kernel width comes from one of three
policies: geometry-adaptive (nearest-neighbour spacing), perspective-map
driven, or a fixed width for sparse scenes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from matplotlib.path import Path as _PolyPath
from scipy.spatial import cKDTree

from .errors import DataError, ShapeError

logger = logging.getLogger(__name__)

TRUNCATE = 4.0
DOWNSAMPLE = 4
ROI_MAJORITY = 8


@dataclass
class HeadAnnotations:
    """Head centres in pixel coordinates: x is the column, y the row; pixel (i, j) sits at (x=j, y=i)."""

    points: np.ndarray
    image_size: Tuple[int, int]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        h, w = self.image_size
        x, y = self.points[:, 0], self.points[:, 1]
        bad = ~((x >= 0) & (x < w) & (y >= 0) & (y < h))
        if bad.any():
            raise DataError(f"{int(bad.sum())} head(s) outside {h}x{w} image, first at {tuple(self.points[bad][0])}")

    def __len__(self):
        return len(self.points)


@dataclass
class DensityMap:
    grid: np.ndarray
    scale: int = 1

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)

    @property
    def count(self) -> float:
        return float(self.grid.sum())

    @property
    def shape(self):
        return self.grid.shape


@dataclass
class SigmaPolicy:
    """How kernel widths are chosen.

    ``kind`` is ``"knn"`` (``beta`` times the mean distance to the two nearest
    other heads), ``"perspective"`` (0.2 times the perspective value at the
    head) or ``"fixed"``.  ``fixed_sigma`` doubles as the fallback when a knn
    scene has fewer than three heads.
    """

    kind: str = "knn"
    beta: float = 0.3
    fixed_sigma: float = 4.0
    perspective: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("knn", "perspective", "fixed"):
            raise ValueError(f"unknown sigma policy {self.kind!r}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not self.fixed_sigma > 0:
            raise ValueError(f"fixed_sigma must be positive, got {self.fixed_sigma}")
        if self.perspective is not None:
            self.perspective = np.asarray(self.perspective, dtype=np.float64)
            if not np.all(self.perspective > 0):
                raise ValueError("perspective map must be strictly positive")

    @classmethod
    def parse(cls, text: str) -> "SigmaPolicy":
        """Parse ``knn[:beta]``, ``persp`` or ``fixed[:sigma]``."""
        kind, _, arg = text.partition(":")
        try:
            if kind == "knn":
                return cls("knn", beta=float(arg) if arg else 0.3)
            if kind in ("persp", "perspective"):
                return cls("perspective")
            if kind == "fixed":
                return cls("fixed", fixed_sigma=float(arg) if arg else 4.0)
        except ValueError as exc:
            raise ValueError(f"bad sigma policy {text!r}: {exc}") from None
        raise ValueError(f"bad sigma policy {text!r}; expected knn:<beta>, persp or fixed:<sigma>")

    def __str__(self):
        if self.kind == "knn":
            return f"knn:{self.beta!r}"
        if self.kind == "fixed":
            return f"fixed:{self.fixed_sigma!r}"
        return "persp"


class TooFewHeadsError(DataError):
    pass


def knn_sigmas(ann: HeadAnnotations, beta: float = 0.3) -> np.ndarray:
    """``beta`` times the mean distance from each head to its two nearest other heads."""
    pts = ann.points
    if len(pts) < 3:
        raise TooFewHeadsError(f"knn sigma needs at least 3 heads, got {len(pts)}")
    dist, _ = cKDTree(pts).query(pts, k=3)
    # column 0 is the point itself (distance 0); a duplicate shows up as a second 0
    return beta * dist[:, 1:].mean(axis=1)


def perspective_sigmas(ann: HeadAnnotations, perspective) -> np.ndarray:
    P = np.asarray(perspective, dtype=np.float64)
    if len(ann) == 0:
        return np.zeros(0)
    if not np.all(P > 0):
        raise ValueError("perspective map must be strictly positive")
    x, y = ann.points[:, 0], ann.points[:, 1]
    out = (x < 0) | (x >= P.shape[1]) | (y < 0) | (y >= P.shape[0])
    if out.any():
        raise DataError(f"head at {tuple(ann.points[out][0])} lies outside the {P.shape[0]}x{P.shape[1]} perspective map")
    # nearest pixel, clamped so heads in the last half-pixel stay on the map
    col = np.minimum(np.floor(x + 0.5).astype(int), P.shape[1] - 1)
    row = np.minimum(np.floor(y + 0.5).astype(int), P.shape[0] - 1)
    return 0.2 * P[row, col]


def sigmas_for(ann: HeadAnnotations, policy: SigmaPolicy) -> np.ndarray:
    """Apply a policy, falling back to ``fixed_sigma`` (with a warning) for sparse knn scenes."""
    if policy.kind == "fixed":
        return np.full(len(ann), float(policy.fixed_sigma))
    if policy.kind == "perspective":
        if policy.perspective is None:
            raise DataError("perspective sigma policy needs a perspective map")
        return perspective_sigmas(ann, policy.perspective)
    try:
        return knn_sigmas(ann, policy.beta)
    except TooFewHeadsError:
        if len(ann):
            logger.warning("only %d head(s): using fixed sigma %g instead of knn", len(ann), policy.fixed_sigma)
        return np.full(len(ann), float(policy.fixed_sigma))


def splat_density(ann: HeadAnnotations, sigmas, size=None) -> DensityMap:
    """Sum one truncated, renormalized Gaussian per head onto an (H, W) grid.

    Kernels are cut at radius 4 sigma and rescaled so that the in-bounds
    discrete mass of every head is exactly one.
    """
    h, w = ann.image_size if size is None else (int(size[0]), int(size[1]))
    sigmas = np.asarray(sigmas, dtype=np.float64).reshape(-1)
    if len(sigmas) != len(ann):
        raise ShapeError(f"{len(sigmas)} sigmas for {len(ann)} heads")
    if np.any(~(sigmas > 0)):
        raise ValueError(f"sigmas must be positive, got min {sigmas.min()}")
    grid = np.zeros((h, w))
    for (x, y), s in zip(ann.points, sigmas):
        r = TRUNCATE * s
        j0, j1 = max(0, math.ceil(x - r)), min(w - 1, math.floor(x + r))
        i0, i1 = max(0, math.ceil(y - r)), min(h - 1, math.floor(y + r))
        if j0 > j1 or i0 > i1:
            _unit_at_nearest(grid, x, y)
            continue
        dx = np.arange(j0, j1 + 1) - x
        dy = np.arange(i0, i1 + 1) - y
        d2 = dy[:, None] ** 2 + dx[None, :] ** 2
        k = np.where(d2 <= r * r, np.exp(-d2 / (2.0 * s * s)), 0.0)
        mass = k.sum()
        if not mass > 0:
            _unit_at_nearest(grid, x, y)
            continue
        grid[i0:i1 + 1, j0:j1 + 1] += k / mass
    return DensityMap(grid, scale=1)


def _unit_at_nearest(grid, x, y):
    h, w = grid.shape
    i = min(h - 1, max(0, int(math.floor(y + 0.5))))
    j = min(w - 1, max(0, int(math.floor(x + 0.5))))
    grid[i, j] += 1.0


def density_from_annotations(ann: HeadAnnotations, policy: SigmaPolicy) -> DensityMap:
    return splat_density(ann, sigmas_for(ann, policy))


def sum_pool_downsample(dmap: DensityMap, factor: int = DOWNSAMPLE) -> DensityMap:
    """Block-sum pooling; preserves the total."""
    g = dmap.grid
    h, w = g.shape
    if h % factor or w % factor:
        raise ShapeError(f"{h}x{w} map is not divisible by {factor}")
    pooled = g.reshape(h // factor, factor, w // factor, factor).sum(axis=(1, 3))
    return DensityMap(pooled, scale=dmap.scale * factor)


class RoiMask:
    """A polygonal region of interest rasterized at full and quarter resolution.

    A pixel is inside when its centre is inside the polygon.  A quarter-scale
    cell is inside when at least 8 of its 16 source pixels are.
    """

    def __init__(self, polygon, image_size, mask=None):
        self.polygon = np.asarray(polygon, dtype=np.float64).reshape(-1, 2)
        self.image_size = (int(image_size[0]), int(image_size[1]))
        h, w = self.image_size
        if mask is None:
            if len(self.polygon) < 3:
                raise DataError(f"ROI polygon needs at least 3 vertices, got {len(self.polygon)}")
            yy, xx = np.mgrid[0:h, 0:w]
            centres = np.column_stack([xx.ravel(), yy.ravel()]).astype(np.float64)
            mask = _PolyPath(self.polygon).contains_points(centres).reshape(h, w)
        self.masks = {1: np.asarray(mask, dtype=np.float64)}
        if h % DOWNSAMPLE == 0 and w % DOWNSAMPLE == 0:
            votes = self.masks[1].reshape(h // 4, 4, w // 4, 4).sum(axis=(1, 3))
            self.masks[DOWNSAMPLE] = (votes >= ROI_MAJORITY).astype(np.float64)

    @classmethod
    def full(cls, image_size):
        h, w = image_size
        return cls([(-0.5, -0.5), (w - 0.5, -0.5), (w - 0.5, h - 0.5), (-0.5, h - 0.5)], image_size)

    def mask(self, scale: int = 1) -> np.ndarray:
        try:
            return self.masks[scale]
        except KeyError:
            raise ShapeError(f"ROI has no mask at scale {scale}") from None

    def crop(self, top, left, height, width) -> "RoiMask":
        m = self.masks[1][top:top + height, left:left + width]
        return RoiMask(self.polygon - (left, top), (height, width), mask=m)

    def hflip(self) -> "RoiMask":
        w = self.image_size[1]
        poly = self.polygon.copy()
        poly[:, 0] = (w - 1) - poly[:, 0]
        return RoiMask(poly, self.image_size, mask=self.masks[1][:, ::-1])

    def contains(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        h, w = self.image_size
        col = np.clip(np.floor(pts[:, 0] + 0.5).astype(int), 0, w - 1)
        row = np.clip(np.floor(pts[:, 1] + 0.5).astype(int), 0, h - 1)
        return self.masks[1][row, col] > 0


def apply_roi_mask(dmap: DensityMap, roi: RoiMask) -> DensityMap:
    m = roi.mask(dmap.scale)
    if m.shape != dmap.grid.shape:
        raise ShapeError(f"ROI mask {m.shape} does not match density map {dmap.grid.shape} at scale {dmap.scale}")
    return DensityMap(dmap.grid * m, scale=dmap.scale)
