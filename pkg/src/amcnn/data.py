"""Samples, augmentation and synthetic scenes.

A dataset directory holds, per sample ``<id>``:

``<id>.pgm`` / ``<id>.ppm``   image
``<id>.csv``                  head annotations, ``x,y`` per line
``<id>.pmap``                 optional perspective map
``<id>.roi``                  optional ROI polygon, ``x,y`` vertex per line
"""

from __future__ import annotations

import glob
import logging
import os
import zlib
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np

from . import formats
from .density import (
    DOWNSAMPLE,
    DensityMap,
    HeadAnnotations,
    RoiMask,
    SigmaPolicy,
    apply_roi_mask,
    density_from_annotations,
    sum_pool_downsample,
)
from .errors import DataError

logger = logging.getLogger(__name__)


@dataclass
class Sample:
    """An image with its annotations and optional side data.

    ``image`` is ``(H, W)`` luminance in [0, 1], or ``(3, H, W)`` for colour.
    ``density`` is the full-resolution ground truth once attached.
    """

    image: np.ndarray
    annotations: HeadAnnotations
    id: str = ""
    perspective: Optional[np.ndarray] = None
    roi: Optional[RoiMask] = None
    density: Optional[DensityMap] = None

    @property
    def size(self) -> Tuple[int, int]:
        return tuple(self.image.shape[-2:])

    @property
    def count(self) -> int:
        return len(self.annotations)


@dataclass
class AugmentSpec:
    """``crop_count`` random crops of ``crop_fraction`` of each side, plus mirrored copies if ``flip``."""

    crop_count: int = 9
    crop_fraction: float = 0.5
    flip: bool = False

    def __post_init__(self):
        if self.crop_count < 0:
            raise ValueError("crop_count must be >= 0")
        if not 0 < self.crop_fraction <= 1:
            raise ValueError("crop_fraction must be in (0, 1]")


def sample_rng(seed: int, sample_id: str) -> np.random.Generator:
    """Independent stream per (global seed, sample id)."""
    return np.random.default_rng([int(seed), zlib.crc32(sample_id.encode("utf-8"))])


def _in_bounds(points, h, w):
    x, y = points[:, 0], points[:, 1]
    return (x >= 0) & (x < w) & (y >= 0) & (y < h)


def load_sample(image_path, annotation_path, perspective_path=None, roi_path=None, color=False, sample_id=None) -> Sample:
    """Read one sample and crop it to a multiple of 4 on each side.

    Heads outside the (cropped) image are dropped with a warning.
    """
    img = formats.read_pnm(image_path)
    if img.ndim == 3:
        img = np.moveaxis(img, -1, 0) if color else formats.luminance(img)
    elif color:
        img = np.repeat(img[None], 3, axis=0)
    h, w = img.shape[-2:]
    h4, w4 = h - h % 4, w - w % 4
    if h4 == 0 or w4 == 0:
        raise DataError(f"{image_path}: image {h}x{w} is smaller than 4 pixels on a side")
    img = np.ascontiguousarray(img[..., :h4, :w4])
    pts = formats.read_points(annotation_path)
    keep = _in_bounds(pts, h4, w4)
    if not keep.all():
        logger.warning("%s: dropped %d head(s) outside the %dx%d image", annotation_path, int((~keep).sum()), h4, w4)
    persp = None
    if perspective_path:
        persp = formats.read_pmap(perspective_path)
        if persp.shape[0] < h4 or persp.shape[1] < w4:
            raise DataError(f"{perspective_path}: perspective map {persp.shape} smaller than image {h4}x{w4}")
        persp = persp[:h4, :w4].copy()
    roi = None
    if roi_path:
        roi = RoiMask(formats.read_points(roi_path), (h4, w4))
    sid = sample_id if sample_id is not None else formats.stem(image_path)
    return Sample(img, HeadAnnotations(pts[keep], (h4, w4)), sid, persp, roi)


def save_sample(sample: Sample, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    base = os.path.join(directory, sample.id)
    if sample.image.ndim == 3:
        formats.write_ppm(base + ".ppm", np.moveaxis(sample.image, 0, -1))
    else:
        formats.write_pgm(base + ".pgm", sample.image)
    formats.write_points(base + ".csv", sample.annotations.points)
    if sample.perspective is not None:
        formats.write_pmap(base + ".pmap", sample.perspective)
    if sample.roi is not None:
        formats.write_points(base + ".roi", sample.roi.polygon)


def load_dataset(directory, color=False) -> List[Sample]:
    """Every ``*.pgm`` / ``*.ppm`` in ``directory`` with its sidecar files, sorted by id."""
    images = sorted(glob.glob(os.path.join(directory, "*.pgm")) + glob.glob(os.path.join(directory, "*.ppm")))
    if not images:
        raise DataError(f"{directory}: no .pgm/.ppm images found")
    samples = []
    for path in images:
        base = os.path.splitext(path)[0]
        ann = base + ".csv"
        if not os.path.exists(ann):
            raise DataError(f"{path}: missing annotation file {ann}")
        persp = base + ".pmap" if os.path.exists(base + ".pmap") else None
        roi = base + ".roi" if os.path.exists(base + ".roi") else None
        samples.append(load_sample(path, ann, persp, roi, color=color))
    return samples


def attach_density(sample: Sample, policy: SigmaPolicy) -> Sample:
    """Return a copy carrying its full-resolution ground-truth density."""
    if policy.kind == "perspective":
        if sample.perspective is None:
            raise DataError(f"sample {sample.id!r}: perspective sigma policy but no perspective map")
        policy = replace(policy, perspective=sample.perspective)
    return replace(sample, density=density_from_annotations(sample.annotations, policy))


def target_map(sample: Sample) -> np.ndarray:
    """Quarter-resolution ground truth (block sums), zeroed outside the ROI."""
    if sample.density is None:
        raise DataError(f"sample {sample.id!r} has no ground-truth density attached")
    d = sum_pool_downsample(sample.density, DOWNSAMPLE)
    if sample.roi is not None:
        d = apply_roi_mask(d, sample.roi)
    return d.grid


def roi_mask(sample: Sample, scale: int = DOWNSAMPLE) -> Optional[np.ndarray]:
    return None if sample.roi is None else sample.roi.mask(scale)


def crop(sample: Sample, top: int, left: int, height: int, width: int, suffix="") -> Sample:
    """Sub-image; heads with top <= y < top+height and left <= x < left+width are kept and shifted."""
    pts = sample.annotations.points
    shifted = pts - (left, top)
    keep = _in_bounds(shifted, height, width)
    return Sample(
        image=np.ascontiguousarray(sample.image[..., top:top + height, left:left + width]),
        annotations=HeadAnnotations(shifted[keep], (height, width)),
        id=sample.id + suffix,
        perspective=None if sample.perspective is None else sample.perspective[top:top + height, left:left + width].copy(),
        roi=None if sample.roi is None else sample.roi.crop(top, left, height, width),
        density=None if sample.density is None
        else DensityMap(sample.density.grid[top:top + height, left:left + width].copy(), sample.density.scale),
    )


def crop_size(sample: Sample, fraction: float = 0.5) -> Tuple[int, int]:
    h, w = sample.size
    ch = int(h * fraction) // 4 * 4
    cw = int(w * fraction) // 4 * 4
    return ch, cw


def random_crop(sample: Sample, spec: AugmentSpec, rng: np.random.Generator) -> List[Sample]:
    """``spec.crop_count`` crops at random offsets aligned to multiples of 4."""
    h, w = sample.size
    ch, cw = crop_size(sample, spec.crop_fraction)
    if ch < 4 or cw < 4 or ch > h or cw > w:
        raise DataError(f"sample {sample.id!r}: {h}x{w} image too small for a {spec.crop_fraction} crop")
    out = []
    for n in range(spec.crop_count):
        top = 4 * int(rng.integers(0, (h - ch) // 4 + 1))
        left = 4 * int(rng.integers(0, (w - cw) // 4 + 1))
        out.append(crop(sample, top, left, ch, cw, suffix=f"#c{n}"))
    return out


def hflip(sample: Sample) -> Sample:
    """Mirror left-right; a head at x moves to W-1-x."""
    h, w = sample.size
    pts = sample.annotations.points.copy()
    # heads in the last half pixel (W-1, W) would land at negative x; pin them to the first column
    pts[:, 0] = np.maximum((w - 1) - pts[:, 0], 0.0)
    return Sample(
        image=np.ascontiguousarray(sample.image[..., ::-1]),
        annotations=HeadAnnotations(pts, (h, w)),
        id=sample.id[:-2] if sample.id.endswith("#f") else sample.id + "#f",
        perspective=None if sample.perspective is None else np.ascontiguousarray(sample.perspective[:, ::-1]),
        roi=None if sample.roi is None else sample.roi.hflip(),
        density=None if sample.density is None
        else DensityMap(np.ascontiguousarray(sample.density.grid[:, ::-1]), sample.density.scale),
    )


def augment(sample: Sample, spec: AugmentSpec, rng: np.random.Generator) -> List[Sample]:
    """Crops (or the whole image when ``crop_count`` is 0) followed by their mirror images when ``flip``."""
    base = random_crop(sample, spec, rng) if spec.crop_count > 0 else [sample]
    if spec.flip:
        return base + [hflip(p) for p in base]
    return base


@dataclass
class SynthConfig:
    size: Tuple[int, int] = (128, 128)
    count_range: Tuple[int, int] = (5, 20)
    radius_range: Tuple[float, float] = (3.0, 6.0)
    noise: float = 0.02
    max_tries: int = 2000

    def __post_init__(self):
        self.size = (int(self.size[0]), int(self.size[1]))
        if self.size[0] % 4 or self.size[1] % 4:
            raise ValueError(f"synthetic scene size {self.size} must be divisible by 4")
        if self.count_range[0] < 0 or self.count_range[1] < self.count_range[0]:
            raise ValueError(f"bad count range {self.count_range}")
        if not 1.5 < self.radius_range[0] <= self.radius_range[1]:
            raise ValueError(f"bad radius range {self.radius_range}")


HEAD_LEVEL = 0.12
RIM_LEVEL = 0.95
RIM_WIDTH = 1.5


def _background(rng, h, w):
    """Smooth random texture in roughly [0.45, 0.85]."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    tex = np.zeros((h, w))
    for _ in range(4):
        fy, fx = rng.uniform(0.02, 0.12, 2)
        phase = rng.uniform(0, 2 * np.pi)
        tex += np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    tex = (tex - tex.min()) / max(np.ptp(tex), 1e-12)
    return 0.45 + 0.4 * tex


def synth_scene(config: SynthConfig, rng: np.random.Generator, sample_id: str = "synth") -> Sample:
    """Dark disc heads with bright rims on a textured background, at non-overlapping random spots."""
    h, w = config.size
    n = int(rng.integers(config.count_range[0], config.count_range[1] + 1))
    centres, radii = [], []
    tries = 0
    while len(centres) < n:
        tries += 1
        if tries > config.max_tries:
            raise DataError(f"could not place {n} non-overlapping heads in {h}x{w} after {config.max_tries} tries")
        r = float(rng.uniform(*config.radius_range))
        x = float(rng.uniform(r, w - 1 - r))
        y = float(rng.uniform(r, h - 1 - r))
        if all((x - cx) ** 2 + (y - cy) ** 2 >= (r + cr + 2.0) ** 2 for (cx, cy), cr in zip(centres, radii)):
            centres.append((x, y))
            radii.append(r)
    img = _background(rng, h, w)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for (x, y), r in zip(centres, radii):
        d = np.hypot(xx - x, yy - y)
        img[d <= r] = RIM_LEVEL
        img[d <= r - RIM_WIDTH] = HEAD_LEVEL
    if config.noise > 0:
        img = img + rng.normal(0.0, config.noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return Sample(img, HeadAnnotations(np.array(centres).reshape(-1, 2), (h, w)), sample_id)


def synth_dataset(n: int, config: SynthConfig, seed: int, prefix="scene") -> List[Sample]:
    return [synth_scene(config, sample_rng(seed, f"{prefix}{i:04d}"), f"{prefix}{i:04d}") for i in range(n)]
