import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amcnn.density import (
    DensityMap,
    HeadAnnotations,
    RoiMask,
    SigmaPolicy,
    TooFewHeadsError,
    apply_roi_mask,
    density_from_annotations,
    knn_sigmas,
    perspective_sigmas,
    sigmas_for,
    splat_density,
    sum_pool_downsample,
)
from amcnn.errors import DataError, ShapeError
from amcnn.formats import read_dmap, write_dmap


def knn_brute(points, beta):
    """O(n^2) oracle: mean of the two smallest distances to other points."""
    out = []
    for i, p in enumerate(points):
        d = sorted(math.dist(p, q) for j, q in enumerate(points) if j != i)
        out.append(beta * (d[0] + d[1]) / 2)
    return np.array(out)


class TestKnnSigmas:
    def test_right_triangle(self):
        ann = HeadAnnotations([(0, 0), (3, 0), (0, 4)], (10, 10))
        np.testing.assert_allclose(knn_sigmas(ann, 0.3), [1.05, 1.2, 1.35], rtol=0, atol=1e-12)

    def test_collinear_middle(self):
        d, beta = 2.5, 0.3
        ann = HeadAnnotations([(1, 1), (1 + d, 1), (1 + 2 * d, 1)], (10, 10))
        assert knn_sigmas(ann, beta)[1] == pytest.approx(beta * d, abs=1e-12)

    def test_duplicate_point(self):
        d, beta = 4.0, 0.3
        ann = HeadAnnotations([(2, 2), (2, 2), (2 + d, 2)], (10, 10))
        assert knn_sigmas(ann, beta)[0] == pytest.approx(beta * d / 2, abs=1e-12)

    def test_too_few_heads_signalled(self):
        with pytest.raises(TooFewHeadsError):
            knn_sigmas(HeadAnnotations([(1, 1), (2, 2)], (5, 5)), 0.3)

    def test_fallback_is_fixed_sigma_with_warning(self, caplog):
        ann = HeadAnnotations([(1, 1), (2, 2)], (5, 5))
        with caplog.at_level("WARNING"):
            s = sigmas_for(ann, SigmaPolicy("knn", fixed_sigma=4.0))
        assert s.tolist() == [4.0, 4.0]
        assert "fixed sigma" in caplog.text

    def test_matches_brute_force(self):
        rng = np.random.default_rng(5)
        pts = rng.uniform(0, 50, size=(40, 2))
        ann = HeadAnnotations(pts, (50, 50))
        np.testing.assert_allclose(knn_sigmas(ann, 0.3), knn_brute(pts, 0.3), rtol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-20, 20), st.floats(-20, 20), st.floats(0.1, 10))
    def test_translation_invariant_scale_equivariant(self, seed, tx, ty, s):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(30, 60, size=(12, 2))
        base = knn_sigmas(HeadAnnotations(pts, (1000, 1000)), 0.3)
        moved = knn_sigmas(HeadAnnotations(pts + (tx, ty), (1000, 1000)), 0.3)
        scaled = knn_sigmas(HeadAnnotations(pts * s, (1000, 1000)), 0.3)
        np.testing.assert_allclose(moved, base, rtol=1e-9)
        np.testing.assert_allclose(scaled, s * base, rtol=1e-9)


class TestPerspectiveSigmas:
    def test_constant_map(self):
        ann = HeadAnnotations([(1.2, 3.7), (5, 5)], (8, 8))
        assert perspective_sigmas(ann, np.full((8, 8), 10.0)).tolist() == [2.0, 2.0]

    def test_single_head(self):
        P = np.full((8, 8), 5.0)
        P[4, 6] = 20.0
        ann = HeadAnnotations([(6.4, 3.6)], (8, 8))
        assert perspective_sigmas(ann, P).tolist() == [4.0]

    def test_empty(self):
        assert len(perspective_sigmas(HeadAnnotations(np.zeros((0, 2)), (4, 4)), np.ones((4, 4)))) == 0

    def test_outside_map_rejected(self):
        with pytest.raises(DataError):
            perspective_sigmas(HeadAnnotations([(7.0, 7.0)], (8, 8)), np.ones((4, 4)))


def gaussian_brute(x, y, s, h, w):
    """Unnormalized truncated Gaussian evaluated pixel by pixel."""
    g = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            d2 = (j - x) ** 2 + (i - y) ** 2
            if d2 <= (4 * s) ** 2:
                g[i, j] = math.exp(-d2 / (2 * s * s))
    return g


class TestSplat:
    def test_single_centre(self):
        d = splat_density(HeadAnnotations([(32, 32)], (64, 64)), [4.0], (64, 64))
        assert abs(d.count - 1.0) <= 1e-9

    def test_two_heads(self):
        d = splat_density(HeadAnnotations([(10, 20), (40.5, 3.2)], (64, 64)), [4.0, 2.5], (64, 64))
        assert abs(d.count - 2.0) <= 1e-9

    def test_corner_is_renormalized(self):
        d = splat_density(HeadAnnotations([(0, 0)], (64, 64)), [4.0], (64, 64))
        brute = gaussian_brute(0, 0, 4.0, 64, 64)
        # the clipped kernel keeps about 30% of the full mass (a quarter plus the edge row and column)
        full = gaussian_brute(32, 32, 4.0, 64, 64).sum()
        assert 0.25 < brute.sum() / full < 0.35
        np.testing.assert_allclose(d.grid, brute / brute.sum(), rtol=0, atol=1e-15)
        assert abs(d.count - 1.0) <= 1e-9

    def test_matches_brute_force_shape(self):
        d = splat_density(HeadAnnotations([(7.3, 9.6)], (20, 24)), [1.7])
        brute = gaussian_brute(7.3, 9.6, 1.7, 20, 24)
        np.testing.assert_allclose(d.grid, brute / brute.sum(), rtol=0, atol=1e-15)

    def test_nonpositive_sigma_rejected(self):
        with pytest.raises(ValueError):
            splat_density(HeadAnnotations([(1, 1)], (4, 4)), [0.0])

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            splat_density(HeadAnnotations([(1, 1)], (4, 4)), [1.0, 2.0])

    def test_tiny_sigma_keeps_unit_mass(self):
        d = splat_density(HeadAnnotations([(3.5, 2.5)], (8, 8)), [0.05])
        assert d.count == 1.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 60), st.sampled_from(["knn", "fixed", "perspective"]))
    def test_count_conservation(self, seed, n, kind):
        rng = np.random.default_rng(seed)
        h, w = 48, 64
        pts = np.column_stack([rng.uniform(0, w - 1e-9, n), rng.uniform(0, h - 1e-9, n)])
        P = rng.uniform(5, 40, size=(h, w)) if kind == "perspective" else None
        d = density_from_annotations(HeadAnnotations(pts, (h, w)), SigmaPolicy(kind, perspective=P))
        assert abs(d.count - n) <= 1e-9 * max(1, n)
        assert np.all(d.grid >= 0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 30))
    def test_flip_equivariance(self, seed, n):
        rng = np.random.default_rng(seed)
        h, w = 32, 40
        # quarter-pixel coordinates keep W-1-x exact in binary
        pts = np.column_stack([rng.integers(0, 4 * (w - 1), n) / 4, rng.integers(0, 4 * (h - 1), n) / 4])
        sig = rng.uniform(0.5, 5, n)
        flipped = pts.copy()
        flipped[:, 0] = (w - 1) - flipped[:, 0]
        a = splat_density(HeadAnnotations(pts, (h, w)), sig).grid
        b = splat_density(HeadAnnotations(flipped, (h, w)), sig).grid
        np.testing.assert_allclose(b, a[:, ::-1], rtol=0, atol=1e-12)


class TestDownsample:
    def test_constant_block(self):
        d = sum_pool_downsample(DensityMap(np.full((4, 4), 0.0625)))
        assert d.grid.tolist() == [[1.0]] and d.scale == 4

    def test_zero(self):
        assert not sum_pool_downsample(DensityMap(np.zeros((8, 12)))).grid.any()

    def test_random_against_block_loops(self):
        g = np.random.default_rng(0).random((8, 8))
        d = sum_pool_downsample(DensityMap(g))
        brute = np.array([[sum(g[4 * a + i, 4 * b + j] for i in range(4) for j in range(4)) for b in range(2)] for a in range(2)])
        np.testing.assert_allclose(d.grid, brute, rtol=0, atol=1e-14)
        assert abs(d.count - g.sum()) <= 1e-12

    def test_indivisible_rejected(self):
        with pytest.raises(ShapeError):
            sum_pool_downsample(DensityMap(np.zeros((6, 8))))


class TestRoi:
    def test_all_inside(self):
        d = DensityMap(np.random.default_rng(1).random((8, 8)))
        assert np.array_equal(apply_roi_mask(d, RoiMask.full((8, 8))).grid, d.grid)

    def test_all_outside(self):
        roi = RoiMask([(100, 100), (110, 100), (110, 110)], (8, 8))
        assert not apply_roi_mask(DensityMap(np.ones((8, 8))), roi).grid.any()

    def test_half_plane(self):
        h, w = 16, 16
        roi = RoiMask([(-0.5, -0.5), (w, -0.5), (w, 7.5), (-0.5, 7.5)], (h, w))
        uniform = DensityMap(np.full((h, w), 1.0 / (h * w)))
        masked = apply_roi_mask(uniform, roi)
        assert int(roi.mask(1).sum()) == 8 * 16
        assert abs(masked.count - 0.5) <= 1.0 / h  # within one row's mass
        # quarter-scale: rows 0..1 fully inside, rows 2..3 outside
        q = apply_roi_mask(sum_pool_downsample(uniform), roi)
        assert q.count == pytest.approx(0.5, abs=1e-15)

    def test_block_majority(self):
        m = np.zeros((4, 8))
        m[:2, :4] = 1  # 8 of 16 -> inside
        m[:1, 4:7] = 1  # 3 of 16 -> outside
        roi = RoiMask(np.zeros((0, 2)), (4, 8), mask=m)
        assert roi.mask(4).tolist() == [[1.0, 0.0]]

    def test_scale_mismatch(self):
        roi = RoiMask.full((8, 8))
        with pytest.raises(ShapeError):
            apply_roi_mask(DensityMap(np.ones((2, 2)), scale=2), roi)

    def test_flip_mirrors_mask(self):
        roi = RoiMask([(0, 0), (3, 0), (3, 7), (0, 7)], (8, 8))
        assert np.array_equal(roi.hflip().mask(1), roi.mask(1)[:, ::-1])


def test_dmap_roundtrip(tmp_path):
    g = np.random.default_rng(3).random((5, 7))
    write_dmap(tmp_path / "a.dmap", g, scale=4)
    raw = (tmp_path / "a.dmap").read_bytes()
    assert raw.startswith(b"DMAP v1 5 7 4\n") and len(raw) == 14 + 35 * 8
    back, scale = read_dmap(tmp_path / "a.dmap")
    assert scale == 4 and np.array_equal(back, g)


def test_dmap_truncated(tmp_path):
    write_dmap(tmp_path / "a.dmap", np.ones((3, 3)))
    p = tmp_path / "a.dmap"
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(DataError):
        read_dmap(p)


def test_policy_parse():
    assert SigmaPolicy.parse("knn:0.3").beta == 0.3
    assert SigmaPolicy.parse("fixed:4").fixed_sigma == 4.0
    assert SigmaPolicy.parse("persp").kind == "perspective"
    with pytest.raises(ValueError):
        SigmaPolicy.parse("gauss:2")
