import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amcnn.autodiff import Tensor, grad_check
from amcnn.errors import ShapeError
from amcnn.losses import (
    LossConfig,
    combined_loss,
    euclidean_loss,
    mae_mse,
    masked_count,
    read_report,
    relative_deviation_loss,
)


class TestEuclidean:
    def test_equal_maps(self):
        g = np.random.default_rng(0).random((4, 4))
        assert euclidean_loss([g], [g]).item() == 0.0

    def test_hand_value(self):
        p = np.zeros((2, 2))
        g = np.zeros((2, 2))
        g[1, 0] = 2.0
        assert euclidean_loss([p], [g]).item() == 1.0

    def test_homogeneous(self):
        rng = np.random.default_rng(1)
        p, g = rng.random((3, 5)), rng.random((3, 5))
        base = euclidean_loss([p], [g]).item()
        assert euclidean_loss([3 * p], [3 * g]).item() == pytest.approx(9 * base, rel=1e-14)

    def test_batch_mean_and_per_sample_pixels(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((2, 2)), rng.random((4, 6))
        za, zb = np.zeros((2, 2)), np.zeros((4, 6))
        expected = 0.5 * ((a ** 2).sum() / 4 + (b ** 2).sum() / 24)
        assert euclidean_loss([a, b], [za, zb]).item() == pytest.approx(expected, rel=1e-14)

    def test_mask_excludes_pixels(self):
        p = np.array([[1.0, 5.0], [1.0, 5.0]])
        g = np.zeros((2, 2))
        m = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert euclidean_loss([p], [g], [m]).item() == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            euclidean_loss([np.zeros((2, 2))], [np.zeros((2, 3))])

    def test_gradient(self):
        rng = np.random.default_rng(3)
        g = rng.random((1, 4, 4))
        assert grad_check(lambda p: euclidean_loss([p], [g]), rng.random((1, 4, 4))) <= 1e-6


class TestRelativeDeviation:
    def test_hand_value(self):
        assert relative_deviation_loss([10.0], [8.0], 1.0).item() == pytest.approx(4 / 121, abs=1e-12)
        assert 4 / 121 == pytest.approx(0.0330578, abs=1e-7)

    def test_exact(self):
        assert relative_deviation_loss([7.0], [7.0], 1.0).item() == 0.0

    def test_empty_image(self):
        assert relative_deviation_loss([0.0], [0.0], 1.0).item() == 0.0

    def test_sparse_scenes_weigh_more(self):
        vals = [relative_deviation_loss([y], [y + 5.0], 1.0).item() for y in (5.0, 50.0, 500.0)]
        assert vals[0] > vals[1] > vals[2]

    def test_gradient_through_count(self):
        rng = np.random.default_rng(4)
        err = grad_check(lambda p: relative_deviation_loss([3.0], [masked_count(p)], 1.0), rng.random((1, 4, 4)))
        assert err <= 1e-6

    def test_masked_count(self):
        p = np.arange(4.0).reshape(1, 2, 2)
        assert masked_count(p, np.array([[0, 1], [1, 0]])).item() == 3.0


class TestCombined:
    def test_alpha_weighting(self):
        ed, rd = Tensor(1.0), Tensor(0.0330578)
        assert combined_loss(ed, rd, LossConfig(alpha=1e-7)).item() == 1.0 + 1e-7 * 0.0330578
        assert combined_loss(ed, rd, LossConfig(alpha=1e-7)).item() == pytest.approx(1.0000000033, abs=1e-10)

    def test_alpha_zero(self):
        assert combined_loss(Tensor(1.5), Tensor(4.0), LossConfig(alpha=0.0)).item() == 1.5

    def test_rd_zero(self):
        assert combined_loss(Tensor(1.5), Tensor(0.0), LossConfig()).item() == 1.5

    def test_switch_off_returns_ed(self):
        ed = Tensor(2.0)
        assert combined_loss(ed, Tensor(9.0), LossConfig(use_rd=False)) is ed

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 1e3), st.floats(0, 1e3), st.floats(0, 1e3), st.floats(0, 10))
    def test_monotone(self, ed, rd, bump, alpha):
        cfg = LossConfig(alpha=alpha)
        base = combined_loss(Tensor(ed), Tensor(rd), cfg).item()
        assert combined_loss(Tensor(ed + bump), Tensor(rd), cfg).item() >= base
        assert combined_loss(Tensor(ed), Tensor(rd + bump), cfg).item() >= base

    def test_bad_config(self):
        with pytest.raises(ValueError):
            LossConfig(alpha=-1)
        with pytest.raises(ValueError):
            LossConfig(z=0)


def metrics_brute(pairs):
    n = len(pairs)
    mae = sum(abs(a - b) for a, b in pairs) / n
    mse = math.sqrt(sum((a - b) ** 2 for a, b in pairs) / n)
    return mae, mse


class TestMetrics:
    def test_hand_values(self):
        r = mae_mse([(10, 12), (20, 17)])
        assert r.mae == 2.5 and r.mse == pytest.approx(math.sqrt(6.5), abs=1e-15)

    def test_perfect(self):
        r = mae_mse([(3, 3), (4, 4)])
        assert (r.mae, r.mse) == (0.0, 0.0)

    def test_single(self):
        r = mae_mse([(7.0, 4.5)])
        assert r.mae == r.mse == 2.5

    def test_empty(self):
        with pytest.raises(ValueError):
            mae_mse([])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1e4), st.floats(0, 1e4)), min_size=1, max_size=30))
    def test_brute_force_and_power_mean(self, pairs):
        r = mae_mse(pairs)
        mae, mse = metrics_brute(pairs)
        assert r.mae == pytest.approx(mae, rel=1e-12, abs=1e-12)
        assert r.mse == pytest.approx(mse, rel=1e-12, abs=1e-12)
        assert r.mae <= r.mse * (1 + 1e-12) + 1e-12

    def test_csv_roundtrip(self):
        r = mae_mse([(10, 12), (20, 17)], ids=["a", "b"])
        text = r.to_csv()
        assert text.splitlines()[0] == "image_id,gt_count,pred_count"
        assert text.splitlines()[1] == "a,10,12"
        assert text.splitlines()[-2] == "MAE,2.5"
        back = read_report(text)
        assert back.mse == r.mse and back.ids == ["a", "b"]

    def test_zero_trailer(self):
        text = mae_mse([(3, 3)]).to_csv()
        assert text.endswith("MAE,0\nMSE,0\n")
