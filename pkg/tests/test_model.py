import numpy as np
import pytest

from amcnn.autodiff import Tensor, check_parameters, conv2d, spatial_softmax, tanh
from amcnn.checkpoint import load_branch_weights, load_checkpoint, read_checkpoint, save_checkpoint
from amcnn.errors import CheckpointShapeError, CheckpointTruncatedError, CheckpointVersionError, ShapeError
from amcnn.losses import LossConfig, combined_loss, euclidean_loss, masked_count, relative_deviation_loss
from amcnn.model import (
    BranchSpec,
    attention_head,
    build_model,
    forward,
    forward_branch,
)


@pytest.fixture(scope="module")
def model():
    return build_model("AM-CNN", seed=7)


def test_same_seed_bitwise_identical():
    a, b = build_model(seed=3), build_model(seed=3)
    assert a.names() == b.names()
    for n in a.names():
        assert a[n].data.tobytes() == b[n].data.tobytes()
    c = build_model(seed=4)
    assert not np.array_equal(a["branch.L.conv1.weight"].data, c["branch.L.conv1.weight"].data)


def test_attention_init_deviation():
    m = build_model(seed=11, specs=[BranchSpec("L", (9, 7, 7, 7), (16, 32, 16, 8)),
                                    BranchSpec("M", (7, 5, 5, 5), (20, 40, 20, 10)),
                                    BranchSpec("S", (5, 3, 3, 3), (24, 48, 24, 12))],
                    attention_kernel=19)
    w = m["attention.weight"].data
    assert w.size >= 10_000
    assert 0.008 <= w.std() <= 0.012
    assert not m["attention.bias"].data.any() and not m["head.bias"].data.any()


def test_default_widths():
    m = build_model()
    assert m["attention.weight"].shape == (1, 30, 1, 1)
    assert m["head.weight"].shape == (1, 30, 1, 1)
    assert m["branch.L.conv1.weight"].shape == (16, 1, 9, 9)
    assert m["branch.S.conv4.weight"].shape == (12, 24, 3, 3)


@pytest.mark.parametrize("label", ["L", "M", "S"])
def test_single_branch_structure(label):
    m = build_model(f"AM-CNN({label})")
    branches = {n.split(".")[1] for n in m.names() if n.startswith("branch.")}
    assert branches == {label}
    assert "attention.weight" in m and "head.weight" in m
    density, maps = forward(m, np.random.default_rng(0).random((32, 32)))
    assert density.shape == (1, 8, 8) and len(maps) == 1


def test_unknown_variant():
    with pytest.raises(ValueError):
        build_model("AM-CNN(X)")


def test_branch_output_size(model):
    out = forward_branch(model, "M", np.random.default_rng(0).random((64, 64)))
    assert out.shape == (10, 16, 16)


def test_branch_zero_image():
    m = build_model(seed=1)
    out = forward_branch(m, "L", np.zeros((32, 32)))
    assert not out.data.any()


def test_branch_fully_convolutional(model):
    a = forward_branch(model, "S", np.zeros((16, 24)))
    b = forward_branch(model, "S", np.zeros((32, 48)))
    assert b.shape[1:] == (2 * a.shape[1], 2 * a.shape[2])


def test_indivisible_rejected(model):
    with pytest.raises(ShapeError):
        forward(model, np.zeros((30, 32)))


class TestAttentionHead:
    def test_uniform_features(self):
        rng = np.random.default_rng(0)
        f = Tensor(np.broadcast_to(rng.random((5, 1, 1)), (5, 6, 4)).copy())
        w, b = rng.normal(size=(1, 5, 1, 1)), np.array([0.3])
        m, fa = attention_head(f, w, b, rescale=True)
        np.testing.assert_allclose(m.data, 1.0 / 24, rtol=0, atol=1e-15)
        np.testing.assert_allclose(fa.data, f.data, rtol=1e-14)
        m2, fa2 = attention_head(f, w, b, rescale=False)
        np.testing.assert_allclose(fa2.data, f.data / 24, rtol=1e-14)

    def test_sums_to_one(self):
        rng = np.random.default_rng(1)
        m, _ = attention_head(Tensor(rng.normal(size=(30, 9, 7))), rng.normal(size=(1, 30, 1, 1)), np.zeros(1))
        assert abs(m.data.sum() - 1.0) <= 1e-12 and np.all(m.data > 0)

    @pytest.mark.parametrize("c", [-3.0, 0.37, 50.0])
    def test_constant_added_to_scores(self, c):
        # the bias sits inside tanh, so the exact invariance is for a constant added to S itself
        rng = np.random.default_rng(2)
        f = Tensor(rng.normal(size=(30, 8, 8)))
        w, b = rng.normal(scale=0.1, size=(1, 30, 1, 1)), np.array([0.2])
        m, _ = attention_head(f, w, b)
        s = tanh(conv2d(f, Tensor(w), Tensor(b))).data
        np.testing.assert_allclose(spatial_softmax(Tensor(s + c)).data, m.data, rtol=0, atol=1e-12)


class TestForward:
    def test_amcnn_shapes(self, model):
        d, maps = forward(model, np.random.default_rng(0).random((64, 64)))
        assert d.shape == (1, 16, 16) and len(maps) == 1 and maps[0].shape == (1, 16, 16)

    def test_amcnn3_three_maps(self):
        m = build_model("AM-CNN(3)", seed=1)
        d, maps = forward(m, np.random.default_rng(0).random((64, 64)))
        assert d.shape == (1, 16, 16) and len(maps) == 3
        for mp in maps:
            assert abs(mp.data.sum() - 1.0) <= 1e-12

    def test_nonnegative_density(self):
        m = build_model(seed=5, init_std=0.3)
        d, _ = forward(m, np.random.default_rng(1).random((32, 32)))
        assert np.all(d.data >= 0) and d.data.sum() >= 0

    @pytest.mark.parametrize("h", [16, 32, 64])
    @pytest.mark.parametrize("w", [16, 48])
    def test_quarter_size(self, model, h, w):
        d, maps = forward(model, np.zeros((h, w)))
        assert d.shape == (1, h // 4, w // 4)

    def test_deterministic(self, model):
        img = np.random.default_rng(9).random((32, 32))
        a, _ = forward(model, img)
        b, _ = forward(model, img)
        assert a.data.tobytes() == b.data.tobytes()

    def test_literal_mode_positively_homogeneous(self):
        # without rescaling, a uniform map scales what the head sees by 1/(H'W')
        m = build_model(seed=2, init_std=0.2)
        m["attention.weight"].tensor.data[...] = 0.0
        img = np.random.default_rng(3).random((32, 32))
        from amcnn.autodiff import concat, conv2d
        feats = concat([forward_branch(m, b, img) for b in "LMS"])
        literal, _ = forward(m, img, rescale=False)
        pre = conv2d(Tensor(feats.data / 64.0), m["head.weight"].tensor, m["head.bias"].tensor).data
        np.testing.assert_allclose(literal.data, np.maximum(pre, 0), rtol=1e-12, atol=1e-15)


def test_end_to_end_gradient():
    rng = np.random.default_rng(0)
    m = build_model(seed=0, init_std=0.1)
    img = rng.random((32, 32))
    gt = rng.random((8, 8)) * 0.05
    cfg = LossConfig(alpha=1e-3)

    def loss():
        d, _ = forward(m, img)
        return combined_loss(euclidean_loss([d], [gt]), relative_deviation_loss([gt.sum()], [masked_count(d)], 1.0), cfg)

    err, rows = check_parameters(loss, m.parameters(), n_samples=20, h=1e-5, seed=1)
    assert err <= 1e-3
    # and the checked gradients are not trivially zero
    assert max(abs(a) for _, _, a, _ in rows) > 1e-6


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, model):
        p = tmp_path / "m.ckpt"
        save_checkpoint(model, p)
        back = load_checkpoint(p)
        assert back.variant == model.variant and back.names() == model.names()
        img = np.random.default_rng(0).random((32, 32))
        assert forward(back, img)[0].data.tobytes() == forward(model, img)[0].data.tobytes()
        assert p.read_bytes()[:6] == b"AMCNN1"
        meta, tensors = read_checkpoint(p)
        assert meta["variant"] == "AM-CNN" and len(meta["specs"]) == 3
        assert set(tensors) == set(model.names())

    def test_bad_magic(self, tmp_path, model):
        p = tmp_path / "m.ckpt"
        save_checkpoint(model, p)
        raw = bytearray(p.read_bytes())
        raw[:6] = b"XXXXXX"
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(p)

    def test_truncated(self, tmp_path, model):
        p = tmp_path / "m.ckpt"
        save_checkpoint(model, p)
        p.write_bytes(p.read_bytes()[:-100])
        with pytest.raises(CheckpointTruncatedError):
            load_checkpoint(p)

    def test_shape_inconsistency(self, tmp_path):
        small = build_model("AM-CNN(L)", specs=[BranchSpec("L", (9, 7, 7, 7), (4, 8, 4, 2))])
        p = tmp_path / "m.ckpt"
        save_checkpoint(small, p)
        meta, _ = read_checkpoint(p)
        raw = p.read_bytes()
        old = b'"channels":[4,8,4,2]'
        assert old in raw
        # same byte length, different declared widths
        p.write_bytes(raw.replace(old, b'"channels":[4,8,4,3]'))
        with pytest.raises(CheckpointShapeError):
            load_checkpoint(p)

    def test_load_branch_by_name(self, tmp_path):
        single = build_model("AM-CNN(M)", seed=99)
        p = tmp_path / "m.ckpt"
        save_checkpoint(single, p)
        full = build_model("AM-CNN", seed=1)
        copied = load_branch_weights(full, str(p), ["M"])
        assert len(copied) == 8
        for n in copied:
            assert np.array_equal(full[n].data, single[n].data)
        assert not np.array_equal(full["branch.L.conv1.weight"].data, single["branch.M.conv1.weight"].data[:1])

    def test_branch_shape_mismatch(self):
        a = build_model("AM-CNN(L)", specs=[BranchSpec("L", (9, 7, 7, 7), (4, 8, 4, 2))])
        with pytest.raises(CheckpointShapeError):
            load_branch_weights(build_model(), a, ["L"])


class TestHeadInit:
    def test_halfnormal_is_absolute_normal_draw(self):
        a = build_model(seed=5)
        b = build_model(seed=5, head_init="normal")
        np.testing.assert_array_equal(a["head.weight"].data, np.abs(b["head.weight"].data))
        assert (b["head.weight"].data < 0).any()
        # the choice touches nothing else
        for n in a.names():
            if n != "head.weight":
                assert a[n].data.tobytes() == b[n].data.tobytes()

    def test_live_at_init(self):
        # non-negative features and non-negative head weights: some output is positive
        for seed in range(10):
            m = build_model(seed=seed, init_std=0.1)
            d, _ = forward(m, np.random.default_rng(seed).random((32, 32)))
            assert d.data.max() > 0

    def test_unknown(self):
        with pytest.raises(ValueError):
            build_model(head_init="uniform")
