import pytest

from amcnn.config import ConfigError, TrainConfig, load_config, parse_overrides


def test_defaults():
    c = TrainConfig()
    assert (c.lr, c.beta1, c.beta2, c.eps, c.batch, c.alpha) == (1e-5, 0.9, 0.999, 1e-8, 1, 1e-7)
    assert (c.c_p, c.c_f, c.flip, c.use_rd) == (9, 100, True, True)
    assert c.sigma_policy.kind == "knn" and c.sigma_policy.fixed_sigma == 4.0
    assert c.effective_pretrain_lr == c.lr


def test_text_roundtrip(tmp_path):
    c = TrainConfig(lr=3e-4, use_rd=False, variant="AM-CNN(3)", sigma="fixed:2.5")
    p = tmp_path / "c.cfg"
    p.write_text(c.to_text())
    assert load_config(p) == c


def test_precedence(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nlr = 0.01\nbatch=2\n\n")
    c = load_config(p, ["batch=3"], lr=0.5, seed=9)
    assert (c.lr, c.batch, c.seed) == (0.01, 3, 9)


def test_types():
    d = parse_overrides(["flip=off", "c_f=0", "alpha=0", "variant=AM-CNN(L)"])
    assert d == {"flip": False, "c_f": 0, "alpha": 0.0, "variant": "AM-CNN(L)"}


@pytest.mark.parametrize("bad", ["nope=1", "lr", "batch=1.5", "flip=maybe"])
def test_rejected(bad):
    with pytest.raises(ConfigError):
        parse_overrides([bad])


@pytest.mark.parametrize("field,value", [("lr", 0.0), ("batch", 0), ("alpha", -1.0), ("variant", "VGG"),
                                         ("sigma", "gauss"), ("threads", 0), ("c_f", -1)])
def test_invalid_values(field, value):
    with pytest.raises(ConfigError):
        TrainConfig(**{field: value})


def test_error_names_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("lr=1\nwat=2\n")
    with pytest.raises(ConfigError, match=r"c\.cfg:2"):
        load_config(p)
