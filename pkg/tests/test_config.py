import pytest

from eosprobe import config as cfgmod
from eosprobe.config import ConfigError


def test_parse_text_types_and_comments():
    text = """
    # a comment
    train.eta = 0.003
    model.hidden = [32, 16]
    model.activation = relu
    data.classes = null
    train.attribution = false
    model.arch = "mlp"
    """
    got = cfgmod.parse_text(text)
    assert got == {"train.eta": 0.003, "model.hidden": [32, 16], "model.activation": "relu",
                   "data.classes": None, "train.attribution": False, "model.arch": "mlp"}


def test_malformed_line_names_position():
    with pytest.raises(ConfigError, match="x.cfg:2"):
        cfgmod.parse_text("train.eta = 1\nnot a pair\n", "x.cfg")


def test_resolve_layers_and_unknown_keys():
    cfg = cfgmod.resolve({"train.eta": 0.1}, {"train.eta": 0.2})
    assert cfg["train.eta"] == 0.2 and cfg["train.k"] == 20
    with pytest.raises(ConfigError, match="train.etaa"):
        cfgmod.resolve({"train.etaa": 0.1})


def test_dumps_round_trip_and_hash(tmp_path):
    cfg = cfgmod.resolve({"model.hidden": [3, 4], "data.offset": 0.1 + 0.2})
    path = tmp_path / "c.cfg"
    path.write_text(cfgmod.dumps(cfg))
    again = cfgmod.resolve(cfgmod.load(path))
    assert again == cfg
    assert cfgmod.config_hash(again) == cfgmod.config_hash(cfg)
    assert cfgmod.config_hash(cfgmod.resolve({"train.eta": 0.5})) != cfgmod.config_hash(cfg)


def test_overrides():
    assert cfgmod.parse_overrides(["train.eta=0.5", "model.hidden=[2]"]) == {
        "train.eta": 0.5, "model.hidden": [2]}
    with pytest.raises(ConfigError):
        cfgmod.parse_overrides(["train.eta"])


def test_missing_file():
    with pytest.raises(ConfigError):
        cfgmod.load("/nonexistent/x.cfg")


def test_build_synthetic_mlp():
    cfg = cfgmod.resolve({"data.n_D": 30, "data.n_c": 3, "data.dim": 5, "model.hidden": [4],
                          "data.classes": [0, 2], "data.subset_n_D": 10, "train.eta": 0.05})
    spec, data, tcfg = cfgmod.build(cfg)
    assert data.n_c == 2 and data.n_D == 10
    assert spec.n_c == 2 and spec.input_shape == (5,)
    assert tcfg.eta == 0.05 and tcfg.max_iters == 800


def test_build_conv_needs_image_shape():
    base = {"model.arch": "conv", "data.dim": 432, "data.n_D": 4, "model.channels": [2, 2],
            "model.kernel": 3, "model.hidden": [4]}
    with pytest.raises(ConfigError):
        cfgmod.build(cfgmod.resolve(base))
    spec, _, _ = cfgmod.build(cfgmod.resolve(base, {"data.image_shape": [3, 12, 12]}))
    assert spec.input_shape == (3, 12, 12)


def test_bad_values_rejected():
    with pytest.raises(ConfigError):
        cfgmod.build(cfgmod.resolve({"data.source": "mnist"}))
    with pytest.raises(ConfigError):
        cfgmod.build(cfgmod.resolve({"train.mode": "adam"}))
    with pytest.raises(ConfigError):
        cfgmod.build(cfgmod.resolve({"data.source": "cifar10"}))


def test_section():
    cfg = cfgmod.resolve()
    train = cfgmod.section(cfg, "train")
    assert "eta" in train and "model.arch" not in train and "arch" not in train
