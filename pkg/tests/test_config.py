import pytest

from taprop.config import RunConfig, apply_overrides
from taprop.training import ConfigError


def test_defaults_roundtrip_yaml(tmp_path):
    run = RunConfig()
    path = tmp_path / "c.yaml"
    path.write_text(run.to_yaml(), encoding="utf-8")
    assert RunConfig.load(path) == run


def test_defaults_match_training_setup():
    t = RunConfig().train
    assert (t.alpha, t.m, t.learning_rate, t.decay_factor, t.decay_every) == (0.99, 20, 0.001, 0.8, 5000)
    assert t.weights == (1, 1, 1) and t.layers == (2, 3, 4)


def test_overrides():
    run = apply_overrides(RunConfig(), ["train.weights=0,0,1", "train.m=10", "eval.n_episodes=50"])
    assert run.train.weights == (0, 0, 1) and run.train.m == 10 and run.eval.n_episodes == 50


def test_synthetic_override_creates_section():
    run = apply_overrides(RunConfig(), ["data.synthetic.n_classes=6"])
    assert run.data.synthetic.n_classes == 6


@pytest.mark.parametrize("item,match", [
    ("train.nope=1", "unknown key"),
    ("train.m=abc", "train.m"),
    ("train", "key=value"),
    ("data.synthetic.split=random", "split"),
])
def test_bad_overrides(item, match):
    with pytest.raises(ConfigError, match=match):
        apply_overrides(RunConfig(), [item])


def test_unknown_yaml_key(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("train:\n  alpah: 0.5\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="train.alpah"):
        RunConfig.load(path)
