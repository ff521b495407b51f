import math

import numpy as np
import pytest
import torch

from taprop.datasets import SyntheticSpec, generate_synthetic
from taprop.episodes import EpisodeSpec, sample_episode
from taprop.model import ModelConfig, build_model
from taprop.training import (
    ConfigError,
    TrainConfig,
    gradcheck,
    gradcheck_sweep,
    lr_at,
    miniature_episode,
    relative_error,
    sample_coordinates,
    train,
)


@pytest.fixture(scope="module")
def tiny_data():
    return generate_synthetic(SyntheticSpec(n_classes=4, examples_per_class=8, image_size=(3, 8, 8),
                                            class_separation=3.0, noise_scale=0.3, seed=0))


def tiny_config(**kw):
    base = dict(n_way=2, k_shot=1, q_per_class=2, eval_n_way=2, eval_k_shot=1, eval_q_per_class=2,
                m=2, total_episodes=6, eval_every=3, val_episodes=2)
    base.update(kw)
    return TrainConfig(**base)


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at(cfg, 0) == 0.001
    assert lr_at(cfg, 4999) == 0.001
    assert lr_at(cfg, 5000) == pytest.approx(0.0008)
    assert lr_at(cfg, 10000) == pytest.approx(0.00064)


@pytest.mark.parametrize("kw", [dict(layers=(2, 3)), dict(weights=(0, 0, 0)), dict(alpha=1.0),
                                dict(precision="half"), dict(m=0)])
def test_invalid_config(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw).validate()


def test_metrics_records(tiny_data):
    res = train(tiny_config(), tiny_data, tiny_data)
    assert [r["episode"] for r in res.metrics] == list(range(6))
    assert {"loss_total", "loss_l2", "loss_l3", "loss_l4", "lr", "wallclock"} <= set(res.metrics[0])
    assert [("val_acc" in r) for r in res.metrics] == [False, False, True, False, False, True]


def test_metrics_deterministic(tiny_data):
    strip = lambda rs: [{k: v for k, v in r.items() if k != "wallclock"} for r in rs]
    a = train(tiny_config(), tiny_data, tiny_data)
    b = train(tiny_config(), tiny_data, tiny_data)
    assert strip(a.metrics) == strip(b.metrics)


def test_initial_loss_near_uniform(tiny_data):
    # an untrained net is close to uniform over N classes: about n_nodes * ln N per layer
    cfg = tiny_config(n_way=4, q_per_class=3, m=5)
    ep = sample_episode(tiny_data, cfg.episode_spec, np.random.default_rng(0))
    model = build_model(ModelConfig(image_shape=(3, 8, 8)))
    model.train()
    loss = model.run_episode(ep, m=5).loss.per_layer[4].item()
    expected = ep.n_nodes * math.log(4)
    assert abs(loss - expected) <= 0.2 * expected


def test_zero_weights_match_deep_only_run(tiny_data):
    strip = lambda rs, keys: [{k: r.get(k) for k in keys} for r in rs]
    keys = ("episode", "loss_total", "loss_l4", "lr", "val_acc")
    a = train(tiny_config(weights=(0, 0, 1), precision="double"), tiny_data, tiny_data)
    b = train(tiny_config(weights=(0, 0, 1), layers=(4,), precision="double"), tiny_data, tiny_data)
    assert strip(a.metrics, keys) == strip(b.metrics, keys)
    sa, sb = a.model.state_dict(), b.model.state_dict()
    for k, v in sb.items():
        assert torch.equal(sa[k], v), k


def test_divergence_reported(tiny_data, tmp_path):
    from taprop.training import DivergenceError

    from taprop.datasets import FewShotData

    images = np.array(tiny_data.images)
    images[:] = np.nan
    broken = FewShotData(images, tiny_data.labels)
    with pytest.raises(DivergenceError, match="divergence at episode 0"):
        train(tiny_config(), broken, None, run_dir=tmp_path)


def test_run_dir_outputs(tiny_data, tmp_path):
    train(tiny_config(), tiny_data, tiny_data, run_dir=tmp_path)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 6
    assert (tmp_path / "last.ckpt").is_file() and (tmp_path / "best.ckpt").is_file()


def test_resume_continues_stream(tiny_data, tmp_path):
    from taprop.checkpoint import load_checkpoint

    full = train(tiny_config(), tiny_data, tiny_data)
    train(tiny_config(total_episodes=3), tiny_data, tiny_data, run_dir=tmp_path)
    rest = train(tiny_config(), tiny_data, tiny_data, resume=load_checkpoint(tmp_path / "last.ckpt"))
    assert [r["loss_total"] for r in rest.metrics] == pytest.approx([r["loss_total"] for r in full.metrics[3:]],
                                                                    rel=1e-5)


def test_higher_shot_mode(tiny_data):
    cfg = tiny_config(k_shot=3, q_per_class=1, eval_k_shot=1, eval_q_per_class=2)
    res = train(cfg, tiny_data, tiny_data)
    assert cfg.episode_spec == EpisodeSpec(2, 3, 1)
    assert cfg.eval_episode_spec == EpisodeSpec(2, 1, 2)
    assert 0.0 <= res.best_val_acc <= 1.0


def test_relative_error():
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(1.0, 1.0001) == pytest.approx(1e-4, rel=1e-3)
    assert relative_error(0.0, 0.0) == 0.0


def test_coordinates_span_every_group():
    model = build_model(ModelConfig(image_shape=(3, 8, 8)), "double")
    coords = sample_coordinates(model, 50, np.random.default_rng(0))
    groups = {".".join(n.split(".")[:3]) for n, _ in coords}
    assert {"relation.nets.2", "relation.nets.3", "relation.nets.4"} <= groups
    assert {f"backbone.blocks.{k}" for k in range(4)} <= groups
    assert len(set(coords)) == 50


def test_gradcheck_resolved_entries_agree():
    model = build_model(ModelConfig(image_shape=(3, 8, 8)), "double")
    before = {k: v.clone() for k, v in model.state_dict().items()}
    report = gradcheck(model, miniature_episode(0), n_params=30)
    assert report.max_abs_error < 1e-6
    assert all(e.rel_error <= 1e-4 for e in report.resolved(1e-3))
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k])


def test_gradcheck_needs_double():
    with pytest.raises(ValueError):
        gradcheck(build_model(ModelConfig(image_shape=(3, 8, 8))), miniature_episode(0))


def test_dead_network_has_zero_gradients():
    model = build_model(ModelConfig(image_shape=(3, 8, 8)), "double")
    with torch.no_grad():
        for block in model.backbone.blocks:
            block.bn.weight.zero_()
            block.bn.bias.fill_(-1.0)
    coords = [(n, 0) for n, _ in model.backbone.named_parameters()]
    coords = [("backbone." + n, i) for n, i in coords]
    report = gradcheck(model, miniature_episode(0), coordinates=coords)
    for e in report.entries:
        assert e.analytic == 0.0 and e.numeric == 0.0


def test_step_sweep_is_u_shaped():
    model = build_model(ModelConfig(image_shape=(3, 8, 8)), "double")
    errs = gradcheck_sweep(model, miniature_episode(0), steps=(1e-2, 1e-4, 1e-6, 1e-8), n_params=20)
    best = min(errs, key=errs.get)
    assert best not in (1e-2, 1e-8)
    assert errs[1e-2] > errs[best] < errs[1e-8]
