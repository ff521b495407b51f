import json
import math

import numpy as np
import pytest
import torch

from taprop.episodes import EpisodeSpec
from taprop.evaluation import EvalReport, ci95, compare, evaluate, format_accuracy
from taprop.model import ModelConfig, build_model


def test_ci95_oracle():
    v = [0.2, 0.4, 0.6, 0.8]
    assert ci95(v) == pytest.approx(1.96 * np.std(v, ddof=1) / 2)
    assert ci95([0.5]) == 0.0
    assert ci95([0.3] * 10) == pytest.approx(0.0, abs=1e-15)


def test_headline_format():
    assert format_accuracy(0.5591, 0.0086) == "55.91 ± 0.86"


def test_report_json_roundtrip():
    rep = EvalReport(3, 0.5, 0.1, {2: (0.4, 0.1), 4: (0.5, 0.1)}, [0.25, 0.5, 0.75], {"n_way": 5})
    back = EvalReport.from_dict(json.loads(rep.to_json()))
    assert back == rep
    assert rep.accuracy_column().splitlines() == ["0.25", "0.5", "0.75"]


@pytest.fixture(scope="module")
def model():
    return build_model(ModelConfig(image_shape=(3, 16, 16)))


def test_evaluate_shapes_and_mode(model, small_synthetic):
    model.train()
    rep = evaluate(model, small_synthetic, EpisodeSpec(3, 1, 2), n_episodes=4, seed=1, m=3)
    assert model.training
    assert rep.n_episodes == 4 and len(rep.per_episode_accuracies) == 4
    assert set(rep.per_layer_accuracy) == {2, 3, 4}
    assert rep.mean_accuracy == rep.per_layer_accuracy[4][0]
    for a in rep.per_episode_accuracies:
        assert a * 6 == pytest.approx(round(a * 6))


def test_evaluate_deterministic(model, small_synthetic):
    a = evaluate(model, small_synthetic, EpisodeSpec(3, 1, 2), n_episodes=3, seed=2, m=3)
    b = evaluate(model, small_synthetic, EpisodeSpec(3, 1, 2), n_episodes=3, seed=2, m=3)
    assert a == b


def test_compare_same_model_zero_difference(model, small_synthetic):
    paired = compare(model, model, small_synthetic, EpisodeSpec(3, 1, 2), n_episodes=3, seed=0, m=3)
    assert paired.mean_difference == 0.0 and paired.ci95_difference == 0.0
