"""Episodic test protocol: mean accuracy with a 95% interval, per-layer probes,
and paired comparison of two models on identical episodes."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .episodes import EpisodeSpec, sample_episode

Z95 = 1.96


def ci95(values) -> float:
    """Normal-approximation half width ``1.96 * std / sqrt(n)`` (sample std).

    A single value has no spread; its interval is defined as 0.
    """
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return 0.0
    return float(Z95 * v.std(ddof=1) / math.sqrt(len(v)))


def format_accuracy(mean: float, ci: float) -> str:
    """Percent with two decimals, e.g. ``55.91 ± 0.86``."""
    return f"{100 * mean:.2f} ± {100 * ci:.2f}"


@dataclass
class EvalReport:
    n_episodes: int
    mean_accuracy: float
    ci95: float
    per_layer_accuracy: dict[int, tuple[float, float]]
    per_episode_accuracies: list[float]
    config: dict = field(default_factory=dict)

    def headline(self) -> str:
        return format_accuracy(self.mean_accuracy, self.ci95)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_layer_accuracy"] = {
            str(i): {"mean": m, "ci95": c} for i, (m, c) in sorted(self.per_layer_accuracy.items())
        }
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        per_layer = {int(k): (v["mean"], v["ci95"]) for k, v in d["per_layer_accuracy"].items()}
        return cls(d["n_episodes"], d["mean_accuracy"], d["ci95"], per_layer,
                   list(d["per_episode_accuracies"]), d.get("config", {}))

    def accuracy_column(self) -> str:
        return "".join(f"{a!r}\n" for a in self.per_episode_accuracies)


def _episode_accuracies(model, episodes, alpha: float, m: int) -> dict[int, list[float]]:
    accs: dict[int, list[float]] = {i: [] for i in model.layers}
    for ep in episodes:
        out = model.forward_episode(ep.images, ep.support_labels, ep.spec.n_way, len(ep.query_labels),
                                    alpha=alpha, m=m)
        truth = torch.as_tensor(ep.query_labels)
        for i in model.layers:
            accs[i].append(float((out.predictions(i) == truth).double().mean()))
    return accs


class _EvalMode:
    """Eval-mode, no-grad context that restores the previous training flag."""

    def __init__(self, model):
        self.model = model

    def __enter__(self):
        self.was_training = self.model.training
        self.model.eval()
        self.grad = torch.no_grad()
        self.grad.__enter__()
        return self.model

    def __exit__(self, *exc):
        self.grad.__exit__(*exc)
        self.model.train(self.was_training)
        return False


def iter_episodes(data, spec: EpisodeSpec, n_episodes: int, seed: int):
    rng = np.random.default_rng(seed)
    for _ in range(n_episodes):
        yield sample_episode(data, spec, rng)


def evaluate(model, data, spec: EpisodeSpec, n_episodes: int = 600, seed: int = 0,
             alpha: float = 0.99, m: int = 20) -> EvalReport:
    """Score ``model`` on ``n_episodes`` random tasks drawn from ``data``.

    Headline accuracy comes from the deepest tap; every tap's accuracy is
    reported as a probe.
    """
    with _EvalMode(model):
        accs = _episode_accuracies(model, iter_episodes(data, spec, n_episodes, seed), alpha, m)
    last = max(accs)
    per_layer = {i: (float(np.mean(a)), ci95(a)) for i, a in accs.items()}
    return EvalReport(
        n_episodes=n_episodes,
        mean_accuracy=per_layer[last][0],
        ci95=per_layer[last][1],
        per_layer_accuracy=per_layer,
        per_episode_accuracies=accs[last],
        config={"n_way": spec.n_way, "k_shot": spec.k_shot, "q_per_class": spec.q_per_class,
                "n_episodes": n_episodes, "seed": seed, "alpha": alpha, "m": m},
    )


@dataclass
class PairedReport:
    a: EvalReport
    b: EvalReport
    mean_difference: float
    ci95_difference: float

    def to_dict(self) -> dict:
        return {"a": self.a.to_dict(), "b": self.b.to_dict(),
                "mean_difference": self.mean_difference, "ci95_difference": self.ci95_difference}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def compare(model_a, model_b, data, spec: EpisodeSpec, n_episodes: int = 600, seed: int = 0,
            alpha: float = 0.99, m: int = 20) -> PairedReport:
    """Evaluate both models on the same episode sequence; report ``a - b``."""
    ra = evaluate(model_a, data, spec, n_episodes, seed, alpha, m)
    rb = evaluate(model_b, data, spec, n_episodes, seed, alpha, m)
    diff = np.asarray(ra.per_episode_accuracies) - np.asarray(rb.per_episode_accuracies)
    return PairedReport(ra, rb, float(diff.mean()), ci95(diff))
