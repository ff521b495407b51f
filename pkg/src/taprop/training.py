"""Episodic meta-training and finite-difference gradient checking."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from .checkpoint import Checkpoint, save_checkpoint
from .episodes import Episode, EpisodeSpec, sample_episode
from .model import DTYPES, MultiTapNet, ModelConfig, build_model

log = logging.getLogger(__name__)

LAYERS = (2, 3, 4)


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, episode: int, checkpoint: Path | None = None):
        self.episode = episode
        self.checkpoint = checkpoint
        super().__init__(f"divergence at episode {episode}")


@dataclass
class TrainConfig:
    """Training and evaluation hyperparameters.

    ``weights`` are the loss weights of taps 2, 3, 4 in that order.
    ``layers`` selects which taps are built at all; ``(4,)`` is the
    single-layer code path.
    """

    n_way: int = 5
    k_shot: int = 1
    q_per_class: int = 15
    eval_n_way: int = 5
    eval_k_shot: int = 1
    eval_q_per_class: int = 15
    alpha: float = 0.99
    m: int = 20
    weights: tuple = (1.0, 1.0, 1.0)
    layers: tuple = LAYERS
    learning_rate: float = 0.001
    decay_factor: float = 0.8
    decay_every: int = 5000
    total_episodes: int = 30000
    eval_every: int = 500
    val_episodes: int = 100
    seed: int = 0
    precision: str = "single"

    def __post_init__(self):
        self.weights = tuple(float(w) for w in self.weights)
        self.layers = tuple(sorted(int(i) for i in self.layers))
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ConfigError(f"decay_factor must lie in (0, 1], got {self.decay_factor}")
        if self.m < 1:
            raise ConfigError(f"m must be >= 1, got {self.m}")
        if len(self.weights) != 3 or any(w < 0 or not math.isfinite(w) for w in self.weights):
            raise ConfigError(f"weights must be three non-negative numbers, got {self.weights}")
        if not self.layers or any(i not in LAYERS for i in self.layers) or 4 not in self.layers:
            raise ConfigError(f"layers must be a subset of {LAYERS} containing 4, got {self.layers}")
        if all(self.layer_weights[i] == 0 for i in self.layers):
            raise ConfigError("loss weights of the active layers are all zero")
        if self.precision not in DTYPES:
            raise ConfigError(f"precision must be one of {sorted(DTYPES)}")
        if self.decay_every < 1 or self.eval_every < 1 or self.total_episodes < 0 or self.val_episodes < 1:
            raise ConfigError("decay_every, eval_every, val_episodes must be >= 1 and total_episodes >= 0")
        EpisodeSpec(self.n_way, self.k_shot, self.q_per_class)
        EpisodeSpec(self.eval_n_way, self.eval_k_shot, self.eval_q_per_class)

    @property
    def layer_weights(self) -> dict[int, float]:
        return dict(zip(LAYERS, self.weights))

    @property
    def episode_spec(self) -> EpisodeSpec:
        return EpisodeSpec(self.n_way, self.k_shot, self.q_per_class)

    @property
    def eval_episode_spec(self) -> EpisodeSpec:
        return EpisodeSpec(self.eval_n_way, self.eval_k_shot, self.eval_q_per_class)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def lr_at(config: TrainConfig, episode: int) -> float:
    """Learning rate in effect for the 0-based ``episode``."""
    return config.learning_rate * config.decay_factor ** (episode // config.decay_every)


@dataclass
class TrainResult:
    model: MultiTapNet
    best_state: dict
    best_val_acc: float
    best_episode: int
    metrics: list[dict] = field(default_factory=list)

    def best_model(self) -> MultiTapNet:
        model = build_model(self.model.config, "double" if self.model.dtype == torch.float64 else "single")
        model.load_state_dict(self.best_state)
        return model


def make_optimizer(model: MultiTapNet, config: TrainConfig) -> torch.optim.Adam:
    # One Adam over backbone and every relation net; betas/eps left at defaults.
    return torch.optim.Adam(model.parameters(), lr=config.learning_rate)


def train_step(model, optimizer, episode: Episode, config: TrainConfig, lr: float):
    for group in optimizer.param_groups:
        group["lr"] = lr
    model.train()
    out = model.run_episode(episode, alpha=config.alpha, m=config.m, weights=config.layer_weights)
    loss = out.loss.total
    if not torch.isfinite(loss):
        return out, False
    optimizer.zero_grad(set_to_none=False)
    loss.backward()
    optimizer.step()
    return out, True


def train(
    config: TrainConfig,
    train_data,
    val_data=None,
    model_config: ModelConfig | None = None,
    run_dir: str | Path | None = None,
    run_config: dict | None = None,
    resume: Checkpoint | None = None,
    on_record: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Meta-train for ``config.total_episodes`` episodes.

    Every episode emits a metrics record; every ``eval_every`` episodes (and
    at the end) the model is scored on ``val_data`` and checkpointed. With
    ``run_dir`` set, ``metrics.jsonl``, ``last.ckpt`` and ``best.ckpt`` are
    written there.
    """
    from .evaluation import evaluate

    config.validate()
    if model_config is None:
        c, h, w = train_data.image_shape
        model_config = ModelConfig(image_shape=(c, h, w), layers=config.layers, seed=config.seed)
    elif tuple(model_config.layers) != config.layers:
        model_config = ModelConfig(**{**asdict(model_config), "layers": config.layers})
    model = build_model(model_config, config.precision)
    optimizer = make_optimizer(model, config)
    rng = np.random.default_rng(config.seed)
    start = 0
    if resume is not None:
        model.load_state_dict(resume.model_state)
        if resume.optimizer_state is not None:
            optimizer.load_state_dict(resume.optimizer_state)
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state
        start = resume.episode

    run_dir = Path(run_dir) if run_dir is not None else None
    metrics_fh = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(run_dir / "metrics.jsonl", "a" if resume else "w", encoding="utf-8")

    best_acc, best_ep = -1.0, start
    best_state = {k: v.clone() for k, v in model.state_dict().items()}
    records: list[dict] = []
    t0 = time.perf_counter()
    val_seed = config.seed + 1

    def checkpoint(name: str, episode: int, val_acc: float | None):
        if run_dir is not None:
            save_checkpoint(
                run_dir / name, model, optimizer, episode=episode, config=run_config,
                rng_state=rng.bit_generator.state, extra={"val_acc": val_acc},
            )

    try:
        for e in range(start, config.total_episodes):
            lr = lr_at(config, e)
            episode = sample_episode(train_data, config.episode_spec, rng)
            try:
                out, ok = train_step(model, optimizer, episode, config, lr)
            except ArithmeticError as exc:  # overflow in sigma, S or the solve
                raise DivergenceError(e, run_dir / "last.ckpt" if run_dir else None) from exc
            if not ok:
                raise DivergenceError(e, run_dir / "last.ckpt" if run_dir else None)
            floats = out.loss.as_floats()
            rec = {
                "episode": e,
                "loss_total": floats["loss_total"],
                "loss_l2": floats.get("loss_l2"),
                "loss_l3": floats.get("loss_l3"),
                "loss_l4": floats["loss_l4"],
                "lr": lr,
            }
            done = e + 1
            if val_data is not None and (done % config.eval_every == 0 or done == config.total_episodes):
                report = evaluate(model, val_data, config.eval_episode_spec, config.val_episodes,
                                  seed=val_seed, alpha=config.alpha, m=config.m)
                rec["val_acc"] = report.mean_accuracy
                checkpoint("last.ckpt", done, report.mean_accuracy)
                if report.mean_accuracy > best_acc:
                    best_acc, best_ep = report.mean_accuracy, done
                    best_state = {k: v.clone() for k, v in model.state_dict().items()}
                    checkpoint("best.ckpt", done, report.mean_accuracy)
                log.info("episode %d loss %.4f val_acc %.4f", done, rec["loss_total"], report.mean_accuracy)
            rec["wallclock"] = time.perf_counter() - t0
            records.append(rec)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(rec) + "\n")
            if on_record is not None:
                on_record(rec)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    if val_data is None:
        best_state = {k: v.clone() for k, v in model.state_dict().items()}
        best_ep = config.total_episodes
        checkpoint("last.ckpt", config.total_episodes, None)
        checkpoint("best.ckpt", config.total_episodes, None)
    return TrainResult(model, best_state, best_acc, best_ep, records)


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradEntry:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradcheckReport:
    entries: list[GradEntry]
    step: float
    tolerance: float

    @property
    def max_rel_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    @property
    def failures(self) -> list[GradEntry]:
        return [e for e in self.entries if e.rel_error > self.tolerance]

    @property
    def max_abs_error(self) -> float:
        return max((abs(e.analytic - e.numeric) for e in self.entries), default=0.0)

    def resolved(self, min_magnitude: float = 1e-3) -> list[GradEntry]:
        """Entries whose gradient is large enough for the relative test to
        sit above finite-difference round-off."""
        return [e for e in self.entries if max(abs(e.analytic), abs(e.numeric)) >= min_magnitude]

    def summary(self) -> str:
        res = self.resolved()
        lines = [f"gradcheck: {len(self.entries)} parameters, step {self.step:g}, "
                 f"max relative error {self.max_rel_error:.3e} (tolerance {self.tolerance:g}), "
                 f"max absolute error {self.max_abs_error:.3e}",
                 f"  {len(res)} entries with |grad| >= 1e-3: max relative error "
                 f"{max((e.rel_error for e in res), default=0.0):.3e}"]
        for e in self.failures:
            lines.append(f"  FAIL {e.name}[{e.index}] analytic={e.analytic:.6e} numeric={e.numeric:.6e} "
                         f"rel={e.rel_error:.3e}")
        return "\n".join(lines)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def parameter_groups(model: MultiTapNet) -> dict[str, list[tuple[str, torch.nn.Parameter]]]:
    """Parameters bucketed per backbone block and per relation net."""
    groups: dict[str, list] = {}
    for name, p in model.named_parameters():
        # backbone.blocks.<k> / relation.nets.<layer>
        key = ".".join(name.split(".")[:3])
        groups.setdefault(key, []).append((name, p))
    return groups


def sample_coordinates(model: MultiTapNet, n: int, rng: np.random.Generator) -> list[tuple[str, int]]:
    """``n`` distinct (parameter name, flat index) pairs, round-robin over groups."""
    groups = list(parameter_groups(model).values())
    picked: list[tuple[str, int]] = []
    seen = set()
    total = sum(p.numel() for g in groups for _, p in g)
    n = min(n, total)
    g = 0
    while len(picked) < n:
        name, p = groups[g % len(groups)][rng.integers(len(groups[g % len(groups)]))]
        idx = int(rng.integers(p.numel()))
        if (name, idx) not in seen:
            seen.add((name, idx))
            picked.append((name, idx))
        g += 1
    return picked


def miniature_episode(seed: int = 0, image_size: int = 8) -> Episode:
    """2-way 1-shot 1-query episode of tiny synthetic images."""
    from .datasets import SyntheticSpec, generate_synthetic

    data = generate_synthetic(SyntheticSpec(
        n_classes=2, examples_per_class=2, image_size=(3, image_size, image_size),
        class_separation=2.0, noise_scale=0.5, seed=seed, prototype_resolution=2,
    ))
    return sample_episode(data, EpisodeSpec(2, 1, 1), np.random.default_rng(seed))


def _loss_fn(model, episode, alpha, m, weights):
    def f() -> torch.Tensor:
        return model.run_episode(episode, alpha=alpha, m=m, weights=weights).loss.total
    return f


def gradcheck(
    model: MultiTapNet,
    episode: Episode,
    alpha: float = 0.99,
    m: int = 1,
    weights: dict[int, float] | None = None,
    n_params: int = 50,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    seed: int = 0,
    coordinates: Iterable[tuple[str, int]] | None = None,
) -> GradcheckReport:
    """Compare autograd gradients of the episode loss against central differences.

    Runs in train mode (batch statistics) and needs a double-precision model.
    Parameters and BN buffers are restored afterwards.
    """
    if model.dtype != torch.float64:
        raise ValueError("gradcheck needs a double-precision model")
    weights = weights or {i: 1.0 for i in model.layers}
    saved = {k: v.clone() for k, v in model.state_dict().items()}
    was_training = model.training
    model.train()
    f = _loss_fn(model, episode, alpha, m, weights)
    params = dict(model.named_parameters())
    coords = list(coordinates) if coordinates is not None else sample_coordinates(model, n_params, np.random.default_rng(seed))
    try:
        model.zero_grad(set_to_none=False)
        f().backward()
        analytic = {(name, idx): float(params[name].grad.reshape(-1)[idx]) for name, idx in coords}
        entries = []
        with torch.no_grad():
            for name, idx in coords:
                flat = params[name].view(-1)
                orig = flat[idx].item()
                flat[idx] = orig + step
                up = f().item()
                flat[idx] = orig - step
                down = f().item()
                flat[idx] = orig
                numeric = (up - down) / (2 * step)
                a = analytic[(name, idx)]
                entries.append(GradEntry(name, idx, a, numeric, relative_error(a, numeric)))
    finally:
        model.load_state_dict(saved)
        model.zero_grad(set_to_none=True)
        model.train(was_training)
    return GradcheckReport(entries, step, tolerance)


def gradcheck_sweep(model, episode, steps=(1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8), **kwargs) -> dict[float, float]:
    """Max relative error per finite-difference step on a fixed parameter sample."""
    n = kwargs.pop("n_params", 50)
    coords = sample_coordinates(model, n, np.random.default_rng(kwargs.pop("seed", 0)))
    return {h: gradcheck(model, episode, step=h, coordinates=coords, **kwargs).max_rel_error for h in steps}
