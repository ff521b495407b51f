"""Command-line entry point: ``train``, ``eval``, ``compare``, ``synth-data``,
``inspect``, ``gradcheck``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error,
3 infeasible request.
"""
from __future__ import annotations

import argparse
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, load_checkpoint, restore_model
from .config import RunConfig, model_section_to_config
from .datasets import (
    DatasetError,
    SeparationInfeasible,
    SyntheticSpec,
    export_image_folder,
    generate_synthetic,
    load_image_folder,
    read_manifest,
    split_examples,
    write_class_list,
)
from .episodes import EpisodeError, EpisodeSpec, sample_episode
from .evaluation import compare, evaluate
from .model import ModelConfig, build_model
from .training import ConfigError, DivergenceError, gradcheck, miniature_episode, train

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_INFEASIBLE = 0, 1, 2, 3

log = logging.getLogger("taprop")


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# data


def load_splits(run: RunConfig, splits=("train", "val", "test")) -> dict:
    data = run.data
    if data.synthetic is not None:
        s = data.synthetic

        def make(seed):
            return generate_synthetic(SyntheticSpec(
                n_classes=s.n_classes, examples_per_class=s.examples_per_class,
                image_size=tuple(s.image_size), class_separation=s.class_separation,
                noise_scale=s.noise_scale, seed=seed, prototype_resolution=s.prototype_resolution,
            ))

        names = ("train", "val", "test")
        if s.split == "examples":
            if len(s.split_counts) != 3:
                raise CLIError("config error: data.synthetic.split_counts needs three values", EXIT_CONFIG)
            parts = dict(zip(names, split_examples(make(s.seed), s.split_counts, seed=s.seed)))
        else:
            parts = {name: make(s.seed + k) for k, name in enumerate(names) if name in splits}
        return {k: v for k, v in parts.items() if k in splits}
    if data.root is None:
        raise CLIError("config error: set data.root (with data.manifest.*) or data.synthetic", EXIT_CONFIG)
    if not Path(data.root).is_dir():
        raise CLIError(f"dataset root not found: {data.root}", EXIT_CONFIG)
    man = data.manifest
    if None in (man.train, man.val, man.test):
        raise CLIError("config error: data.manifest.train/val/test must all be set", EXIT_CONFIG)
    for p in (man.train, man.val, man.test):
        if not Path(p).is_file():
            raise CLIError(f"manifest file not found: {p}", EXIT_CONFIG)
    manifest = read_manifest(man.train, man.val, man.test)
    loaded = load_image_folder(data.root, manifest, tuple(data.image_size), data.mean, data.std)
    return {k: v for k, v in loaded.items() if k in splits}


def _run_config(args) -> RunConfig:
    return RunConfig.load(args.config, args.set or [])


def _checkpoint_run_config(args, ckpt) -> RunConfig:
    if args.config is not None:
        return RunConfig.load(args.config, args.set or [])
    from .config import apply_overrides

    base = RunConfig.from_dict(ckpt.run_config) if ckpt.run_config else RunConfig()
    return apply_overrides(base, args.set or [])


def _model_from(args, run: RunConfig, image_shape):
    if getattr(args, "checkpoint", None):
        return restore_model(load_checkpoint(args.checkpoint))
    return build_model(model_section_to_config(run, image_shape), run.train.precision)


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    run = _run_config(args)
    splits = load_splits(run)
    run_dir = Path(run.output.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(run.to_yaml(), encoding="utf-8")
    model_cfg = model_section_to_config(run, splits["train"].image_shape)
    try:
        result = train(run.train, splits["train"], splits["val"], model_config=model_cfg,
                       run_dir=run_dir, run_config=run.to_dict())
    except DivergenceError as exc:
        raise CLIError(f"{exc}; last good checkpoint kept in {run_dir}", EXIT_RUNTIME) from exc
    print(f"trained {run.train.total_episodes} episodes; best val accuracy "
          f"{100 * result.best_val_acc:.2f}% at episode {result.best_episode}; run dir {run_dir}")
    return EXIT_OK


def _report_paths(args, default_dir: Path) -> Path:
    return Path(args.out) if args.out else default_dir / "report.json"


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    run = _checkpoint_run_config(args, ckpt)
    model = restore_model(ckpt)
    test = load_splits(run, ("test",))["test"]
    ev = run.eval
    spec = EpisodeSpec(ev.n_way, ev.k_shot, ev.q_per_class)
    report = evaluate(model, test, spec, ev.n_episodes, ev.seed, run.train.alpha, run.train.m)
    out = _report_paths(args, Path(args.checkpoint).parent)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json(), encoding="utf-8")
    if args.per_episode:
        Path(args.per_episode).write_text(report.accuracy_column(), encoding="utf-8")
    print(report.headline())
    layers = ", ".join(f"layer {i}: {100 * m:.2f} ± {100 * c:.2f}" for i, (m, c) in sorted(report.per_layer_accuracy.items()))
    print(f"per-layer probe: {layers}")
    return EXIT_OK


def cmd_compare(args) -> int:
    ck_a, ck_b = load_checkpoint(args.checkpoint_a), load_checkpoint(args.checkpoint_b)
    args.checkpoint = args.checkpoint_a
    run = _checkpoint_run_config(args, ck_a)
    test = load_splits(run, ("test",))["test"]
    ev = run.eval
    spec = EpisodeSpec(ev.n_way, ev.k_shot, ev.q_per_class)
    paired = compare(restore_model(ck_a), restore_model(ck_b), test, spec, ev.n_episodes, ev.seed,
                     run.train.alpha, run.train.m)
    if args.out:
        Path(args.out).write_text(paired.to_json(), encoding="utf-8")
    print(f"A: {paired.a.headline()}")
    print(f"B: {paired.b.headline()}")
    print(f"A - B: {100 * paired.mean_difference:.2f} ± {100 * paired.ci95_difference:.2f}")
    return EXIT_OK


def cmd_synth_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CLIError(f"target directory {out} is not empty (use --force)", EXIT_CONFIG)
    try:
        image_size = tuple(int(v) for v in args.image_size.split(","))
        spec = SyntheticSpec(
            n_classes=args.n_classes, examples_per_class=args.examples_per_class,
            image_size=image_size, class_separation=args.separation, noise_scale=args.noise,
            seed=args.seed, prototype_resolution=args.prototype_resolution,
        )
    except (ValueError, DatasetError) as exc:
        if isinstance(exc, SeparationInfeasible):
            raise
        raise CLIError(f"config error: {exc}", EXIT_CONFIG) from exc
    data = generate_synthetic(spec)
    export_image_folder(data, out, fmt=args.format)
    if args.split:
        counts = [int(v) for v in args.split.split(",")]
        if len(counts) != 3 or sum(counts) > spec.n_classes:
            raise CLIError("--split needs three counts summing to at most n_classes", EXIT_CONFIG)
        classes = [str(c) for c in data.classes]
        a, b = counts[0], counts[0] + counts[1]
        for name, part in zip(("train", "val", "test"), (classes[:a], classes[a:b], classes[b:b + counts[2]])):
            write_class_list(out / f"{name}.txt", part)
    print(f"wrote {spec.n_classes} classes x {spec.examples_per_class} examples to {out}")
    return EXIT_OK


def format_dump(out, episode, seed: int) -> str:
    """Plain-text dump of one episode's matrices; ``%.17g`` so values round-trip."""
    buf = io.StringIO()
    spec = episode.spec
    buf.write(f"# episode n_way={spec.n_way} k_shot={spec.k_shot} q_per_class={spec.q_per_class} seed={seed}\n")

    def block(title, arr):
        arr = np.atleast_2d(np.asarray(arr, dtype=np.float64))
        buf.write(f"## {title} {arr.shape[0]}x{arr.shape[1]}\n")
        np.savetxt(buf, arr, fmt="%.17g")

    block("labels", episode.labels[None, :])
    block("P0", out.p0.detach())
    for i in sorted(out.p_star):
        block(f"layer{i} sigma", out.sigma[i].detach()[None, :])
        block(f"layer{i} S", out.similarity[i].detach())
        block(f"layer{i} W", out.graph[i].detach())
        block(f"layer{i} L", out.operator[i].detach())
        block(f"layer{i} Pstar", out.p_star[i].detach())
        block(f"layer{i} p", out.probs[i].detach())
    if out.loss is not None:
        losses = [[i, float(v.detach())] for i, v in sorted(out.loss.per_layer.items())]
        block("loss layer,value", losses)
    return buf.getvalue()


def parse_dump(text: str) -> dict[str, np.ndarray]:
    blocks: dict[str, list] = {}
    current = None
    for line in text.splitlines():
        if line.startswith("## "):
            current = line[3:].rsplit(" ", 1)[0]
            blocks[current] = []
        elif line.startswith("#") or not line.strip():
            continue
        elif current is not None:
            blocks[current].append([float(v) for v in line.split()])
    return {k: np.asarray(v) for k, v in blocks.items()}


def cmd_inspect(args) -> int:
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        run = _checkpoint_run_config(args, ckpt)
        model = restore_model(ckpt)
    else:
        run = _run_config(args)
        model = None
    data = load_splits(run, (args.split,))[args.split]
    if model is None:
        model = build_model(model_section_to_config(run, data.image_shape), run.train.precision)
    ev = run.eval
    spec = EpisodeSpec(ev.n_way, ev.k_shot, ev.q_per_class)
    episode = sample_episode(data, spec, np.random.default_rng(args.seed))
    model.eval()
    with torch.no_grad():
        out = model.run_episode(episode, alpha=run.train.alpha, m=run.train.m,
                                weights=run.train.layer_weights)
    text = format_dump(out, episode, args.seed)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    run = _run_config(args)
    size = args.image_size
    cfg = ModelConfig(image_shape=(3, size, size), width=run.model.width, layers=run.train.layers,
                      relation_channels=run.model.relation_channels,
                      relation_hidden=run.model.relation_hidden, seed=args.seed)
    model = build_model(cfg, "double")
    episode = miniature_episode(args.seed, size)
    report = gradcheck(model, episode, alpha=run.train.alpha, m=args.m,
                       weights=run.train.layer_weights, n_params=args.n_params, step=args.step,
                       tolerance=args.tolerance, seed=args.seed)
    print(report.summary())
    if args.json:
        Path(args.json).write_text(json.dumps({
            "max_rel_error": report.max_rel_error, "step": report.step, "tolerance": report.tolerance,
            "entries": [vars(e) for e in report.entries]}, indent=2), encoding="utf-8")
    return EXIT_OK if report.passed else EXIT_RUNTIME


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taprop", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-path override, repeatable")
        return p

    p = with_config(sub.add_parser("train", help="meta-train a model"))
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("eval", help="episodic test accuracy of a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="report path (default: next to the checkpoint)")
    p.add_argument("--per-episode", help="write per-episode accuracies, one per line")
    p.set_defaults(func=cmd_eval)

    p = with_config(sub.add_parser("compare", help="paired evaluation of two checkpoints"))
    p.add_argument("checkpoint_a")
    p.add_argument("checkpoint_b")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("synth-data", help="write a synthetic class-per-folder dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-classes", type=int, default=8)
    p.add_argument("--examples-per-class", type=int, default=40)
    p.add_argument("--image-size", default="3,32,32", help="C,H,W")
    p.add_argument("--separation", type=float, default=5.0)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--prototype-resolution", type=int, default=SyntheticSpec.prototype_resolution)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("npy", "png"), default="npy")
    p.add_argument("--split", help="TRAIN,VAL,TEST class counts; writes manifest files")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth_data)

    p = with_config(sub.add_parser("inspect", help="dump one episode's graphs and scores"))
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect)

    p = with_config(sub.add_parser("gradcheck", help="finite-difference check of the episode loss"))
    p.add_argument("--n-params", type=int, default=50)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--image-size", type=int, default=8)
    p.add_argument("--m", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SeparationInfeasible, EpisodeError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except DatasetError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - top-level guard
        log.exception("unexpected failure")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
