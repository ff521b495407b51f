"""Episodic data model and N-way K-shot task sampling."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np


class EpisodeError(ValueError):
    """Raised when an episode cannot be formed from the given data."""


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int
    k_shot: int
    q_per_class: int = 15

    def __post_init__(self):
        if int(self.n_way) < 2:
            raise EpisodeError(f"n_way must be >= 2, got {self.n_way}")
        if int(self.k_shot) < 1:
            raise EpisodeError(f"k_shot must be >= 1, got {self.k_shot}")
        if int(self.q_per_class) < 1:
            raise EpisodeError(f"q_per_class must be >= 1, got {self.q_per_class}")

    @property
    def n_support(self) -> int:
        return self.n_way * self.k_shot

    @property
    def n_query(self) -> int:
        return self.n_way * self.q_per_class

    @property
    def n_nodes(self) -> int:
        return self.n_support + self.n_query


@dataclass(frozen=True)
class EpisodeIds:
    """Example ids of one sampled task, before images are attached.

    Support and query ids are ordered by episode label, then by draw order.
    """

    spec: EpisodeSpec
    support_ids: np.ndarray
    support_labels: np.ndarray
    query_ids: np.ndarray
    query_labels: np.ndarray
    class_map: dict


@dataclass(frozen=True)
class Episode:
    """One N-way K-shot task.

    Node order everywhere downstream is ``support`` followed by ``query``;
    both blocks are sorted by episode label.
    """

    spec: EpisodeSpec
    support_images: np.ndarray
    support_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    class_map: dict = field(default_factory=dict)
    support_ids: np.ndarray | None = None
    query_ids: np.ndarray | None = None

    @property
    def images(self) -> np.ndarray:
        return np.concatenate([self.support_images, self.query_images], axis=0)

    @property
    def labels(self) -> np.ndarray:
        return np.concatenate([self.support_labels, self.query_labels])

    @property
    def n_nodes(self) -> int:
        return len(self.support_labels) + len(self.query_labels)

    def support(self) -> list[tuple[np.ndarray, int]]:
        return list(zip(self.support_images, self.support_labels.tolist()))

    def query(self) -> list[tuple[np.ndarray, int]]:
        return list(zip(self.query_images, self.query_labels.tolist()))


def remap_labels(dataset_class_ids: Sequence[Hashable]) -> tuple[np.ndarray, dict]:
    """Assign episode labels 0..N-1 in order of first appearance.

    Returns the label vector and ``class_map`` (episode label -> dataset id).
    """
    ids = list(dataset_class_ids)
    if len(set(ids)) != len(ids):
        raise EpisodeError("degenerate episode: duplicate class ids " f"{ids}")
    if len(ids) < 2:
        raise EpisodeError(f"n_way must be >= 2, got {len(ids)} class(es)")
    class_map = {label: cid for label, cid in enumerate(ids)}
    return np.arange(len(ids)), class_map


def check_episode(ep: Episode | EpisodeIds) -> None:
    """Assert the structural invariants of an episode; raise EpisodeError otherwise."""
    spec = ep.spec
    s_lab = np.asarray(ep.support_labels)
    q_lab = np.asarray(ep.query_labels)
    if len(s_lab) != spec.n_support or len(q_lab) != spec.n_query:
        raise EpisodeError("wrong support/query size")
    counts_s = np.bincount(s_lab, minlength=spec.n_way)
    counts_q = np.bincount(q_lab, minlength=spec.n_way)
    if len(counts_s) != spec.n_way or np.any(counts_s != spec.k_shot):
        raise EpisodeError(f"support label counts {counts_s.tolist()}")
    if len(counts_q) != spec.n_way or np.any(counts_q != spec.q_per_class):
        raise EpisodeError(f"query label counts {counts_q.tolist()}")
    if np.any(np.diff(s_lab) < 0) or np.any(np.diff(q_lab) < 0):
        raise EpisodeError("nodes not sorted by label")
    cm = ep.class_map
    if sorted(cm) != list(range(spec.n_way)) or len(set(cm.values())) != spec.n_way:
        raise EpisodeError("class_map is not a bijection onto N classes")
    if ep.support_ids is not None and ep.query_ids is not None:
        ids = np.concatenate([ep.support_ids, ep.query_ids])
        if len(np.unique(ids)) != len(ids):
            raise EpisodeError("duplicate example ids in episode")


def sample_episode_ids(
    index: Mapping[Hashable, Sequence[int]],
    spec: EpisodeSpec,
    rng: np.random.Generator,
) -> EpisodeIds:
    """Draw one task's example ids from a class -> example-id map.

    Draw order is fixed: N classes from the sorted class list, then K+Q ids
    per chosen class in chosen-class order (first K go to support).
    """
    classes = sorted(index)
    if len(classes) < spec.n_way:
        raise EpisodeError(
            f"dataset too small for N-way: {len(classes)} classes < n_way={spec.n_way}"
        )
    need = spec.k_shot + spec.q_per_class
    chosen_pos = rng.choice(len(classes), size=spec.n_way, replace=False)
    chosen = [classes[i] for i in chosen_pos]
    labels, class_map = remap_labels(chosen)

    support_ids, query_ids = [], []
    for cid in chosen:
        pool = np.asarray(index[cid])
        if len(pool) < need:
            raise EpisodeError(
                f"class too small for K+Q: class {cid!r} has {len(pool)} < {need} examples"
            )
        picked = pool[rng.choice(len(pool), size=need, replace=False)]
        support_ids.append(picked[: spec.k_shot])
        query_ids.append(picked[spec.k_shot:])

    return EpisodeIds(
        spec=spec,
        support_ids=np.concatenate(support_ids),
        support_labels=np.repeat(labels, spec.k_shot),
        query_ids=np.concatenate(query_ids),
        query_labels=np.repeat(labels, spec.q_per_class),
        class_map=class_map,
    )


def sample_episode(data, spec: EpisodeSpec, rng: np.random.Generator) -> Episode:
    """Sample a full episode (images attached) from a ``FewShotData``-like object.

    ``data`` needs an ``index`` mapping (class -> example ids) and an
    ``images`` array addressable by example id.
    """
    ids = sample_episode_ids(data.index, spec, rng)
    return Episode(
        spec=spec,
        support_images=data.images[ids.support_ids],
        support_labels=ids.support_labels,
        query_images=data.images[ids.query_ids],
        query_labels=ids.query_labels,
        class_map=ids.class_map,
        support_ids=ids.support_ids,
        query_ids=ids.query_ids,
    )


class EpisodeSampler:
    """Seeded stream of episodes.

    Sampling is without replacement inside an episode and with replacement
    across episodes. ``spawn`` derives independent streams for workers.
    """

    def __init__(self, data, spec: EpisodeSpec, seed: int | np.random.SeedSequence = 0):
        self.data = data
        self.spec = spec
        self._seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        self.rng = np.random.default_rng(self._seq)

    def __iter__(self):
        return self

    def __next__(self) -> Episode:
        return sample_episode(self.data, self.spec, self.rng)

    def spawn(self, n: int) -> list["EpisodeSampler"]:
        return [EpisodeSampler(self.data, self.spec, s) for s in self._seq.spawn(n)]
