"""Class-indexed image datasets: folder loader, split manifests, synthetic generator."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp", ".gif", ".tif", ".tiff", ".webp", ".npy"}


class DatasetError(ValueError):
    pass


class SeparationInfeasible(DatasetError):
    pass


@dataclass
class FewShotData:
    """Images of one split plus a class -> example-id index.

    Example ids are row positions in ``images``.
    """

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DatasetError(f"images must be [n, C, H, W], got shape {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DatasetError("images and labels differ in length")
        index: dict = {}
        for i, c in enumerate(self.labels.tolist()):
            index.setdefault(c, []).append(i)
        self.index = {c: np.asarray(ids, dtype=np.int64) for c, ids in index.items()}
        self.images.setflags(write=False)

    @property
    def classes(self) -> list:
        return sorted(self.index)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def __len__(self):
        return len(self.images)

    def subset(self, classes: Sequence[Hashable]) -> "FewShotData":
        keep = np.isin(self.labels, np.asarray(list(classes), dtype=self.labels.dtype))
        return FewShotData(self.images[keep].copy(), self.labels[keep].copy())


@dataclass(frozen=True)
class SplitManifest:
    train_classes: tuple
    val_classes: tuple
    test_classes: tuple

    def __post_init__(self):
        splits = {"train": self.train_classes, "val": self.val_classes, "test": self.test_classes}
        for name, cls in splits.items():
            if not cls:
                raise DatasetError(f"manifest split {name!r} is empty")
            if len(set(cls)) != len(cls):
                raise DatasetError(f"manifest split {name!r} lists a class twice")
        names = list(splits)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                common = set(splits[a]) & set(splits[b])
                if common:
                    raise DatasetError(f"splits {a!r} and {b!r} share classes: {sorted(common)}")

    def split(self, name: str) -> tuple:
        return {"train": self.train_classes, "val": self.val_classes, "test": self.test_classes}[name]


def read_class_list(path: str | os.PathLike) -> tuple[str, ...]:
    """Newline-delimited class ids; ``#`` starts a comment."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                out.append(line)
    return tuple(out)


def read_manifest(train: str | os.PathLike, val: str | os.PathLike, test: str | os.PathLike) -> SplitManifest:
    return SplitManifest(read_class_list(train), read_class_list(val), read_class_list(test))


def write_class_list(path: str | os.PathLike, classes: Sequence[Hashable]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{c}\n" for c in classes)


def _read_image(path: Path, target_size: tuple[int, int]) -> np.ndarray:
    h, w = target_size
    try:
        if path.suffix.lower() == ".npy":
            arr = np.load(path, allow_pickle=False).astype(np.float32)
            if arr.ndim != 3:
                raise ValueError(f"expected [C, H, W] array, got shape {arr.shape}")
            if arr.shape[1:] != (h, w):
                arr = np.stack([
                    np.asarray(Image.fromarray(ch, mode="F").resize((w, h), Image.BILINEAR))
                    for ch in arr
                ])
            return arr
        with Image.open(path) as img:
            img = img.convert("RGB").resize((w, h), Image.BILINEAR)
            return np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0
    except Exception as exc:  # PIL raises a zoo of types
        raise DatasetError(f"cannot decode image file {path}: {exc}") from exc


def _class_files(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def load_image_folder(
    root: str | os.PathLike,
    manifest: SplitManifest,
    target_size: tuple[int, int] = (84, 84),
    mean: Sequence[float] | None = None,
    std: Sequence[float] | None = None,
    min_per_class: int = 1,
    workers: int = 1,
) -> dict[str, FewShotData]:
    """Load ``<root>/<class_id>/<files>`` for every split in ``manifest``.

    Image files are resized to ``target_size`` and scaled to [0, 1]; ``.npy``
    files hold float [C, H, W] arrays and are only resized. Per-channel
    ``(x - mean) / std`` is applied afterwards when given.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root does not exist: {root}")
    wanted = [c for split in ("train", "val", "test") for c in manifest.split(split)]
    missing = [c for c in wanted if not (root / c).is_dir()]
    if missing:
        raise DatasetError(f"missing class directories under {root}: {missing}")

    def load_class(cid):
        files = _class_files(root / cid)
        if len(files) < min_per_class:
            raise DatasetError(f"class too small: {cid!r} has {len(files)} image file(s)")
        return np.stack([_read_image(f, target_size) for f in files])

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        loaded = dict(zip(wanted, pool.map(load_class, wanted)))

    shapes = {arr.shape[1:] for arr in loaded.values()}
    if len(shapes) != 1:
        raise DatasetError(f"images have mixed shapes after resize: {sorted(shapes)}")
    n_ch = shapes.pop()[0]
    mean_arr = np.zeros(n_ch, np.float32) if mean is None else np.asarray(mean, np.float32)
    std_arr = np.ones(n_ch, np.float32) if std is None else np.asarray(std, np.float32)
    if mean_arr.shape != (n_ch,) or std_arr.shape != (n_ch,):
        raise DatasetError(f"normalization needs {n_ch} values per channel")
    if np.any(std_arr <= 0):
        raise DatasetError("normalization std must be positive")

    out = {}
    for split in ("train", "val", "test"):
        classes = manifest.split(split)
        images = np.concatenate([loaded[c] for c in classes])
        images = (images - mean_arr[:, None, None]) / std_arr[:, None, None]
        labels = np.concatenate([np.full(len(loaded[c]), c, dtype=object) for c in classes]).astype(str)
        out[split] = FewShotData(images.astype(np.float32), labels)
    return out


@dataclass(frozen=True)
class SyntheticSpec:
    """Prototype-plus-Gaussian-noise classes.

    Each prototype is ``0.5 + class_separation * u`` where ``u`` is a
    unit-norm random pattern drawn at ``prototype_resolution`` and
    upsampled (nearest) to the image size, so class signal is low
    frequency and the noise is per pixel.
    """

    n_classes: int = 8
    examples_per_class: int = 40
    image_size: tuple[int, int, int] = (3, 32, 32)
    class_separation: float = 5.0
    noise_scale: float = 0.5
    seed: int = 0
    prototype_resolution: int = 4
    max_tries: int = 1000

    def __post_init__(self):
        if self.n_classes < 1 or self.examples_per_class < 1:
            raise DatasetError("n_classes and examples_per_class must be positive")
        if not self.class_separation > 0:
            raise DatasetError("class_separation must be > 0")
        if not self.noise_scale > 0:
            raise DatasetError("noise_scale must be > 0")
        if len(self.image_size) != 3 or min(self.image_size) < 1:
            raise DatasetError(f"image_size must be (C, H, W), got {self.image_size}")
        if self.prototype_resolution < 1:
            raise DatasetError("prototype_resolution must be >= 1")


def _upsample(pattern: np.ndarray, h: int, w: int) -> np.ndarray:
    r = pattern.shape[-1]
    rows = (np.arange(h) * r) // h
    cols = (np.arange(w) * r) // w
    return pattern[:, rows][:, :, cols]


def make_prototypes(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    c, h, w = spec.image_size
    r = spec.prototype_resolution
    protos: list[np.ndarray] = []
    tries = 0
    while len(protos) < spec.n_classes:
        if tries >= spec.max_tries:
            raise SeparationInfeasible(
                f"separation infeasible: placed {len(protos)} of {spec.n_classes} prototypes "
                f"at distance >= {spec.class_separation} after {tries} draws"
            )
        tries += 1
        u = _upsample(rng.standard_normal((c, r, r)), h, w)
        u /= np.linalg.norm(u)
        cand = 0.5 + spec.class_separation * u
        if all(np.linalg.norm(cand - p) >= spec.class_separation for p in protos):
            protos.append(cand)
    return np.stack(protos)


def generate_synthetic(spec: SyntheticSpec) -> FewShotData:
    """Deterministic class-indexed dataset with integer class ids 0..n_classes-1."""
    rng = np.random.default_rng(spec.seed)
    protos = make_prototypes(spec, rng)
    n, e = spec.n_classes, spec.examples_per_class
    noise = rng.standard_normal((n, e) + tuple(spec.image_size))
    images = (protos[:, None] + spec.noise_scale * noise).reshape((n * e,) + tuple(spec.image_size))
    labels = np.repeat(np.arange(n), e)
    return FewShotData(images.astype(np.float32), labels)


def split_examples(data: FewShotData, counts: Sequence[int], seed: int = 0) -> list[FewShotData]:
    """Partition every class's examples into disjoint parts of the given sizes.

    Unlike a manifest split, all parts share the same classes.
    """
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[] for _ in counts]
    for cid in data.classes:
        ids = data.index[cid]
        if sum(counts) > len(ids):
            raise DatasetError(f"class too small: {cid!r} has {len(ids)} < {sum(counts)} examples")
        ids = ids[rng.permutation(len(ids))]
        start = 0
        for part, n in zip(parts, counts):
            part.append(np.sort(ids[start:start + n]))
            start += n
    out = []
    for part in parts:
        ids = np.concatenate(part)
        out.append(FewShotData(data.images[ids].copy(), data.labels[ids].copy()))
    return out


def export_image_folder(data: FewShotData, root: str | os.PathLike, fmt: str = "npy") -> Path:
    """Write ``data`` as ``<root>/<class>/<nnnnn>.<fmt>``.

    ``npy`` round-trips exactly through :func:`load_image_folder`; ``png``
    clips to [0, 1] and quantizes to 8 bits.
    """
    root = Path(root)
    for cid in data.classes:
        folder = root / str(cid)
        folder.mkdir(parents=True, exist_ok=True)
        for j, idx in enumerate(data.index[cid]):
            img = data.images[idx]
            path = folder / f"{j:05d}.{fmt}"
            if fmt == "npy":
                np.save(path, img.astype(np.float32), allow_pickle=False)
            elif fmt == "png":
                arr = np.clip(np.rint(img.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
                if arr.shape[2] == 1:
                    arr = arr[:, :, 0]
                Image.fromarray(arr).save(path)
            else:
                raise DatasetError(f"unknown export format {fmt!r}")
    return root


def nearest_prototype_accuracy(data: FewShotData, prototypes: np.ndarray) -> float:
    """Accuracy of assigning each image to its closest prototype in pixel space."""
    x = data.images.reshape(len(data), -1).astype(np.float64)
    p = prototypes.reshape(len(prototypes), -1)
    d = (x ** 2).sum(1)[:, None] - 2 * x @ p.T + (p ** 2).sum(1)[None]
    return float(np.mean(np.argmin(d, axis=1) == data.labels))
