"""Single-file checkpoint container.

Layout::

    b"MTCK" | u32 format version | u64 header length | header (UTF-8 JSON) | array data

The header holds free-form ``meta`` plus a manifest of arrays (name, shape,
dtype, byte offset into the data section, byte count). Arrays are stored
raw, C-order, little-endian. Serialization is canonical (sorted JSON keys,
fixed array order) so save -> load -> save reproduces the same bytes.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MTCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, order="C")  # ascontiguousarray would turn 0-d into 1-d
    if arr.dtype.byteorder == ">" or (arr.dtype.byteorder == "=" and not np.little_endian):
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def write_container(path: str | os.PathLike, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    manifest, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = _le(np.asarray(arr))
        raw = arr.tobytes()
        manifest.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.newbyteorder("<").str,
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"version": FORMAT_VERSION, "meta": meta, "arrays": manifest},
        sort_keys=True, separators=(",", ":"), allow_nan=False,
    ).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header)
        for raw in chunks:
            fh.write(raw)
    os.replace(tmp, path)


def read_container(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack("<IQ", blob[4:16])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} is not supported; this build reads version {FORMAT_VERSION}"
        )
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    data = memoryview(blob)[16 + hlen:]
    arrays = {}
    for entry in header["arrays"]:
        raw = data[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return header["meta"], arrays


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().contiguous().numpy()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


@dataclass
class Checkpoint:
    meta: dict
    model_state: dict[str, torch.Tensor]
    optimizer_state: dict | None

    @property
    def episode(self) -> int:
        return int(self.meta.get("episode", 0))

    @property
    def model_config(self) -> dict:
        return self.meta["model"]

    @property
    def run_config(self) -> dict | None:
        return self.meta.get("config")

    @property
    def rng_state(self) -> dict | None:
        return self.meta.get("rng_state")

    @property
    def precision(self) -> str:
        return self.meta.get("precision", "single")


def save_checkpoint(
    path: str | os.PathLike,
    model,
    optimizer: torch.optim.Optimizer | None = None,
    episode: int = 0,
    config: dict | None = None,
    rng_state: dict | None = None,
    extra: dict | None = None,
) -> None:
    arrays = {f"model/{k}": _to_numpy(v) for k, v in model.state_dict().items()}
    meta = {
        "model": model.config.to_dict(),
        "precision": "double" if model.dtype == torch.float64 else "single",
        "episode": int(episode),
        "config": config,
        "rng_state": rng_state,
        "extra": extra or {},
    }
    if optimizer is not None:
        state = optimizer.state_dict()
        meta["optimizer"] = {"param_groups": state["param_groups"]}
        for idx in sorted(state["state"]):
            for key in sorted(state["state"][idx]):
                val = state["state"][idx][key]
                arrays[f"optimizer/{idx}/{key}"] = _to_numpy(torch.as_tensor(val))
    write_container(path, _jsonable(meta), arrays)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    if not Path(path).is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    meta, arrays = read_container(path)
    model_state = {k[len("model/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("model/")}
    opt_state = None
    if "optimizer" in meta:
        state: dict = {}
        for k, v in arrays.items():
            if k.startswith("optimizer/"):
                _, idx, key = k.split("/", 2)
                state.setdefault(int(idx), {})[key] = torch.from_numpy(v)
        groups = []
        for g in meta["optimizer"]["param_groups"]:
            g = dict(g)
            if "betas" in g:
                g["betas"] = tuple(g["betas"])
            groups.append(g)
        opt_state = {"state": state, "param_groups": groups}
    return Checkpoint(meta, model_state, opt_state)


def restore_model(ckpt: Checkpoint):
    from .model import ModelConfig, build_model

    model = build_model(ModelConfig.from_dict(ckpt.model_config), ckpt.precision)
    model.load_state_dict(ckpt.model_state)
    return model
