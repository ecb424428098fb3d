"""Checkpoint file: ``b"TTFC"``, u32 version, u64 header length, JSON header,
then raw little-endian float32 tensors in the order the header lists them."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .quantizer import DataTokenizer, VocabLayout
from .transformer import ModelConfig, TrainConfig, TrainedGenerator
from .tree import Ensemble

MAGIC = b"TTFC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _header(g: TrainedGenerator) -> tuple[dict, list[np.ndarray]]:
    tensors, entries = [], []
    for j, state in enumerate(g.states):
        for name, value in state.items():
            arr = value.detach().cpu().numpy().astype("<f4")
            entries.append({"name": f"g{j + 1}.{name}", "shape": list(arr.shape)})
            tensors.append(arr)
    header = {
        "model_config": asdict(g.model_config),
        "train_config": asdict(g.train_config),
        "layout": g.layout.to_dict(),
        "tokenizer": g.tokenizer.to_dict() if g.tokenizer is not None else None,
        "ensemble": g.ensemble.to_dict() if g.ensemble is not None else None,
        "splits": [s.tolist() for s in g.splits],
        "leaves": [np.asarray(l).tolist() for l in g.leaves],
        "history": g.history,
        "extra": g.extra,
        "tensors": entries,
    }
    return header, tensors


def save(g: TrainedGenerator, path: str | Path) -> None:
    header, tensors = _header(g)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", VERSION, len(blob)))
            fh.write(blob)
            for arr in tensors:
                fh.write(np.ascontiguousarray(arr).tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path: str | Path) -> TrainedGenerator:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no such checkpoint: {path}")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, n = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    try:
        header = json.loads(raw[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    pos = 16 + n
    states = [{}, {}]
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape, dtype=np.int64)) * 4
        if pos + size > len(raw):
            raise CheckpointError(f"{path}: truncated tensor data")
        arr = np.frombuffer(raw, dtype="<f4", count=size // 4, offset=pos).reshape(shape)
        pos += size
        model, name = entry["name"].split(".", 1)
        states[int(model[1:]) - 1][name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after tensor data")
    tc = header["train_config"]
    tc["tree_mask"], tc["value_mask"] = tuple(tc["tree_mask"]), tuple(tc["value_mask"])
    return TrainedGenerator(
        layout=VocabLayout.from_dict(header["layout"]),
        model_config=ModelConfig(**header["model_config"]),
        train_config=TrainConfig(**tc),
        states=states,
        splits=[np.array(s, dtype=np.int64) for s in header["splits"]],
        leaves=[np.array(l, dtype=np.int64).reshape(-1, len(header["layout"]["leaf_counts"]))
                for l in header["leaves"]],
        tokenizer=DataTokenizer.from_dict(header["tokenizer"]) if header["tokenizer"] else None,
        ensemble=Ensemble.from_dict(header["ensemble"]) if header["ensemble"] else None,
        history=header["history"],
        extra=header["extra"],
    )
