# networks/checkpoint.py
"""Чекпоинт сети: сырой little-endian f32 блоб параметров + JSON заголовок."""

import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

from services.errors import PerfusionError

CHECKPOINT_VERSION = 1


def save_checkpoint(module: nn.Module, out_dir, step: int, extra: dict = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tensors, chunks, offset = [], [], 0
    for name, tensor in module.state_dict().items():
        values = tensor.detach().cpu().numpy().astype("<f4").ravel()
        tensors.append({"name": name, "shape": list(tensor.shape), "offset": offset, "count": int(values.size)})
        chunks.append(values)
        offset += int(values.size)
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
    (out_dir / "params.f32").write_bytes(blob.tobytes())
    header = {
        "version": CHECKPOINT_VERSION,
        "step": int(step),
        "tensors": tensors,
        "rng_state": torch.get_rng_state().tolist(),
        "extra": extra or {},
    }
    (out_dir / "header.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return out_dir


def load_checkpoint(module: nn.Module, ckpt_dir, restore_rng: bool = False) -> dict:
    """Загружает параметры в module; возвращает заголовок."""
    ckpt_dir = Path(ckpt_dir)
    header_path = ckpt_dir / "header.json"
    if not header_path.exists():
        raise PerfusionError("invalid-bundle", f"{header_path} not found")
    header = json.loads(header_path.read_text())
    blob_path = ckpt_dir / "params.f32"
    total = sum(t["count"] for t in header["tensors"])
    if not blob_path.exists() or blob_path.stat().st_size != 4 * total:
        raise PerfusionError("truncated-array", f"params.f32: expected {4 * total} bytes")
    blob = np.frombuffer(blob_path.read_bytes(), dtype="<f4")
    state = module.state_dict()
    for entry in header["tensors"]:
        if entry["name"] not in state:
            raise PerfusionError("invalid-bundle", f"unknown tensor {entry['name']}")
        values = blob[entry["offset"]:entry["offset"] + entry["count"]].reshape(entry["shape"])
        target = state[entry["name"]]
        state[entry["name"]] = torch.from_numpy(values.copy()).to(target.dtype)
    module.load_state_dict(state)
    if restore_rng:
        torch.set_rng_state(torch.tensor(header["rng_state"], dtype=torch.uint8))
    return header
