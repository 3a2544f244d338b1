"""Checkpoint container.

An ``.npz`` archive holding

* ``param/<branch>.<layer>.<tensor>``: little-endian float64 arrays; complex
  tensors are stored as real pairs with a trailing axis of length 2,
* ``bn/<branch>.bn<f>/running_mean`` and ``running_cov``: batch-norm state,
  stored the same way,
* ``meta``: UTF-8 JSON (format, version, architecture, system, extras).

Loading rebuilds the model from the metadata, so values round-trip bitwise.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .channel import SystemConfig
from .model import ArchConfig, TwoStageGNN

FORMAT = "fasgnn-checkpoint"
VERSION = 1


def _to_pairs(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if np.iscomplexobj(arr):
        arr = np.stack([arr.real, arr.imag], axis=-1)
    return np.ascontiguousarray(arr, dtype="<f8")


def _from_pairs(arr: np.ndarray, like: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if np.iscomplexobj(like):
        if arr.shape[-1] != 2:
            raise ValueError("complex tensor stored without a real/imag axis")
        out = np.empty(arr.shape[:-1], dtype=np.complex128)
        out.real = arr[..., 0]
        out.imag = arr[..., 1]
        return out
    return arr.copy()


def save_checkpoint(model: TwoStageGNN, path, extra: dict | None = None) -> Path:
    path = Path(path)
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "arch": model.arch.to_dict(),
        "system": model.cfg.to_dict(),
        "seed": model.seed,
        "n_antennas": model.cfg.n_antennas,
        "extra": extra or {},
    }
    arrays = {k: _to_pairs(v) for k, v in model.state().items()}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_meta(path) -> dict:
    with np.load(path) as z:
        if "meta" not in z.files:
            raise ValueError(f"{path}: not a checkpoint (no metadata)")
        meta = json.loads(z["meta"].tobytes().decode())
    if meta.get("format") != FORMAT:
        raise ValueError(f"{path}: unexpected format {meta.get('format')!r}")
    if meta.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    return meta


def load_checkpoint(path, n_users: int | None = None) -> TwoStageGNN:
    """Rebuild the model; ``n_users`` re-targets the system block (shared weights)."""
    meta = read_meta(path)
    cfg = SystemConfig.from_dict(meta["system"])
    if n_users is not None:
        cfg = cfg.with_users(n_users)
    arch_d = dict(meta["arch"])
    arch = ArchConfig(**{**arch_d, "gal_layers": tuple(arch_d["gal_layers"]), "fl_layers": tuple(arch_d["fl_layers"])})
    model = TwoStageGNN(cfg, arch, seed=meta.get("seed", 0))
    template = model.state()
    with np.load(path) as z:
        state = {k: _from_pairs(z[k], template[k]) if k in template else z[k] for k in z.files if k != "meta"}
    model.load_state(state)
    return model
