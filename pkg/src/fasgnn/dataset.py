"""Steering-angle datasets.

Binary layout (all little-endian)::

    8 bytes   magic  b"FASDSET\\0"
    4 bytes   uint32 header length L
    L bytes   UTF-8 JSON header {version, n_antennas, n_users, seed, size, config_hash}
    size*K*8  float64 angles, row-major (one record of K values per sample)
"""
from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .channel import SystemConfig

MAGIC = b"FASDSET\0"
FORMAT_VERSION = 1


@dataclass
class Dataset:
    angles: np.ndarray  # (size, K), radians in [0, pi)
    n_antennas: int
    seed: int | None = None
    config_hash: str = ""

    @property
    def n_users(self) -> int:
        return self.angles.shape[1]

    def __len__(self):
        return self.angles.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.angles[idx], self.n_antennas, self.seed, self.config_hash)

    def content_hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.angles, dtype="<f8").tobytes()).hexdigest()[:16]


def sample_angles(seed: int, index: int, n_users: int) -> np.ndarray:
    """Angles of sample ``index``; the generator is keyed by (seed, index)."""
    return np.random.default_rng([seed, index]).uniform(0.0, np.pi, n_users)


def sample_dataset(cfg: SystemConfig, size: int, seed: int, start: int = 0) -> Dataset:
    """Draw ``size`` i.i.d. samples with theta_k ~ U[0, pi).

    Each sample has its own generator keyed by its index, so any subset can
    be regenerated alone and parallel generation gives the same bytes.
    """
    if size < 0:
        raise ValueError("size must be non-negative")
    angles = np.empty((size, cfg.n_users))
    for i in range(size):
        angles[i] = sample_angles(seed, start + i, cfg.n_users)
    return Dataset(angles, cfg.n_antennas, seed, cfg.config_hash())


def split_dataset(ds: Dataset, fractions=(0.9, 0.05, 0.05)) -> tuple:
    """Contiguous train/validation/test split."""
    if abs(sum(fractions) - 1.0) > 1e-12:
        raise ValueError("fractions must sum to one")
    n = len(ds)
    cuts = np.floor(np.cumsum(fractions)[:-1] * n).astype(int)
    bounds = [0, *cuts, n]
    return tuple(ds.subset(slice(a, b)) for a, b in zip(bounds[:-1], bounds[1:]))


def save_dataset(ds: Dataset, path) -> None:
    header = {
        "version": FORMAT_VERSION,
        "n_antennas": int(ds.n_antennas),
        "n_users": int(ds.n_users),
        "seed": ds.seed,
        "size": len(ds),
        "config_hash": ds.config_hash,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(ds.angles, dtype="<f8").tobytes())


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a dataset file")
        (n,) = struct.unpack("<I", fh.read(4))
        return json.loads(fh.read(n))


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    (n,) = struct.unpack("<I", raw[len(MAGIC): len(MAGIC) + 4])
    start = len(MAGIC) + 4
    header = json.loads(raw[start: start + n])
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {header.get('version')}")
    body = np.frombuffer(raw[start + n:], dtype="<f8")
    size, k = header["size"], header["n_users"]
    if body.size != size * k:
        raise ValueError(f"{path}: truncated body ({body.size} values, expected {size * k})")
    angles = body.reshape(size, k).astype(np.float64)
    return Dataset(angles, header["n_antennas"], header["seed"], header["config_hash"])


def export_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"theta_{k + 1}" for k in range(ds.n_users)])
        for row in ds.angles:
            writer.writerow([repr(float(v)) for v in row])
