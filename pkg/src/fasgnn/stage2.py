"""Beamforming stage: hybrid MRT/ZF beams from (p, alpha).

w_k = sqrt(p_k) * wbar_k, where wbar_k is the normalised mix
alpha_k u_k/|u_k| + (1 - alpha_k) h_k/|h_k| of the zero-forcing column u_k
of U = G^H (G G^H)^-1 and the user's own channel h_k.
"""
from __future__ import annotations

import csv

import numpy as np

from .autodiff import Tensor, as_tensor, ops
from .channel import SystemConfig


def channel_columns(g) -> Tensor:
    """H = G^H, (B, N, K); column k is h(x, theta_k)."""
    return ops.hermitian(as_tensor(g))


def zf_directions(g) -> Tensor:
    """Zero-forcing basis U = G^H (G G^H)^-1, shape (B, N, K)."""
    g = as_tensor(g)
    gh = ops.hermitian(g)
    return ops.matmul(gh, ops.hermitian_pd_inverse(ops.matmul(g, gh)))


def _unit_columns(a: Tensor) -> Tensor:
    return a * ops.reciprocal(ops.to_complex(ops.l2_norm(a, axis=-2, keepdims=True)))


def hybrid_direction(u, h, alpha) -> Tensor:
    """Unit-norm mix of ZF (alpha = 1) and MRT (alpha = 0) directions.

    ``u`` and ``h`` are (B, N, K) with one column per user, ``alpha`` is
    (B, K).  Works for a single user as (N, 1) / (1,).
    """
    u, h, alpha = as_tensor(u), as_tensor(h), as_tensor(alpha)
    a = ops.reshape(alpha, (*alpha.shape[:-1], 1, alpha.shape[-1]))
    mix = a * _unit_columns(u) + (1.0 - a) * _unit_columns(h)
    return _unit_columns(mix)


def power_projection(p, p_max: float) -> Tensor:
    """Rescale powers onto the budget only when the budget is exceeded."""
    p = as_tensor(p)
    total = ops.reduce_sum(p, axis=-1, keepdims=True)
    return p * ops.scalar_mul(ops.reciprocal(ops.maximum(total, p_max)), p_max)


def assemble_beams(p, direction) -> Tensor:
    """w_k = sqrt(p_k) wbar_k, shape (B, N, K)."""
    p = as_tensor(p)
    amp = ops.to_complex(ops.sqrt(p))
    return as_tensor(direction) * ops.reshape(amp, (*p.shape[:-1], 1, p.shape[-1]))


# ---------------------------------------------------------------------------
# differentiable utilities


def sinr(w, g, cfg: SystemConfig) -> Tensor:
    """Per-user SINR (B, K) from beams (B, N, K) and channel rows (B, K, N)."""
    gain = ops.abs2(ops.matmul(as_tensor(g), as_tensor(w)))  # (B, K, K), [k, i] = |w_i^H h_k|^2
    k = gain.shape[-1]
    total = ops.reduce_sum(gain, axis=-1)
    signal = ops.reduce_sum(gain * np.eye(k), axis=-1)
    d = cfg.gains(k) if cfg.path_loss else np.ones(k)
    return signal * d * ops.reciprocal((total - signal) * d + cfg.noise_power)


def sum_rate(w, g, cfg: SystemConfig) -> Tensor:
    gamma = sinr(w, g, cfg)
    return ops.scalar_mul(ops.reduce_sum(ops.log(1.0 + gamma), axis=-1), 1.0 / np.log(2.0))


def energy_efficiency(w, g, cfg: SystemConfig) -> Tensor:
    power = ops.reduce_sum(ops.abs2(as_tensor(w)), axis=(-2, -1))
    return sum_rate(w, g, cfg) * ops.reciprocal(power + cfg.p_c)


def utility(w, g, cfg: SystemConfig, kind: str = "sum_rate") -> Tensor:
    if kind == "sum_rate":
        return sum_rate(w, g, cfg)
    if kind == "energy_efficiency":
        return energy_efficiency(w, g, cfg)
    raise ValueError(f"unknown utility {kind!r}")


def export_beams_csv(path, p, alpha, w) -> None:
    """One row per (sample, user): p_k, alpha_k, then w_k as interleaved re/im."""
    p, alpha, w = np.atleast_2d(p), np.atleast_2d(alpha), np.asarray(w)
    if w.ndim == 2:
        w = w[None]
    n = w.shape[-2]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        cols = [c for i in range(n) for c in (f"w{i + 1}_re", f"w{i + 1}_im")]
        out.writerow(["sample", "user", "p", "alpha", *cols])
        for s in range(w.shape[0]):
            for k in range(w.shape[-1]):
                vals = [v for z in w[s, :, k] for v in (z.real, z.imag)]
                out.writerow([s, k, repr(float(p[s, k])), repr(float(alpha[s, k])), *map(repr, map(float, vals))])
