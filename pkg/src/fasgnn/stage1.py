"""Antenna-position stage: unconstrained head outputs -> feasible positions.

The position head emits xi (N-1 reals) and xi_max (one real).  The gaps
above the minimum spacing are

    delta_n = softmax(xi)_n * delta_max * sigmoid(xi_max),   n = 2..N

with delta_1 = 0, and x_n = (n-1) * spacing + sum_{i<=n} delta_i.  Any real
(xi, xi_max) therefore yields x_1 = 0, gaps >= spacing and x_N <= aperture.
"""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, as_tensor, ops
from .channel import SystemConfig


def embed_angles(angles, mode: str = "real") -> Tensor:
    """Node input features (B, K, 1): theta + 0i, or exp(i theta)."""
    angles = np.asarray(angles, dtype=np.float64)
    if mode == "real":
        feat = angles.astype(np.complex128)
    elif mode == "phasor":
        feat = np.exp(1j * angles)
    else:
        raise ValueError(f"unknown angle embedding {mode!r}")
    return Tensor(feat[..., None])


def xi_to_delta(xi, xi_max, cfg: SystemConfig) -> Tensor:
    """Spacing slack vector (B, N) with a leading zero column.

    ``xi`` is (B, N-1), ``xi_max`` is (B,).
    """
    xi, xi_max = as_tensor(xi), as_tensor(xi_max)
    if xi.shape[-1] != cfg.n_antennas - 1:
        raise ValueError(f"xi has {xi.shape[-1]} entries, expected {cfg.n_antennas - 1}")
    weights = ops.softmax(xi, axis=-1)
    span = ops.scalar_mul(ops.sigmoid(xi_max), cfg.delta_max)
    tail = weights * ops.reshape(span, (*span.shape, 1))
    zeros = Tensor(np.zeros((*xi.shape[:-1], 1)))
    return ops.concat([zeros, tail], axis=-1)


def delta_to_positions(delta, cfg: SystemConfig) -> Tensor:
    """x_n = (n-1) * spacing + cumulative sum of delta, shape (B, N)."""
    delta = as_tensor(delta)
    n = cfg.n_antennas
    # cumulative sum as a product with an upper-triangular ones matrix
    upper = np.triu(np.ones((n, n)))
    return ops.matmul(delta, upper) + np.arange(n) * cfg.min_spacing


def positions_to_channels(x, angles, cfg: SystemConfig) -> Tensor:
    """Channel rows h(x, theta_k)^H stacked to (B, K, N), differentiable in x.

    Same arithmetic as :func:`fasgnn.channel.channel_matrix`, so the values
    agree bitwise.
    """
    x = as_tensor(x)
    kc = cfg.wavenumber * np.cos(np.asarray(angles, dtype=np.float64))
    phase = ops.mul(Tensor(kc[..., :, None]), ops.reshape(x, (*x.shape[:-1], 1, x.shape[-1])))
    return ops.exp_i(ops.neg(phase))


def span_fraction(xi_max) -> np.ndarray:
    """Share of delta_max that is used; handy for diagnostics."""
    return 1.0 / (1.0 + np.exp(-np.asarray(xi_max)))
