"""Complex graph-attention, fully-connected and batch-norm layers.

Node features are complex tensors of shape (B, K, V): a batch of B graphs
with K user nodes each.  Attention heads are carried as an extra axis, so
per-layer weights have shape (Z, V_in, d_head) and a layer emits Z*d_head
features per node.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops

ACTIVATIONS = ("crelu", "real_relu")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "crelu":
        return ops.crelu(x)
    if kind == "real_relu":
        # ReLU of the real part only, result kept complex
        return ops.to_complex(ops.relu(ops.re(x)))
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# initialisation


def kaiming_complex(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Kaiming-normal (fan-in) for complex weights.

    Real and imaginary parts are drawn independently with variance 1/fan_in
    each, so E|w|^2 = 2/fan_in.
    """
    std = np.sqrt(1.0 / fan_in)
    return std * rng.standard_normal(shape) + 1j * std * rng.standard_normal(shape)


@dataclass
class CGALParams:
    W: Tensor  # (Z, V_in, d)
    a: Tensor  # (Z, 2d)
    W_res: Tensor  # (Z, V_in, d)
    # virtual node (stage 1 only)
    a_bar: Tensor | None = None  # (Z, d)
    W_bar: Tensor | None = None  # (Z, Z*d, d)
    W_tilde: Tensor | None = None  # (Z, V_vn_in, d)

    @property
    def heads(self) -> int:
        return self.W.shape[0]

    @property
    def head_dim(self) -> int:
        return self.W.shape[2]

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.heads * self.head_dim

    @property
    def has_virtual_node(self) -> bool:
        return self.W_bar is not None

    def tensors(self) -> dict:
        names = ("W", "a", "W_res", "a_bar", "W_bar", "W_tilde")
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}

    @classmethod
    def init(cls, rng, in_dim, heads, head_dim, vn_in_dim=None, prefix=""):
        z, d = heads, head_dim

        def leaf(arr, name):
            return Tensor(arr, requires_grad=True, name=prefix + name)

        p = cls(
            W=leaf(kaiming_complex(rng, (z, in_dim, d), in_dim), "W"),
            a=leaf(kaiming_complex(rng, (z, 2 * d), 2 * d), "a"),
            W_res=leaf(kaiming_complex(rng, (z, in_dim, d), in_dim), "W_res"),
        )
        if vn_in_dim is not None:
            p.a_bar = leaf(kaiming_complex(rng, (z, d), d), "a_bar")
            p.W_bar = leaf(kaiming_complex(rng, (z, z * d, d), z * d), "W_bar")
            p.W_tilde = leaf(kaiming_complex(rng, (z, vn_in_dim, d), vn_in_dim), "W_tilde")
        return p


@dataclass
class CFLParams:
    W: Tensor  # (H_in, H_out)
    b: Tensor  # (H_out,), shared by every node row

    @classmethod
    def init(cls, rng, in_dim, out_dim, prefix=""):
        return cls(
            W=Tensor(kaiming_complex(rng, (in_dim, out_dim), in_dim), requires_grad=True, name=prefix + "W"),
            b=Tensor(np.zeros(out_dim, dtype=np.complex128), requires_grad=True, name=prefix + "b"),
        )

    def tensors(self) -> dict:
        return {"W": self.W, "b": self.b}


# ---------------------------------------------------------------------------
# graph attention


def _project(V: Tensor, W: Tensor) -> Tensor:
    """Per-head projection (..., V_in) x (Z, V_in, d) -> (..., Z, d) as one GEMM."""
    z, v, d = W.shape
    flat = ops.reshape(ops.transpose(W, (1, 0, 2)), (v, z * d))
    out = ops.matmul(V, flat)
    return ops.reshape(out, (*out.shape[:-1], z, d))


def _head_scores(V: Tensor, W: Tensor, a: Tensor) -> Tensor:
    """Attention scores sum_d (V W_z)[..., k, d] a[z, d] -> (..., Z, K).

    The weight vector is folded into W first, (V W) a = V (W a), so the
    scores cost one thin GEMM.
    """
    z, v, d = W.shape
    folded = ops.reduce_sum(W * ops.reshape(a, (z, 1, d)), axis=-1)  # (Z, V_in)
    return ops.swap_last(ops.matmul(V, ops.swap_last(folded)))


def attention_weights(V: Tensor, p: CGALParams, slope: float = ops.LEAKY_SLOPE):
    """Row-stochastic attention (B, Z, K, K) over all nodes, self included.

    Also returns the projected features V W laid out as (B, K, Z, d).
    """
    d = p.head_dim
    P = _project(V, p.W)
    src = _head_scores(V, p.W, p.a[:, :d])
    dst = _head_scores(V, p.W, p.a[:, d:])
    b, z, k = src.shape
    logits = ops.reshape(src, (b, z, k, 1)) + ops.reshape(dst, (b, z, 1, k))
    return ops.softmax(ops.leaky_relu(ops.re(logits), slope), axis=-1), P


def _merge_heads(H: Tensor) -> Tensor:
    """(B, K, Z, d) -> (B, K, Z*d)."""
    return ops.reshape(H, (*H.shape[:-2], H.shape[-2] * H.shape[-1]))


def cgal_forward(V: Tensor, p: CGALParams, act: str = "crelu", slope: float = ops.LEAKY_SLOPE) -> Tensor:
    """One complex graph-attention layer, (B, K, V_in) -> (B, K, Z*d)."""
    if V.shape[-1] != p.in_dim:
        raise ValueError(f"feature width {V.shape[-1]} != layer input {p.in_dim}")
    A, P = attention_weights(V, p, slope)
    # messages: sum_j A[b, z, k, j] P[b, j, z, d]
    Pz = ops.transpose(P, (0, 2, 1, 3))  # (B, Z, K, d)
    message = ops.transpose(ops.matmul(ops.to_complex(A), Pz), (0, 2, 1, 3))
    residual = _project(V, p.W_res)
    return _merge_heads(activation(message + residual, act))


def virtual_node_weights(V: Tensor, p: CGALParams, slope: float = ops.LEAKY_SLOPE):
    """Attention of the virtual node over the K user nodes, (B, Z, K)."""
    Q = _project(V, p.W_bar)
    logits = ops.re(_head_scores(V, p.W_bar, p.a_bar))
    return ops.softmax(ops.leaky_relu(logits, slope), axis=-1), Q


def virtual_node_forward(V: Tensor, v_prev: Tensor, p: CGALParams, act: str = "crelu",
                         slope: float = ops.LEAKY_SLOPE) -> Tensor:
    """Update the graph-level node from the freshly updated node features.

    ``V`` is this layer's output (B, K, Z*d), ``v_prev`` the previous
    virtual-node feature (B, 1, V_vn).  Returns (B, 1, Z*d).
    """
    if not p.has_virtual_node:
        raise ValueError("layer has no virtual-node parameters")
    if V.shape[-1] != p.W_bar.shape[1] or v_prev.shape[-1] != p.W_tilde.shape[1]:
        raise ValueError("virtual-node feature widths do not match the layer")
    beta, Q = virtual_node_weights(V, p, slope)
    b, z, k = beta.shape
    # pooled[b, z, d] = sum_k beta[b, z, k] Q[b, k, z, d]
    weights = ops.reshape(ops.swap_last(ops.to_complex(beta)), (b, k, z, 1))
    pooled = ops.reduce_sum(weights * Q, axis=1)  # (B, Z, d)
    residual = _project(v_prev, p.W_tilde)[:, 0]  # (B, Z, d)
    out = _merge_heads(activation(pooled + residual, act))
    return ops.reshape(out, (out.shape[0], 1, out.shape[1]))


# ---------------------------------------------------------------------------
# fully connected


def cfl_linear(V: Tensor, p: CFLParams) -> Tensor:
    if V.shape[-1] != p.W.shape[0]:
        raise ValueError(f"feature width {V.shape[-1]} != layer input {p.W.shape[0]}")
    return ops.matmul(V, p.W) + p.b


def cfl_forward(V: Tensor, p: CFLParams, bn: "ComplexBatchNorm | None" = None,
                training: bool = False, update_stats: bool = True) -> Tensor:
    """Hidden layer: CReLU(V W + B), then batch norm if given."""
    out = ops.crelu(cfl_linear(V, p))
    if bn is not None:
        out = bn(out, training=training, update_stats=update_stats)
    return out


cfl_final = cfl_linear


# ---------------------------------------------------------------------------
# batch norm


class ComplexBatchNorm:
    """Batch norm over complex features.

    ``mode="complex"`` whitens each feature's (Re, Im) pair with the inverse
    square root of its 2x2 covariance, then applies a learnable symmetric
    2x2 scale and complex shift.  ``mode="split"`` normalises real and
    imaginary parts independently.  Statistics pool every axis but the last.
    """

    def __init__(self, width: int, mode: str = "complex", momentum: float = 0.1,
                 eps: float = 1e-5, prefix: str = ""):
        if mode not in ("complex", "split"):
            raise ValueError(f"unknown batch-norm mode {mode!r}")
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        self.width = width
        self.mode = mode
        self.momentum = momentum
        self.eps = eps
        g = np.zeros((3, width))
        g[0] = g[2] = 1.0 / np.sqrt(2.0)
        # gamma rows: (rr, ri, ii)
        self.gamma = Tensor(g, requires_grad=True, name=prefix + "gamma")
        self.beta = Tensor(np.zeros(width, dtype=np.complex128), requires_grad=True, name=prefix + "beta")
        self.running_mean = np.zeros(width, dtype=np.complex128)
        # rows: (rr, ri, ii)
        self.running_cov = np.stack([np.ones(width), np.zeros(width), np.ones(width)])

    def tensors(self) -> dict:
        return {"gamma": self.gamma, "beta": self.beta}

    def state(self) -> dict:
        return {"running_mean": self.running_mean, "running_cov": self.running_cov}

    def __call__(self, X: Tensor, training: bool = False, update_stats: bool = True) -> Tensor:
        if X.shape[-1] != self.width:
            raise ValueError(f"feature width {X.shape[-1]} != batch-norm width {self.width}")
        axes = tuple(range(X.ndim - 1))
        n = X.data.size // self.width
        if training:
            if n < 2:
                raise ValueError("training-mode batch norm needs at least 2 samples per feature")
            mu = ops.reduce_mean(X, axes)
            Xc = X - mu
            xr, xi = ops.re(Xc), ops.im(Xc)
            vrr = ops.reduce_mean(xr * xr, axes)
            vri = ops.reduce_mean(xr * xi, axes)
            vii = ops.reduce_mean(xi * xi, axes)
            if update_stats:
                m = self.momentum
                self.running_mean = (1 - m) * self.running_mean + m * mu.data
                batch_cov = np.stack([vrr.data, vri.data, vii.data])
                self.running_cov = (1 - m) * self.running_cov + m * batch_cov
        else:
            Xc = X - self.running_mean
            xr, xi = ops.re(Xc), ops.im(Xc)
            vrr, vri, vii = (Tensor(c) for c in self.running_cov)
        vrr = vrr + self.eps
        vii = vii + self.eps
        g_rr, g_ri, g_ii = self.gamma[0], self.gamma[1], self.gamma[2]
        if self.mode == "complex":
            s = ops.sqrt(vrr * vii - vri * vri)
            t = ops.sqrt(vrr + vii + 2.0 * s)
            inv_st = ops.reciprocal(s * t)
            w_rr = (vii + s) * inv_st
            w_ii = (vrr + s) * inv_st
            w_ri = -(vri * inv_st)
            zr = w_rr * xr + w_ri * xi
            zi = w_ri * xr + w_ii * xi
        else:
            zr = xr * ops.reciprocal(ops.sqrt(vrr))
            zi = xi * ops.reciprocal(ops.sqrt(vii))
        if self.mode == "complex":
            out_r = g_rr * zr + g_ri * zi
            out_i = g_ri * zr + g_ii * zi
        else:
            out_r = g_rr * zr
            out_i = g_ii * zi
        return ops.to_complex(out_r) + ops.scalar_mul(ops.to_complex(out_i), 1j) + self.beta
