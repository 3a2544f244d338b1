"""Differentiable primitives.

Each primitive computes its forward value with numpy and registers a
vector-Jacobian product on the active tape.  Binary elementwise ops follow
numpy broadcasting; the sweep in :func:`tensor.backward` sums gradients
back to the input shapes.
"""
from __future__ import annotations

from collections import Counter

import numpy as np

from ..channel import unit_phasor
from .tensor import Tensor, as_tensor, record

LEAKY_SLOPE = 0.01
NORM_FLOOR = 1e-12
COND_LIMIT = 1e12
RIDGE_SCALE = 1e-9

# Counts of guarded/regularised evaluations (inverse ridge, norm floor hits).
diagnostics: Counter = Counter()

# When a list, every piecewise-linear op appends its branch mask, so a
# caller can tell whether two evaluations share the same linear piece.
kink_trace: list | None = None


def _trace(mask: np.ndarray) -> None:
    if kink_trace is not None:
        kink_trace.append(np.packbits(mask, axis=None).tobytes())


def _real_input(t: Tensor, op: str):
    if t.is_complex:
        raise TypeError(f"{op} expects a real tensor")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record("neg", -a.data, (a,), lambda g: (-g,))


def scalar_mul(a, c) -> Tensor:
    """Multiply by a constant (real or complex) scalar."""
    a = as_tensor(a)
    c = complex(c) if np.iscomplexobj(c) else float(c)
    return record("scalar_mul", a.data * c, (a,), lambda g: (g * np.conj(c),))


def mul(a, b) -> Tensor:
    """Elementwise (complex) product."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def vjp(g):
        return (g * np.conj(bd) if need_a else None, g * np.conj(ad) if need_b else None)

    return record("mul", ad * bd, (a, b), vjp)


cmul = mul


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    y = 1.0 / a.data
    # d(1/z) = -1/z^2 dz
    return record("reciprocal", y, (a,), lambda g: (-g * np.conj(y * y),))


def conj(a) -> Tensor:
    a = as_tensor(a)
    return record("conj", np.conj(a.data), (a,), lambda g: (np.conj(g),))


# ---------------------------------------------------------------------------
# real <-> complex


def re(a) -> Tensor:
    a = as_tensor(a)
    return record("re", a.data.real.copy(), (a,), lambda g: (g,))


def im(a) -> Tensor:
    a = as_tensor(a)
    return record("im", a.data.imag.copy(), (a,), lambda g: (1j * g if a.is_complex else None,))


def to_complex(a) -> Tensor:
    a = as_tensor(a)
    return record("to_complex", a.data.astype(np.complex128), (a,), lambda g: (g.real,))


def abs2(a) -> Tensor:
    """|a|^2 elementwise, real output."""
    a = as_tensor(a)
    ad = a.data
    return record("abs2", (ad.real ** 2 + ad.imag ** 2), (a,), lambda g: (2.0 * g * ad,))


def exp_i(phi) -> Tensor:
    """exp(i*phi) of a real tensor."""
    phi = as_tensor(phi)
    _real_input(phi, "exp_i")
    y = unit_phasor(phi.data)
    # dy/dphi = i*y; real input gets Re(conj(i*y) * g)
    return record("exp_i", y, (phi,), lambda g: ((g * np.conj(1j * y)).real,))


# ---------------------------------------------------------------------------
# real nonlinearities


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    _real_input(a, "leaky_relu")
    pos = a.data > 0
    _trace(pos)
    d = np.where(pos, 1.0, slope)
    return record("leaky_relu", a.data * d, (a,), lambda g: (g * d,))


leaky_relu_real = leaky_relu


def relu(a) -> Tensor:
    a = as_tensor(a)
    _real_input(a, "relu")
    mask = a.data > 0
    _trace(mask)
    return record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def crelu(a) -> Tensor:
    """Split complex ReLU: ReLU(Re a) + i ReLU(Im a)."""
    a = as_tensor(a)
    if not a.is_complex:
        return relu(a)
    # work on the interleaved (re, im) float view: one pass, same result
    pairs = np.ascontiguousarray(a.data).view(np.float64)
    mask = pairs > 0
    _trace(mask)
    y = np.maximum(pairs, 0.0).view(np.complex128)

    def vjp(g):
        gp = np.ascontiguousarray(g, dtype=np.complex128).view(np.float64)
        return ((gp * mask).view(np.complex128),)

    return record("crelu", y, (a,), vjp)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    _real_input(a, "sigmoid")
    x = a.data
    # stable for large |x|
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return record("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


sigmoid_real = sigmoid


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return record("exp", y, (a,), lambda g: (g * np.conj(y),))


def log(a) -> Tensor:
    a = as_tensor(a)
    _real_input(a, "log")
    x = a.data
    return record("log", np.log(x), (a,), lambda g: (g / x,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    _real_input(a, "sqrt")
    y = np.sqrt(a.data)
    return record("sqrt", y, (a,), lambda g: (g * 0.5 / y,))


def maximum(a, c: float) -> Tensor:
    """max(a, c) against a constant; the gradient goes to a where a > c.

    NaN entries propagate (as in ``np.maximum``) instead of being replaced.
    """
    a = as_tensor(a)
    _real_input(a, "maximum")
    mask = ~(a.data <= c)
    _trace(mask)
    return record("maximum", np.where(mask, a.data, c), (a,), lambda g: (g * mask,))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _real_input(a, "softmax")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record("softmax", y, (a,), vjp)


softmax_real = softmax


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return record("reduce_sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scalar_mul(reduce_sum(a, axis, keepdims), 1.0 / count)


def l2_norm(a, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm, floored at NORM_FLOOR so the gradient stays finite."""
    a = as_tensor(a)
    ad = a.data
    n = np.sqrt((ad.real ** 2 + ad.imag ** 2).sum(axis=axis, keepdims=True))
    if np.any(n < NORM_FLOOR):
        diagnostics["norm_floor"] += int(np.sum(n < NORM_FLOOR))
    y = np.maximum(n, NORM_FLOOR)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        elif axis is None and not keepdims:
            g = np.reshape(g, (1,) * ad.ndim)
        return (g * ad / y,)

    out = y if keepdims else (y.reshape(()) if axis is None else np.squeeze(y, axis=axis))
    return record("l2_norm", out, (a,), vjp)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def hermitian(a) -> Tensor:
    """Conjugate transpose over the last two axes."""
    return conj(swap_last(a))


def index(a, key) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.data.dtype

    k = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(e, (int, np.integer, slice)) or e is None or e is Ellipsis for e in k)

    def vjp(g):
        out = np.zeros(shape, dtype=np.result_type(dtype, g.dtype))
        if basic:
            out[key] = g  # basic indexing never repeats an element
        else:
            np.add.at(out, key, g)
        return (out,)

    return record("index", a.data[key], (a,), vjp)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return record("concat", data, tuple(tensors), vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product following numpy.matmul broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # shared right operand: one GEMM instead of a stack of small ones
        flat = ad.reshape(-1, ad.shape[-1])

        need_a, need_b = a.requires_grad, b.requires_grad

        def vjp(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ np.conj(bd.T)).reshape(ad.shape) if need_a else None
            return ga, (np.conj(flat.T) @ g2 if need_b else None)

        out = (flat @ bd).reshape(*ad.shape[:-1], bd.shape[-1])
        return record("matmul", out, (a, b), vjp)

    need_a, need_b = a.requires_grad, b.requires_grad

    def vjp(g):
        ga = g @ np.conj(np.swapaxes(bd, -1, -2)) if need_a else None
        gb = np.conj(np.swapaxes(ad, -1, -2)) @ g if need_b else None
        return ga, gb

    return record("matmul", ad @ bd, (a, b), vjp)


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum, e.g. ``einsum("bkv,zvd->bkzd", V, W)``.

    Every input index must appear in the output or in the other operand,
    and no operand may repeat an index.
    """
    a, b = as_tensor(a), as_tensor(b)
    ins, out = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for s_in, s_other in ((sa, sb), (sb, sa)):
        if len(set(s_in)) != len(s_in):
            raise ValueError(f"einsum: repeated index in {s_in!r}")
        if any(c not in out and c not in s_other for c in s_in):
            raise ValueError(f"einsum: index of {s_in!r} is summed within one operand")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = np.einsum(f"{out},{sb}->{sa}", g, np.conj(bd), optimize=True)
        gb = np.einsum(f"{sa},{out}->{sb}", np.conj(ad), g, optimize=True)
        return ga, gb

    return record("einsum", np.einsum(spec, ad, bd, optimize=True), (a, b), vjp)


cmatmul = matmul


def _gauss_jordan_inverse(a: np.ndarray) -> np.ndarray:
    """Invert a batch of square matrices by Gauss-Jordan with partial pivoting."""
    n = a.shape[-1]
    batch = a.shape[:-2]
    m = a.reshape(-1, n, n).astype(np.complex128, copy=True)
    inv = np.broadcast_to(np.eye(n, dtype=np.complex128), m.shape).copy()
    rows = np.arange(m.shape[0])
    for col in range(n):
        piv = col + np.argmax(np.abs(m[:, col:, col]), axis=1)
        if np.any(piv != col):
            for arr in (m, inv):
                top = arr[rows, col].copy()
                arr[rows, col] = arr[rows, piv]
                arr[rows, piv] = top
        p = m[:, col, col][:, None].copy()
        m[:, col] /= p
        inv[:, col] /= p
        f = m[:, :, col].copy()
        f[:, col] = 0.0
        m -= f[:, :, None] * m[:, col][:, None, :]
        inv -= f[:, :, None] * inv[:, col][:, None, :]
    return inv.reshape(*batch, n, n)


def _refine(a: np.ndarray, inv: np.ndarray) -> np.ndarray:
    """One step of iterative refinement, X + X (I - A X)."""
    return inv + inv @ (np.eye(a.shape[-1]) - a @ inv)


def _one_norm(a: np.ndarray) -> np.ndarray:
    return np.abs(a).sum(axis=-2).max(axis=-1)


def pd_inverse_array(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of Hermitian PD matrices with a ridge fallback.

    Returns (inverse, regularised-mask).  Matrices whose 1-norm condition
    estimate exceeds COND_LIMIT are inverted as (A + eps I) with
    eps = RIDGE_SCALE * trace(A) / K.
    """
    a = np.asarray(a, dtype=np.complex128)
    n = a.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        inv = _refine(a, _gauss_jordan_inverse(a))
        cond = _one_norm(a) * _one_norm(inv)
    bad = ~np.isfinite(cond) | (cond > COND_LIMIT)
    if np.any(bad):
        eps = RIDGE_SCALE * np.trace(a, axis1=-2, axis2=-1).real / n
        ridged = a + eps[..., None, None] * np.eye(n)
        inv = np.where(bad[..., None, None], _refine(ridged, _gauss_jordan_inverse(ridged)), inv)
        diagnostics["inverse_ridge"] += int(np.sum(bad))
    return inv, bad


def hermitian_pd_inverse(a, check: bool = True) -> Tensor:
    """Inverse of a (batch of) Hermitian positive-definite matrices.

    Backward uses d(A^-1) = -A^-1 dA A^-1, i.e. grad_A = -Y^H grad_Y Y^H.
    """
    a = as_tensor(a)
    ad = a.data
    if check:
        scale = max(1.0, float(np.max(np.abs(ad))))
        if np.max(np.abs(ad - np.conj(np.swapaxes(ad, -1, -2)))) > 1e-10 * scale:
            raise ValueError("hermitian_pd_inverse: input is not Hermitian")
    y, _ = pd_inverse_array(ad)
    yh = np.conj(np.swapaxes(y, -1, -2))
    return record("hermitian_pd_inverse", y, (a,), lambda g: (-(yh @ g @ yh),))
