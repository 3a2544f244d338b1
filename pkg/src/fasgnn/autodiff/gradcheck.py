"""Central-difference checks of tape gradients."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, Tensor, backward

REL_FLOOR = 1e-12


@dataclass
class GradCheckReport:
    labels: list = field(default_factory=list)
    analytic: np.ndarray = field(default_factory=lambda: np.zeros(0))
    numeric: np.ndarray = field(default_factory=lambda: np.zeros(0))
    tolerance: float = 1e-5
    skipped: list = field(default_factory=list)  # coordinates whose stencil crossed a kink
    abs_floor: float = REL_FLOOR  # gradients below this are compared absolutely

    @property
    def abs_err(self) -> np.ndarray:
        return np.abs(self.analytic - self.numeric)

    @property
    def rel_err(self) -> np.ndarray:
        denom = np.maximum(np.maximum(np.abs(self.analytic), np.abs(self.numeric)), self.abs_floor)
        return self.abs_err / denom

    @property
    def max_rel_err(self) -> float:
        return float(self.rel_err.max()) if self.rel_err.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def worst(self, n: int = 5):
        order = np.argsort(-self.rel_err)[:n]
        return [(self.labels[i], self.analytic[i], self.numeric[i], self.rel_err[i]) for i in order]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["coordinate", "analytic", "numeric", "abs_err", "rel_err"])
            for row in zip(self.labels, self.analytic, self.numeric, self.abs_err, self.rel_err):
                w.writerow([row[0], *(repr(float(v)) for v in row[1:])])


def _coordinates(inputs, n_coords, rng):
    """All (input, flat index, part) triples; shuffled when subsampling."""
    coords = []
    for i, t in enumerate(inputs):
        parts = ("re", "im") if t.is_complex else ("re",)
        for j in range(t.data.size):
            for part in parts:
                coords.append((i, j, part))
    if n_coords is not None and n_coords < len(coords):
        order = np.random.default_rng(rng).permutation(len(coords))
        coords = [coords[k] for k in order]
    return coords


class _KinkProbe:
    """Evaluate ``fn`` while recording the branch masks of piecewise-linear ops."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, *inputs):
        from . import ops
        ops.kink_trace = []
        try:
            value = float(self.fn(*inputs).data)
            return value, hash(tuple(ops.kink_trace))
        finally:
            ops.kink_trace = None


def grad_check(fn, inputs, step: float = 1e-4, tolerance: float = 1e-5,
               n_coords: int | None = None, rng=0, kink_guard: bool = False,
               abs_floor: float = REL_FLOOR) -> GradCheckReport:
    """Compare backward() of ``fn(*inputs)`` with central differences.

    ``fn`` must return a real scalar Tensor.  The inputs are leaf tensors
    marked trainable; their data is perturbed in place and restored.
    With ``n_coords`` a random subset of real coordinates is checked.

    With ``kink_guard`` a coordinate whose +-step stencil changes the
    on/off pattern of any ReLU-type unit is not differentiable across the
    stencil; it is recorded in ``skipped`` and another coordinate is drawn.
    """
    for t in inputs:
        t.requires_grad = True
        if not t.data.flags.c_contiguous:
            t.data = t.data.copy()
    with Tape() as tape:
        loss = fn(*inputs)
    grads = backward(tape, loss)
    probe = _KinkProbe(fn)
    base_sig = probe(*inputs)[1] if kink_guard else None

    labels, analytic, numeric, skipped = [], [], [], []
    for i, j, part in _coordinates(inputs, n_coords, rng):
        if n_coords is not None and len(labels) >= n_coords:
            break
        t = inputs[i]
        flat = t.data.reshape(-1)
        name = t.name or f"input{i}"
        label = f"{name}[{j}].{part}"
        delta = step if part == "re" else 1j * step
        orig = flat[j]
        flat[j] = orig + delta
        f_plus, sig_plus = probe(*inputs)
        flat[j] = orig - delta
        f_minus, sig_minus = probe(*inputs)
        flat[j] = orig
        if kink_guard and (sig_plus != base_sig or sig_minus != base_sig):
            skipped.append(label)
            continue
        g = grads[t].reshape(-1)[j]
        analytic.append(g.real if part == "re" else g.imag)
        numeric.append((f_plus - f_minus) / (2.0 * step))
        labels.append(label)
    return GradCheckReport(labels, np.asarray(analytic), np.asarray(numeric), tolerance, skipped, abs_floor)


def check_primitive(name: str, seed: int = 0, step: float = 1e-4, tolerance: float = 1e-5):
    """Run the built-in check for one named primitive (see PRIMITIVE_CASES)."""
    if name not in PRIMITIVE_CASES:
        raise KeyError(f"unknown primitive {name!r}; choose from {sorted(PRIMITIVE_CASES)}")
    rng = np.random.default_rng(seed)
    fn, inputs = PRIMITIVE_CASES[name](rng)
    return grad_check(fn, inputs, step=step, tolerance=tolerance)


# Each case builds a random real-valued scalar test function around one
# primitive: a fixed random complex linear functional is applied to the
# primitive's output so every output coordinate is exercised.


def _cplx(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def _probe(rng, y):
    from . import ops
    c = _cplx(rng, *y.shape) if y.is_complex else rng.standard_normal(y.shape)
    return ops.reduce_sum(ops.re(ops.mul(y, Tensor(c))))


def _case(build):
    def make(rng):
        inputs, f = build(rng)
        probe_rng_seed = int(rng.integers(1 << 31))

        def fn(*xs):
            return _probe(np.random.default_rng(probe_rng_seed), f(*xs))

        return fn, inputs
    return make


def _cases():
    from . import ops

    def T(a, name):
        return Tensor(a, name=name)

    def gram_inverse(b):
        # keeps the perturbed input Hermitian PD
        return ops.hermitian_pd_inverse(ops.matmul(b, ops.hermitian(b)) + 0.5 * np.eye(b.shape[-2]))

    return {
        "add": _case(lambda r: ([T(_cplx(r, 3, 3), "a"), T(_cplx(r, 3, 3), "b")], ops.add)),
        "sub": _case(lambda r: ([T(_cplx(r, 3, 3), "a"), T(_cplx(r, 3), "b")], ops.sub)),
        "neg": _case(lambda r: ([T(_cplx(r, 4), "a")], ops.neg)),
        "scalar_mul": _case(lambda r: ([T(_cplx(r, 4), "a")], lambda a: ops.scalar_mul(a, 0.3 - 1.7j))),
        "cmul": _case(lambda r: ([T(_cplx(r, 3, 3), "a"), T(_cplx(r, 3, 3), "b")], ops.mul)),
        "real_complex_mul": _case(lambda r: ([T(r.standard_normal((3, 1)), "a"), T(_cplx(r, 3, 4), "b")], ops.mul)),
        "cmatmul": _case(lambda r: ([T(_cplx(r, 2, 3, 4), "a"), T(_cplx(r, 4, 2), "b")], ops.matmul)),
        "cmatmul_batched": _case(lambda r: ([T(_cplx(r, 2, 3, 4), "a"), T(_cplx(r, 2, 4, 2), "b")], ops.matmul)),
        "einsum": _case(lambda r: ([T(_cplx(r, 2, 3, 4), "a"), T(_cplx(r, 5, 4, 2), "b")],
                                   lambda a, b: ops.einsum("bkv,zvd->bkzd", a, b))),
        "hermitian": _case(lambda r: ([T(_cplx(r, 3, 2), "a")], ops.hermitian)),
        "conj": _case(lambda r: ([T(_cplx(r, 3), "a")], ops.conj)),
        "concat": _case(lambda r: ([T(_cplx(r, 2, 3), "a"), T(_cplx(r, 2, 2), "b")],
                                   lambda a, b: ops.concat([a, b], axis=-1))),
        "re": _case(lambda r: ([T(_cplx(r, 5), "a")], lambda a: ops.sigmoid(ops.re(a)))),
        "im": _case(lambda r: ([T(_cplx(r, 5), "a")], ops.im)),
        "to_complex": _case(lambda r: ([T(r.standard_normal(4), "a")], ops.to_complex)),
        "abs2": _case(lambda r: ([T(_cplx(r, 5), "a")], ops.abs2)),
        "exp_i": _case(lambda r: ([T(r.uniform(-4, 4, 6), "phi")], ops.exp_i)),
        "leaky_relu_real": _case(lambda r: ([T(r.standard_normal(8) + np.sign(r.standard_normal(8)) * 0.1, "a")],
                                            ops.leaky_relu)),
        "crelu": _case(lambda r: ([T(_cplx(r, 8) + 0.1 * (1 + 1j), "a")], ops.crelu)),
        "sigmoid_real": _case(lambda r: ([T(3 * r.standard_normal(6), "a")], ops.sigmoid)),
        "softmax_real": _case(lambda r: ([T(r.standard_normal((3, 4)), "a")], lambda a: ops.softmax(a, axis=-1))),
        "exp": _case(lambda r: ([T(r.standard_normal(4), "a")], ops.exp)),
        "log": _case(lambda r: ([T(r.uniform(0.5, 3, 4), "a")], ops.log)),
        "sqrt": _case(lambda r: ([T(r.uniform(0.5, 3, 4), "a")], ops.sqrt)),
        "maximum": _case(lambda r: ([T(r.standard_normal(6) + 0.05, "a")], lambda a: ops.maximum(a, 0.0))),
        "l2_norm": _case(lambda r: ([T(_cplx(r, 3, 4), "a")], lambda a: ops.l2_norm(a, axis=-1))),
        "hermitian_pd_inverse": _case(lambda r: ([T(_cplx(r, 3, 5), "B")], gram_inverse)),
        "reduce_sum": _case(lambda r: ([T(_cplx(r, 3, 4), "a")], lambda a: ops.reduce_sum(a, axis=0))),
        "reduce_mean": _case(lambda r: ([T(_cplx(r, 3, 4), "a")], lambda a: ops.reduce_mean(a, axis=1))),
        "reciprocal": _case(lambda r: ([T(_cplx(r, 4) + 2.0, "a")], ops.reciprocal)),
        "reshape": _case(lambda r: ([T(_cplx(r, 3, 4), "a")], lambda a: ops.reshape(a, (2, 6)))),
        "transpose": _case(lambda r: ([T(_cplx(r, 2, 3, 4), "a")], lambda a: ops.transpose(a, (2, 0, 1)))),
        "index": _case(lambda r: ([T(_cplx(r, 4, 3), "a")], lambda a: a[1:, [0, 2, 2]])),
        "index_basic": _case(lambda r: ([T(_cplx(r, 4, 3), "a")], lambda a: a[:, 1])),
        "relu": _case(lambda r: ([T(r.standard_normal(8) + np.sign(r.standard_normal(8)) * 0.1, "a")], ops.relu)),
    }


PRIMITIVE_CASES = _cases()
