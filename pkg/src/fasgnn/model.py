"""The two-stage network.

Stage 1 reads the user angles and emits antenna positions through two
graph-level branches (xi and xi_max).  Stage 2 reads the resulting channel
rows and emits per-user power and hybrid coefficient through two node-level
branches.  Every learnable tensor is shared across nodes, so the parameter
set does not depend on the number of users.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops
from .channel import SystemConfig
from .layers import (ACTIVATIONS, CFLParams, CGALParams, ComplexBatchNorm, cfl_final, cfl_forward,
                     cgal_forward, virtual_node_forward)
from . import stage1, stage2


@dataclass(frozen=True)
class ArchConfig:
    """Layer counts per branch, in order (xi, xi_max, p, alpha)."""

    gal_layers: tuple = (2, 2, 2, 2)
    fl_layers: tuple = (2, 2, 2, 2)
    heads: int = 4
    head_dim: int = 16
    fl_hidden: int = 64
    batchnorm: str = "complex"  # complex | split | none
    gal_activation: str = "crelu"
    vn_activation: str = "crelu"  # crelu | real_relu
    angle_embedding: str = "real"  # real | phasor
    leaky_slope: float = ops.LEAKY_SLOPE
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "gal_layers", tuple(int(g) for g in self.gal_layers))
        object.__setattr__(self, "fl_layers", tuple(int(f) for f in self.fl_layers))
        if len(self.gal_layers) != 4 or len(self.fl_layers) != 4:
            raise ValueError("gal_layers and fl_layers need one entry per branch (4)")
        if min(self.gal_layers) < 1 or min(self.fl_layers) < 1:
            raise ValueError("every branch needs at least one attention and one dense layer")
        if self.heads < 1 or self.head_dim < 1 or self.fl_hidden < 1:
            raise ValueError("heads, head_dim and fl_hidden must be positive")
        if self.batchnorm not in ("complex", "split", "none"):
            raise ValueError(f"unknown batchnorm mode {self.batchnorm!r}")
        for act in (self.gal_activation, self.vn_activation):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")

    @property
    def width(self) -> int:
        return self.heads * self.head_dim

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["gal_layers"] = list(self.gal_layers)
        d["fl_layers"] = list(self.fl_layers)
        return d


class Branch:
    """A stack of graph-attention layers followed by dense layers."""

    def __init__(self, name: str, in_dim: int, out_dim: int, n_gal: int, n_fl: int,
                 arch: ArchConfig, rng: np.random.Generator, virtual_node: bool):
        self.name = name
        self.arch = arch
        self.in_dim = in_dim
        self.virtual_node = virtual_node
        width = arch.width
        self.gals = []
        for g in range(n_gal):
            d_in = in_dim if g == 0 else width
            self.gals.append(CGALParams.init(
                rng, d_in, arch.heads, arch.head_dim,
                vn_in_dim=d_in if virtual_node else None, prefix=f"{name}.gal{g}.",
            ))
        dims = [width] + [arch.fl_hidden] * (n_fl - 1) + [out_dim]
        self.fls = [CFLParams.init(rng, dims[f], dims[f + 1], prefix=f"{name}.fl{f}.") for f in range(n_fl)]
        self.bns = []
        if arch.batchnorm != "none":
            self.bns = [
                ComplexBatchNorm(dims[f + 1], arch.batchnorm, arch.bn_momentum, arch.bn_eps, prefix=f"{name}.bn{f}.")
                for f in range(n_fl - 1)
            ]

    def params(self) -> dict:
        out = {}
        for g, p in enumerate(self.gals):
            for k, t in p.tensors().items():
                out[f"{self.name}.gal{g}.{k}"] = t
        for f, p in enumerate(self.fls):
            for k, t in p.tensors().items():
                out[f"{self.name}.fl{f}.{k}"] = t
        for f, bn in enumerate(self.bns):
            for k, t in bn.tensors().items():
                out[f"{self.name}.bn{f}.{k}"] = t
        return out

    def batchnorms(self) -> dict:
        return {f"{self.name}.bn{f}": bn for f, bn in enumerate(self.bns)}

    def __call__(self, V: Tensor, training: bool = False, update_stats: bool = True) -> Tensor:
        arch = self.arch
        v = Tensor(np.zeros((V.shape[0], 1, self.in_dim), dtype=np.complex128))
        for p in self.gals:
            V = cgal_forward(V, p, arch.gal_activation, arch.leaky_slope)
            if self.virtual_node:
                v = virtual_node_forward(V, v, p, arch.vn_activation, arch.leaky_slope)
        H = v if self.virtual_node else V
        for f, p in enumerate(self.fls[:-1]):
            bn = self.bns[f] if self.bns else None
            H = cfl_forward(H, p, bn, training, update_stats)
        return cfl_final(H, self.fls[-1])


@dataclass
class Solution:
    """Everything the pipeline computes for one batch (all Tensors)."""

    xi: Tensor
    xi_max: Tensor
    delta: Tensor
    x: Tensor
    g: Tensor
    p_raw: Tensor
    p: Tensor
    alpha: Tensor
    u: Tensor
    w: Tensor


class TwoStageGNN:
    def __init__(self, cfg: SystemConfig, arch: ArchConfig | None = None, seed: int = 0):
        if cfg.n_antennas < 2:
            raise ValueError("the position stage needs at least two antennas")
        self.cfg = cfg
        self.arch = arch or ArchConfig()
        self.seed = seed
        a = self.arch
        n = cfg.n_antennas
        rng = np.random.default_rng(seed)
        self.xi_branch = Branch("stage1.xi", 1, n - 1, a.gal_layers[0], a.fl_layers[0], a, rng, True)
        self.xi_max_branch = Branch("stage1.xi_max", 1, 1, a.gal_layers[1], a.fl_layers[1], a, rng, True)
        self.p_branch = Branch("stage2.p", n, 1, a.gal_layers[2], a.fl_layers[2], a, rng, False)
        self.alpha_branch = Branch("stage2.alpha", n, 1, a.gal_layers[3], a.fl_layers[3], a, rng, False)

    @property
    def branches(self):
        return (self.xi_branch, self.xi_max_branch, self.p_branch, self.alpha_branch)

    def params(self) -> dict:
        out = {}
        for b in self.branches:
            out.update(b.params())
        return out

    def batchnorms(self) -> dict:
        out = {}
        for b in self.branches:
            out.update(b.batchnorms())
        return out

    def n_parameters(self) -> int:
        """Count of real scalars in the learnable set."""
        return sum(t.data.size * (2 if t.is_complex else 1) for t in self.params().values())

    def flat_parameters(self) -> np.ndarray:
        parts = []
        for t in self.params().values():
            parts.append(t.data.view(np.float64).ravel() if t.is_complex else t.data.ravel())
        return np.concatenate(parts)

    # -- stages ----------------------------------------------------------

    def stage1(self, angles, training: bool = False, update_stats: bool = True):
        """Raw position-head outputs: xi (B, N-1) and xi_max (B,)."""
        feats = stage1.embed_angles(angles, self.arch.angle_embedding)
        xi = ops.re(self.xi_branch(feats, training, update_stats))[:, 0, :]
        xi_max = ops.re(self.xi_max_branch(feats, training, update_stats))[:, 0, 0]
        return xi, xi_max

    def stage2(self, g: Tensor, training: bool = False, update_stats: bool = True):
        """Pre-projection power (B, K) and hybrid coefficient (B, K)."""
        feats = ops.conj(g)  # node k carries h(x, theta_k)
        p = ops.scalar_mul(ops.sigmoid(ops.re(self.p_branch(feats, training, update_stats))[..., 0]), self.cfg.p_max)
        alpha = ops.sigmoid(ops.re(self.alpha_branch(feats, training, update_stats))[..., 0])
        return p, alpha

    def positions(self, angles, training: bool = False, update_stats: bool = True) -> Tensor:
        xi, xi_max = self.stage1(angles, training, update_stats)
        return stage1.delta_to_positions(stage1.xi_to_delta(xi, xi_max, self.cfg), self.cfg)

    def forward(self, angles, training: bool = False, update_stats: bool = True,
                positions=None) -> Solution:
        """Full pipeline for a batch of angle vectors (B, K).

        ``positions`` (B, N) or (N,) overrides stage 1, e.g. with an
        equidistant array.
        """
        angles = np.atleast_2d(np.asarray(angles, dtype=np.float64))
        cfg = self.cfg
        if positions is None:
            xi, xi_max = self.stage1(angles, training, update_stats)
            delta = stage1.xi_to_delta(xi, xi_max, cfg)
            x = stage1.delta_to_positions(delta, cfg)
        else:
            x = Tensor(np.broadcast_to(np.asarray(positions, dtype=np.float64), (angles.shape[0], cfg.n_antennas)))
            xi = xi_max = delta = None
        g = stage1.positions_to_channels(x, angles, cfg)
        p_raw, alpha = self.stage2(g, training, update_stats)
        p = stage2.power_projection(p_raw, cfg.p_max)
        u = stage2.zf_directions(g)
        direction = stage2.hybrid_direction(u, stage2.channel_columns(g), alpha)
        w = stage2.assemble_beams(p, direction)
        return Solution(xi, xi_max, delta, x, g, p_raw, p, alpha, u, w)

    __call__ = forward

    def utility(self, angles, kind: str = "sum_rate", positions=None) -> np.ndarray:
        """Per-sample utility in evaluation mode."""
        sol = self.forward(angles, training=False, positions=positions)
        return stage2.utility(sol.w, sol.g, self.cfg.with_users(np.shape(angles)[-1]), kind).data

    def state(self) -> dict:
        """Copy of every learnable array and batch-norm statistic."""
        out = {f"param/{k}": t.data.copy() for k, t in self.params().items()}
        for k, bn in self.batchnorms().items():
            out[f"bn/{k}/running_mean"] = bn.running_mean.copy()
            out[f"bn/{k}/running_cov"] = bn.running_cov.copy()
        return out

    def load_state(self, state: dict) -> None:
        params = self.params()
        bns = self.batchnorms()
        expected = {f"param/{k}" for k in params}
        expected |= {f"bn/{k}/{s}" for k in bns for s in ("running_mean", "running_cov")}
        if set(state) != expected:
            missing = sorted(expected - set(state))[:3]
            extra = sorted(set(state) - expected)[:3]
            raise ValueError(f"state does not match the architecture (missing {missing}, unexpected {extra})")
        for k, t in params.items():
            arr = state[f"param/{k}"]
            if arr.shape != t.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {t.shape}")
            t.data = np.array(arr, dtype=t.data.dtype)
        for k, bn in bns.items():
            bn.running_mean = np.array(state[f"bn/{k}/running_mean"], dtype=np.complex128)
            bn.running_cov = np.array(state[f"bn/{k}/running_cov"], dtype=np.float64)
