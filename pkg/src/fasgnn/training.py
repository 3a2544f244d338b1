"""Unsupervised training: loss 1/U, Adam on real pairs, early stopping."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import channel, stage2
from .autodiff import Tape, Tensor, backward, ops
from .dataset import Dataset
from .model import TwoStageGNN

log = logging.getLogger(__name__)

UTILITIES = ("sum_rate", "energy_efficiency")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-6
    batch_size: int = 1024
    max_epochs: int = 2000
    patience: int = 50
    utility: str = "sum_rate"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    utility_floor: float = 1e-9

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ValueError("need batch_size >= 1, max_epochs >= 0, patience >= 1")
        if self.utility not in UTILITIES:
            raise ValueError(f"utility must be one of {UTILITIES}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("invalid Adam hyper-parameters")

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        """Settings sized for a CPU run of a few tens of minutes."""
        base = dict(learning_rate=1e-4, max_epochs=200)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class TrainingError(RuntimeError):
    """Raised when the loss turns non-finite; carries diagnostics."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(f"{message} ({diagnostics})")
        self.diagnostics = diagnostics


# ---------------------------------------------------------------------------
# loss


def utility_loss(U: Tensor, floor: float = 1e-9):
    """Mean of 1/max(U, floor) over the batch.

    Returns the loss tensor and the number of samples whose utility was
    clamped (degenerate beams).
    """
    clamped = int(np.count_nonzero(U.data <= floor))
    inv = ops.reciprocal(ops.maximum(U, floor))
    return ops.reduce_mean(inv), clamped


def batch_loss(model: TwoStageGNN, angles: np.ndarray, kind: str = "sum_rate",
               training: bool = True, floor: float = 1e-9):
    """Forward pass on a tape; returns (tape, loss, clamped count)."""
    cfg = model.cfg.with_users(angles.shape[-1])
    with Tape() as tape:
        sol = model.forward(angles, training=training)
        U = stage2.utility(sol.w, sol.g, cfg, kind)
        loss, clamped = utility_loss(U, floor)
    return tape, loss, clamped


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    skipped: int = 0


def _real_view(arr: np.ndarray) -> np.ndarray:
    return arr.view(np.float64) if np.iscomplexobj(arr) else arr


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig) -> bool:
    """One bias-corrected Adam update on the (Re, Im) pairs of every tensor.

    ``params`` maps names to Tensors, ``grads`` maps the same names to
    arrays.  A non-finite gradient skips the whole step and returns False.
    """
    for name, t in params.items():
        if grads[name].shape != t.shape:
            raise ValueError(f"{name}: gradient shape {grads[name].shape} != {t.shape}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        log.warning("non-finite gradient, step skipped (%d so far)", state.skipped)
        return False
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in params.items():
        g = _real_view(np.ascontiguousarray(grads[name]))
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        data = np.array(t.data, copy=True)
        _real_view(data)[...] -= update
        t.data = data
    return True


# ---------------------------------------------------------------------------
# reports


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_utility: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    initial_val_utility: float = math.nan
    best_epoch: int = 0
    best_val_utility: float = -math.inf
    stop_reason: str = ""
    clamped_samples: int = 0
    skipped_steps: int = 0
    utility: str = "sum_rate"

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["epoch", "train_loss", "val_utility", "seconds"])
            out.writerow([0, "", repr(self.initial_val_utility), ""])
            for r in self.epochs:
                out.writerow([r.epoch, repr(r.train_loss), repr(r.val_utility), f"{r.seconds:.6f}"])

    def summary(self) -> dict:
        return {
            "epochs_run": len(self.epochs),
            "initial_val_utility": self.initial_val_utility,
            "best_epoch": self.best_epoch,
            "best_val_utility": self.best_val_utility,
            "stop_reason": self.stop_reason,
            "clamped_samples": self.clamped_samples,
            "skipped_steps": self.skipped_steps,
            "utility": self.utility,
        }

    def trajectory(self) -> list:
        """Everything except wall-clock, for reproducibility checks."""
        return [(r.epoch, r.train_loss, r.val_utility) for r in self.epochs]


# ---------------------------------------------------------------------------
# evaluation


def mean_utility(model: TwoStageGNN, angles: np.ndarray, kind: str = "sum_rate",
                 batch_size: int = 4096, positions=None) -> float:
    return float(np.mean(batched_utility(model, angles, kind, batch_size, positions)))


def batched_utility(model: TwoStageGNN, angles: np.ndarray, kind: str = "sum_rate",
                    batch_size: int = 4096, positions=None) -> np.ndarray:
    """Per-sample utility in evaluation mode, computed chunk by chunk."""
    angles = np.asarray(angles, dtype=np.float64)
    parts = [model.utility(angles[i:i + batch_size], kind, positions) for i in range(0, len(angles), batch_size)]
    return np.concatenate(parts) if parts else np.zeros(0)


@dataclass
class Metrics:
    dataset_id: str
    n_users: int
    n_antennas: int
    n_samples: int
    utility: str
    mean_utility: float
    median_utility: float
    feasibility_rate: float
    ms_per_sample: float

    def to_row(self) -> dict:
        return dataclasses.asdict(self)


METRIC_COLUMNS = [f.name for f in dataclasses.fields(Metrics)]


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        out.writeheader()
        for m in rows:
            out.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in m.to_row().items()})


def evaluate(model: TwoStageGNN, ds: Dataset, kind: str = "sum_rate", batch_size: int = 4096) -> Metrics:
    """Utility statistics, feasibility rate and forward time on ``ds``.

    The dataset may have a different K than the model was trained with.
    """
    if ds.n_antennas != model.cfg.n_antennas:
        raise ValueError(f"dataset has N={ds.n_antennas}, model has N={model.cfg.n_antennas}")
    k = ds.n_users
    if k > model.cfg.n_antennas:
        raise ValueError(f"K={k} exceeds N={model.cfg.n_antennas}; zero forcing needs K <= N")
    cfg = model.cfg.with_users(k)
    utils, feasible = [], []
    elapsed = 0.0
    for i in range(0, len(ds), batch_size):
        chunk = ds.angles[i:i + batch_size]
        t0 = time.perf_counter()
        sol = model.forward(chunk, training=False)
        elapsed += time.perf_counter() - t0
        w, x, g = sol.w.data, sol.x.data, sol.g.data
        utils.append(channel.utility(w, g, cfg, kind))
        feasible.append(channel.feasible_batch(w, x, cfg))
    u = np.concatenate(utils) if utils else np.zeros(0)
    ok = np.concatenate(feasible) if feasible else np.zeros(0, bool)
    n = len(ds)
    return Metrics(
        dataset_id=ds.content_hash(),
        n_users=k,
        n_antennas=ds.n_antennas,
        n_samples=n,
        utility=kind,
        mean_utility=float(u.mean()) if n else math.nan,
        median_utility=float(np.median(u)) if n else math.nan,
        feasibility_rate=float(ok.mean()) if n else math.nan,
        ms_per_sample=1e3 * elapsed / max(n, 1),
    )


# ---------------------------------------------------------------------------
# fitting


def fit(model: TwoStageGNN, train: Dataset, val: Dataset, cfg: TrainConfig,
        validate=None, on_epoch=None) -> TrainReport:
    """Train ``model`` in place and leave it holding the best-validation weights.

    ``validate(model, epoch) -> float`` replaces the default validation
    metric (mean utility on ``val``).  ``on_epoch(record)`` is called after
    every epoch.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if train.n_antennas != model.cfg.n_antennas:
        raise ValueError(f"training data has N={train.n_antennas}, model has N={model.cfg.n_antennas}")
    if validate is None:
        def validate(m, epoch):
            return mean_utility(m, val.angles, cfg.utility, max(cfg.batch_size, 1024))

    params = model.params()
    state = AdamState()
    report = TrainReport(utility=cfg.utility)
    report.initial_val_utility = float(validate(model, 0))
    best_state = model.state()
    stale = 0
    report.stop_reason = "max_epochs"
    n = len(train)
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        losses, weights = [], []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2 and n >= 2:
                continue  # batch norm needs two samples; drop a singleton tail
            tape, loss, clamped = batch_loss(model, train.angles[idx], cfg.utility, True, cfg.utility_floor)
            report.clamped_samples += clamped
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError("non-finite training loss", {
                    "epoch": epoch, "batch_start": start, "loss": value,
                    "clamped_samples": report.clamped_samples, **dict(ops.diagnostics),
                })
            grads = backward(tape, loss)
            adam_step(params, {k: grads[t] for k, t in params.items()}, state, cfg)
            losses.append(value)
            weights.append(len(idx))
        train_loss = float(np.dot(losses, weights) / np.sum(weights)) if losses else math.nan
        val_u = float(validate(model, epoch))
        rec = EpochRecord(epoch, train_loss, val_u, time.perf_counter() - t0)
        report.epochs.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        log.info("epoch %d loss %.6g val %.6g (%.1fs)", epoch, train_loss, val_u, rec.seconds)
        if val_u > report.best_val_utility:
            report.best_val_utility = val_u
            report.best_epoch = epoch
            best_state = model.state()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                report.stop_reason = "early_stopping"
                break
    report.skipped_steps = state.skipped
    if report.epochs:
        model.load_state(best_state)
    else:
        report.stop_reason = "no_epochs"
    return report


# ---------------------------------------------------------------------------
# end-to-end gradient check


def pipeline_gradcheck(model: TwoStageGNN, angles: np.ndarray, kind: str = "sum_rate",
                       n_coords: int = 200, seed: int = 0, step: float = 1e-4,
                       tolerance: float = 1e-3, floor: float = 1e-9, kink_guard: bool = True,
                       abs_floor: float = 1e-8):
    """Central differences of the training loss on random parameter coordinates.

    Batch norm runs in training mode without touching its running
    statistics, exactly as inside a training step.  The loss is only
    piecewise smooth (ReLU units), so by default coordinates whose stencil
    crosses a kink are skipped and replaced (see ``grad_check``).

    Central differences of an O(0.1) loss carry round-off near
    eps * L / step ~ 1e-13; ``abs_floor`` keeps gradients far below that
    scale from being judged on relative error alone.
    """
    from .autodiff import grad_check

    angles = np.atleast_2d(np.asarray(angles, dtype=np.float64))
    cfg = model.cfg.with_users(angles.shape[-1])
    params = list(model.params().values())

    def loss_fn(*_):
        sol = model.forward(angles, training=True, update_stats=False)
        return utility_loss(stage2.utility(sol.w, sol.g, cfg, kind), floor)[0]

    return grad_check(loss_fn, params, step=step, tolerance=tolerance, n_coords=n_coords, rng=seed,
                      kink_guard=kink_guard, abs_floor=abs_floor)
