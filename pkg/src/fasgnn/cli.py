"""Command-line entry point: ``fasgnn <command> ...``.

Exit codes: 0 success, 2 validation failure (gradient check, feasibility),
3 configuration or input error.  Outputs are written under the output
directory: ``--out-dir``, else $FASGNN_OUTPUT_ROOT, else the config's
``paths.output_dir``, else ``./outputs``.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path

import click
import numpy as np

from . import __version__, baselines, channel
from .autodiff import PRIMITIVE_CASES, check_primitive
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig
from .dataset import Dataset, export_csv, load_dataset, sample_dataset, save_dataset, split_dataset
from .model import TwoStageGNN
from .training import evaluate, fit, pipeline_gradcheck, write_metrics_csv

EXIT_OK, EXIT_VALIDATION, EXIT_CONFIG = 0, 2, 3
OUTPUT_ENV = "FASGNN_OUTPUT_ROOT"


class Failure(click.ClickException):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.exit_code = code


def _config(path) -> ExperimentConfig:
    try:
        return ExperimentConfig.load(path) if path else ExperimentConfig()
    except ConfigError as exc:
        raise Failure(f"config error: {exc}", EXIT_CONFIG) from exc


def _out_dir(flag, cfg: ExperimentConfig) -> Path:
    root = flag or os.environ.get(OUTPUT_ENV) or cfg.paths.get("output_dir") or "outputs"
    out = Path(root)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise Failure(f"cannot create output directory {out}: {exc}", EXIT_CONFIG) from exc
    return out


def _load_data(path) -> Dataset:
    if path is None:
        raise Failure("no dataset given (use --data or paths.dataset)", EXIT_CONFIG)
    try:
        return load_dataset(path)
    except (OSError, ValueError) as exc:
        raise Failure(f"cannot read dataset {path}: {exc}", EXIT_CONFIG) from exc


def _load_model(path, n_users: int | None = None) -> TwoStageGNN:
    if path is None:
        raise Failure("no checkpoint given (use --checkpoint or paths.checkpoint)", EXIT_CONFIG)
    try:
        return load_checkpoint(path, n_users)
    except (OSError, ValueError, KeyError) as exc:
        raise Failure(f"cannot read checkpoint {path}: {exc}", EXIT_CONFIG) from exc


def _stamp(out: Path, cfg: ExperimentConfig, command: str, **extra) -> None:
    cfg.write_resolved(out, {"command": command, **extra})


config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                             help="YAML experiment config.")
out_option = click.option("--out-dir", default=None, help=f"Output directory (overrides ${OUTPUT_ENV}).")


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Two-stage complex GNN for fluid-antenna placement and hybrid ZF beamforming."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")


# ---------------------------------------------------------------------------


@main.command("gen-data")
@config_option
@out_option
@click.option("--size", type=int, default=None, help="Number of samples (default: training.dataset_size).")
@click.option("--seed", type=int, default=None, help="Dataset seed (default: training.dataset_seed).")
@click.option("--n-users", type=int, default=None, help="Override system.n_users.")
@click.option("--name", default="dataset.fasd", show_default=True)
@click.option("--csv", "also_csv", is_flag=True, help="Also write a CSV export.")
def gen_data(config_path, out_dir, size, seed, n_users, name, also_csv):
    """Generate a steering-angle dataset."""
    cfg = _config(config_path)
    if n_users is not None:
        try:
            cfg = cfg.with_system(n_users=n_users, path_loss=())
        except ValueError as exc:
            raise Failure(f"config error: {exc}", EXIT_CONFIG) from exc
    size = cfg.dataset_size if size is None else size
    seed = cfg.dataset_seed if seed is None else seed
    if size < 0:
        raise Failure("size must be non-negative", EXIT_CONFIG)
    out = _out_dir(out_dir, cfg)
    ds = sample_dataset(cfg.system, size, seed)
    path = out / name
    try:
        save_dataset(ds, path)
        if also_csv:
            export_csv(ds, path.with_suffix(".csv"))
    except OSError as exc:
        raise Failure(f"cannot write {path}: {exc}", EXIT_CONFIG) from exc
    _stamp(out, cfg, "gen-data", dataset=str(path), size=size, seed=seed)
    click.echo(f"N={ds.n_antennas} K={ds.n_users} size={len(ds)} hash={ds.content_hash()} -> {path}")


@main.command()
@config_option
@out_option
@click.option("--data", "data_path", default=None, help="Dataset file (split into train/val/test).")
@click.option("--seed", type=int, default=None, help="Override training.seed (also the weight init seed).")
@click.option("--utility", type=click.Choice(["sum_rate", "energy_efficiency"]), default=None)
@click.option("--max-epochs", type=int, default=None)
def train(config_path, out_dir, data_path, seed, utility, max_epochs):
    """Train the two-stage model; writes checkpoint.npz and train_report.csv."""
    import dataclasses

    cfg = _config(config_path)
    overrides = {k: v for k, v in (("seed", seed), ("utility", utility), ("max_epochs", max_epochs)) if v is not None}
    if overrides:
        try:
            cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **overrides))
        except ValueError as exc:
            raise Failure(f"config error: {exc}", EXIT_CONFIG) from exc
    out = _out_dir(out_dir, cfg)
    data_path = data_path or cfg.paths.get("dataset")
    ds = _load_data(data_path) if data_path else sample_dataset(cfg.system, cfg.dataset_size, cfg.dataset_seed)
    if ds.n_antennas != cfg.system.n_antennas or ds.n_users != cfg.system.n_users:
        raise Failure(f"dataset is (N={ds.n_antennas}, K={ds.n_users}) but config is "
                      f"(N={cfg.system.n_antennas}, K={cfg.system.n_users})", EXIT_CONFIG)
    tr, va, te = split_dataset(ds, cfg.split)
    model = TwoStageGNN(cfg.system, cfg.arch, seed=cfg.train.seed)
    t0 = time.perf_counter()
    report = fit(model, tr, va, cfg.train)
    seconds = time.perf_counter() - t0
    stamp = {"config_hash": cfg.config_hash(), "version": __version__, "dataset": ds.content_hash()}
    save_checkpoint(model, out / "checkpoint.npz", extra={**stamp, **report.summary()})
    report.to_csv(out / "train_report.csv")
    metrics = evaluate(model, te, cfg.train.utility) if len(te) else None
    if metrics is not None:
        write_metrics_csv(out / "test_metrics.csv", [metrics])
    summary = {**report.summary(), "seconds": seconds, **stamp}
    if metrics is not None:
        summary["test_mean_utility"] = metrics.mean_utility
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    _stamp(out, cfg, "train", dataset=ds.content_hash())
    click.echo(f"best epoch {report.best_epoch} val {report.best_val_utility:.6g} "
               f"({report.stop_reason}, {seconds:.1f}s) -> {out / 'checkpoint.npz'}")


@main.command("eval")
@config_option
@out_option
@click.option("--checkpoint", "ckpt", default=None)
@click.option("--data", "data_path", default=None)
@click.option("--k-override", "k_path", default=None,
              help="Extra dataset with a different K, evaluated with the same weights.")
@click.option("--utility", type=click.Choice(["sum_rate", "energy_efficiency"]), default=None)
def eval_cmd(config_path, out_dir, ckpt, data_path, k_path, utility):
    """Evaluate a checkpoint; writes metrics.csv (one row per dataset)."""
    cfg = _config(config_path)
    out = _out_dir(out_dir, cfg)
    ckpt = ckpt or cfg.paths.get("checkpoint")
    data_path = data_path or cfg.paths.get("dataset")
    kind = utility or cfg.train.utility
    rows = []
    for path in [p for p in (data_path, k_path) if p]:
        ds = _load_data(path)
        model = _load_model(ckpt, ds.n_users)
        try:
            rows.append(evaluate(model, ds, kind))
        except ValueError as exc:
            raise Failure(str(exc), EXIT_CONFIG) from exc
    if not rows:
        raise Failure("nothing to evaluate (give --data)", EXIT_CONFIG)
    write_metrics_csv(out / "metrics.csv", rows)
    _stamp(out, cfg, "eval", checkpoint=str(ckpt))
    for m in rows:
        click.echo(f"K={m.n_users} N={m.n_antennas} mean {kind}={m.mean_utility:.6g} "
                   f"feasible={m.feasibility_rate:.4f} {m.ms_per_sample:.4f} ms/sample")
    if any(m.feasibility_rate < 1.0 for m in rows):
        raise Failure("some outputs violate the constraints", EXIT_VALIDATION)


def _grid_one(angles, cfg, grid, kind, which):
    g_eq = channel.channel_matrix(channel.equidistant_positions(cfg), angles, cfg)
    if which == "oracle":
        res = baselines.position_grid_oracle(angles, cfg, grid, kind)
    else:
        res = baselines.hzf_grid_search(g_eq, cfg, grid, kind, positions=channel.equidistant_positions(cfg))
    ok = channel.check_feasibility(res.beams, res.positions, cfg).passed
    return res.utility, res.seconds, ok, res.positions, res.alpha, res.power


@main.command()
@click.argument("which", type=click.Choice(["mrt", "zf", "hzf-grid", "oracle", "compare"]))
@config_option
@out_option
@click.option("--data", "data_path", default=None)
@click.option("--checkpoint", "ckpt", default=None, help="Model for the 'compare' table.")
@click.option("--alpha-points", type=int, default=11, show_default=True)
@click.option("--power-points", type=int, default=11, show_default=True)
@click.option("--position-points", type=int, default=50, show_default=True)
@click.option("--budget", type=int, default=50_000_000, show_default=True)
@click.option("--limit", type=int, default=None, help="Only the first LIMIT samples.")
@click.option("--workers", type=int, default=None, help="Processes for grid searches (default: CPU count).")
@click.option("--utility", type=click.Choice(["sum_rate", "energy_efficiency"]), default=None)
def baseline(which, config_path, out_dir, data_path, ckpt, alpha_points, power_points, position_points,
             budget, limit, workers, utility):
    """Run a reference method over a dataset."""
    cfg = _config(config_path)
    out = _out_dir(out_dir, cfg)
    ds = _load_data(data_path or cfg.paths.get("dataset"))
    angles = ds.angles[:limit] if limit else ds.angles
    system = cfg.system
    if ds.n_antennas != system.n_antennas:
        system = channel.SystemConfig.from_dict({**system.to_dict(), "n_antennas": ds.n_antennas})
    system = system.with_users(ds.n_users)
    kind = utility or cfg.train.utility
    try:
        grid = baselines.GridSpec(alpha_points, power_points, position_points, budget)
    except ValueError as exc:
        raise Failure(f"config error: {exc}", EXIT_CONFIG) from exc

    if which == "compare":
        model = _load_model(ckpt or cfg.paths.get("checkpoint"), ds.n_users)
        table = baselines.compare_table(model, angles, system, grid, kind)
        table.to_csv(out / "compare.csv")
        (out / "compare.txt").write_text(table.to_text() + "\n")
        _stamp(out, cfg, "baseline", which=which)
        click.echo(table.to_text())
        return

    path = out / f"baseline_{which.replace('-', '_')}.csv"
    x_eq = channel.equidistant_positions(system)
    if which in ("mrt", "zf"):
        t0 = time.perf_counter()
        g = channel.channel_matrix(x_eq, angles, system)
        fn = baselines.mrt_equal_power if which == "mrt" else baselines.zf_equal_power
        w = fn(g, system)
        u = channel.utility(w, g, system, kind)
        ok = channel.feasible_batch(w, np.broadcast_to(x_eq, (len(angles), len(x_eq))), system)
        per = (time.perf_counter() - t0) / max(len(angles), 1)
        rows = [(i, u[i], per, bool(ok[i]), x_eq, None, None) for i in range(len(angles))]
    else:
        job = partial(_grid_one, cfg=system, grid=grid, kind=kind, which=which)
        try:
            n_workers = workers or os.cpu_count() or 1
            if n_workers > 1 and len(angles) > 1:
                with ProcessPoolExecutor(n_workers) as pool:
                    results = list(pool.map(job, angles, chunksize=8))  # map keeps input order
            else:
                results = [job(a) for a in angles]
        except baselines.GridBudgetError as exc:
            raise Failure(str(exc), EXIT_CONFIG) from exc
        rows = [(i, *r) for i, r in enumerate(results)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "method", "utility", "seconds", "feasible", "positions", "alpha", "power"])
        for i, util, sec, ok, x, alpha, power in rows:
            fmt = (lambda a: "" if a is None else " ".join(repr(float(v)) for v in np.ravel(a)))
            w.writerow([i, which, repr(float(util)), f"{sec:.6f}", int(ok), fmt(x), fmt(alpha), fmt(power)])
    _stamp(out, cfg, "baseline", which=which, dataset=ds.content_hash())
    utils = np.array([r[1] for r in rows])
    feas = np.mean([r[3] for r in rows]) if rows else 1.0
    click.echo(f"{which}: mean {kind}={utils.mean():.6g} over {len(rows)} samples, feasible={feas:.4f} -> {path}")
    if feas < 1.0:
        raise Failure("baseline produced infeasible outputs", EXIT_VALIDATION)


@main.command()
@click.argument("scope")
@config_option
@out_option
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--coords", type=int, default=200, show_default=True, help="Coordinates for the pipeline check.")
@click.option("--batch", type=int, default=16, show_default=True, help="Samples in the pipeline check.")
def gradcheck(scope, config_path, out_dir, seed, coords, batch):
    """Finite-difference gradient checks.

    SCOPE is a primitive name, 'primitives' (all of them) or 'pipeline'
    (end-to-end loss, both utilities).
    """
    cfg = _config(config_path)
    if scope not in PRIMITIVE_CASES and scope not in ("primitives", "pipeline"):
        raise Failure(f"unknown gradcheck scope {scope!r}; choose 'primitives', 'pipeline' or one of "
                      f"{', '.join(sorted(PRIMITIVE_CASES))}", EXIT_CONFIG)
    out = _out_dir(out_dir, cfg)
    reports = []
    if scope == "pipeline":
        if batch < 2:
            raise Failure("pipeline check needs --batch >= 2 (training-mode batch norm)", EXIT_CONFIG)
        model = TwoStageGNN(cfg.system, cfg.arch, seed=seed)
        angles = sample_dataset(cfg.system, batch, seed).angles
        for kind in ("sum_rate", "energy_efficiency"):
            reports.append((f"pipeline:{kind}", pipeline_gradcheck(model, angles, kind, coords, seed)))
    else:
        names = sorted(PRIMITIVE_CASES) if scope == "primitives" else [scope]
        reports = [(n, check_primitive(n, seed)) for n in names]
    path = out / "gradcheck.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scope", "coordinate", "analytic", "numeric", "abs_err", "rel_err", "tolerance", "passed"])
        for name, r in reports:
            for row in zip(r.labels, r.analytic, r.numeric, r.abs_err, r.rel_err):
                w.writerow([name, row[0], *(repr(float(v)) for v in row[1:]), r.tolerance, int(r.passed)])
    _stamp(out, cfg, "gradcheck", scope=scope)
    failed = [n for n, r in reports if not r.passed]
    for name, r in reports:
        extra = f" ({len(r.skipped)} kink-crossing stencils skipped)" if r.skipped else ""
        click.echo(f"{'PASS' if r.passed else 'FAIL'} {name}: max rel err {r.max_rel_err:.3e} "
                   f"over {len(r.labels)} coords{extra}")
    if failed:
        raise Failure(f"gradient check failed: {', '.join(failed)}", EXIT_VALIDATION)


@main.command()
@config_option
@out_option
@click.option("--checkpoint", "ckpt", default=None)
@click.option("--data", "data_path", default=None)
@click.option("--samples", type=int, default=1000, show_default=True)
@click.option("--batch-size", type=int, default=1000, show_default=True)
@click.option("--repeats", type=int, default=3, show_default=True)
def bench(config_path, out_dir, ckpt, data_path, samples, batch_size, repeats):
    """Forward-pass timing, batched and one sample at a time."""
    cfg = _config(config_path)
    out = _out_dir(out_dir, cfg)
    ds = _load_data(data_path or cfg.paths.get("dataset"))
    model = _load_model(ckpt or cfg.paths.get("checkpoint"), ds.n_users)
    angles = ds.angles[:samples]
    rows = []
    for mode, bs in (("batched", batch_size), ("single", 1)):
        per_sample = []
        n_single = min(len(angles), 200) if bs == 1 else len(angles)
        for _ in range(repeats):
            for i in range(0, n_single, bs):
                chunk = angles[i:i + bs]
                t0 = time.perf_counter()
                model.forward(chunk, training=False)
                per_sample.append(1e3 * (time.perf_counter() - t0) / len(chunk))
        rows.append((mode, bs, float(np.mean(per_sample)), float(np.median(per_sample)), n_single))
    path = out / "bench.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "batch_size", "mean_ms_per_sample", "median_ms_per_sample", "samples", "n_antennas", "n_users"])
        for r in rows:
            w.writerow([*r[:2], f"{r[2]:.6f}", f"{r[3]:.6f}", r[4], ds.n_antennas, ds.n_users])
    _stamp(out, cfg, "bench")
    for mode, bs, mean, med, n in rows:
        click.echo(f"{mode:>7s} (batch {bs}): mean {mean:.4f} ms/sample, median {med:.4f} ms/sample over {n} samples")


if __name__ == "__main__":
    main()
