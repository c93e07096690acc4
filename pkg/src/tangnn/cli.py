"""Command-line surface: train / eval / sweep / embed / bench-topm / split.

Exit codes: 0 success, 2 configuration or validation problem, 3 runtime
training abort.  ``TANGNN_THREADS`` caps the math-library worker count
and must be applied before numpy loads.
"""

from __future__ import annotations

import os

_threads = os.environ.get("TANGNN_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import csv
import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import plots
from .checkpoint import check_compatible, load_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config, normalize_variant, parse_fanouts
from .errors import (ConfigError, InputError, ParseError, RangeError,
                     ShapeError, TangnnError, TrainingAbort)
from .graph import SplitSpec, make_split
from .topm import benchmark_scaling, build_index, init_auxiliary
from .training import evaluate, fit

RESULTS_HEADER = ["task", "dataset", "variant", "train_frac", "seed", "metric", "value"]


def _fail(message: str, code: int) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def guarded(fn):
    """Map package errors onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except TrainingAbort as exc:
            _fail(str(exc), 3)
        except (ConfigError, ParseError, RangeError, ShapeError, InputError) as exc:
            _fail(str(exc), 2)
        except TangnnError as exc:
            _fail(str(exc), 3)

    return wrapper


def _common_options(fn):
    options = [
        click.option("--config", "config_path", type=click.Path(), default=None,
                     help="JSON config file; flags override its values."),
        click.option("--variant", default=None,
                     help="Model wiring: tangnn|lc|flc|nai|tai."),
        click.option("--task", default=None,
                     help="node|link|sentiment|regression."),
        click.option("--train-frac", type=float, default=None),
        click.option("--m", type=int, default=None, help="Attention window size."),
        click.option("--fanouts", default=None, help="Per-layer sample counts, e.g. 20,10."),
        click.option("--seed", type=int, default=None),
        click.option("--out", "out_dir", type=click.Path(), default=None,
                     help="Output directory."),
        click.option("--pool", type=click.Choice(["batch", "full"]), default=None,
                     help="Top-m candidate pool: minibatch or full graph."),
    ]
    for opt in reversed(options):
        fn = opt(fn)
    return fn


def _build_run_config(config_path, variant, task, train_frac, m, fanouts, seed,
                      out_dir, pool) -> RunConfig:
    overrides = {
        "variant": normalize_variant(variant) if variant else None,
        "task": task,
        "train_frac": train_frac,
        "m": m,
        "fanouts": parse_fanouts(fanouts) if fanouts else None,
        "seed": seed,
        "out_dir": out_dir,
        "pool": pool,
    }
    return load_run_config(config_path, overrides)


def _resolve_split(run: RunConfig, dataset) -> SplitSpec:
    if run.split_path is not None:
        data = json.loads(Path(run.split_path).read_text(encoding="utf-8"))
        return SplitSpec.from_json_dict(data)
    return make_split(dataset, run.split_level(), run.train_frac, run.train.seed)


def _append_results(path: Path, run: RunConfig, metrics: dict) -> None:
    new_file = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(RESULTS_HEADER)
        for metric, value in sorted(metrics.items()):
            writer.writerow([run.train.task, run.dataset_name, run.train.variant,
                             f"{run.train_frac:g}", run.train.seed, metric,
                             f"{value:.6f}"])


def _write_loss_csv(path: Path, reports) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "val_metric", "seconds"])
        for r in reports:
            writer.writerow([r.epoch, f"{r.train_loss:.8f}",
                             f"{r.val_metric:.6f}", f"{r.seconds:.4f}"])


@click.group()
def main():
    """Graph representation learning with Top-m attention aggregation."""


@main.command()
@_common_options
@guarded
def train(config_path, variant, task, train_frac, m, fanouts, seed, out_dir, pool):
    """Train to convergence; write checkpoint, loss CSV, figures, and metrics."""
    run = _build_run_config(config_path, variant, task, train_frac, m, fanouts,
                            seed, out_dir, pool)
    run.validate_paths()
    dataset = run.load_dataset()
    split = _resolve_split(run, dataset)
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    try:
        params, reports = fit(dataset, split, run.train)
    except TrainingAbort as exc:
        if exc.params is not None:
            n_classes = getattr(exc.params.head, "n_classes", 0)
            save_checkpoint(out / "checkpoint.bin", exc.params, run.train, n_classes,
                            extra={"dataset": run.dataset_name, "aborted": True})
            _write_loss_csv(out / "loss.csv", exc.reports)
        raise

    n_classes = getattr(params.head, "n_classes", 0)
    save_checkpoint(out / "checkpoint.bin", params, run.train, n_classes,
                    extra={"dataset": run.dataset_name,
                           "train_frac": run.train_frac})
    _write_loss_csv(out / "loss.csv", reports)
    plots.save_loss_curves(reports, out / "loss_curve.png")
    metrics = evaluate(dataset, split, params, run.train, which="test")
    _append_results(out / "results.csv", run, metrics)
    click.echo(f"trained {run.train.variant} on {run.dataset_name} "
               f"({len(reports)} epochs)")
    for name, value in sorted(metrics.items()):
        click.echo(f"  test {name}: {value:.4f}")
    click.echo(f"artifacts in {out}")


@main.command("eval")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(), required=True)
@_common_options
@guarded
def eval_cmd(checkpoint_path, config_path, variant, task, train_frac, m, fanouts,
             seed, out_dir, pool):
    """Evaluate a checkpoint on the test split; no parameter updates."""
    run = _build_run_config(config_path, variant, task, train_frac, m, fanouts,
                            seed, out_dir, pool)
    run.validate_paths()
    if not Path(checkpoint_path).exists():
        raise ConfigError(f"checkpoint not found: {checkpoint_path}")
    params, header = load_checkpoint(checkpoint_path)
    check_compatible(header, run.train)
    dataset = run.load_dataset()
    split = _resolve_split(run, dataset)
    metrics = evaluate(dataset, split, params, run.train, which="test")
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _append_results(out / "results.csv", run, metrics)
    for name, value in sorted(metrics.items()):
        click.echo(f"test {name}: {value:.4f}")


@main.command()
@click.option("--m-list", default=None, help="Comma-separated window sizes.")
@click.option("--frac-list", default=None, help="Comma-separated train fractions.")
@_common_options
@guarded
def sweep(m_list, frac_list, config_path, variant, task, train_frac, m, fanouts,
          seed, out_dir, pool):
    """One full train+eval per grid point, seeds held fixed."""
    if bool(m_list) == bool(frac_list):
        raise ConfigError("provide exactly one of --m-list or --frac-list")
    run = _build_run_config(config_path, variant, task, train_frac, m, fanouts,
                            seed, out_dir, pool)
    run.validate_paths()
    raw = m_list if m_list else frac_list
    try:
        points = [int(v) if m_list else float(v)
                  for v in str(raw).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad sweep list: {raw!r}")
    if not points:
        raise ConfigError("sweep list is empty")
    dataset = run.load_dataset()
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    xlabel = "m" if m_list else "train_frac"
    series: dict[str, list] = {}
    for point in points:
        if m_list:
            run.train.m = point
        else:
            run.train_frac = point
        split = make_split(dataset, run.split_level(), run.train_frac, run.train.seed)
        params, _ = fit(dataset, split, run.train)
        metrics = evaluate(dataset, split, params, run.train, which="test")
        _append_results(out / "results.csv", run, metrics)
        for name, value in metrics.items():
            series.setdefault(name, []).append(value)
        shown = ", ".join(f"{k}={v:.4f}" for k, v in sorted(metrics.items()))
        click.echo(f"{xlabel}={point}: {shown}")
    plots.save_sweep_curve(points, series, xlabel, out / f"sweep_{xlabel}.png")
    click.echo(f"results in {out / 'results.csv'}")


@main.command()
@click.option("--checkpoint", "checkpoint_path", type=click.Path(), required=True)
@click.option("--out-file", type=click.Path(), default=None,
              help="Embedding TSV destination (default <out>/embeddings.tsv).")
@click.option("--sampled", is_flag=True, default=False,
              help="Use sampled inference instead of the full-neighborhood mean.")
@_common_options
@guarded
def embed(checkpoint_path, out_file, sampled, config_path, variant, task,
          train_frac, m, fanouts, seed, out_dir, pool):
    """Export one embedding row per node: id, label, e_1..e_D."""
    run = _build_run_config(config_path, variant, task, train_frac, m, fanouts,
                            seed, out_dir, pool)
    run.validate_paths()
    if run.train.task == "regression":
        raise ConfigError("embed exports node embeddings; not defined for "
                          "multi-graph regression datasets")
    if not Path(checkpoint_path).exists():
        raise ConfigError(f"checkpoint not found: {checkpoint_path}")
    params, header = load_checkpoint(checkpoint_path)
    check_compatible(header, run.train)
    graph = run.load_dataset()
    from .layers import forward  # deferred: keeps CLI import light
    rng = np.random.default_rng(run.train.seed) if sampled else None
    result = forward(graph, np.arange(graph.num_nodes), params, run.train,
                     rng=rng, sampled=sampled)
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dest = Path(out_file) if out_file else out / "embeddings.tsv"
    labels = graph.node_labels
    with open(dest, "w", encoding="utf-8") as fh:
        for v in range(graph.num_nodes):
            label = int(labels[v]) if labels is not None else -1
            row = "\t".join(f"{x:.8g}" for x in result.final.values[v])
            fh.write(f"{v}\t{label}\t{row}\n")
    click.echo(f"wrote {graph.num_nodes} embeddings to {dest}")


@main.command("bench-topm")
@click.option("--sizes", default="10000,20000,40000",
              help="Comma-separated instance sizes, ascending.")
@click.option("--dim", type=int, default=64)
@click.option("--m", type=int, default=30)
@click.option("--reps", type=int, default=3)
@click.option("--oracle", is_flag=True, default=False,
              help="Also time the quadratic per-pair reference.")
@click.option("--dump", "dump_path", type=click.Path(), default=None,
              help="Write a small index text dump for inspection.")
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@guarded
def bench_topm(sizes, dim, m, reps, oracle, dump_path, seed, out_dir):
    """Time index construction across sizes and fit the growth exponent."""
    try:
        size_list = [int(s) for s in str(sizes).split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"bad sizes list: {sizes!r}")
    if not size_list:
        raise ConfigError("sizes list is empty")
    results = [benchmark_scaling(size_list, dim=dim, m=m, repetitions=reps, seed=seed)]
    click.echo(results[0].table())
    if oracle:
        results.append(benchmark_scaling(size_list, dim=dim, m=m,
                                         repetitions=max(1, reps // 3) or 1,
                                         quadratic=True, seed=seed))
        click.echo("")
        click.echo(results[1].table())
    if dump_path:
        rng = np.random.default_rng(seed)
        demo = rng.normal(size=(min(size_list[0], 64), dim))
        index = build_index(demo, init_auxiliary(dim, rng), m)
        Path(dump_path).write_text(index.to_text() + "\n", encoding="utf-8")
        click.echo(f"index dump in {dump_path}")
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "bench_topm.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["builder", "n", "seconds"])
            for result in results:
                name = "quadratic" if result.quadratic else "rank-window"
                for n, t in zip(result.sizes, result.seconds):
                    writer.writerow([name, n, f"{t:.6f}"])
        plots.save_bench_curves(results, out / "bench_topm.png")
        click.echo(f"benchmark artifacts in {out}")


@main.command()
@click.option("--out-file", type=click.Path(), default=None,
              help="Split JSON destination (default <out>/split.json).")
@_common_options
@guarded
def split(out_file, config_path, variant, task, train_frac, m, fanouts, seed,
          out_dir, pool):
    """Materialize a deterministic train/test split as JSON."""
    run = _build_run_config(config_path, variant, task, train_frac, m, fanouts,
                            seed, out_dir, pool)
    run.validate_paths()
    dataset = run.load_dataset()
    spec = make_split(dataset, run.split_level(), run.train_frac, run.train.seed)
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dest = Path(out_file) if out_file else out / "split.json"
    dest.write_text(json.dumps(spec.to_json_dict()) + "\n", encoding="utf-8")
    click.echo(f"{spec.level}-level split: {spec.train_idx.shape[0]} train / "
               f"{spec.test_idx.shape[0]} test -> {dest}")


if __name__ == "__main__":
    main()
