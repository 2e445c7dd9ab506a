"""
Command-line entry point for the gated fusion experiments.

Commands:
- gen      Generate a context-balanced AdverseOp3D-mini dataset
- train    Train a detector variant (full or gates-only transfer)
- eval     Score a checkpoint per context bucket
- compare  Per-context mAP / per-class AP deltas between two checkpoints
- bench    Gated vs plain fusion conv latency
- gates    Learned lidar / camera gate values per context

Usage:
    python -m gatedbev.perception.cli gen --out data --samples 400 --seed 7
"""

import csv
import functools
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Tuple

import click
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from dotenv import load_dotenv  # noqa: E402

from gatedbev.config.settings import RunConfig, load_config  # noqa: E402
from gatedbev.errors import CheckpointError, ConfigError, GatedBevError, OutputError  # noqa: E402
from gatedbev.perception import pipeline  # noqa: E402
from gatedbev.perception.adverseop_synth import (  # noqa: E402
    ALL_CONTEXTS, CONTEXT_BUCKETS, DatasetManifest, balanced_contexts, generate_dataset, read_dataset,
    read_manifest, write_dataset,
)
from gatedbev.perception.evaluate import SCOPES, EvalReport, write_report  # noqa: E402
from gatedbev.perception.fusion import mean_gates  # noqa: E402
from gatedbev.perception.train import train as run_training  # noqa: E402
from gatedbev.weights.checkpoint import CHECKPOINT_NAME, CheckpointHeader, load_checkpoint, save_checkpoint  # noqa: E402

logger = logging.getLogger(__name__)

VARIANTS = ("constrained", "independent", "agnostic", "lidar_only", "camera_only")
COMPARE_COLUMNS = ("scope", "class", "ap_a", "ap_b", "delta")

# reproducible SVG output
plt.rcParams["svg.hashsalt"] = "gatedbev"
SVG_METADATA = {"Date": None}


def handle_errors(fn):
    """Map package errors onto their exit codes."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except GatedBevError as e:
            logger.error(f"{fn.__name__} aborted: {e}")
            click.echo(f"Error: {e}", err=True)
            sys.exit(e.exit_code)
    return wrapper


def resolve_config(config_path: Optional[str], **updates) -> RunConfig:
    """Load the config file, then apply dotted-path command-line overrides."""
    config = load_config(config_path)
    if not updates:
        return config
    data = config.model_dump()
    for dotted, value in updates.items():
        if value is None:
            continue
        node = data
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node[key]
        node[leaf] = value
    return load_config(None, **data)


def _prepare_out(out: str, config: RunConfig) -> Path:
    out_dir = Path(out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        config.dump_resolved(out_dir)
    except OSError as e:
        raise OutputError(f"Cannot write to output directory {out_dir}: {e}")
    return out_dir


def _dataset_config(config_path: Optional[str], data: str, **updates) -> Tuple[RunConfig, DatasetManifest]:
    """Resolve a config whose grid follows the dataset manifest."""
    config = resolve_config(config_path, **updates)
    manifest = read_manifest(data)
    if manifest.class_names != config.class_names:
        raise ConfigError(f"Dataset classes {manifest.class_names} differ from config classes {config.class_names}")
    if manifest.grid != config.grid:
        logger.info(f"Using the dataset grid {manifest.grid.height}x{manifest.grid.width}")
        config = resolve_config(config_path, grid=manifest.grid.model_dump(), **updates)
    return config, manifest


def _check_checkpoint(header: CheckpointHeader, config: RunConfig, path: str) -> None:
    if header.class_names != config.class_names:
        raise CheckpointError(f"Checkpoint {path} classes {header.class_names} differ from dataset {config.class_names}")
    if header.grid != config.grid:
        raise CheckpointError(f"Checkpoint {path} was trained on a different BEV grid")
    if header.c1 != config.lidar_channels or header.c2 != config.camera_channels:
        raise CheckpointError(
            f"Checkpoint {path} expects {header.c1}/{header.c2} feature channels, "
            f"config produces {config.lidar_channels}/{config.camera_channels}"
        )


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.4f}"


# ==================== COMMANDS ====================

@click.group()
@click.option("--verbose", is_flag=True, help="Enable debug logging")
def main(verbose: bool):
    """Context-gated camera-lidar BEV fusion experiments."""
    load_dotenv()
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


@main.command()
@click.option("--out", required=True, type=click.Path(), help="Dataset output directory")
@click.option("--samples", type=int, default=None, help="Number of samples (multiple of 4)")
@click.option("--seed", type=int, default=None, help="Dataset seed")
@click.option("--workers", type=int, default=None, help="Generation threads")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="JSON config file")
@handle_errors
def gen(out: str, samples: Optional[int], seed: Optional[int], workers: Optional[int], config_path: Optional[str]):
    """Generate a context-balanced synthetic dataset."""
    config = resolve_config(config_path, **{"seed": seed, "dataset.samples": samples, "dataset.workers": workers})
    balanced_contexts(config.dataset.samples)
    out_dir = _prepare_out(out, config)
    data = generate_dataset(config)
    manifest = write_dataset(data, config.dataset.split_fractions, out_dir, config)

    splits = list(manifest.splits)
    click.echo(f"{'bucket':<12}" + "".join(f"{s:>8}" for s in splits) + f"{'total':>8}")
    for bucket in CONTEXT_BUCKETS:
        row = "".join(f"{manifest.context_counts[s][bucket]:>8}" for s in splits)
        click.echo(f"{bucket:<12}{row}{manifest.context_counts['all'][bucket]:>8}")


def _plot_losses(losses, variant: str, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(1, len(losses) + 1), losses, marker="o", markersize=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    ax.set_title(f"{variant} training loss")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)


@main.command()
@click.option("--data", required=True, type=click.Path(file_okay=False), help="Dataset directory")
@click.option("--out", required=True, type=click.Path(), help="Run output directory")
@click.option("--variant", type=click.Choice(VARIANTS), default=None, help="Gate variant")
@click.option("--gates-only", is_flag=True, help="Train only the gate network (requires --init)")
@click.option("--init", "init_ckpt", type=click.Path(dir_okay=False), default=None, help="Initial checkpoint")
@click.option("--epochs", type=int, default=None, help="Override the epoch count")
@click.option("--lr", type=float, default=None, help="Override the learning rate")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="JSON config file")
@handle_errors
def train(data: str, out: str, variant: Optional[str], gates_only: bool, init_ckpt: Optional[str],
          epochs: Optional[int], lr: Optional[float], config_path: Optional[str]):
    """Train a detector variant on the train split."""
    if gates_only and init_ckpt is None:
        raise ConfigError("--gates-only needs --init CKPT to provide the frozen pipeline weights")
    config, manifest = _dataset_config(
        config_path, data,
        **{"model.variant": variant, "train.epochs": epochs, "train.learning_rate": lr},
    )
    variant = config.model.variant
    out_dir = _prepare_out(out, config)

    if init_ckpt is not None:
        model, header = load_checkpoint(init_ckpt)
        _check_checkpoint(header, config, init_ckpt)
        if gates_only or header.variant != variant:
            model.replace_gate(variant, config.model.gate_bias_init)
    else:
        model = pipeline.build_model(config, variant)

    samples, _ = read_dataset(data, split="train")
    examples = pipeline.prepare_examples(samples, config)
    result = run_training(model, examples, config.train, gates_only=gates_only)

    save_checkpoint(result.model, out_dir / CHECKPOINT_NAME, config.class_names, config.grid)
    loss_record = {
        "variant": variant,
        "gates_only": gates_only,
        "init": init_ckpt,
        "epochs": config.train.epochs,
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "losses": result.losses,
        "trainable": result.trainable,
    }
    (out_dir / "loss.json").write_text(json.dumps(loss_record, indent=2) + "\n")
    _plot_losses(result.losses, variant, out_dir / "loss.svg")
    click.echo(f"{variant}: loss {result.initial_loss:.4f} -> {result.final_loss:.4f} ({config.train.epochs} epochs)")


def _evaluate_checkpoint(data: str, ckpt: str, split: Optional[str], config: RunConfig) -> EvalReport:
    model, header = load_checkpoint(ckpt)
    _check_checkpoint(header, config, ckpt)
    samples, _ = read_dataset(data, split=split or config.eval.split)
    return pipeline.evaluate_model(model, samples, config)


def _echo_report(report: EvalReport) -> None:
    click.echo(f"{'scope':<12}" + "".join(f"{n:>12}" for n in report.class_names) + f"{'mAP':>10}")
    for scope in report.scopes:
        aps = "".join(f"{_fmt(c.ap):>12}" for c in scope.classes)
        click.echo(f"{scope.scope:<12}{aps}{_fmt(scope.map):>10}")


@main.command(name="eval")
@click.option("--data", required=True, type=click.Path(file_okay=False), help="Dataset directory")
@click.option("--ckpt", required=True, type=click.Path(dir_okay=False), help="Checkpoint file")
@click.option("--out", required=True, type=click.Path(), help="Report output directory")
@click.option("--split", default=None, help="Dataset split to score (default: eval.split)")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="JSON config file")
@handle_errors
def eval_cmd(data: str, ckpt: str, out: str, split: Optional[str], config_path: Optional[str]):
    """Score a checkpoint with a per-context breakdown."""
    config, _ = _dataset_config(config_path, data)
    out_dir = _prepare_out(out, config)
    report = _evaluate_checkpoint(data, ckpt, split, config)
    write_report(report, out_dir)
    _echo_report(report)


def compare_rows(report_a: EvalReport, report_b: EvalReport):
    """Per scope: class AP rows, the mAP row, then the night-bucket summary."""
    if report_a.class_names != report_b.class_names:
        raise ConfigError(f"Class tables differ: {report_a.class_names} vs {report_b.class_names}")

    def delta(a, b):
        return None if a is None or b is None else b - a

    rows = []
    for scope in SCOPES:
        sa, sb = report_a.scope(scope), report_b.scope(scope)
        for ca, cb in zip(sa.classes, sb.classes):
            rows.append([scope, ca.class_name, _fmt(ca.ap), _fmt(cb.ap), _fmt(delta(ca.ap, cb.ap))])
        rows.append([scope, "all", _fmt(sa.map), _fmt(sb.map), _fmt(delta(sa.map, sb.map))])
    na, nb = report_a.night_bucket_map, report_b.night_bucket_map
    rows.append(["night_buckets", "all", _fmt(na), _fmt(nb), _fmt(delta(na, nb))])
    return rows


def _plot_compare(report_a: EvalReport, report_b: EvalReport, labels, path: Path) -> None:
    maps_a = [report_a.scope(s).map or 0.0 for s in SCOPES]
    maps_b = [report_b.scope(s).map or 0.0 for s in SCOPES]
    xs = range(len(SCOPES))
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar([x - 0.2 for x in xs], maps_a, width=0.4, label=labels[0])
    ax.bar([x + 0.2 for x in xs], maps_b, width=0.4, label=labels[1])
    ax.set_xticks(list(xs))
    ax.set_xticklabels(SCOPES, rotation=30, ha="right")
    ax.set_ylabel("mAP (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)


@main.command()
@click.option("--data", required=True, type=click.Path(file_okay=False), help="Dataset directory")
@click.option("--ckpt-a", required=True, type=click.Path(dir_okay=False), help="Baseline checkpoint")
@click.option("--ckpt-b", required=True, type=click.Path(dir_okay=False), help="Candidate checkpoint")
@click.option("--out", required=True, type=click.Path(), help="Comparison output directory")
@click.option("--split", default=None, help="Dataset split to score (default: eval.split)")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="JSON config file")
@handle_errors
def compare(data: str, ckpt_a: str, ckpt_b: str, out: str, split: Optional[str], config_path: Optional[str]):
    """Side-by-side mAP / AP deltas (b - a) between two checkpoints."""
    config, _ = _dataset_config(config_path, data)
    out_dir = _prepare_out(out, config)
    _, header_a = load_checkpoint(ckpt_a)
    _, header_b = load_checkpoint(ckpt_b)
    if header_a.class_names != header_b.class_names:
        raise ConfigError(f"Checkpoints disagree on classes: {header_a.class_names} vs {header_b.class_names}")
    report_a = _evaluate_checkpoint(data, ckpt_a, split, config)
    report_b = _evaluate_checkpoint(data, ckpt_b, split, config)
    rows = compare_rows(report_a, report_b)

    with open(out_dir / "compare.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COMPARE_COLUMNS)
        writer.writerows(rows)
    _plot_compare(report_a, report_b, (header_a.variant, header_b.variant), out_dir / "compare.svg")
    for r in rows:
        if r[1] == "all":
            click.echo(f"{r[0]:<14}{r[2]:>10}{r[3]:>10}{r[4]:>10}")


@main.command()
@click.option("--ckpt", required=True, type=click.Path(dir_okay=False), help="Checkpoint file")
@click.option("--iters", type=click.IntRange(min=1), default=100, show_default=True, help="Timed iterations")
@click.option("--out", type=click.Path(), default=None, help="Output directory (default: next to CKPT)")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="JSON config file")
@handle_errors
def bench(ckpt: str, iters: int, out: Optional[str], config_path: Optional[str]):
    """Median latency of gated vs plain fusion convolution."""
    model, header = load_checkpoint(ckpt)
    config = resolve_config(config_path, grid=header.grid.model_dump())
    out_dir = _prepare_out(out or str(Path(ckpt).parent), config)
    result = pipeline.bench_fusion(model, header.grid.height, header.grid.width, iters=iters, seed=config.seed)
    (out_dir / "bench.json").write_text(json.dumps(result, indent=2) + "\n")
    click.echo(f"gated {result['gated_ms']:.3f} ms  plain {result['plain_ms']:.3f} ms  "
               f"ratio {result['overhead_ratio']:.3f}")


@main.command()
@click.option("--ckpt", required=True, type=click.Path(dir_okay=False), help="Checkpoint file")
@click.option("--out", type=click.Path(), default=None, help="Output directory (default: next to CKPT)")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="JSON config file")
@handle_errors
def gates(ckpt: str, out: Optional[str], config_path: Optional[str]):
    """Mean lidar and camera gate value for each context."""
    model, header = load_checkpoint(ckpt)
    config = resolve_config(config_path, grid=header.grid.model_dump())
    out_dir = _prepare_out(out or str(Path(ckpt).parent), config)
    values = mean_gates(model, ALL_CONTEXTS)
    (out_dir / "gates.json").write_text(json.dumps({"variant": header.variant, "gates": values}, indent=2) + "\n")
    click.echo(f"{'context':<12}{'lidar':>8}{'camera':>8}")
    for bucket, g in values.items():
        click.echo(f"{bucket:<12}{g['lidar']:>8.3f}{g['camera']:>8.3f}")


if __name__ == "__main__":
    main()
