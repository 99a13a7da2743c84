"""Command-line front end: ``loce generate``, ``loce train``, ``loce report``.

Exit codes: 0 on success, 1 on usage or configuration errors, 2 on runtime
failures (I/O, divergence, malformed reports).
"""

from __future__ import annotations

import hashlib
import json
import logging
import sys
from pathlib import Path

import click

from .config import ConfigError, ExperimentConfig, config_to_toml, load_config, parse_ablate
from .report import ReportError, render_reports, write_history
from .trainer import (
    TrainingDiverged,
    config_digest,
    evaluate,
    initial_model,
    run_pipeline,
    run_stage1,
    save_checkpoint,
)
from .world import GROUPS, World, generate_world, load_world, save_world, world_summary

log = logging.getLogger("loce")

DATASET_CSV = "dataset.csv"
DATASET_SIDECAR = "dataset.json"


class RuntimeFailure(click.ClickException):
    exit_code = 2


def world_digest(world_spec) -> str:
    return hashlib.sha256(json.dumps(world_spec.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _resolve(config_path, seed, out) -> ExperimentConfig:
    cfg = load_config(config_path) if config_path else ExperimentConfig()
    if seed is not None:
        cfg = cfg.with_seed(seed)
    if out is not None:
        cfg.output_dir = Path(out)
    return cfg


def _prepare_out(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RuntimeFailure(f"cannot create output directory {path}: {exc.strerror}") from exc
    return path


def _obtain_world(cfg: ExperimentConfig) -> World:
    """Load the dataset from the output directory, or generate and save it there."""
    out = cfg.output_dir
    csv_path, sidecar = out / DATASET_CSV, out / DATASET_SIDECAR
    if csv_path.exists() and sidecar.exists():
        stored = json.loads(sidecar.read_text())["spec"]
        if stored != cfg.world.to_dict():
            raise RuntimeFailure(
                f"{sidecar} was generated from a different world spec; use a fresh --out directory"
            )
        return load_world(csv_path, sidecar)
    world = generate_world(cfg.world)
    save_world(world, csv_path, sidecar, {"config_digest": world_digest(cfg.world), "seed": cfg.world.seed})
    return world


def _group_table(rows: list[tuple[str, dict]]) -> str:
    head = f"{'run':<12}" + "".join(f"{g:>10}" for g in GROUPS) + f"{'balanced':>10}{'disp':>8}"
    lines = [head]
    for name, rep in rows:
        acc = {g["group"]: g["accuracy"] for g in rep["per_group"]}
        s = rep["scalars"]
        lines.append(
            f"{name:<12}" + "".join(f"{acc.get(g, float('nan')):>10.3f}" for g in GROUPS)
            + f"{s['balanced_accuracy']:>10.3f}{s['score_dispersion']:>8.3f}"
        )
    return "\n".join(lines)


def _write_stage(directory: Path, stage, report, provenance: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    write_history(stage.history, directory, provenance)
    (directory / "report.json").write_text(report.to_json())
    tag = " ".join(f"{k}={provenance[k]}" for k in sorted(provenance))
    save_checkpoint(stage.model, directory / "model.ckpt", tag)
    if stage.tracker is not None:
        (directory / "tracker.txt").write_text(f"# {tag}\n" + stage.tracker.to_text())


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log per-epoch progress to stderr.")
def cli(verbose: bool) -> None:
    """Long-tailed classification equilibrium experiments on synthetic data."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")


config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Experiment TOML file.")
seed_option = click.option("--seed", type=int, help="Override the world and training seed.")
out_option = click.option("--out", type=click.Path(file_okay=False), help="Output directory.")


@cli.command()
@config_option
@seed_option
@out_option
def generate(config_path, seed, out) -> None:
    """Write the synthetic dataset CSV and its JSON sidecar."""
    cfg = _resolve(config_path, seed, out)
    out_dir = _prepare_out(cfg.output_dir)
    world = generate_world(cfg.world)
    provenance = {"config_digest": world_digest(cfg.world), "seed": cfg.world.seed}
    save_world(world, out_dir / DATASET_CSV, out_dir / DATASET_SIDECAR, provenance)
    summary = world_summary(world)
    click.echo(f"wrote {out_dir / DATASET_CSV} ({summary['train_instances']} train, {summary['val_instances']} val)")
    click.echo(f"{'group':<10}{'classes':>8}{'instances':>11}")
    for g in GROUPS:
        click.echo(f"{g:<10}{summary['classes_per_group'][g]:>8}{summary['instances_per_group'][g]:>11}")


@cli.command()
@config_option
@seed_option
@out_option
@click.option("--ablate", help="Variant grid: 'components', 'all', or a comma list such as 'ce,loce'.")
def train(config_path, seed, out, ablate) -> None:
    """Run stage 1 once, then stage 2 for every configured variant."""
    cfg = _resolve(config_path, seed, out)
    if ablate:
        cfg.ablation = parse_ablate(ablate, cfg.train)
    out_dir = _prepare_out(cfg.output_dir)
    (out_dir / "config.toml").write_text(f"# config_digest={cfg.digest} seed={cfg.train.seed}\n" + config_to_toml(cfg))
    world = _obtain_world(cfg)
    runs = cfg.runs()
    # stage 1 only depends on settings shared by every grid entry
    stage1_cfg = runs[0][1]
    stage1 = run_stage1(world, initial_model(world, stage1_cfg), stage1_cfg)
    prov1 = {"config_digest": config_digest(world.spec, stage1_cfg), "seed": stage1_cfg.seed}
    rep1 = evaluate(world, stage1.model, {**prov1, "world_seed": world.spec.seed, "variant": "stage1"})
    _write_stage(out_dir / "stage1", stage1, rep1, prov1)
    rows = [("stage1", rep1.to_dict())]
    for name, run_cfg in runs:
        if not _shares_stage1(stage1_cfg, run_cfg):
            raise click.UsageError(f"grid entry {name!r} changes stage-1 settings; run it separately")
        result = run_pipeline(world, run_cfg, stage1)
        report = result.report
        report.provenance["variant"] = name
        prov = {"config_digest": report.provenance["config_digest"], "seed": run_cfg.seed}
        _write_stage(out_dir / name, result.stage2, report, prov)
        rows.append((name, report.to_dict()))
    click.echo(_group_table(rows))


STAGE2_ONLY = {
    "stage2_epochs", "stage2_lr", "stage2_decay_at", "ebl_enabled", "mfs_enabled", "indicator", "k", "m",
    "memory_size", "classes_with_replacement", "memory_updates_tracker", "warm_start_tracker",
    "reinit_classifier", "score_init",
}


def _shares_stage1(a, b) -> bool:
    da, db = a.to_dict(), b.to_dict()
    return all(da[k] == db[k] for k in da if k not in STAGE2_ONLY)


@cli.command()
@click.argument("reports", nargs=-1, required=True, type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default="report", show_default=True)
def report(reports, out) -> None:
    """Per-class score/accuracy curves, group tables and run comparisons from report JSONs."""
    for path in render_reports(reports, out):
        click.echo(str(path))


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="loce", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        click.echo("aborted", err=True)
        return 2
    except click.UsageError as exc:
        exc.show()
        return 1
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except (ReportError, TrainingDiverged, OSError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    return 0


def run() -> None:
    sys.exit(main())
