from __future__ import annotations

from pathlib import Path
from typing import Optional

import click

from .. import default_seed, log_event
from ..decoder import load_model
from ..errors import ConfigError, DatasetError
from ..evalsuite import (
    METRICS,
    evaluate,
    format_table,
    load_predictions,
    oracle_predictions,
    random_predictions,
    write_csv,
    write_report,
)
from ..models.core import DatasetManifest, load_manifest, load_samples
from . import encoder_from_checkpoint, handle_errors, parse_csv_option


def resolve_split(data_dir: Path, split: str) -> DatasetManifest:
    if (data_dir / "manifest.json").is_file():
        return load_manifest(data_dir)
    if (data_dir / split / "manifest.json").is_file():
        return load_manifest(data_dir / split)
    raise DatasetError(f"no manifest.json in {data_dir} or {data_dir / split}")


@click.command("eval")
@click.option("--data", "data_dir", required=True, envvar="CROPFORGE_DATA_DIR", type=click.Path(exists=True, file_okay=False, path_type=Path), help="Split directory or dataset root; default: CROPFORGE_DATA_DIR.")
@click.option("--split", default="test", show_default=True, help="Split used when --data is a dataset root.")
@click.option("--ckpt", "ckpt_path", type=click.Path(dir_okay=False, path_type=Path), default=None, help="Trained checkpoint.")
@click.option("--predictions", "predictions_path", type=click.Path(dir_okay=False, path_type=Path), default=None, help="Evaluate an external prediction file instead.")
@click.option("--baseline", type=click.Choice(["oracle", "random"]), default=None, help="Evaluate a built-in baseline instead.")
@click.option("--metrics", default=None, help="Comma-separated metrics (iou, acc); default: every metric the schema supports.")
@click.option("--report", "report_path", required=True, type=click.Path(dir_okay=False, path_type=Path), help="Report JSON to write.")
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False, path_type=Path), default=None, help="Also write aggregates as CSV.")
@click.option("--query-mode", type=click.Choice(["both", "main", "key", "none"]), default=None, help="Override the checkpoint's query mode.")
@click.option("--seed", type=int, default=None, envvar="CROPFORGE_SEED", help="Seed for the random baseline.")
@handle_errors
def eval_command(
    data_dir: Path,
    split: str,
    ckpt_path: Optional[Path],
    predictions_path: Optional[Path],
    baseline: Optional[str],
    metrics: Optional[str],
    report_path: Path,
    csv_path: Optional[Path],
    query_mode: Optional[str],
    seed: Optional[int],
) -> None:
    """Score predictions against a split and write a report."""
    sources = [s for s in (ckpt_path, predictions_path, baseline) if s is not None]
    if len(sources) != 1:
        raise ConfigError(["pass exactly one of --ckpt, --predictions or --baseline"])

    manifest = resolve_split(data_dir, split)
    samples = load_samples(manifest)
    requested = parse_csv_option(metrics)
    if not requested:
        requested = [m for m in METRICS if (m == "iou" and manifest.schema.has_annotators) or (m == "acc" and manifest.schema.has_dense)]

    config: dict = {"data": str(data_dir), "split": manifest.split, "metrics": requested}
    predictions = None
    model = encoder = None
    mode = query_mode or "both"
    if ckpt_path is not None:
        model, ckpt = load_model(ckpt_path)
        encoder = encoder_from_checkpoint(ckpt, ckpt_path)
        run = ckpt.metadata.get("config", {})
        mode = query_mode or run.get("train", {}).get("query_mode", "both")
        config.update(
            {"checkpoint": str(ckpt_path), "config_hash": ckpt.metadata.get("config_hash"), "epoch": ckpt.metadata.get("epoch")}
        )
        config["query_mode"] = mode
    elif predictions_path is not None:
        predictions = load_predictions(predictions_path)
        config["predictions"] = str(predictions_path)
    else:
        if baseline == "oracle":
            preds = oracle_predictions(samples)
        else:
            seed = default_seed() if seed is None else seed
            preds = random_predictions(samples, seed)
            config["seed"] = seed
        predictions = {(p.id, p.text_index): p for p in preds}
        config["baseline"] = baseline

    report = evaluate(
        samples,
        manifest.schema,
        requested,
        predictions=predictions,
        model=model,
        encoder=encoder,
        query_mode=mode,
        config=config,
    )
    write_report(report_path, report)
    if csv_path is not None:
        write_csv(csv_path, report)
    log_event("report_written", "report", str(report_path), units=report.units, **report.aggregates)
    click.echo(format_table(report))
    click.echo(f"Report written to {report_path}.")
