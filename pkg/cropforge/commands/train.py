from __future__ import annotations

import time
from pathlib import Path
from typing import Optional

import click

from .. import log_event
from ..config import load_run_config
from ..decoder import DecoderModel, load_model, save_model
from ..errors import CheckpointError, DatasetError
from ..models.core import load_manifest, load_samples
from ..training import train
from . import build_encoder, encoder_from_checkpoint, encoder_metadata, handle_errors


def train_log_path(ckpt: Path) -> Path:
    return ckpt.with_name(ckpt.name + ".log.jsonl")


@click.command("train")
@click.option("--data", "data_dir", required=True, envvar="CROPFORGE_DATA_DIR", type=click.Path(exists=True, file_okay=False, path_type=Path), help="Dataset root (with train/ and optionally val/); default: CROPFORGE_DATA_DIR.")
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), default=None, help="Run config JSON.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False, path_type=Path), help="Checkpoint to write.")
@click.option("--query-mode", type=click.Choice(["both", "main", "key", "none"]), default=None, help="Override train.query_mode.")
@click.option("--no-mosaic", is_flag=True, help="Train on single scenes only.")
@click.option("--epochs", type=click.IntRange(min=0), default=None, help="Override train.epochs.")
@click.option("--seed", type=int, default=None, help="Override train.seed.")
@click.option("--resume", "resume_path", type=click.Path(dir_okay=False, path_type=Path), default=None, help="Continue from this checkpoint.")
@handle_errors
def train_command(
    data_dir: Path,
    config_path: Optional[Path],
    out_path: Path,
    query_mode: Optional[str],
    no_mosaic: bool,
    epochs: Optional[int],
    seed: Optional[int],
    resume_path: Optional[Path],
) -> None:
    """Train the crop decoder on a generated dataset."""
    cfg = load_run_config(
        config_path,
        {
            "train.query_mode": query_mode,
            "train.mosaic_enabled": False if no_mosaic else None,
            "train.epochs": epochs,
            "train.seed": seed,
            "data.root": str(data_dir),
        },
    )
    encoder = build_encoder(cfg)

    train_dir = data_dir / "train"
    if not (train_dir / "manifest.json").is_file():
        raise DatasetError(f"no training split under {data_dir}")
    manifest = load_manifest(train_dir)
    samples = load_samples(manifest, training=True, hq_threshold=cfg.train.hq_score_threshold)
    probe = []
    if (data_dir / "val" / "manifest.json").is_file():
        probe = load_samples(load_manifest(data_dir / "val"))

    start_epoch = 0
    optimizer = None
    if resume_path is not None:
        model, ckpt = load_model(resume_path, expected=cfg.decoder)
        if encoder_from_checkpoint(ckpt, resume_path).params != encoder.params:
            raise CheckpointError(f"{resume_path}: encoder settings differ from the run config")
        start_epoch = int(ckpt.metadata.get("epoch", 0))
        optimizer = ckpt.optimizer
        log_event("training_resumed", "checkpoint", str(resume_path), epoch=start_epoch)
    else:
        model = DecoderModel(cfg.decoder, seed=cfg.seed)

    log_event(
        "training_started",
        "run",
        cfg.config_hash()[:12],
        samples=len(samples),
        probe=len(probe),
        parameters=model.num_parameters(),
        config=cfg.to_json(),
    )
    started = time.perf_counter()
    result = train(
        samples,
        cfg.train,
        model,
        encoder,
        probe=probe,
        optimizer=optimizer,
        start_epoch=start_epoch,
        log_path=train_log_path(out_path),
    )
    metadata = {
        **encoder_metadata(encoder),
        "config": cfg.to_json(),
        "config_hash": cfg.config_hash(),
        "best_epoch": result.best_epoch,
        "epoch": result.epoch,
        "seed": cfg.seed,
        "train_split": manifest.generator,
    }
    save_model(out_path, result.model, metadata, result.optimizer)
    log_event("checkpoint_saved", "checkpoint", str(out_path), epoch=result.epoch, seconds=round(time.perf_counter() - started, 3))

    if result.history:
        last = result.history[-1]
        probe_text = f", probe IoU-Max {last['probe_iou_max']:.4f}" if last.get("probe_iou_max") is not None else ""
        total = f"{last['total']:.4f}" if last.get("total") is not None else "n/a"
        click.echo(f"Epoch {last['epoch']}: loss {total}{probe_text}")
    if result.best_epoch is not None:
        click.echo(f"Kept parameters from epoch {result.best_epoch} (best validation IoU-Max).")
    click.echo(f"Checkpoint written to {out_path} ({model.num_parameters()} parameters, epoch {result.epoch}).")
