"""
Standalone desk-scale reference run for cropforge.

Usage:
  python reference_run.py [--out reference_results.json] [--work reference_run]

Generates the standard synthetic set (200 train / 20 val / 50 test, seed 7),
trains the desk configuration in three query modes (both, main, none) and
scores each model, plus the untrained model, on the held-out split. The
numbers land in reference_results.json next to the config hash they came from.
"""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path
from typing import Any

import click

from cropforge import configure_logging, log_event
from cropforge.commands import build_encoder
from cropforge.config import RunConfig, load_run_config
from cropforge.decoder import DecoderModel
from cropforge.evalsuite import evaluate
from cropforge.models.core import load_manifest, load_samples
from cropforge.models.seed import generate_synthetic
from cropforge.training import train

DESK_CONFIG = Path(__file__).resolve().parent / "configs" / "desk.json"
SPLITS = {"train": 200, "val": 20, "test": 50}
MODES = ("both", "main", "none")


def run_reference(work_dir: Path, cfg: RunConfig) -> dict[str, Any]:
    encoder = build_encoder(cfg)
    data_dir = work_dir / "data"
    generate_synthetic(data_dir, SPLITS, encoder.vocab.concepts, cfg.seed)
    train_samples = load_samples(load_manifest(data_dir / "train"), training=True)
    probe = load_samples(load_manifest(data_dir / "val"))
    test_manifest = load_manifest(data_dir / "test")
    test_samples = load_samples(test_manifest)

    def score(model: DecoderModel, mode: str) -> dict[str, float]:
        report = evaluate(test_samples, test_manifest.schema, ["iou"], model=model, encoder=encoder, query_mode=mode)
        return report.aggregates

    training: dict[str, dict[str, Any]] = {}
    results: dict[str, Any] = {"untrained": score(DecoderModel(cfg.decoder, seed=cfg.seed), "both")}
    for mode in MODES:
        train_cfg = replace(cfg.train, query_mode=mode)
        result = train(
            train_samples,
            train_cfg,
            DecoderModel(cfg.decoder, seed=cfg.seed),
            encoder,
            probe=probe,
            log_path=work_dir / f"train_{mode}.log.jsonl",
        )
        results[mode] = score(result.model, mode)
        totals = [r["total"] for r in result.history if r["total"] is not None]
        training[mode] = {
            "best_epoch": result.best_epoch,
            "loss_ratio": totals[-1] / totals[0] if totals and totals[0] > 0.0 else None,
        }
        log_event("reference_mode_done", "mode", mode, **results[mode])

    both, main, base = results["both"], results["main"], results["none"]
    checks = {
        "iou_max_at_least_0.60": both["IoU-Max"] >= 0.60,
        "beats_untrained_by_0.10": both["IoU-Max"] - results["untrained"]["IoU-Max"] >= 0.10,
        "beats_base_by_0.10": both["IoU-Max"] - base["IoU-Max"] >= 0.10,
        "ablation_order": base["IoU-Mean"] < main["IoU-Mean"] <= both["IoU-Mean"],
        "base_0.05_below_both": both["IoU-Mean"] - base["IoU-Mean"] >= 0.05,
        "loss_below_quarter_of_epoch_1": (training["both"]["loss_ratio"] or 1.0) < 0.25,
    }
    return {
        "config": cfg.to_json(),
        "config_hash": cfg.config_hash(),
        "splits": SPLITS,
        "results": results,
        "training": training,
        "checks": checks,
    }


@click.command(help=__doc__)
@click.option("--out", "out_path", type=click.Path(dir_okay=False, path_type=Path), default=Path("reference_results.json"), show_default=True)
@click.option("--work", "work_dir", type=click.Path(file_okay=False, path_type=Path), default=Path("reference_run"), show_default=True)
def main(out_path: Path, work_dir: Path) -> None:
    configure_logging("INFO")
    cfg = load_run_config(DESK_CONFIG)
    click.echo(f"Reference run, config {cfg.config_hash()[:12]}, work dir {work_dir}")
    outcome = run_reference(work_dir, cfg)
    out_path.write_text(json.dumps(outcome, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    for name, aggregates in outcome["results"].items():
        click.echo(f"  {name:<9} IoU-Mean {aggregates['IoU-Mean']:.4f}  IoU-Max {aggregates['IoU-Max']:.4f}")
    for name, ok in outcome["checks"].items():
        click.echo(f"  {'ok  ' if ok else 'MISS'} {name}")
    click.echo(f"Results written to {out_path}")


if __name__ == "__main__":
    main()
