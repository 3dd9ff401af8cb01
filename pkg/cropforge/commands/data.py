from __future__ import annotations

from dataclasses import replace
from pathlib import Path
from typing import Optional

import click

from .. import default_seed
from ..encoder import ConceptVocabulary
from ..models.core import SchemaKind
from ..models.seed import GeneratorParams, GridParams, generate_synthetic
from ..querying import VOCAB_PATH
from . import handle_errors


@click.command("gen-data")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path), help="Output directory.")
@click.option("--train", "n_train", default=200, show_default=True, type=click.IntRange(min=0), help="Training samples.")
@click.option("--val", "n_val", default=20, show_default=True, type=click.IntRange(min=0), help="Validation samples.")
@click.option("--test", "n_test", default=50, show_default=True, type=click.IntRange(min=0), help="Test samples.")
@click.option("--vocab", type=click.Path(dir_okay=False, path_type=Path), default=None, help="Concept vocabulary file (default: packaged list).")
@click.option("--seed", type=int, default=None, envvar="CROPFORGE_SEED", help="Generator seed (default: CROPFORGE_SEED or 7).")
@click.option(
    "--schema",
    type=click.Choice(["dense", "annotators", "both"]),
    default="both",
    show_default=True,
    help="Ground-truth schema to write.",
)
@click.option("--annotators", default=8, show_default=True, type=click.IntRange(min=1), help="Annotator boxes per text.")
@click.option("--texts", "texts_per_sample", default=1, show_default=True, type=click.IntRange(min=1), help="Texts per sample.")
@click.option("--grid-style", type=click.Choice(["scaled", "gaic"]), default="scaled", show_default=True, help="Dense proposal grid.")
@click.option("--no-images", is_flag=True, help="Skip writing PPM renderings.")
@handle_errors
def gen_data(
    out_dir: Path,
    n_train: int,
    n_val: int,
    n_test: int,
    vocab: Optional[Path],
    seed: Optional[int],
    schema: str,
    annotators: int,
    texts_per_sample: int,
    grid_style: str,
    no_images: bool,
) -> None:
    """Generate a synthetic conditioned-cropping dataset."""
    seed = default_seed() if seed is None else seed
    concepts = ConceptVocabulary.from_file(vocab or VOCAB_PATH).concepts
    params = GeneratorParams(
        annotators=annotators,
        texts_per_sample=texts_per_sample,
        schema=SchemaKind.parse(schema),
        grid=replace(GridParams(), style=grid_style),
        write_images=not no_images,
    )
    if n_train == 0:
        click.echo("warning: --train 0 writes an empty training split", err=True)
    manifests = generate_synthetic(out_dir, {"train": n_train, "val": n_val, "test": n_test}, concepts, seed, params)
    for split, manifest in manifests.items():
        click.echo(f"{split:<5} {len(manifest.samples):>6} samples  ({manifest.schema.value})")
    click.echo(f"Dataset written to {out_dir} (seed {seed}).")
