from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import click

from .. import log_event
from ..decoder import load_model, predict
from ..encoder import pixel_rect, read_image, write_ppm
from ..errors import ConfigError, ValidationError
from ..models.core import SceneSpec, write_json
from ..querying import QueryMode, build_queries
from . import encoder_from_checkpoint, handle_errors


def load_scene(path: Path) -> SceneSpec:
    if not path.is_file():
        raise ValidationError("meta", f"{path} does not exist")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError("meta", f"{path} is not valid JSON ({exc.msg})") from None
    # sample files wrap or point at the scene; plain scene files are the object itself
    if isinstance(doc, dict) and "scene_spec" in doc:
        doc = doc["scene_spec"]
    elif isinstance(doc, dict) and isinstance(doc.get("scene"), str):
        return load_scene(path.parent / doc["scene"])
    return SceneSpec.from_json(doc)


@click.command("crop")
@click.option("--image", "image_path", required=True, type=click.Path(dir_okay=False, path_type=Path), help="Input PPM image.")
@click.option("--meta", "meta_path", required=True, type=click.Path(dir_okay=False, path_type=Path), help="Scene metadata JSON for the image.")
@click.option("--text", default=None, help="Text query.")
@click.option("--query-image", "query_image_path", type=click.Path(dir_okay=False, path_type=Path), default=None, help="Image query (PPM).")
@click.option("--query-meta", "query_meta_path", type=click.Path(dir_okay=False, path_type=Path), default=None, help="Scene metadata for the image query.")
@click.option("--query-mode", type=click.Choice(["both", "main", "key", "none"]), default=None, help="Text query mode (default: the checkpoint's).")
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path(dir_okay=False, path_type=Path), help="Trained checkpoint.")
@click.option("--top-k", default=1, show_default=True, type=click.IntRange(min=1), help="Number of crops to write.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path), help="Output directory.")
@handle_errors
def crop(
    image_path: Path,
    meta_path: Path,
    text: Optional[str],
    query_image_path: Optional[Path],
    query_meta_path: Optional[Path],
    query_mode: Optional[str],
    ckpt_path: Path,
    top_k: int,
    out_dir: Path,
) -> None:
    """Crop an image under a text or image query."""
    if (text is None) == (query_image_path is None):
        raise ConfigError(["pass exactly one of --text or --query-image"])
    if query_image_path is not None and query_meta_path is None:
        raise ConfigError(["--query-image needs --query-meta"])

    model, ckpt = load_model(ckpt_path)
    encoder = encoder_from_checkpoint(ckpt, ckpt_path)
    image = read_image(image_path, load_scene(meta_path))
    enc = encoder.encode_image(image)

    if query_image_path is not None:
        mode = QueryMode.IMAGE
        query = read_image(query_image_path, load_scene(query_meta_path))
        queries = build_queries(mode, encoder, query_image=query)
    else:
        run = ckpt.metadata.get("config", {})
        mode = QueryMode.parse(query_mode or run.get("train", {}).get("query_mode", "both"))
        queries = build_queries(mode, encoder, text=text)

    ranked = predict(model, enc, queries, top_k)
    width, height = image.size
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for k, (box, score) in enumerate(ranked, start=1):
        x1, y1, x2, y2 = pixel_rect(box, width, height, min_size=1)
        name = f"crop_{k}.ppm"
        write_ppm(out_dir / name, image.pixels[y1:y2, x1:x2])
        records.append({"rank": k, "file": name, "box": box.to_json(), "score": score, "pixels": [x1, y1, x2, y2]})

    write_json(
        out_dir / "crops.json",
        {
            "crops": records,
            "config": {
                "checkpoint": str(ckpt_path),
                "config_hash": ckpt.metadata.get("config_hash"),
                "image": str(image_path),
                "query_mode": mode.value,
                "query": text if text is not None else str(query_image_path),
                "query_sources": list(queries.source_strings),
                "top_k": top_k,
            },
        },
    )
    log_event("crops_written", "image", str(image_path), count=len(records), mode=mode.value)
    for rec in records:
        click.echo(f"{rec['file']}  score {rec['score']:.4f}  pixels {tuple(rec['pixels'])}")
