from __future__ import annotations

import dataclasses
import functools
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Optional, Union

import click

from .. import logger
from ..autograd import Checkpoint
from ..config import RunConfig
from ..encoder import ConceptVocabulary, EncoderParams, SyntheticEncoder
from ..errors import EXIT_INTERNAL, CheckpointError, CropForgeError


def handle_errors(fn: Callable[..., Any]) -> Callable[..., Any]:
    """Turn package errors into a stderr message and the matching exit code."""

    @functools.wraps(fn)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return fn(*args, **kwargs)
        except CropForgeError as exc:
            click.echo(f"error: {exc.message}", err=True)
            sys.exit(exc.exit_code)
        except (click.exceptions.Exit, click.ClickException, SystemExit):
            raise
        except Exception as exc:
            logger.log(logging.ERROR, "unexpected failure", exc_info=True)
            click.echo(f"internal error: {exc}", err=True)
            sys.exit(EXIT_INTERNAL)

    return wrapper


def build_encoder(cfg: RunConfig) -> SyntheticEncoder:
    vocab = ConceptVocabulary.from_file(cfg.data.vocab_path, dim=cfg.encoder.dim, seed=cfg.encoder.seed)
    return SyntheticEncoder(vocab, cfg.encoder)


def encoder_metadata(encoder: SyntheticEncoder) -> dict[str, Any]:
    return {"vocab": encoder.vocab.to_json(), "encoder": dataclasses.asdict(encoder.params)}


def encoder_from_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> SyntheticEncoder:
    meta = ckpt.metadata
    if not isinstance(meta.get("vocab"), dict) or not isinstance(meta.get("encoder"), dict):
        raise CheckpointError(f"{path}: metadata carries no encoder description")
    try:
        params = EncoderParams(**meta["encoder"])
        vocab = ConceptVocabulary.from_json(meta["vocab"])
    except (TypeError, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad encoder description ({exc})") from None
    return SyntheticEncoder(vocab, params)


def register_commands(cli: click.Group) -> None:
    from .data import gen_data
    from .evaluate import eval_command
    from .crop import crop
    from .gradcheck import gradcheck
    from .train import train_command

    cli.add_command(gen_data)
    cli.add_command(train_command)
    cli.add_command(eval_command)
    cli.add_command(crop)
    cli.add_command(gradcheck)


def parse_csv_option(value: Optional[str]) -> list[str]:
    return [v.strip() for v in (value or "").split(",") if v.strip()]
