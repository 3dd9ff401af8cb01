from __future__ import annotations

import sys
from typing import Optional

import click

from .. import default_seed, log_event
from ..errors import EXIT_INTERNAL
from ..gradcheck import TOLERANCE, run_gradcheck
from . import handle_errors


@click.command("gradcheck")
@click.option("--seed", type=int, default=None, envvar="CROPFORGE_SEED", help="Base seed (default: CROPFORGE_SEED or 7).")
@click.option("--trials", default=20, show_default=True, type=click.IntRange(min=1), help="Random draws per op.")
@click.option("--composition-trials", default=None, type=click.IntRange(min=1), help="Draws for the decoder+loss composition.")
@handle_errors
def gradcheck(seed: Optional[int], trials: int, composition_trials: Optional[int]) -> None:
    """Compare analytic gradients with central finite differences."""
    seed = default_seed() if seed is None else seed
    report = run_gradcheck(seed=seed, trials=trials, tolerance=TOLERANCE, composition_trials=composition_trials)
    for line in report.lines():
        click.echo(line)
    failed = [r.op for r in report.results if not r.passed]
    log_event("gradcheck_finished", "suite", seed, passed=report.passed, failed=failed)
    if failed:
        click.echo(f"{len(failed)} op(s) failed: {', '.join(failed)}", err=True)
        sys.exit(EXIT_INTERNAL)
    click.echo(f"All {len(report.results)} checks passed (tolerance {TOLERANCE:g}).")
