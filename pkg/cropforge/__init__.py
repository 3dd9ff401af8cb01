from __future__ import annotations

import json
import logging
import os
from typing import Any, Optional

from dotenv import load_dotenv

# .env is optional; real environment variables win over it.
load_dotenv(override=False)

logger = logging.getLogger("cropforge")

DEFAULT_SEED = 7


class _EventFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        event = getattr(record, "event", None)
        if event is None:
            return super().format(record)
        payload = {"level": record.levelname.lower(), **event}
        return json.dumps(payload, sort_keys=True, default=str)


def configure_logging(level: Optional[str] = None) -> None:
    """Attach a single stderr handler to the package logger.

    Safe to call repeatedly; the CLI calls it once per invocation.
    """
    level_name = (level or os.environ.get("CROPFORGE_LOG_LEVEL") or "WARNING").upper()
    logger.setLevel(getattr(logging, level_name, logging.WARNING))
    if not any(getattr(h, "_cropforge", False) for h in logger.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(_EventFormatter("%(levelname)s %(name)s: %(message)s"))
        handler._cropforge = True  # type: ignore[attr-defined]
        logger.addHandler(handler)
    logger.propagate = False


def log_event(
    action: str,
    target_type: Optional[str] = None,
    target_id: Any = None,
    message: Optional[str] = None,
    level: int = logging.INFO,
    **fields: Any,
) -> None:
    # Same shape as an audit row: who/what/which/why, plus free-form fields.
    event = {"action": action}
    if target_type is not None:
        event["target_type"] = target_type
    if target_id is not None:
        event["target_id"] = target_id
    if message is not None:
        event["message"] = message
    event.update(fields)
    logger.log(level, action, extra={"event": event})


def default_seed() -> int:
    raw = os.environ.get("CROPFORGE_SEED")
    if raw is None or not raw.strip():
        return DEFAULT_SEED
    try:
        return int(raw)
    except ValueError:
        logger.warning("CROPFORGE_SEED=%r is not an integer; using %d", raw, DEFAULT_SEED)
        return DEFAULT_SEED
