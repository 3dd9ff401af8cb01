from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Union

from . import default_seed
from .decoder import DecoderConfig
from .encoder import EncoderParams
from .errors import ConfigError
from .querying import VOCAB_PATH
from .training import TrainConfig

SECTIONS = ("train", "decoder", "encoder", "data")


@dataclass(frozen=True)
class DataPaths:
    root: Optional[str] = None
    vocab: Optional[str] = None

    @property
    def vocab_path(self) -> Path:
        return Path(self.vocab) if self.vocab else VOCAB_PATH


@dataclass(frozen=True)
class RunConfig:
    """Everything a training or evaluation run depends on, in one record.

    The JSON file has one object per section (``train``, ``decoder``,
    ``encoder``, ``data``); missing keys take the dataclass defaults.
    """

    train: TrainConfig = field(default_factory=TrainConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    encoder: EncoderParams = field(default_factory=EncoderParams)
    data: DataPaths = field(default_factory=DataPaths)

    @property
    def query_mode(self) -> str:
        return self.train.query_mode

    @property
    def seed(self) -> int:
        return self.train.seed

    def problems(self) -> list[str]:
        out = self.train.problems() + self.decoder.problems() + self.encoder.problems()
        if self.decoder.model_dim != self.encoder.dim:
            out.append(f"decoder.model_dim {self.decoder.model_dim} must equal encoder.dim {self.encoder.dim}")
        return out

    def validate(self) -> "RunConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def to_json(self) -> dict[str, Any]:
        return {
            "train": self.train.to_json(),
            "decoder": self.decoder.to_json(),
            "encoder": dataclasses.asdict(self.encoder),
            "data": dataclasses.asdict(self.data),
        }

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "RunConfig":
        problems: list[str] = []
        cfg = _build(cls, doc, problems)
        if cfg is None or problems:
            raise ConfigError(problems or ["configuration could not be built"])
        return cfg.validate()


_SECTION_TYPES = {"train": TrainConfig, "decoder": DecoderConfig, "encoder": EncoderParams, "data": DataPaths}


def _coerce(section: str, name: str, value: Any, default: Any, problems: list[str]) -> Any:
    # JSON has no int/float split and no optional paths; bools must stay bools.
    if isinstance(default, bool):
        if not isinstance(value, bool):
            problems.append(f"{section}.{name} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            problems.append(f"{section}.{name} must be an integer, got {value!r}")
            return default
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{section}.{name} must be a number, got {value!r}")
            return default
        return float(value)
    if default is None or isinstance(default, str):
        if value is not None and not isinstance(value, str):
            problems.append(f"{section}.{name} must be a string, got {value!r}")
            return default
    return value


def _section(section: str, raw: Any, problems: list[str]) -> Any:
    kind = _SECTION_TYPES[section]
    if raw is None:
        return kind()
    if not isinstance(raw, Mapping):
        problems.append(f"{section} must be a JSON object")
        return kind()
    defaults = kind()
    names = {f.name for f in dataclasses.fields(kind)}
    values = {}
    for key in sorted(raw):
        if key not in names:
            problems.append(f"{section}: unknown key {key!r}")
            continue
        values[key] = _coerce(section, key, raw[key], getattr(defaults, key), problems)
    return kind(**values)


def _build(cls: type, doc: Mapping[str, Any], problems: list[str]) -> Optional[RunConfig]:
    if not isinstance(doc, Mapping):
        problems.append("configuration must be a JSON object")
        return None
    for key in sorted(doc):
        if key not in SECTIONS:
            problems.append(f"unknown section {key!r} (expected one of {', '.join(SECTIONS)})")
    sections = {name: _section(name, doc.get(name), problems) for name in SECTIONS}
    cfg = cls(**sections)
    problems.extend(cfg.problems())
    return cfg


def apply_overrides(doc: Mapping[str, Any], overrides: Mapping[str, Any]) -> dict[str, Any]:
    """Return a copy of ``doc`` with dotted ``section.key`` overrides applied.

    ``None`` values are skipped so unset CLI flags leave the file alone.
    """
    merged = {k: dict(v) if isinstance(v, Mapping) else v for k, v in doc.items()}
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        target = merged.setdefault(section, {})
        if isinstance(target, dict):
            target[key] = value
    return merged


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    doc: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError([f"config file not found: {path}"])
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})"]) from None
        if not isinstance(doc, dict):
            raise ConfigError([f"{path}: configuration must be a JSON object"])
    doc.setdefault("train", {})
    if isinstance(doc["train"], dict):
        doc["train"].setdefault("seed", default_seed())
    return RunConfig.from_json(apply_overrides(doc, overrides or {}))
