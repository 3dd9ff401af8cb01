from __future__ import annotations

from typing import Iterable, Optional, Sequence


# Exit codes follow the CLI contract: 2 for problems with what the user handed
# us (flags, files, configs), 1 for everything that went wrong inside.
EXIT_USER = 2
EXIT_INTERNAL = 1


class CropForgeError(Exception):
    exit_code: int = EXIT_INTERNAL

    def __init__(self, message: str) -> None:
        super().__init__(message)
        self.message = message


class ShapeError(CropForgeError):
    def __init__(self, op: str, *shapes: Sequence[int], detail: str = "") -> None:
        shown = " vs ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)


class NonFiniteError(CropForgeError):
    def __init__(self, op: str, detail: str = "") -> None:
        msg = f"{op}: non-finite value produced"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op


class GraphError(CropForgeError):
    pass


class CheckpointError(CropForgeError):
    exit_code = EXIT_USER


class BoxError(CropForgeError):
    exit_code = EXIT_USER


class EncoderError(CropForgeError):
    exit_code = EXIT_USER


class QueryError(CropForgeError):
    exit_code = EXIT_USER


class MatchingError(CropForgeError):
    pass


class DatasetError(CropForgeError):
    exit_code = EXIT_USER


class ValidationError(DatasetError):
    def __init__(self, field: str, problem: str, sample_id: Optional[str] = None) -> None:
        where = f"sample {sample_id!r}: " if sample_id is not None else ""
        super().__init__(f"{where}{field}: {problem}")
        self.field = field
        self.sample_id = sample_id


class ConfigError(CropForgeError):
    exit_code = EXIT_USER

    def __init__(self, problems: Iterable[str]) -> None:
        self.problems = list(problems)
        lines = "\n".join(f"  - {p}" for p in self.problems)
        super().__init__(f"invalid configuration ({len(self.problems)} problem(s)):\n{lines}")


class MetricSchemaError(CropForgeError):
    exit_code = EXIT_USER

    def __init__(self, metric: str, schema: str) -> None:
        super().__init__(f"metric {metric!r} cannot be computed on schema {schema!r}")
        self.metric = metric
        self.schema = schema


class TrainingError(CropForgeError):
    pass


class EvaluationError(CropForgeError):
    exit_code = EXIT_USER
