"""Conditioned-cropping metrics and report files.

Each (sample, text) pair is one evaluation unit. IoU metrics compare the
top-1 crop with every annotator box; ACC maps returned crops onto the dense
proposal set (highest IoU, lowest index on ties) and checks membership among
the N best-scored proposals.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .boxgeom import Box, boxes_to_array, iou, iou_matrix
from .decoder import DecoderModel, predict
from .encoder import SyntheticEncoder
from .errors import ConfigError, EvaluationError, MetricSchemaError, QueryError
from .models.core import AnnotatedSample, Proposal, SchemaKind, write_json
from .querying import build_queries

METRICS = ("iou", "acc")
AGGREGATE_KEYS = {"iou": ("IoU-Mean", "IoU-Max"), "acc": ("ACC_1/5", "ACC_1/10")}


def iou_mean_max(pred: Box, annotator_boxes: Sequence[Box]) -> tuple[float, float]:
    if not annotator_boxes:
        raise EvaluationError("IoU metrics need at least one annotator box")
    values = [iou(pred, b) for b in annotator_boxes]
    return math.fsum(values) / len(values), max(values)


def acc_k_n(pred_topk: Sequence[Box], dense_gt: Sequence[Proposal], k: int, n: int) -> int:
    if len(dense_gt) < n:
        raise EvaluationError(f"ACC_{k}/{n} needs at least {n} proposals, got {len(dense_gt)}")
    if len(pred_topk) != k:
        raise EvaluationError(f"ACC_{k}/{n} needs exactly {k} predicted boxes, got {len(pred_topk)}")
    scores = [p.score for p in dense_gt]
    best_n = set(sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:n])
    ious = iou_matrix(boxes_to_array(pred_topk), boxes_to_array([p.box for p in dense_gt]))
    mapped = np.argmax(ious, axis=1)
    # a box disjoint from every proposal maps nowhere
    return int(any(ious[r, j] > 0.0 and int(j) in best_n for r, j in enumerate(mapped)))



@dataclass
class Prediction:
    id: str
    text_index: int
    boxes: list[Box]
    scores: list[float]

    def ranked(self) -> list[Box]:
        order = sorted(range(len(self.boxes)), key=lambda i: (-self.scores[i], i))
        return [self.boxes[i] for i in order]

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "text_index": self.text_index,
            "boxes": [b.to_json() for b in self.boxes],
            "scores": list(self.scores),
        }


def load_predictions(path: Union[str, Path]) -> dict[tuple[str, int], Prediction]:
    path = Path(path)
    if not path.is_file():
        raise EvaluationError(f"prediction file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise EvaluationError(f"{path}: not valid JSON ({exc.msg})") from None
    if not isinstance(doc, list):
        raise EvaluationError(f"{path}: expected a list of prediction records")
    out: dict[tuple[str, int], Prediction] = {}
    for i, raw in enumerate(doc):
        try:
            boxes = [Box.from_json(b) for b in raw["boxes"]]
            scores = [float(s) for s in raw.get("scores", [1.0] * len(boxes))]
            key = (str(raw["id"]), int(raw.get("text_index", 0)))
        except Exception as exc:  # KeyError, BoxError, TypeError from malformed records
            raise EvaluationError(f"{path}: record {i} is malformed ({exc})") from None
        if not boxes or len(scores) != len(boxes):
            raise EvaluationError(f"{path}: record {i} needs one score per box and at least one box")
        out[key] = Prediction(key[0], key[1], boxes, scores)
    return out


def save_predictions(path: Union[str, Path], predictions: Iterable[Prediction]) -> Path:
    path = Path(path)
    records = sorted(predictions, key=lambda p: (p.id, p.text_index))
    write_json(path, [p.to_json() for p in records])
    return path


def oracle_predictions(samples: Sequence[AnnotatedSample]) -> list[Prediction]:
    out = []
    for sample in samples:
        for t, ann in enumerate(sample.annotations):
            if ann.oracle_box is None:
                raise EvaluationError(f"sample {sample.id!r} text {t} carries no oracle box")
            out.append(Prediction(sample.id, t, [ann.oracle_box], [1.0]))
    return out


def random_predictions(samples: Sequence[AnnotatedSample], seed: int, count: int = 1) -> list[Prediction]:
    rng = np.random.default_rng(seed)
    out = []
    for sample in samples:
        for t, _ann in enumerate(sample.annotations):
            boxes = []
            for _ in range(count):
                xs = np.sort(rng.uniform(0.0, 1.0, size=2))
                ys = np.sort(rng.uniform(0.0, 1.0, size=2))
                boxes.append(Box.from_corners(float(xs[0]), float(ys[0]), float(xs[1]), float(ys[1])))
            out.append(Prediction(sample.id, t, boxes, [1.0] * count))
    return out


def model_predictions(
    model: DecoderModel,
    encoder: SyntheticEncoder,
    samples: Sequence[AnnotatedSample],
    query_mode: str,
    top_k: int = 1,
) -> list[Prediction]:
    out = []
    for sample in samples:
        enc = encoder.encode_image(sample.scene)
        for t, ann in enumerate(sample.annotations):
            queries = build_queries(query_mode, encoder, text=ann.text)
            ranked = predict(model, enc, queries, top_k)
            out.append(Prediction(sample.id, t, [b for b, _ in ranked], [s for _, s in ranked]))
    return out


@dataclass
class EvalReport:
    records: list[dict[str, Any]]
    aggregates: dict[str, float]
    metrics: list[str]
    schema: str
    config: dict[str, Any] = field(default_factory=dict)

    @property
    def units(self) -> int:
        return len(self.records)

    def to_json(self) -> dict[str, Any]:
        return {
            "aggregates": self.aggregates,
            "config": self.config,
            "metrics": self.metrics,
            "records": self.records,
            "schema": self.schema,
            "units": self.units,
        }


def _check_metrics(metrics: Sequence[str], schema: SchemaKind) -> list[str]:
    metrics = [m.strip().lower() for m in metrics if m.strip()]
    unknown = [m for m in metrics if m not in METRICS]
    if unknown or not metrics:
        raise ConfigError([f"unknown metric {m!r} (expected iou or acc)" for m in unknown] or ["no metric requested"])
    for metric in metrics:
        if metric == "iou" and not schema.has_annotators:
            raise MetricSchemaError(metric, schema.value)
        if metric == "acc" and not schema.has_dense:
            raise MetricSchemaError(metric, schema.value)
    return list(dict.fromkeys(metrics))


def evaluate(
    samples: Sequence[AnnotatedSample],
    schema: Union[str, SchemaKind],
    metrics: Sequence[str],
    predictions: Optional[Mapping[tuple[str, int], Prediction]] = None,
    model: Optional[DecoderModel] = None,
    encoder: Optional[SyntheticEncoder] = None,
    query_mode: str = "both",
    config: Optional[Mapping[str, Any]] = None,
) -> EvalReport:
    schema = SchemaKind.parse(schema)
    metrics = _check_metrics(metrics, schema)
    if predictions is None:
        if model is None or encoder is None:
            raise EvaluationError("evaluation needs either a prediction file or a model with its encoder")
        try:
            predictions = {(p.id, p.text_index): p for p in model_predictions(model, encoder, samples, query_mode)}
        except QueryError as exc:
            raise EvaluationError(f"cannot build queries in mode {query_mode!r}: {exc.message}") from None

    records = []
    for sample in samples:
        for t, ann in enumerate(sample.annotations):
            pred = predictions.get((sample.id, t))
            if pred is None:
                raise EvaluationError(f"no prediction for sample {sample.id!r} text {t}")
            ranked = pred.ranked()
            record: dict[str, Any] = {
                "id": sample.id,
                "text_index": t,
                "text": ann.text,
                "boxes": [b.to_json() for b in pred.boxes],
                "scores": list(pred.scores),
            }
            if "iou" in metrics:
                record["iou_mean"], record["iou_max"] = iou_mean_max(ranked[0], ann.annotator_boxes)
            if "acc" in metrics:
                record["acc_1_5"] = acc_k_n(ranked[:1], ann.proposals, 1, 5)
                record["acc_1_10"] = acc_k_n(ranked[:1], ann.proposals, 1, 10)
            records.append(record)
    records.sort(key=lambda r: (r["id"], r["text_index"]))

    aggregates: dict[str, float] = {}
    fields = {"IoU-Mean": "iou_mean", "IoU-Max": "iou_max", "ACC_1/5": "acc_1_5", "ACC_1/10": "acc_1_10"}
    for metric in metrics:
        for key in AGGREGATE_KEYS[metric]:
            values = [float(r[fields[key]]) for r in records]
            aggregates[key] = math.fsum(values) / len(values) if values else 0.0
    return EvalReport(records=records, aggregates=aggregates, metrics=metrics, schema=schema.value, config=dict(config or {}))


def write_report(path: Union[str, Path], report: EvalReport) -> Path:
    path = Path(path)
    write_json(path, report.to_json())
    return path


def write_csv(path: Union[str, Path], report: EvalReport) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric", "value", "units"])
        for key in sorted(report.aggregates):
            writer.writerow([key, f"{report.aggregates[key]:.6f}", report.units])
    return path


def format_table(report: EvalReport) -> str:
    width = max((len(k) for k in report.aggregates), default=6)
    lines = [f"{'metric'.ljust(width)}  value", f"{'-' * width}  ------"]
    for key, value in report.aggregates.items():
        lines.append(f"{key.ljust(width)}  {value:.4f}")
    lines.append(f"({report.units} evaluation units, schema {report.schema})")
    return "\n".join(lines)
