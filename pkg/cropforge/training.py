from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, Union

import numpy as np

from . import autograd as ag
from . import log_event
from .autograd import AdamWState, Tensor
from .boxgeom import Box, MosaicLayout, giou_matrix, boxes_to_array, iou_matrix, to_global
from .decoder import DecoderModel, DecoderOutput, predict
from .encoder import SyntheticEncoder
from .errors import ConfigError, DatasetError, MatchingError, NonFiniteError, QueryError, TrainingError
from .models.core import SCORE_MAX, AnnotatedSample, Proposal, SceneObject, SceneSpec
from .querying import QueryMode, build_queries, filter_training_selection, match

TRAIN_QUERY_MODES = (QueryMode.BOTH, QueryMode.MAIN, QueryMode.KEY, QueryMode.NONE)
MOSAIC_GRIDS = (1, 2, 3)
# IoU comparisons at the smoothing threshold tolerate this much rounding.
IOU_TOLERANCE = 1e-12
JITTER_AMOUNT = 24


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 8
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    weight_decay: float = 1e-4
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    lambda_score: float = 1.0
    seed: int = 7
    mosaic_enabled: bool = True
    query_mode: str = "both"
    smoothing_iou_threshold: float = 0.9
    hq_score_threshold: float = 4.0
    background_weight: float = 0.1
    smooth_l1_beta: float = 1.0
    grad_clip: float = 1.0
    flip_prob: float = 0.5
    jitter_prob: float = 0.5
    # with a held-out set, end on the parameters of the epoch with the best held-out IoU-Max
    keep_best: bool = True

    def problems(self) -> list[str]:
        out = []
        if self.seed < 0:
            out.append(f"train.seed must be >= 0, got {self.seed}")
        if self.epochs < 0:
            out.append(f"train.epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            out.append(f"train.batch_size must be >= 1, got {self.batch_size}")
        if not self.lr_min > 0.0:
            out.append(f"train.lr_min must be positive, got {self.lr_min}")
        if self.lr_max < self.lr_min:
            out.append(f"train.lr_max ({self.lr_max}) must be >= lr_min ({self.lr_min})")
        if self.weight_decay < 0.0:
            out.append(f"train.weight_decay must be >= 0, got {self.weight_decay}")
        for name in ("lambda_l1", "lambda_giou", "lambda_score"):
            if getattr(self, name) < 0.0:
                out.append(f"train.{name} must be >= 0, got {getattr(self, name)}")
        try:
            if QueryMode.parse(self.query_mode) not in TRAIN_QUERY_MODES:
                out.append(f"train.query_mode {self.query_mode!r} is inference-only")
        except QueryError as exc:
            out.append(f"train.query_mode: {exc.message}")
        if not 0.0 < self.smoothing_iou_threshold <= 1.0:
            out.append(f"train.smoothing_iou_threshold must lie in (0, 1], got {self.smoothing_iou_threshold}")
        if not 1.0 <= self.hq_score_threshold <= SCORE_MAX:
            out.append(f"train.hq_score_threshold must lie in [1, 5], got {self.hq_score_threshold}")
        if not 0.0 <= self.background_weight <= 1.0:
            out.append(f"train.background_weight must lie in [0, 1], got {self.background_weight}")
        if not self.smooth_l1_beta > 0.0:
            out.append(f"train.smooth_l1_beta must be positive, got {self.smooth_l1_beta}")
        if self.grad_clip < 0.0:
            out.append(f"train.grad_clip must be >= 0 (0 disables), got {self.grad_clip}")
        for name in ("flip_prob", "jitter_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                out.append(f"train.{name} must lie in [0, 1], got {getattr(self, name)}")
        return out

    def validate(self) -> "TrainConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def to_json(self) -> dict[str, Any]:
        return asdict(self)


# -- assignment --------------------------------------------------------------


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]
    unmatched_pred_indices: list[int]
    total_cost: float = 0.0


def _solve_square(cost: np.ndarray) -> np.ndarray:
    """Shortest augmenting path with row/column potentials; returns the column of each row."""
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)  # owner[j]: 1-based row holding column j, 0 if free
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    assignment = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        assignment[owner[j] - 1] = j - 1
    return assignment


def hungarian(cost: np.ndarray) -> MatchResult:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise MatchingError(f"hungarian needs a nonempty 2-d cost matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise MatchingError("cost matrix contains non-finite entries")
    rows, cols = cost.shape
    n = max(rows, cols)
    if rows != cols:
        padded = np.full((n, n), cost.max() + 1.0)
        padded[:rows, :cols] = cost
    else:
        padded = cost
    assignment = _solve_square(padded)
    pairs = [(r, int(assignment[r])) for r in range(rows) if assignment[r] < cols]
    matched = {r for r, _ in pairs}
    return MatchResult(
        pairs=pairs,
        unmatched_pred_indices=[r for r in range(rows) if r not in matched],
        total_cost=float(sum(cost[r, c] for r, c in pairs)),
    )


def build_cost(
    pred_boxes: Union[Sequence[Box], np.ndarray],
    gt_boxes: Union[Sequence[Box], np.ndarray],
    lambda_l1: float = 5.0,
    lambda_giou: float = 2.0,
) -> np.ndarray:
    pred = pred_boxes if isinstance(pred_boxes, np.ndarray) else boxes_to_array(pred_boxes)
    gt = gt_boxes if isinstance(gt_boxes, np.ndarray) else boxes_to_array(gt_boxes)
    if gt.shape[0] == 0:
        raise MatchingError("cost matrix needs at least one ground-truth box")
    l1 = np.abs(pred[:, None, :] - gt[None, :, :]).sum(axis=2)
    return lambda_l1 * l1 + lambda_giou * (1.0 - giou_matrix(pred, gt))


# -- loss --------------------------------------------------------------------


def giou_tensor(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Row-wise GIoU between (P, 4) cxcywh predictions and constant targets, as a (P,) tensor."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    cx = ag.index_select(pred, [0], axis=1)
    cy = ag.index_select(pred, [1], axis=1)
    w = ag.index_select(pred, [2], axis=1)
    h = ag.index_select(pred, [3], axis=1)
    px1, px2 = ag.sub(cx, ag.scalar_mul(w, 0.5)), ag.add(cx, ag.scalar_mul(w, 0.5))
    py1, py2 = ag.sub(cy, ag.scalar_mul(h, 0.5)), ag.add(cy, ag.scalar_mul(h, 0.5))
    gx1, gx2 = (gt[:, 0:1] - gt[:, 2:3] / 2.0), (gt[:, 0:1] + gt[:, 2:3] / 2.0)
    gy1, gy2 = (gt[:, 1:2] - gt[:, 3:4] / 2.0), (gt[:, 1:2] + gt[:, 3:4] / 2.0)

    iw = ag.relu(ag.sub(ag.minimum(px2, gx2), ag.maximum(px1, gx1)))
    ih = ag.relu(ag.sub(ag.minimum(py2, gy2), ag.maximum(py1, gy1)))
    inter = ag.mul(iw, ih)
    union = ag.sub(ag.add(ag.mul(w, h), (gx2 - gx1) * (gy2 - gy1)), inter)
    hull = ag.mul(
        ag.sub(ag.maximum(px2, gx2), ag.minimum(px1, gx1)),
        ag.sub(ag.maximum(py2, gy2), ag.minimum(py1, gy1)),
    )
    out = ag.sub(ag.div(inter, union), ag.div(ag.sub(hull, union), hull))
    return ag.reshape(out, (pred.shape[0],))


@dataclass
class LossBreakdown:
    l1_box: float
    giou_box: float
    score: float
    total: float
    matched: int
    smoothed: int
    background: int
    total_tensor: Optional[Tensor] = field(default=None, repr=False, compare=False)
    match: Optional[MatchResult] = field(default=None, repr=False, compare=False)

    def as_record(self) -> dict[str, float]:
        return {"l1_box": self.l1_box, "giou_box": self.giou_box, "score": self.score, "total": self.total}


def score_targets(
    pred_boxes: Sequence[Box],
    gt: Sequence[Proposal],
    matched: Mapping[int, int],
    hq: Sequence[Proposal],
    cfg: TrainConfig,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Per-prediction score targets and weights; returns (targets, weights, smoothed count).

    ``matched`` maps prediction index to an index into ``hq``.
    """
    m_count = len(pred_boxes)
    targets = np.zeros(m_count)
    weights = np.full(m_count, cfg.background_weight)
    ious = iou_matrix(boxes_to_array(pred_boxes), boxes_to_array([g.box for g in gt]))
    smoothed = 0
    for m in range(m_count):
        if m in matched:
            targets[m] = hq[matched[m]].score / SCORE_MAX
            weights[m] = 1.0
            continue
        best = int(np.argmax(ious[m]))
        if ious[m, best] >= cfg.smoothing_iou_threshold - IOU_TOLERANCE:
            targets[m] = gt[best].score / SCORE_MAX
            weights[m] = 1.0
            smoothed += 1
    return targets, weights, smoothed


def set_loss(output: DecoderOutput, gt: Sequence[Proposal], cfg: TrainConfig) -> LossBreakdown:
    """Hungarian-matched box loss plus a weighted score loss over every prediction.

    ``gt`` is the full annotated set; matching only sees entries scoring at
    least ``cfg.hq_score_threshold``.
    """
    hq = [g for g in gt if g.score >= cfg.hq_score_threshold]
    if not hq:
        raise TrainingError("sample must be pre-filtered: no ground truth reaches the high-quality threshold")
    hq_arr = boxes_to_array([g.box for g in hq])
    cost = build_cost(output.pred_boxes, hq_arr, cfg.lambda_l1, cfg.lambda_giou)
    result = hungarian(cost)
    rows = [p for p, _ in result.pairs]
    cols = [g for _, g in result.pairs]

    matched_pred = ag.index_select(output.pred_tensor, rows, axis=0)
    matched_gt = hq_arr[cols]
    l1_box = ag.scalar_mul(ag.sum(ag.smooth_l1(matched_pred, matched_gt, cfg.smooth_l1_beta)), 1.0 / len(rows))
    giou_box = ag.mean(ag.sub(1.0, giou_tensor(matched_pred, matched_gt)))

    targets, weights, smoothed = score_targets(output.pred_boxes, gt, dict(result.pairs), hq, cfg)
    weighted = ag.mul(ag.smooth_l1(output.scores, targets, cfg.smooth_l1_beta), weights)
    score = ag.scalar_mul(ag.sum(weighted), 1.0 / float(weights.sum()))

    total = ag.add(
        ag.add(ag.scalar_mul(l1_box, cfg.lambda_l1), ag.scalar_mul(giou_box, cfg.lambda_giou)),
        ag.scalar_mul(score, cfg.lambda_score),
    )
    return LossBreakdown(
        l1_box=l1_box.item(),
        giou_box=giou_box.item(),
        score=score.item(),
        total=total.item(),
        matched=len(result.pairs),
        smoothed=smoothed,
        background=len(output.pred_boxes) - len(result.pairs) - smoothed,
        total_tensor=total,
        match=result,
    )


# -- mosaic sampling ---------------------------------------------------------


@dataclass
class MosaicSample:
    scene: SceneSpec
    text: str
    gt: list[Proposal]
    layout: MosaicLayout
    sample_ids: list[str]
    target_id: str
    text_index: int
    flipped: bool = False

    @property
    def best_gt(self) -> Box:
        best = max(range(len(self.gt)), key=lambda i: (self.gt[i].score, -i))
        return self.gt[best].box


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, 1])


def jitter_scene(scene: SceneSpec, rng: np.random.Generator, amount: int = JITTER_AMOUNT) -> SceneSpec:
    objects = []
    for obj in scene.objects:
        shift = rng.integers(-amount, amount + 1, size=3)
        color = tuple(int(c) for c in np.clip(np.asarray(obj.color) + shift, 0, 255))
        objects.append(replace(obj, color=color))
    return replace(scene, objects=tuple(objects))


def sample_mosaic(
    dataset: Sequence[AnnotatedSample],
    rng: np.random.Generator,
    grid: Optional[int] = None,
    target_index: Optional[int] = None,
    flip_prob: float = 0.0,
    jitter_prob: float = 0.0,
) -> MosaicSample:
    """Compose 1x1, 2x2 or 3x3 scenes; text and ground truth come from one cell only."""
    if not dataset:
        raise DatasetError("cannot sample a mosaic from an empty dataset")
    if grid is None:
        grid = int(rng.choice(MOSAIC_GRIDS))
    cells = grid * grid
    if len(dataset) < cells:
        raise DatasetError(f"a {grid}x{grid} mosaic needs {cells} samples, dataset has {len(dataset)}")

    if target_index is None:
        picked = [int(i) for i in rng.choice(len(dataset), size=cells, replace=False)]
        target_slot = int(rng.integers(cells))
    else:
        others = [i for i in range(len(dataset)) if i != target_index]
        fill = [int(others[i]) for i in rng.choice(len(others), size=cells - 1, replace=False)] if cells > 1 else []
        target_slot = int(rng.integers(cells))
        picked = fill[:target_slot] + [target_index] + fill[target_slot:]
    layout = MosaicLayout(grid, divmod(target_slot, grid))

    target = dataset[picked[target_slot]]
    text_index = int(rng.integers(len(target.annotations)))
    ann = target.annotations[text_index]
    flip = bool(rng.random() < flip_prob)
    jitter = bool(rng.random() < jitter_prob)

    objects: list[SceneObject] = []
    for slot, idx in enumerate(picked):
        scene = dataset[idx].scene
        if flip:
            scene = scene.flipped()
        if jitter:
            scene = jitter_scene(scene, rng)
        cell = divmod(slot, grid)
        objects.extend(replace(o, box=to_global(layout, cell, o.box)) for o in scene.objects)

    gt = []
    for prop in ann.supervision():
        box = prop.box.flipped() if flip else prop.box
        gt.append(Proposal(to_global(layout, layout.target_cell, box), prop.score))

    base = target.scene
    composite = SceneSpec(canvas=(base.canvas[0] * grid, base.canvas[1] * grid), objects=tuple(objects), background=base.background)
    return MosaicSample(
        scene=composite,
        text=ann.text,
        gt=gt,
        layout=layout,
        sample_ids=[dataset[i].id for i in picked],
        target_id=target.id,
        text_index=text_index,
        flipped=flip,
    )


# -- schedule and loop -------------------------------------------------------


def cosine_lr(step: int, total_steps: int, lr_max: float = 1e-4, lr_min: float = 1e-6) -> float:
    if total_steps <= 0:
        raise TrainingError("cosine schedule needs total_steps > 0")
    if not 0 <= step <= total_steps:
        raise TrainingError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class StepResult:
    loss: LossBreakdown
    fallback: bool


def sample_loss(model: DecoderModel, encoder: SyntheticEncoder, ms: MosaicSample, cfg: TrainConfig) -> Optional[StepResult]:
    if not any(g.score >= cfg.hq_score_threshold for g in ms.gt):
        log_event("sample_skipped", "sample", ms.target_id, "no high-quality ground truth", level=logging.DEBUG)
        return None
    enc = encoder.encode_image(ms.scene)
    mode = QueryMode.parse(cfg.query_mode)
    sel = None
    fallback = False
    if mode is not QueryMode.NONE:
        try:
            queries = build_queries(mode, encoder, text=ms.text)
        except QueryError as exc:
            log_event("sample_skipped", "sample", ms.target_id, exc.message, level=logging.DEBUG)
            return None
        sel = match(queries, enc)
        # a 1x1 mosaic has no other cell to confuse the query with
        if cfg.mosaic_enabled and ms.layout.grid > 1:
            sel = filter_training_selection(sel, ms.best_gt, ms.layout.target_region, enc)
            fallback = sel.fallback
            if fallback:
                log_event("filter_fallback", "sample", ms.target_id, level=logging.DEBUG, grid=ms.layout.grid)
    out = model.forward(enc, sel)
    return StepResult(set_loss(out, ms.gt, cfg), fallback)


def probe_iou_max(
    model: DecoderModel,
    encoder: SyntheticEncoder,
    samples: Sequence[AnnotatedSample],
    query_mode: str,
    hq_threshold: float = 4.0,
) -> Optional[float]:
    """Mean top-1 IoU-Max over held-out (sample, text) units."""
    from .evalsuite import iou_mean_max

    values = []
    for sample in samples:
        enc = encoder.encode_image(sample.scene)
        for ann in sample.annotations:
            refs = list(ann.annotator_boxes) or [p.box for p in ann.high_quality(hq_threshold)]
            if not refs:
                continue
            try:
                queries = build_queries(query_mode, encoder, text=ann.text)
            except QueryError:
                continue
            top = predict(model, enc, queries, top_k=1)[0][0]
            values.append(iou_mean_max(top, refs)[1])
    return float(np.mean(values)) if values else None


@dataclass
class TrainResult:
    model: DecoderModel
    optimizer: AdamWState
    history: list[dict[str, Any]]
    epoch: int
    best_epoch: Optional[int] = None


def train(
    samples: Sequence[AnnotatedSample],
    cfg: TrainConfig,
    model: DecoderModel,
    encoder: SyntheticEncoder,
    probe: Sequence[AnnotatedSample] = (),
    optimizer: Optional[AdamWState] = None,
    start_epoch: int = 0,
    log_path: Optional[Union[str, Path]] = None,
) -> TrainResult:
    cfg.validate()
    optimizer = optimizer or AdamWState()
    history: list[dict[str, Any]] = []
    if cfg.epochs <= start_epoch:
        return TrainResult(model, optimizer, history, start_epoch)
    if not samples:
        raise DatasetError("training set is empty")
    if model.cfg.model_dim != encoder.params.dim:
        raise ConfigError([f"decoder.model_dim {model.cfg.model_dim} must equal encoder.dim {encoder.params.dim}"])
    if cfg.mosaic_enabled and len(samples) < max(MOSAIC_GRIDS) ** 2:
        raise DatasetError(f"mosaic training needs at least {max(MOSAIC_GRIDS) ** 2} samples, got {len(samples)}")

    n = len(samples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    log_file = None
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_file = log_path.open("a" if start_epoch else "w", encoding="utf-8")

    best: Optional[tuple[float, int, dict[str, np.ndarray]]] = None
    try:
        for epoch in range(start_epoch + 1, cfg.epochs + 1):
            order = epoch_rng(cfg.seed, epoch).permutation(n)
            sums = {"l1_box": 0.0, "giou_box": 0.0, "score": 0.0, "total": 0.0}
            counted = 0
            fallbacks = 0
            lr = cfg.lr_max
            for step in range(steps_per_epoch):
                global_step = (epoch - 1) * steps_per_epoch + step
                model.zero_grad()
                totals: list[Tensor] = []
                for slot in range(step * cfg.batch_size, min((step + 1) * cfg.batch_size, n)):
                    rng = sample_rng(cfg.seed, (epoch - 1) * n + slot)
                    ms = sample_mosaic(
                        samples,
                        rng,
                        grid=None if cfg.mosaic_enabled else 1,
                        target_index=int(order[slot]),
                        flip_prob=cfg.flip_prob,
                        jitter_prob=cfg.jitter_prob,
                    )
                    try:
                        result = sample_loss(model, encoder, ms, cfg)
                    except NonFiniteError as exc:
                        raise TrainingError(f"non-finite loss at epoch {epoch} step {step} sample {ms.target_id}: {exc.message}") from None
                    if result is None:
                        continue
                    totals.append(result.loss.total_tensor)
                    fallbacks += int(result.fallback)
                    for key, value in result.loss.as_record().items():
                        sums[key] += value
                    counted += 1
                if not totals:
                    continue
                loss = totals[0]
                for t in totals[1:]:
                    loss = ag.add(loss, t)
                loss = ag.scalar_mul(loss, 1.0 / len(totals))
                ag.backward(loss)
                grads, _ = ag.clip_grad_norm(model.grads(), cfg.grad_clip)
                lr = cosine_lr(global_step, total_steps, cfg.lr_max, cfg.lr_min)
                ag.adamw_step(model.params, grads, optimizer, lr, weight_decay=cfg.weight_decay)

            record: dict[str, Any] = {"epoch": epoch, "lr": lr}
            for key, value in sums.items():
                record[key] = value / counted if counted else None
            record["probe_iou_max"] = probe_iou_max(model, encoder, probe, cfg.query_mode, cfg.hq_score_threshold) if probe else None
            record["fallback_filter_count"] = fallbacks
            record["samples"] = counted
            score = record["probe_iou_max"]
            if cfg.keep_best and score is not None and (best is None or score > best[0]):
                best = (score, epoch, model.state_dict())
            history.append(record)
            log_event("epoch_finished", "epoch", epoch, **record)
            if log_file is not None:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
                log_file.flush()
    finally:
        if log_file is not None:
            log_file.close()
    if best is None:
        return TrainResult(model, optimizer, history, cfg.epochs)
    for name, value in best[2].items():
        model.params[name].data = value
    log_event("best_restored", "epoch", best[1], probe_iou_max=best[0])
    return TrainResult(model, optimizer, history, cfg.epochs, best_epoch=best[1])
