from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from cropforge import log_event
from cropforge.boxgeom import Box, clamp_box, iou, union_box
from cropforge.encoder import render_scene, write_ppm
from cropforge.errors import DatasetError
from .core import (
    AnnotatedSample,
    DatasetManifest,
    Proposal,
    SceneObject,
    SceneSpec,
    SchemaKind,
    TextAnnotation,
    save_manifest,
    save_sample,
    write_json,
)

SPLITS = ("train", "val", "test")

ONE_CONCEPT_TEXTS = ("a {a}", "the {a} in the picture", "a photo of a {a}")
TWO_CONCEPT_TEXTS = ("a {a} and a {b}", "the {a} next to the {b}", "two {a}s with a {b}")


# -- grid proposals ----------------------------------------------------------


@dataclass(frozen=True)
class GridParams:
    """Proposal grid. The ``scaled`` defaults give 102 proposals on a square canvas."""

    style: str = "scaled"
    bins: int = 12
    anchors: int = 4
    scales: tuple[float, ...] = (0.5, 0.65, 0.8, 0.95)
    aspects: tuple[tuple[int, int], ...] = ((1, 1), (4, 3), (3, 4), (16, 9))
    # share of the unclamped box that must lie on the canvas
    min_retained: float = 0.7

    def to_json(self) -> dict[str, Any]:
        doc = asdict(self)
        doc["scales"] = list(self.scales)
        doc["aspects"] = [list(a) for a in self.aspects]
        return doc


def _gaic_proposals(image_aspect: float, bins: int) -> list[Box]:
    # corners on a bins x bins lattice: top-left in the first third, bottom-right in the last
    third = bins // 3
    out = []
    for x1 in range(0, third):
        for y1 in range(0, third):
            for x2 in range(bins - third, bins):
                for y2 in range(bins - third, bins):
                    area = (x2 - x1) * (y2 - y1) / float(bins * bins)
                    aspect = (y2 - y1) / ((x2 - x1) * image_aspect)
                    if area > 0.4999 and 0.5 < aspect < 2.0:
                        out.append(Box.from_corners((0.5 + x1) / bins, (0.5 + y1) / bins, (0.5 + x2) / bins, (0.5 + y2) / bins))
    return out


def _scaled_proposals(image_aspect: float, params: GridParams) -> list[Box]:
    out = []
    centers = [(i + 0.5) / params.anchors for i in range(params.anchors)]
    for scale in params.scales:
        for num, den in params.aspects:
            ratio = math.sqrt((num / den) / image_aspect)
            w, h = scale * ratio, scale / ratio
            for cy in centers:
                for cx in centers:
                    raw = Box(cx, cy, w, h)
                    inside = max(0.0, min(raw.x2, 1.0) - max(raw.x1, 0.0)) * max(0.0, min(raw.y2, 1.0) - max(raw.y1, 0.0))
                    if raw.area > 0.0 and inside / raw.area >= params.min_retained - 1e-9:
                        out.append(clamp_box(raw))
    return out


def grid_proposals(image_aspect: float = 1.0, params: Optional[GridParams] = None) -> list[Box]:
    """Candidate crops along a fixed grid; ``image_aspect`` is width / height."""
    params = params or GridParams()
    if image_aspect <= 0.0:
        raise DatasetError(f"image aspect must be positive, got {image_aspect}")
    if params.style == "gaic":
        boxes = _gaic_proposals(image_aspect, params.bins)
    elif params.style == "scaled":
        boxes = _scaled_proposals(image_aspect, params)
    else:
        raise DatasetError(f"unknown proposal style {params.style!r}")
    seen: set[tuple[float, ...]] = set()
    unique = []
    for b in boxes:
        key = tuple(round(v, 9) for v in b.to_json())
        if key not in seen and b.is_valid():
            seen.add(key)
            unique.append(b)
    if not unique:
        raise DatasetError(f"grid parameters produced no proposals: {params.to_json()}")
    return unique


# -- aesthetic oracle --------------------------------------------------------


def _fit(lo: float, hi: float) -> tuple[float, float]:
    size = hi - lo
    if size >= 1.0:
        return 0.0, 1.0
    if lo < 0.0:
        return 0.0, size
    if hi > 1.0:
        return 1.0 - size, 1.0
    return lo, hi


def ideal_crop(scene: SceneSpec, concepts: Iterable[str], margin: float = 0.08) -> Box:
    """Tight box of the queried objects, padded by ``margin`` and nudged toward the thirds.

    The subject center ``t`` lands at relative position 0.5 + 0.5 (t - 0.5)
    inside the crop; the nudge never exceeds half the margin.
    """
    wanted = set(concepts)
    objs = [o.box for o in scene.objects if o.concept in wanted]
    if not objs:
        raise DatasetError(f"scene holds none of {sorted(wanted)}")
    tight = union_box(objs)
    w = min(tight.w + 2.0 * margin, 1.0)
    h = min(tight.h + 2.0 * margin, 1.0)
    cap = margin / 2.0
    shift_x = float(np.clip(-0.5 * (tight.cx - 0.5) * w, -cap, cap))
    shift_y = float(np.clip(-0.5 * (tight.cy - 0.5) * h, -cap, cap))
    cx, cy = tight.cx + shift_x, tight.cy + shift_y
    x1, x2 = _fit(cx - w / 2.0, cx + w / 2.0)
    y1, y2 = _fit(cy - h / 2.0, cy + h / 2.0)
    return Box.from_corners(x1, y1, x2, y2)


def proposal_score(box: Box, ideal: Box, gamma: float = 1.5) -> float:
    return 1.0 + 4.0 * max(0.0, iou(box, ideal)) ** gamma


def annotator_boxes(
    ideal: Box,
    rng: np.random.Generator,
    count: int,
    jitter: float = 0.03,
    min_iou: float = 0.7,
    best_iou: float = 0.9,
    attempts: int = 1000,
) -> list[Box]:
    """Jittered copies of ``ideal``; every copy keeps IoU >= min_iou and the closest reaches best_iou."""

    def draw(threshold: float) -> Box:
        for _ in range(attempts):
            delta = rng.uniform(-jitter, jitter, size=4)
            cand = clamp_box(Box.from_array(ideal.as_array() + delta))
            if iou(cand, ideal) >= threshold:
                return cand
        return ideal

    boxes = [draw(min_iou) for _ in range(count)]
    if boxes and max(iou(b, ideal) for b in boxes) < best_iou:
        boxes[0] = draw(best_iou)
    return boxes


# -- scenes and texts ---------------------------------------------------------


@dataclass(frozen=True)
class GeneratorParams:
    canvas: int = 96
    min_objects: int = 2
    max_objects: int = 5
    min_size: float = 0.12
    max_size: float = 0.4
    max_overlap: float = 0.3
    texts_per_sample: int = 1
    annotators: int = 8
    margin: float = 0.08
    gamma: float = 1.5
    jitter: float = 0.03
    schema: SchemaKind = SchemaKind.BOTH
    grid: GridParams = field(default_factory=GridParams)
    write_images: bool = True

    def problems(self, vocab_size: int) -> list[str]:
        out = []
        if vocab_size < 5:
            out.append(f"vocabulary needs at least 5 concepts, got {vocab_size}")
        if self.canvas < 8:
            out.append(f"canvas must be at least 8 pixels, got {self.canvas}")
        if not 1 <= self.min_objects <= self.max_objects:
            out.append(f"object count range [{self.min_objects}, {self.max_objects}] is empty")
        if self.max_objects > vocab_size:
            out.append(f"max_objects {self.max_objects} exceeds vocabulary size {vocab_size}")
        if not 0.0 < self.min_size <= self.max_size <= 1.0:
            out.append(f"object size range [{self.min_size}, {self.max_size}] is invalid")
        if self.texts_per_sample < 1:
            out.append(f"texts_per_sample must be >= 1, got {self.texts_per_sample}")
        if self.schema.has_annotators and self.annotators < 1:
            out.append(f"annotator schema needs annotators >= 1, got {self.annotators}")
        return out

    def to_json(self) -> dict[str, Any]:
        doc = asdict(self)
        doc["schema"] = self.schema.value
        doc["grid"] = self.grid.to_json()
        return doc


def random_scene(rng: np.random.Generator, concepts: Sequence[str], params: GeneratorParams) -> SceneSpec:
    count = int(rng.integers(params.min_objects, params.max_objects + 1))
    chosen = [concepts[i] for i in rng.choice(len(concepts), size=count, replace=False)]
    objects: list[SceneObject] = []
    for concept in chosen:
        box = None
        for _ in range(50):
            w, h = rng.uniform(params.min_size, params.max_size, size=2)
            cx = rng.uniform(w / 2.0, 1.0 - w / 2.0)
            cy = rng.uniform(h / 2.0, 1.0 - h / 2.0)
            box = Box(float(cx), float(cy), float(w), float(h))
            if all(iou(box, o.box) <= params.max_overlap for o in objects):
                break
        color = tuple(int(c) for c in rng.integers(0, 200, size=3))
        objects.append(SceneObject(concept, box, color))  # type: ignore[arg-type]
    background = tuple(int(c) for c in rng.integers(200, 256, size=3))
    return SceneSpec(canvas=(params.canvas, params.canvas), objects=tuple(objects), background=background)  # type: ignore[arg-type]


def compose_text(rng: np.random.Generator, scene: SceneSpec) -> tuple[str, list[str]]:
    present = scene.concepts
    if len(present) >= 2 and rng.random() < 0.5:
        a, b = (present[i] for i in rng.choice(len(present), size=2, replace=False))
        template = TWO_CONCEPT_TEXTS[int(rng.integers(len(TWO_CONCEPT_TEXTS)))]
        return template.format(a=a, b=b), [a, b]
    a = present[int(rng.integers(len(present)))]
    template = ONE_CONCEPT_TEXTS[int(rng.integers(len(ONE_CONCEPT_TEXTS)))]
    return template.format(a=a), [a]


def make_sample(
    sample_id: str,
    rng: np.random.Generator,
    concepts: Sequence[str],
    params: GeneratorParams,
    proposals: Sequence[Box],
) -> AnnotatedSample:
    scene = random_scene(rng, concepts, params)
    annotations = []
    used: set[str] = set()
    for _ in range(params.texts_per_sample):
        text, queried = compose_text(rng, scene)
        for _retry in range(10):
            if text not in used:
                break
            text, queried = compose_text(rng, scene)
        used.add(text)
        ideal = ideal_crop(scene, queried, params.margin)
        scored: tuple[Proposal, ...] = ()
        if params.schema.has_dense:
            boxes = list(proposals)
            # the ideal crop is always a candidate so every sample has a top-scored proposal
            if all(iou(b, ideal) < 1.0 for b in boxes):
                boxes.append(ideal)
            scored = tuple(Proposal(b, round(proposal_score(b, ideal, params.gamma), 6)) for b in boxes)
        annotated: tuple[Box, ...] = ()
        if params.schema.has_annotators:
            annotated = tuple(annotator_boxes(ideal, rng, params.annotators, params.jitter))
        annotations.append(TextAnnotation(text=text, proposals=scored, annotator_boxes=annotated, oracle_box=ideal))
    return AnnotatedSample(id=sample_id, scene=scene, annotations=annotations)


def generate_synthetic(
    out_dir: Union[str, Path],
    split_sizes: Mapping[str, int],
    concepts: Sequence[str],
    seed: int,
    params: Optional[GeneratorParams] = None,
) -> dict[str, DatasetManifest]:
    params = params or GeneratorParams()
    concepts = list(dict.fromkeys(concepts))
    problems = params.problems(len(concepts))
    for split, size in split_sizes.items():
        if split not in SPLITS:
            problems.append(f"unknown split {split!r}")
        elif size < 0:
            problems.append(f"split {split!r} has negative size {size}")
    if seed < 0:
        problems.append(f"seed must be >= 0, got {seed}")
    if problems:
        raise DatasetError("cannot generate dataset: " + "; ".join(problems))

    out_dir = Path(out_dir)
    proposals = grid_proposals(1.0, params.grid) if params.schema.has_dense else []
    manifests: dict[str, DatasetManifest] = {}
    for split, size in split_sizes.items():
        split_dir = out_dir / split
        split_dir.mkdir(parents=True, exist_ok=True)
        code = SPLITS.index(split)
        names = []
        for index in range(size):
            sample_id = f"{split}-{index:05d}"
            # per-sample stream: samples can be generated in any order
            rng = np.random.default_rng([seed, code, index])
            sample = make_sample(sample_id, rng, concepts, params, proposals)
            scene_rel = f"scenes/{sample_id}.json"
            write_json(split_dir / scene_rel, sample.scene.to_json())
            sample = replace(sample, scene_path=scene_rel)
            if params.write_images:
                image_rel = f"images/{sample_id}.ppm"
                write_ppm(split_dir / image_rel, render_scene(sample.scene).pixels)
                sample = replace(sample, image_path=image_rel)
            save_sample(sample, split_dir / f"{sample_id}.json")
            names.append(f"{sample_id}.json")
        manifest = DatasetManifest(
            schema=params.schema,
            split=split,
            samples=names,
            generator={"seed": seed, "concepts": concepts, "params": params.to_json()},
        )
        save_manifest(manifest, split_dir / "manifest.json")
        manifests[split] = manifest
        log_event("dataset_written", "split", split, samples=size, path=str(split_dir))
    return manifests
