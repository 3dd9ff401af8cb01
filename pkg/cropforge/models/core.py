from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

from cropforge.boxgeom import Box
from cropforge.errors import DatasetError, ValidationError


# Record layout notes:
# - SceneSpec is the synthetic world model; pixels are derived from it, never the reverse.
# - AnnotatedSample is one image with one or more text annotations (GAIC-style: 1, TextCrop-style: 2).
# - Each TextAnnotation carries dense scored proposals and/or annotator boxes depending on the schema.
# - DatasetManifest lists sample files relative to its own location.

RGB = tuple[int, int, int]

SCORE_MIN = 1.0
SCORE_MAX = 5.0


class SchemaKind(str, Enum):
    DENSE = "dense-scored"
    ANNOTATORS = "annotator-boxes"
    BOTH = "both"

    @property
    def has_dense(self) -> bool:
        return self in (SchemaKind.DENSE, SchemaKind.BOTH)

    @property
    def has_annotators(self) -> bool:
        return self in (SchemaKind.ANNOTATORS, SchemaKind.BOTH)

    @classmethod
    def parse(cls, value: Union[str, "SchemaKind"]) -> "SchemaKind":
        aliases = {"dense": cls.DENSE, "annotators": cls.ANNOTATORS, "both": cls.BOTH}
        if isinstance(value, cls):
            return value
        if value in aliases:
            return aliases[value]
        try:
            return cls(value)
        except ValueError:
            raise DatasetError(f"unknown schema kind {value!r}") from None


def _color(value: Any, field_name: str, sample_id: Optional[str]) -> RGB:
    try:
        r, g, b = (int(c) for c in value)
    except (TypeError, ValueError):
        raise ValidationError(field_name, f"expected [r, g, b], got {value!r}", sample_id) from None
    if not all(0 <= c <= 255 for c in (r, g, b)):
        raise ValidationError(field_name, f"channel outside 0..255 in {value!r}", sample_id)
    return r, g, b


def _box(value: Any, field_name: str, sample_id: Optional[str]) -> Box:
    try:
        return Box.from_json(value)
    except Exception as exc:  # BoxError, TypeError from odd payloads
        raise ValidationError(field_name, str(exc), sample_id) from None


@dataclass(frozen=True)
class SceneObject:
    concept: str
    box: Box
    color: RGB = (0, 0, 0)


@dataclass(frozen=True)
class SceneSpec:
    canvas: tuple[int, int]
    objects: tuple[SceneObject, ...] = ()
    background: RGB = (255, 255, 255)

    def validate(self, sample_id: Optional[str] = None, require_objects: bool = False) -> "SceneSpec":
        w, h = self.canvas
        if w <= 0 or h <= 0:
            raise ValidationError("canvas", f"canvas must be positive, got {self.canvas}", sample_id)
        for i, obj in enumerate(self.objects):
            if not obj.concept:
                raise ValidationError(f"objects[{i}].concept", "empty concept id", sample_id)
            if not obj.box.is_valid():
                raise ValidationError(f"objects[{i}].box", f"invalid box {obj.box.to_json()}", sample_id)
        if require_objects and not self.objects:
            raise ValidationError("objects", "scene has no objects", sample_id)
        return self

    @property
    def concepts(self) -> list[str]:
        seen: list[str] = []
        for obj in self.objects:
            if obj.concept not in seen:
                seen.append(obj.concept)
        return seen

    def flipped(self) -> "SceneSpec":
        return replace(self, objects=tuple(replace(o, box=o.box.flipped()) for o in self.objects))

    def to_json(self) -> dict[str, Any]:
        return {
            "canvas": list(self.canvas),
            "background": list(self.background),
            "objects": [
                {"concept": o.concept, "box": o.box.to_json(), "color": list(o.color)} for o in self.objects
            ],
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, doc: Mapping[str, Any], sample_id: Optional[str] = None) -> "SceneSpec":
        try:
            canvas = tuple(int(v) for v in doc["canvas"])
        except (KeyError, TypeError, ValueError):
            raise ValidationError("canvas", "missing or malformed", sample_id) from None
        if len(canvas) != 2:
            raise ValidationError("canvas", f"expected [w, h], got {list(canvas)}", sample_id)
        objects = []
        for i, raw in enumerate(doc.get("objects", [])):
            if not isinstance(raw, Mapping) or "concept" not in raw or "box" not in raw:
                raise ValidationError(f"objects[{i}]", "needs 'concept' and 'box'", sample_id)
            objects.append(
                SceneObject(
                    concept=str(raw["concept"]),
                    box=_box(raw["box"], f"objects[{i}].box", sample_id),
                    color=_color(raw.get("color", (0, 0, 0)), f"objects[{i}].color", sample_id),
                )
            )
        background = _color(doc.get("background", (255, 255, 255)), "background", sample_id)
        scene = cls(canvas=(canvas[0], canvas[1]), objects=tuple(objects), background=background)
        return scene.validate(sample_id)


@dataclass(frozen=True)
class Proposal:
    box: Box
    score: float


@dataclass(frozen=True)
class TextAnnotation:
    text: str
    proposals: tuple[Proposal, ...] = ()
    annotator_boxes: tuple[Box, ...] = ()
    oracle_box: Optional[Box] = None

    def high_quality(self, threshold: float) -> list[Proposal]:
        return [p for p in self.proposals if p.score >= threshold]

    def supervision(self) -> list[Proposal]:
        """Scored ground truth for training: proposals, else annotator boxes at score 5."""
        if self.proposals:
            return list(self.proposals)
        return [Proposal(b, SCORE_MAX) for b in self.annotator_boxes]


@dataclass
class AnnotatedSample:
    id: str
    scene: SceneSpec
    annotations: list[TextAnnotation] = field(default_factory=list)
    image_path: Optional[str] = None
    scene_path: Optional[str] = None

    @property
    def texts(self) -> list[str]:
        return [a.text for a in self.annotations]

    def validate(self, schema: SchemaKind, training: bool = False, hq_threshold: float = 4.0) -> "AnnotatedSample":
        if not self.id:
            raise ValidationError("id", "empty sample id")
        self.scene.validate(self.id, require_objects=training)
        if not self.annotations:
            raise ValidationError("texts", "sample has no text annotation", self.id)
        for t, ann in enumerate(self.annotations):
            where = f"texts[{t}]"
            if not ann.text or not ann.text.strip():
                raise ValidationError(f"{where}.text", "missing text", self.id)
            for p, prop in enumerate(ann.proposals):
                if not SCORE_MIN <= prop.score <= SCORE_MAX:
                    raise ValidationError(
                        f"{where}.proposals[{p}].score", f"{prop.score} outside [1, 5]", self.id
                    )
                if not prop.box.is_valid():
                    raise ValidationError(f"{where}.proposals[{p}].box", "invalid box", self.id)
            for a, box in enumerate(ann.annotator_boxes):
                if not box.is_valid():
                    raise ValidationError(f"{where}.annotator_boxes[{a}]", "invalid box", self.id)
            if schema.has_dense and not ann.proposals:
                raise ValidationError(f"{where}.proposals", "dense-scored schema needs proposals", self.id)
            if schema.has_annotators and not ann.annotator_boxes:
                raise ValidationError(f"{where}.annotator_boxes", "annotator schema needs boxes", self.id)
            if training and schema.has_dense and not ann.high_quality(hq_threshold):
                raise ValidationError(
                    f"{where}.proposals", f"no proposal scores >= {hq_threshold}", self.id
                )
        return self

    def to_json(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"id": self.id, "annotations": []}
        if self.image_path:
            doc["image"] = self.image_path
        if self.scene_path:
            doc["scene"] = self.scene_path
        else:
            doc["scene_spec"] = self.scene.to_json()
        for ann in self.annotations:
            entry: dict[str, Any] = {"text": ann.text}
            if ann.proposals:
                entry["proposals"] = [{"box": p.box.to_json(), "score": p.score} for p in ann.proposals]
            if ann.annotator_boxes:
                entry["annotator_boxes"] = [b.to_json() for b in ann.annotator_boxes]
            if ann.oracle_box is not None:
                entry["oracle_box"] = ann.oracle_box.to_json()
            doc["annotations"].append(entry)
        return doc

    @classmethod
    def from_json(cls, doc: Mapping[str, Any], base_dir: Optional[Path] = None) -> "AnnotatedSample":
        sample_id = doc.get("id")
        if not sample_id:
            raise ValidationError("id", "missing sample id")
        sample_id = str(sample_id)
        scene_path = doc.get("scene")
        if scene_path is not None:
            full = (base_dir / scene_path) if base_dir else Path(scene_path)
            scene = SceneSpec.from_json(_read_json(full, sample_id), sample_id)
        elif "scene_spec" in doc:
            scene = SceneSpec.from_json(doc["scene_spec"], sample_id)
        else:
            raise ValidationError("scene", "missing scene metadata", sample_id)
        annotations = []
        for t, raw in enumerate(doc.get("annotations", [])):
            if not isinstance(raw, Mapping):
                raise ValidationError(f"texts[{t}]", "malformed annotation", sample_id)
            proposals = []
            for p, entry in enumerate(raw.get("proposals", [])):
                try:
                    score = float(entry["score"])
                except (KeyError, TypeError, ValueError):
                    raise ValidationError(f"texts[{t}].proposals[{p}].score", "missing or non-numeric", sample_id) from None
                proposals.append(Proposal(_box(entry.get("box"), f"texts[{t}].proposals[{p}].box", sample_id), score))
            boxes = tuple(
                _box(b, f"texts[{t}].annotator_boxes[{a}]", sample_id) for a, b in enumerate(raw.get("annotator_boxes", []))
            )
            oracle = raw.get("oracle_box")
            annotations.append(
                TextAnnotation(
                    text=str(raw.get("text", "")),
                    proposals=tuple(proposals),
                    annotator_boxes=boxes,
                    oracle_box=_box(oracle, f"texts[{t}].oracle_box", sample_id) if oracle is not None else None,
                )
            )
        return cls(
            id=sample_id,
            scene=scene,
            annotations=annotations,
            image_path=doc.get("image"),
            scene_path=scene_path,
        )


@dataclass
class DatasetManifest:
    schema: SchemaKind
    split: str
    samples: list[str] = field(default_factory=list)
    generator: dict[str, Any] = field(default_factory=dict)
    path: Optional[Path] = None

    @property
    def base_dir(self) -> Path:
        return self.path.parent if self.path is not None else Path(".")

    def to_json(self) -> dict[str, Any]:
        return {
            "schema": self.schema.value,
            "split": self.split,
            "samples": list(self.samples),
            "generator": self.generator,
        }


def _read_json(path: Path, sample_id: Optional[str] = None) -> Any:
    if not path.is_file():
        raise ValidationError("file", f"{path} does not exist", sample_id)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError("file", f"{path} is not valid JSON ({exc.msg})", sample_id) from None


def write_json(path: Path, doc: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def save_manifest(manifest: DatasetManifest, path: Union[str, Path]) -> Path:
    path = Path(path)
    write_json(path, manifest.to_json())
    manifest.path = path
    return path


def save_sample(sample: AnnotatedSample, path: Union[str, Path]) -> Path:
    path = Path(path)
    write_json(path, sample.to_json())
    return path


def load_manifest(path: Union[str, Path]) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    doc = _read_json(path)
    if not isinstance(doc, Mapping):
        raise ValidationError("manifest", f"{path} is not a JSON object")
    missing = [k for k in ("schema", "split", "samples") if k not in doc]
    if missing:
        raise ValidationError("manifest", f"{path} lacks {', '.join(missing)}")
    return DatasetManifest(
        schema=SchemaKind.parse(doc["schema"]),
        split=str(doc["split"]),
        samples=[str(s) for s in doc["samples"]],
        generator=dict(doc.get("generator", {})),
        path=path,
    )


def load_samples(
    manifest: DatasetManifest, training: bool = False, hq_threshold: float = 4.0
) -> list[AnnotatedSample]:
    samples: list[AnnotatedSample] = []
    seen: set[str] = set()
    for rel in manifest.samples:
        full = manifest.base_dir / rel
        sample = AnnotatedSample.from_json(_read_json(full), base_dir=full.parent)
        if sample.id in seen:
            raise ValidationError("id", "duplicate sample id in manifest", sample.id)
        seen.add(sample.id)
        if sample.image_path and not (full.parent / sample.image_path).is_file():
            raise ValidationError("image", f"{full.parent / sample.image_path} does not exist", sample.id)
        samples.append(sample.validate(manifest.schema, training=training, hq_threshold=hq_threshold))
    return samples


def iter_split_manifests(root: Union[str, Path], splits: Sequence[str] = ("train", "val", "test")) -> Iterable[DatasetManifest]:
    root = Path(root)
    for split in splits:
        candidate = root / split / "manifest.json"
        if candidate.is_file():
            yield load_manifest(candidate)
