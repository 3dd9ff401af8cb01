import json

import numpy as np
import pytest

from cropforge.boxgeom import Box, iou
from cropforge.errors import DatasetError, ValidationError
from cropforge.models.core import (
    AnnotatedSample,
    Proposal,
    SceneObject,
    SceneSpec,
    SchemaKind,
    TextAnnotation,
    iter_split_manifests,
    load_manifest,
    load_samples,
)
from cropforge.models.seed import (
    GeneratorParams,
    GridParams,
    annotator_boxes,
    generate_synthetic,
    grid_proposals,
    ideal_crop,
)

CONCEPTS = ["woman", "dog", "boat", "cat", "tree", "car", "bird", "horse"]


def test_gaic_grid_has_ninety_proposals():
    boxes = grid_proposals(1.0, GridParams(style="gaic"))
    assert len(boxes) == 90
    assert all(b.is_valid() for b in boxes)
    assert all(b.area > 0.4999 - 1e-9 for b in boxes)


def test_default_grid_is_scaled_with_102_proposals():
    boxes = grid_proposals(1.0)
    assert GridParams().style == "scaled"
    assert len(boxes) == 102
    assert 70 <= len(boxes) <= 110
    assert all(b.is_valid() for b in boxes)
    # the largest scale reaches most of the canvas
    assert max(b.area for b in boxes) >= 0.7


def test_scaled_grid_retention_rule():
    loose = grid_proposals(1.0, GridParams(min_retained=0.5))
    assert len(loose) == 204
    assert len(grid_proposals(1.0)) < len(loose)


def test_scaled_grid_is_valid_and_unique():
    boxes = grid_proposals(4 / 3, GridParams(style="scaled"))
    assert boxes
    assert all(b.is_valid() for b in boxes)
    assert len({tuple(round(v, 9) for v in b.to_json()) for b in boxes}) == len(boxes)


def test_grid_rejects_unknown_style():
    with pytest.raises(DatasetError):
        grid_proposals(1.0, GridParams(style="radial"))


def test_ideal_crop_covers_the_queried_objects():
    dog = Box(0.3, 0.4, 0.2, 0.2)
    scene = SceneSpec(canvas=(96, 96), objects=(SceneObject("dog", dog), SceneObject("cat", Box(0.8, 0.8, 0.1, 0.1))))
    crop = ideal_crop(scene, ["dog"])
    assert crop.is_valid()
    assert crop.x1 <= dog.x1 and crop.y1 <= dog.y1 and crop.x2 >= dog.x2 and crop.y2 >= dog.y2
    with pytest.raises(DatasetError):
        ideal_crop(scene, ["boat"])


def test_annotator_boxes_stay_close():
    ideal = Box(0.5, 0.5, 0.4, 0.5)
    boxes = annotator_boxes(ideal, np.random.default_rng(3), 8)
    assert len(boxes) == 8
    assert all(iou(b, ideal) >= 0.7 for b in boxes)
    assert max(iou(b, ideal) for b in boxes) >= 0.9


def test_generation_is_byte_deterministic(tmp_path):
    params = GeneratorParams(canvas=32)
    generate_synthetic(tmp_path / "a", {"train": 4, "test": 2}, CONCEPTS, seed=11, params=params)
    generate_synthetic(tmp_path / "b", {"train": 4, "test": 2}, CONCEPTS, seed=11, params=params)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_samples_do_not_depend_on_split_size(tmp_path):
    params = GeneratorParams(canvas=32, write_images=False)
    generate_synthetic(tmp_path / "small", {"train": 2}, CONCEPTS, seed=3, params=params)
    generate_synthetic(tmp_path / "large", {"train": 5}, CONCEPTS, seed=3, params=params)
    for name in ("train-00000.json", "train-00001.json"):
        assert (tmp_path / "small/train" / name).read_bytes() == (tmp_path / "large/train" / name).read_bytes()


def test_generated_samples_load_for_training(dataset_dir, train_samples):
    manifest = load_manifest(dataset_dir / "train")
    assert manifest.schema is SchemaKind.BOTH
    assert manifest.generator["seed"] == 7
    assert len(train_samples) == 12
    for sample in train_samples:
        ann = sample.annotations[0]
        assert ann.high_quality(4.0)
        assert len(ann.proposals) >= 102
        assert len(ann.annotator_boxes) == 8
        assert max(p.score for p in ann.proposals) == pytest.approx(5.0)
        assert (dataset_dir / "train" / sample.image_path).is_file()


def test_iter_split_manifests(dataset_dir):
    assert [m.split for m in iter_split_manifests(dataset_dir)] == ["train", "val", "test"]


def test_dense_only_schema(tmp_path):
    params = GeneratorParams(canvas=32, schema=SchemaKind.DENSE, write_images=False)
    generate_synthetic(tmp_path, {"test": 2}, CONCEPTS, seed=1, params=params)
    samples = load_samples(load_manifest(tmp_path / "test"))
    assert all(not a.annotator_boxes for s in samples for a in s.annotations)


def test_generator_reports_every_problem(tmp_path):
    with pytest.raises(DatasetError) as err:
        generate_synthetic(tmp_path, {"train": -1, "extra": 2}, CONCEPTS[:3], seed=-2)
    message = err.value.message
    for fragment in ("at least 5 concepts", "negative size", "unknown split", "seed must be"):
        assert fragment in message


def test_missing_manifest_is_a_dataset_error(tmp_path):
    with pytest.raises(DatasetError):
        load_manifest(tmp_path / "nowhere")


def _sample_doc(**annotation) -> dict:
    return {
        "id": "s1",
        "scene_spec": {"canvas": [32, 32], "objects": [{"concept": "dog", "box": [0.5, 0.5, 0.2, 0.2]}]},
        "annotations": [{"text": "a dog", **annotation}],
    }


def test_sample_score_out_of_range_is_rejected():
    sample = AnnotatedSample.from_json(_sample_doc(proposals=[{"box": [0.5, 0.5, 0.5, 0.5], "score": 6}]))
    with pytest.raises(ValidationError) as err:
        sample.validate(SchemaKind.DENSE)
    assert err.value.sample_id == "s1"
    assert "score" in err.value.field


def test_schema_requires_its_fields():
    sample = AnnotatedSample.from_json(_sample_doc(proposals=[{"box": [0.5, 0.5, 0.5, 0.5], "score": 3}]))
    sample.validate(SchemaKind.DENSE)
    with pytest.raises(ValidationError, match="annotator"):
        sample.validate(SchemaKind.BOTH)
    with pytest.raises(ValidationError, match="no proposal scores"):
        sample.validate(SchemaKind.DENSE, training=True)


def test_malformed_box_names_the_field():
    with pytest.raises(ValidationError) as err:
        AnnotatedSample.from_json(_sample_doc(annotator_boxes=[[0.5, 0.5]]))
    assert err.value.field == "texts[0].annotator_boxes[0]"


def test_xyxy_boxes_are_accepted():
    doc = _sample_doc(annotator_boxes=[{"format": "xyxy", "box": [0.1, 0.1, 0.6, 0.7]}])
    sample = AnnotatedSample.from_json(doc).validate(SchemaKind.ANNOTATORS)
    assert sample.annotations[0].annotator_boxes[0].corners() == pytest.approx((0.1, 0.1, 0.6, 0.7))


def test_duplicate_ids_in_manifest(tmp_path):
    split = tmp_path / "test"
    split.mkdir()
    doc = _sample_doc(annotator_boxes=[[0.5, 0.5, 0.3, 0.3]])
    for name in ("a.json", "b.json"):
        (split / name).write_text(json.dumps(doc), encoding="utf-8")
    (split / "manifest.json").write_text(
        json.dumps({"schema": "annotator-boxes", "split": "test", "samples": ["a.json", "b.json"]}), encoding="utf-8"
    )
    with pytest.raises(ValidationError, match="duplicate"):
        load_samples(load_manifest(split))


def test_missing_image_is_reported(tmp_path):
    split = tmp_path / "test"
    split.mkdir()
    doc = {**_sample_doc(annotator_boxes=[[0.5, 0.5, 0.3, 0.3]]), "image": "images/s1.ppm"}
    (split / "s1.json").write_text(json.dumps(doc), encoding="utf-8")
    (split / "manifest.json").write_text(
        json.dumps({"schema": "annotators", "split": "test", "samples": ["s1.json"]}), encoding="utf-8"
    )
    with pytest.raises(ValidationError, match="does not exist"):
        load_samples(load_manifest(split))


def test_supervision_falls_back_to_annotator_boxes():
    box = Box(0.5, 0.5, 0.3, 0.3)
    ann = TextAnnotation("a dog", annotator_boxes=(box,))
    assert ann.supervision() == [Proposal(box, 5.0)]
