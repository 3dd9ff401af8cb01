import numpy as np
import pytest

from cropforge.boxgeom import FULL_CANVAS, Box, clamp_box
from cropforge.decoder import (
    DecoderConfig,
    DecoderModel,
    closed_form_parameter_count,
    load_model,
    parameter_count,
    predict,
    save_model,
    zero_model,
)
from cropforge.errors import CheckpointError, ConfigError, QueryError, ShapeError
from cropforge.models.core import SceneObject, SceneSpec
from cropforge.querying import QueryMode, Selection, build_queries


def selection_of(tokens: np.ndarray, boxes: list[Box]) -> Selection:
    return Selection(
        token_indices=list(range(len(boxes))),
        tokens=tokens,
        boxes=boxes,
        similarities=np.ones(len(boxes)),
    )


def test_full_scale_parameter_count():
    cfg = DecoderConfig(num_queries=90, num_layers=6, model_dim=512, num_heads=8, mlp_hidden=2048)
    assert parameter_count(cfg) == closed_form_parameter_count(cfg) == 25_799_173


def test_desk_parameter_count_matches_closed_form(tiny_decoder):
    for cfg in (DecoderConfig(), tiny_decoder, DecoderConfig(num_layers=0)):
        assert DecoderModel(cfg).num_parameters() == closed_form_parameter_count(cfg)


def test_config_validation_lists_every_problem():
    with pytest.raises(ConfigError) as err:
        DecoderConfig(num_queries=0, model_dim=10, num_heads=4, activation="swish").validate()
    assert len(err.value.problems) == 3


def test_query_tokens_start_on_image_token_scale():
    cfg = DecoderConfig()
    queries = DecoderModel(cfg, seed=7).params["query_tokens"].data
    assert 0.45 < queries.std() < 0.55
    # queries stay apart relative to the shared mean token, which has norm 4 here
    mean = np.full((1, 64), 0.5)
    q = DecoderModel(cfg, seed=7).build_query(selection_of(mean, [Box(0.5, 0.5, 0.2, 0.2)])).data
    gaps = np.linalg.norm(q[:, None, :] - q[None, :, :], axis=-1)[np.triu_indices(cfg.num_queries, 1)]
    assert gaps.min() > 0.5 * np.linalg.norm(mean)


def test_query_init_std_must_be_positive():
    with pytest.raises(ConfigError) as err:
        DecoderConfig(query_init_std=0.0).validate()
    assert any("query_init_std" in p for p in err.value.problems)


def test_build_query_singleton_and_mean(tiny_decoder):
    model = DecoderModel(tiny_decoder, seed=1)
    v = np.linspace(-1.0, 1.0, 16)
    box = Box(0.5, 0.5, 0.2, 0.2)
    one = model.build_query(selection_of(v[None, :], [box]))
    two = model.build_query(selection_of(np.stack([v, v]), [box, box]))
    np.testing.assert_allclose(one.data, model.params["query_tokens"].data + v[None, :])
    assert np.array_equal(one.data, two.data)


def test_build_query_base_mode_is_pure_queries(tiny_decoder):
    model = DecoderModel(tiny_decoder, seed=1)
    assert np.array_equal(model.build_query(None).data, model.params["query_tokens"].data)


def test_zero_model_predicts_union_box(tiny_decoder, encoder):
    model = zero_model(tiny_decoder)
    scene = SceneSpec(canvas=(48, 48), objects=(SceneObject("dog", Box(0.3, 0.4, 0.2, 0.3)),))
    enc = encoder.encode_image(scene)
    union = Box(0.35, 0.45, 0.3, 0.3)
    out = model.decode(model.build_query(None), enc.image_tokens, enc.positional, union)
    assert np.all(out.offsets.data == 0.0)
    assert np.all(out.scores.data == 0.5)
    assert all(b == union for b in out.pred_boxes)


def test_untrained_model_starts_at_union_box(tiny_decoder, encoder):
    model = DecoderModel(tiny_decoder, seed=3)
    scene = SceneSpec(canvas=(48, 48), objects=(SceneObject("dog", Box(0.3, 0.4, 0.2, 0.3)),))
    out = model.forward(encoder.encode_image(scene), None)
    assert out.union_box == FULL_CANVAS
    assert all(b == FULL_CANVAS for b in out.pred_boxes)
    np.testing.assert_allclose(out.scores.data, 0.5)


def test_decode_shapes_and_bounds(tiny_decoder):
    rng = np.random.default_rng(0)
    params = {k: rng.normal(0.0, 1.0, size=v.shape) for k, v in DecoderModel(tiny_decoder).params.items()}
    model = DecoderModel(tiny_decoder, params=params)
    for n in (1, 5, 36):
        out = model.decode(model.build_query(None), rng.normal(size=(n, 16)), rng.normal(size=(n, 16)), FULL_CANVAS)
        assert out.offsets.shape == (4, 4)
        assert out.scores.shape == (4,)
        assert np.all(np.abs(out.offsets.data) <= tiny_decoder.offset_scale)
        assert np.all((out.scores.data > 0.0) & (out.scores.data < 1.0))
        assert all(b.is_valid() for b in out.pred_boxes)


def test_decode_rejects_bad_widths(tiny_decoder):
    model = DecoderModel(tiny_decoder)
    with pytest.raises(ShapeError):
        model.decode(model.build_query(None), np.zeros((4, 8)), None, FULL_CANVAS)


def test_decode_is_token_permutation_equivariant(tiny_decoder):
    rng = np.random.default_rng(5)
    model = DecoderModel(tiny_decoder, seed=5)
    tokens = rng.normal(size=(9, 16))
    pos = rng.normal(size=(9, 16))
    perm = rng.permutation(9)
    q = model.build_query(None)
    a = model.decode(q, tokens, pos, FULL_CANVAS)
    b = model.decode(q, tokens[perm], pos[perm], FULL_CANVAS)
    np.testing.assert_allclose(a.offsets.data, b.offsets.data, atol=1e-9)
    np.testing.assert_allclose(a.scores.data, b.scores.data, atol=1e-9)


def test_predict_ranking_and_top_k(tiny_decoder, encoder):
    rng = np.random.default_rng(2)
    params = {k: rng.normal(0.0, 0.5, size=v.shape) for k, v in DecoderModel(tiny_decoder).params.items()}
    model = DecoderModel(tiny_decoder, params=params)
    scene = SceneSpec(canvas=(48, 48), objects=(SceneObject("dog", Box(0.3, 0.4, 0.2, 0.3)),))
    enc = encoder.encode_image(scene)
    queries = build_queries(QueryMode.BOTH, encoder, text="a dog")
    top = predict(model, enc, queries, 1)
    ranked = predict(model, enc, queries, 4)
    assert len(top) == 1 and len(ranked) == 4
    assert top[0] == ranked[0]
    scores = [s for _, s in ranked]
    assert scores == sorted(scores, reverse=True)
    assert predict(model, enc, queries, 4) == ranked
    with pytest.raises(QueryError):
        predict(model, enc, queries, 5)


def test_checkpoint_round_trip(tmp_path, tiny_decoder):
    model = DecoderModel(tiny_decoder, seed=4)
    path = save_model(tmp_path / "m.json", model, {"epoch": 3})
    loaded, ckpt = load_model(path, expected=tiny_decoder)
    assert ckpt.metadata["epoch"] == 3
    for name, value in model.state_dict().items():
        assert np.array_equal(loaded.params[name].data, value)


def test_checkpoint_config_mismatch(tmp_path, tiny_decoder):
    path = save_model(tmp_path / "m.json", DecoderModel(tiny_decoder))
    with pytest.raises(CheckpointError):
        load_model(path, expected=DecoderConfig())


def test_loss_boxes_match_clamped_boxes_inside_the_canvas(tiny_decoder, encoder):
    model = zero_model(tiny_decoder)
    # offsets of +0.2 on the center x and the width
    model.params["offset_head.b_3"].data = np.arctanh(np.array([0.4, 0.0, 0.4, 0.0]))
    scene = SceneSpec(canvas=(48, 48), objects=(SceneObject("dog", Box(0.3, 0.4, 0.2, 0.3)),))
    enc = encoder.encode_image(scene)
    q = model.build_query(None)

    inside = model.decode(q, enc.image_tokens, enc.positional, Box(0.4, 0.5, 0.3, 0.3))
    for row, box in zip(inside.pred_tensor.data, inside.pred_boxes):
        np.testing.assert_allclose(row, box.as_array(), atol=1e-12)
        np.testing.assert_allclose(row, [0.6, 0.5, 0.5, 0.3], atol=1e-12)

    # past the right border only pred_boxes are clamped
    edge = model.decode(q, enc.image_tokens, enc.positional, Box(0.8, 0.5, 0.3, 0.3))
    for row, box in zip(edge.pred_tensor.data, edge.pred_boxes):
        np.testing.assert_allclose(row, [1.0, 0.5, 0.5, 0.3], atol=1e-12)
        assert box.x2 == pytest.approx(1.0) and box.x1 == pytest.approx(0.75)
        assert box == clamp_box(Box.from_array(row))
