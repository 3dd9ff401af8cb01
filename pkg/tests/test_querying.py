import numpy as np
import pytest

from cropforge.boxgeom import Box
from cropforge.encoder import ConceptVocabulary, EncoderOutput, EncoderParams, SyntheticEncoder, embed_text
from cropforge.errors import EncoderError, QueryError
from cropforge.models.core import SceneObject, SceneSpec
from cropforge.querying import (
    QueryMode,
    QuerySet,
    Selection,
    build_queries,
    default_stopwords,
    extract_keywords,
    filter_training_selection,
    match,
)


@pytest.fixture
def fig_encoder() -> SyntheticEncoder:
    vocab = ConceptVocabulary(["woman", "dog", "boat", "plate"], dim=32, seed=7)
    return SyntheticEncoder(vocab, EncoderParams(grid_side=6, dim=32, noise=0.0, seed=7))


def fake_output(class_embeddings: np.ndarray, grid_side: int) -> EncoderOutput:
    n = grid_side * grid_side
    boxes = [Box.from_corners((i % grid_side) / grid_side, (i // grid_side) / grid_side, (i % grid_side + 1) / grid_side, (i // grid_side + 1) / grid_side) for i in range(n)]
    return EncoderOutput(
        image_tokens=np.arange(n * 4, dtype=float).reshape(n, 4),
        class_embeddings=class_embeddings,
        initial_boxes=boxes,
        grid_side=grid_side,
        positional=np.zeros((n, 4)),
    )


def test_stopwords_file_is_shipped():
    stop = default_stopwords()
    assert 40 <= len(stop) <= 70
    assert {"a", "the", "and", "on"} <= stop


def test_extract_keywords_examples():
    lexicon = {"woman", "dog", "boat", "plate"}
    assert extract_keywords("a woman and three dogs on the boat", lexicon) == ["woman", "dog", "boat"]
    assert extract_keywords("the the the", lexicon) == []
    assert extract_keywords("Dogs dogs DOG", lexicon) == ["dog"]


def test_build_queries_sizes(fig_encoder):
    assert build_queries("main", fig_encoder, text="anything at all").size == 1
    assert build_queries(QueryMode.BOTH, fig_encoder, text="dog on boat").size == 3
    assert build_queries("none", fig_encoder).size == 0


def test_build_queries_both_deduplicates(fig_encoder):
    # the full text embeds to the dog vector itself
    qs = build_queries("both", fig_encoder, text="dog")
    assert qs.size == 1
    assert qs.source_strings == ["dog"]


def test_build_queries_key_without_keywords(fig_encoder):
    with pytest.raises(QueryError):
        build_queries("key", fig_encoder, text="a lovely afternoon")


def test_build_queries_image(fig_encoder):
    scene = SceneSpec(canvas=(60, 60), objects=(SceneObject("boat", Box(0.5, 0.5, 0.5, 0.5)),))
    qs = build_queries("image", fig_encoder, query_image=scene)
    assert qs.size == 1 and qs.source_strings == []
    with pytest.raises(EncoderError):
        build_queries("image", fig_encoder, query_image=SceneSpec(canvas=(60, 60)))


def test_query_mode_parse_rejects_unknown():
    with pytest.raises(QueryError):
        QueryMode.parse("sideways")


def test_match_exact_row():
    rng = np.random.default_rng(1)
    emb = rng.normal(size=(9, 4))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    enc = fake_output(emb, 3)
    sel = match(QuerySet(QueryMode.MAIN, emb[[7]]), enc)
    assert sel.token_indices == [7]
    assert sel.similarities[0] == pytest.approx(1.0)
    assert sel.boxes[0] == enc.initial_boxes[7]
    assert np.array_equal(sel.tokens[0], enc.image_tokens[7])


def test_match_unique_argmax_and_ties():
    emb = np.zeros((16, 4))
    emb[:, 1] = 1.0
    emb[3] = [0.9, np.sqrt(1 - 0.81), 0.0, 0.0]
    enc = fake_output(emb, 4)
    q = np.array([[1.0, 0.0, 0.0, 0.0]])
    assert match(QuerySet(QueryMode.MAIN, q), enc).token_indices == [3]

    tied = np.zeros((16, 4))
    tied[:, 2] = 1.0
    tied[2] = tied[9] = [1.0, 0.0, 0.0, 0.0]
    assert match(QuerySet(QueryMode.MAIN, q), fake_output(tied, 4)).token_indices == [2]


def test_match_is_scale_invariant():
    rng = np.random.default_rng(2)
    emb = rng.normal(size=(9, 4))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    enc = fake_output(emb, 3)
    q = rng.normal(size=(3, 4))
    assert match(QuerySet(QueryMode.BOTH, q), enc).token_indices == match(QuerySet(QueryMode.BOTH, 2.0 * q), enc).token_indices


def test_match_needs_queries():
    enc = fake_output(np.eye(4)[[0, 1, 2, 3]], 2)
    with pytest.raises(QueryError):
        match(QuerySet(QueryMode.NONE, np.zeros((0, 4))), enc)


def test_end_to_end_grounding(fig_encoder):
    dog = Box.from_corners(0.0, 0.0, 0.5, 0.5)
    boat = Box.from_corners(0.5, 0.5, 1.0, 1.0)
    scene = SceneSpec(canvas=(60, 60), objects=(SceneObject("dog", dog), SceneObject("boat", boat)))
    enc = fig_encoder.encode_image(scene)
    sel = match(QuerySet(QueryMode.KEY, np.stack([embed_text("boat", fig_encoder.vocab)])), enc)
    assert sel.boxes == [boat]


def selection(boxes: list[Box], sims: list[float]) -> Selection:
    return Selection(
        token_indices=list(range(len(boxes))),
        tokens=np.zeros((len(boxes), 4)),
        boxes=boxes,
        similarities=np.array(sims),
    )


def test_filter_passes_in_cell_boxes():
    enc = fake_output(np.eye(4)[np.zeros(36, dtype=int)], 6)
    region = Box.from_corners(0.0, 0.0, 0.5, 0.5)
    best = Box(0.25, 0.25, 0.2, 0.2)
    sel = selection([Box(0.25, 0.25, 0.3, 0.3), Box(0.2, 0.2, 0.4, 0.4)], [0.9, 0.8])
    out = filter_training_selection(sel, best, region, enc)
    assert out.boxes == sel.boxes and not out.fallback


def test_filter_drops_low_coverage_box():
    enc = fake_output(np.eye(4)[np.zeros(36, dtype=int)], 6)
    region = Box.from_corners(0.0, 0.0, 0.5, 0.5)
    best = Box.from_corners(0.1, 0.1, 0.3, 0.3)
    covering = Box.from_corners(0.1, 0.1, 0.3, 0.3)
    partial = Box.from_corners(0.1, 0.1, 0.18, 0.3)  # 0.4 of best's area
    out = filter_training_selection(selection([covering, partial], [0.5, 0.9]), best, region, enc)
    assert out.boxes == [covering]


def test_filter_keeps_best_in_cell_when_all_dropped():
    enc = fake_output(np.eye(4)[np.zeros(36, dtype=int)], 6)
    region = Box.from_corners(0.0, 0.0, 0.5, 0.5)
    best = Box.from_corners(0.3, 0.3, 0.45, 0.45)
    sel = selection([Box(0.1, 0.1, 0.05, 0.05), Box(0.15, 0.1, 0.05, 0.05), Box(0.8, 0.8, 0.1, 0.1)], [0.4, 0.7, 0.99])
    out = filter_training_selection(sel, best, region, enc)
    assert out.token_indices == [1] and not out.fallback


def test_filter_falls_back_to_target_cell():
    enc = fake_output(np.eye(4)[np.zeros(36, dtype=int)], 6)
    region = Box.from_corners(0.0, 0.5, 0.5, 1.0)
    sel = selection([Box(0.75, 0.25, 0.2, 0.2), Box(0.8, 0.8, 0.2, 0.2)], [0.9, 0.9])
    out = filter_training_selection(sel, Box(0.25, 0.75, 0.2, 0.2), region, enc)
    assert len(out) == 1 and out.fallback
    assert out.boxes == [region]
    assert out.token_indices == [enc.token_at(0.25, 0.75)]


def test_filter_drops_planted_cross_cell_duplicate():
    rng = np.random.default_rng(12)
    enc = fake_output(np.eye(4)[np.zeros(36, dtype=int)], 6)
    for _ in range(200):
        grid = int(rng.integers(2, 4))
        row, col = int(rng.integers(grid)), int(rng.integers(grid))
        region = Box.from_corners(col / grid, row / grid, (col + 1) / grid, (row + 1) / grid)
        local = Box(float(rng.uniform(0.3, 0.7)), float(rng.uniform(0.3, 0.7)), 0.3, 0.3)
        target = Box(region.x1 + local.cx / grid, region.y1 + local.cy / grid, local.w / grid, local.h / grid)
        other_col = (col + 1) % grid
        twin = Box(target.cx + (other_col - col) / grid, target.cy, target.w, target.h)
        out = filter_training_selection(selection([twin, target], [0.95, 0.9]), target, region, enc)
        assert out.boxes == [target]
