from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

from .boxgeom import Box, intersection_area
from .encoder import EncoderOutput, RenderedImage, SyntheticEncoder, embed_text, fold_plural, tokenize
from .errors import QueryError
from .models.core import SceneSpec

DATA_DIR = Path(__file__).resolve().parent / "data"
STOPWORDS_PATH = DATA_DIR / "stopwords.txt"
VOCAB_PATH = DATA_DIR / "vocab.txt"

# Share of the best ground-truth box a selected box has to cover to survive filtering.
MIN_GT_COVERAGE = 0.5


class QueryMode(str, Enum):
    BOTH = "both"
    MAIN = "main"
    KEY = "key"
    NONE = "none"
    IMAGE = "image"

    @classmethod
    def parse(cls, value: Union[str, "QueryMode"]) -> "QueryMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            choices = ", ".join(m.value for m in cls)
            raise QueryError(f"unknown query mode {value!r} (expected one of {choices})") from None


def load_wordlist(path: Union[str, Path]) -> list[str]:
    path = Path(path)
    if not path.is_file():
        raise QueryError(f"word list not found: {path}")
    words = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip().lower()
        if line and not line.startswith("#"):
            words.append(line)
    return words


@lru_cache(maxsize=None)
def default_stopwords() -> frozenset[str]:
    return frozenset(load_wordlist(STOPWORDS_PATH))


def extract_keywords(text: str, lexicon: Iterable[str], stopwords: Optional[Iterable[str]] = None) -> list[str]:
    lexicon = frozenset(lexicon)
    stop = default_stopwords() if stopwords is None else frozenset(stopwords)
    found: list[str] = []
    for token in tokenize(text):
        if token in stop:
            continue
        folded = fold_plural(token, lexicon)
        if folded in lexicon and folded not in found:
            found.append(folded)
    return found


@dataclass
class QuerySet:
    mode: QueryMode
    embeddings: np.ndarray
    source_strings: list[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return int(self.embeddings.shape[0])


def _dedup(vectors: list[np.ndarray], sources: list[str]) -> tuple[np.ndarray, list[str]]:
    kept: list[np.ndarray] = []
    kept_sources: list[str] = []
    for vec, src in zip(vectors, sources):
        if any(np.array_equal(vec, k) for k in kept):
            continue
        kept.append(vec)
        kept_sources.append(src)
    return np.stack(kept), kept_sources


def build_queries(
    mode: Union[str, QueryMode],
    encoder: SyntheticEncoder,
    text: Optional[str] = None,
    query_image: Optional[Union[SceneSpec, RenderedImage]] = None,
    lexicon: Optional[Iterable[str]] = None,
    stopwords: Optional[Iterable[str]] = None,
) -> QuerySet:
    mode = QueryMode.parse(mode)
    dim = encoder.params.dim
    if mode is QueryMode.NONE:
        return QuerySet(mode, np.zeros((0, dim)), [])
    if mode is QueryMode.IMAGE:
        if query_image is None:
            raise QueryError("image query mode needs a query image")
        return QuerySet(mode, encoder.embed_query_image(query_image)[None, :], [])

    if text is None or not text.strip():
        raise QueryError(f"query mode {mode.value!r} needs a nonempty text")
    lexicon = encoder.vocab.lexicon if lexicon is None else frozenset(lexicon)
    vectors: list[np.ndarray] = []
    sources: list[str] = []
    if mode in (QueryMode.BOTH, QueryMode.MAIN):
        vectors.append(embed_text(text, encoder.vocab))
        sources.append(text)
    if mode in (QueryMode.BOTH, QueryMode.KEY):
        keywords = extract_keywords(text, lexicon, stopwords)
        if mode is QueryMode.KEY and not keywords:
            raise QueryError(f"no keywords found in {text!r}")
        for kw in keywords:
            vectors.append(embed_text(kw, encoder.vocab))
            sources.append(kw)
    embeddings, sources = _dedup(vectors, sources)
    return QuerySet(mode, embeddings, sources)


@dataclass
class Selection:
    token_indices: list[int]
    tokens: np.ndarray
    boxes: list[Box]
    similarities: np.ndarray
    fallback: bool = False

    def __len__(self) -> int:
        return len(self.token_indices)

    def subset(self, keep: list[int]) -> "Selection":
        return Selection(
            token_indices=[self.token_indices[i] for i in keep],
            tokens=self.tokens[keep],
            boxes=[self.boxes[i] for i in keep],
            similarities=self.similarities[keep],
        )


def match(queries: QuerySet, enc: EncoderOutput) -> Selection:
    """Top-1 token per query embedding by cosine similarity; ties go to the lowest index."""
    if queries.size == 0:
        raise QueryError("match needs at least one query embedding; use query mode 'none' for the base variant")
    q = np.asarray(queries.embeddings, dtype=np.float64)
    norms = np.linalg.norm(q, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise QueryError("query embeddings must be nonzero")
    sims = (q / norms) @ enc.class_embeddings.T
    indices = [int(i) for i in np.argmax(sims, axis=1)]
    return Selection(
        token_indices=indices,
        tokens=enc.image_tokens[indices],
        boxes=[enc.initial_boxes[i] for i in indices],
        similarities=sims[np.arange(len(indices)), indices],
    )


def filter_training_selection(sel: Selection, best_gt: Box, target_region: Box, enc: EncoderOutput) -> Selection:
    """Drop boxes belonging to other mosaic cells or covering too little of the best ground truth.

    Never returns an empty selection: it falls back to the best in-cell entry,
    then to the target cell itself (flagged with ``fallback=True``).
    """
    gt_area = best_gt.area
    in_cell = [i for i, b in enumerate(sel.boxes) if target_region.contains_point(b.cx, b.cy)]
    keep = [
        i
        for i in in_cell
        if gt_area > 0.0 and intersection_area(sel.boxes[i], best_gt) / gt_area >= MIN_GT_COVERAGE
    ]
    if keep:
        return sel.subset(keep)
    if in_cell:
        best = max(in_cell, key=lambda i: (sel.similarities[i], -i))
        return sel.subset([best])
    token = enc.token_at(target_region.cx, target_region.cy)
    return Selection(
        token_indices=[token],
        tokens=enc.image_tokens[[token]],
        boxes=[target_region],
        similarities=np.zeros(1),
        fallback=True,
    )
