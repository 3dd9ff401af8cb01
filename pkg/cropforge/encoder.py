"""Synthetic stand-in for a frozen vision-language detector.

The encoder exposes the interface the cropping head consumes (a G x G grid of
image tokens, unit-norm classification embeddings and one initial box per
token) and computes it from scene metadata instead of pixels. Everything is a
pure function of (scene, seed), so the only learned component downstream is
the decoder.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from PIL import Image

from .boxgeom import Box, intersection_area
from .errors import EncoderError
from .models.core import SceneSpec

BACKGROUND_KEY = "__background__"
MAX_CONCEPT_COS = 0.3

_WORD = re.compile(r"[a-z0-9]+")


def _hash_int(*parts: object) -> int:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _unit(seed: int, key: str, dim: int, tweak: int = 0) -> np.ndarray:
    rng = np.random.default_rng(_hash_int(seed, key, tweak))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def _normalize(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise EncoderError("cannot normalize a zero vector")
    return v / norm


def tokenize(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def fold_plural(token: str, lexicon: Iterable[str]) -> str:
    """Map a plural surface form onto a singular lexicon entry when one exists."""
    if token in lexicon:
        return token
    if len(token) > 1 and token.endswith("s") and token[:-1] in lexicon:
        return token[:-1]
    return token


class ConceptVocabulary:
    """Deterministic unit embeddings for concept ids, plus a reserved background vector.

    Distinct vectors keep |cos| <= 0.3 whenever ``dim >= 32``; a vector that
    violates the bound is regenerated with the next tweak counter.
    """

    def __init__(self, concepts: Iterable[str], dim: int = 64, seed: int = 7, max_cos: float = MAX_CONCEPT_COS) -> None:
        self.dim = dim
        self.seed = seed
        self.max_cos = max_cos
        self.concepts: list[str] = list(dict.fromkeys(c.strip().lower() for c in concepts if c and c.strip()))
        self._lexicon = frozenset(self.concepts)
        accepted: list[np.ndarray] = []
        self.background = self._separated(BACKGROUND_KEY, accepted)
        accepted.append(self.background)
        self._vectors: dict[str, np.ndarray] = {}
        for concept in self.concepts:
            vec = self._separated(f"concept:{concept}", accepted)
            self._vectors[concept] = vec
            accepted.append(vec)

    def _separated(self, key: str, others: Sequence[np.ndarray], limit: int = 1000) -> np.ndarray:
        best, best_cos = None, math.inf
        for tweak in range(limit):
            vec = _unit(self.seed, key, self.dim, tweak)
            if self.dim < 32 or not others:
                return vec
            worst = max(abs(float(vec @ o)) for o in others)
            if worst <= self.max_cos:
                return vec
            if worst < best_cos:
                best, best_cos = vec, worst
        return best  # type: ignore[return-value]

    @classmethod
    def from_file(cls, path: Union[str, Path], dim: int = 64, seed: int = 7) -> "ConceptVocabulary":
        path = Path(path)
        if not path.is_file():
            raise EncoderError(f"vocabulary file not found: {path}")
        lines = path.read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln.strip() and not ln.lstrip().startswith("#")], dim=dim, seed=seed)

    @property
    def lexicon(self) -> frozenset[str]:
        return self._lexicon

    def __contains__(self, concept: str) -> bool:
        return concept in self._lexicon

    def __len__(self) -> int:
        return len(self.concepts)

    def vector(self, concept: str) -> np.ndarray:
        try:
            return self._vectors[concept]
        except KeyError:
            raise EncoderError(f"unknown concept {concept!r}") from None

    def unknown_vector(self, text: str) -> np.ndarray:
        others = [self.background, *self._vectors.values()]
        return self._separated(f"text:{text}", others)

    def to_json(self) -> dict:
        return {"concepts": list(self.concepts), "dim": self.dim, "seed": self.seed}

    @classmethod
    def from_json(cls, doc: dict) -> "ConceptVocabulary":
        return cls(doc["concepts"], dim=int(doc["dim"]), seed=int(doc["seed"]))


@dataclass(frozen=True)
class EncoderParams:
    grid_side: int = 12
    dim: int = 64
    noise: float = 0.05
    seed: int = 7

    def problems(self) -> list[str]:
        out = []
        if self.grid_side < 1:
            out.append(f"encoder.grid_side must be >= 1, got {self.grid_side}")
        if self.dim < 4 or self.dim % 4:
            out.append(f"encoder.dim must be a positive multiple of 4, got {self.dim}")
        if not 0.0 <= self.noise <= 0.05:
            out.append(f"encoder.noise must lie in [0, 0.05], got {self.noise}")
        return out


@dataclass
class EncoderOutput:
    image_tokens: np.ndarray
    class_embeddings: np.ndarray
    initial_boxes: list[Box]
    grid_side: int
    positional: np.ndarray
    object_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def num_tokens(self) -> int:
        return self.grid_side * self.grid_side

    def token_cell(self, index: int) -> Box:
        return token_cell(self.grid_side, index)

    def token_at(self, x: float, y: float) -> int:
        g = self.grid_side
        col = min(max(int(math.floor(x * g)), 0), g - 1)
        row = min(max(int(math.floor(y * g)), 0), g - 1)
        return row * g + col

    def validate(self) -> "EncoderOutput":
        n = self.num_tokens
        if self.image_tokens.shape[0] != n or self.class_embeddings.shape[0] != n or len(self.initial_boxes) != n:
            raise EncoderError(f"encoder output does not hold {n} tokens")
        norms = np.linalg.norm(self.class_embeddings, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise EncoderError("classification embeddings must be unit norm")
        if not all(b.is_valid() for b in self.initial_boxes):
            raise EncoderError("initial boxes must lie within the unit canvas")
        return self


def token_cell(grid_side: int, index: int) -> Box:
    row, col = divmod(index, grid_side)
    g = float(grid_side)
    return Box.from_corners(col / g, row / g, (col + 1) / g, (row + 1) / g)


def sinusoidal_2d(grid_side: int, dim: int) -> np.ndarray:
    """Row-major (G*G, dim) code: first half encodes the column, second half the row."""
    half = dim // 2
    freqs = 1.0 / (100.0 ** (np.arange(half // 2) * 2.0 / half))
    rows, cols = np.divmod(np.arange(grid_side * grid_side), grid_side)

    def encode(pos: np.ndarray) -> np.ndarray:
        angles = pos[:, None].astype(np.float64) * freqs[None, :]
        out = np.empty((pos.shape[0], half))
        out[:, 0::2] = np.sin(angles)
        out[:, 1::2] = np.cos(angles)
        return out

    return np.concatenate([encode(cols), encode(rows)], axis=1)


@dataclass
class RenderedImage:
    pixels: np.ndarray
    scene: Optional[SceneSpec] = None

    @property
    def size(self) -> tuple[int, int]:
        return int(self.pixels.shape[1]), int(self.pixels.shape[0])


def round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def pixel_rect(box: Box, width: int, height: int, min_size: int = 0) -> tuple[int, int, int, int]:
    """Corner pixels (x1, y1, x2, y2), x2/y2 exclusive, rounded half-up and kept on the canvas."""
    x1 = min(max(round_half_up(box.x1 * width), 0), width)
    y1 = min(max(round_half_up(box.y1 * height), 0), height)
    x2 = min(max(round_half_up(box.x2 * width), x1), width)
    y2 = min(max(round_half_up(box.y2 * height), y1), height)
    if min_size:
        if x2 - x1 < min_size:
            x1 = min(x1, width - min_size)
            x2 = x1 + min_size
        if y2 - y1 < min_size:
            y1 = min(y1, height - min_size)
            y2 = y1 + min_size
    return x1, y1, x2, y2


def render_scene(scene: SceneSpec) -> RenderedImage:
    width, height = scene.canvas
    if width <= 0 or height <= 0:
        raise EncoderError(f"cannot render a {width}x{height} canvas")
    pixels = np.empty((height, width, 3), dtype=np.uint8)
    pixels[:, :] = scene.background
    # later objects paint over earlier ones
    for obj in scene.objects:
        x1, y1, x2, y2 = pixel_rect(obj.box, width, height)
        pixels[y1:y2, x1:x2] = obj.color
    return RenderedImage(pixels=pixels, scene=scene)


def write_ppm(path: Union[str, Path], pixels: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8), mode="RGB").save(path, format="PPM")
    return path


def read_image(path: Union[str, Path], scene: Optional[SceneSpec] = None) -> RenderedImage:
    path = Path(path)
    if not path.is_file():
        raise EncoderError(f"image not found: {path}")
    with Image.open(path) as img:
        pixels = np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
    return RenderedImage(pixels=pixels, scene=scene)


class SyntheticEncoder:
    def __init__(self, vocab: ConceptVocabulary, params: Optional[EncoderParams] = None) -> None:
        params = params or EncoderParams(dim=vocab.dim)
        if params.dim != vocab.dim:
            raise EncoderError(f"encoder dim {params.dim} does not match vocabulary dim {vocab.dim}")
        self.vocab = vocab
        self.params = params
        self.positional = sinusoidal_2d(params.grid_side, params.dim)
        rng = np.random.default_rng(_hash_int(params.seed, "mixing"))
        self.mixing = rng.standard_normal((2 * params.dim, params.dim)) / math.sqrt(2 * params.dim)
        self._cells = [token_cell(params.grid_side, n) for n in range(params.grid_side**2)]

    def _scene(self, source: Union[SceneSpec, RenderedImage]) -> SceneSpec:
        if isinstance(source, SceneSpec):
            return source.validate()
        if isinstance(source, RenderedImage):
            if source.scene is None:
                raise EncoderError("synthetic encoder requires scene metadata")
            return source.scene.validate()
        raise EncoderError(f"cannot encode {type(source).__name__}")

    def encode_image(self, source: Union[SceneSpec, RenderedImage]) -> EncoderOutput:
        scene = self._scene(source)
        g, dim = self.params.grid_side, self.params.dim
        n = g * g
        noise = np.zeros((n, dim))
        if self.params.noise > 0.0:
            rng = np.random.default_rng(_hash_int(self.params.seed, "noise", scene.canonical_json()))
            raw = rng.standard_normal((n, dim))
            noise = raw / np.linalg.norm(raw, axis=1, keepdims=True) * self.params.noise

        class_emb = np.empty((n, dim))
        boxes: list[Box] = []
        mask = np.zeros(n, dtype=bool)
        for idx, cell in enumerate(self._cells):
            covering = [o for o in scene.objects if o.box.contains_point(cell.cx, cell.cy)]
            if not covering:
                class_emb[idx] = self.vocab.background
                boxes.append(cell)
                continue
            mask[idx] = True
            mean = np.mean([self.vocab.vector(o.concept) for o in covering], axis=0)
            class_emb[idx] = _normalize(_normalize(mean) + noise[idx])
            best, best_overlap = covering[0], -1.0
            for obj in covering:
                overlap = intersection_area(obj.box, cell)
                if overlap >= best_overlap:
                    best, best_overlap = obj, overlap
            boxes.append(best.box)

        tokens = np.concatenate([class_emb, self.positional], axis=1) @ self.mixing
        return EncoderOutput(
            image_tokens=tokens,
            class_embeddings=class_emb,
            initial_boxes=boxes,
            grid_side=g,
            positional=self.positional,
            object_mask=mask,
        )

    def embed_text(self, text: str) -> np.ndarray:
        return embed_text(text, self.vocab)

    def embed_query_image(self, query: Union[SceneSpec, RenderedImage]) -> np.ndarray:
        out = self.encode_image(query)
        if not out.object_mask.any():
            raise EncoderError("query image contains no object tokens")
        return _normalize(out.class_embeddings[out.object_mask].mean(axis=0))


def text_concepts(text: str, vocab: ConceptVocabulary) -> list[str]:
    found: list[str] = []
    for token in tokenize(text):
        folded = fold_plural(token, vocab.lexicon)
        if folded in vocab and folded not in found:
            found.append(folded)
    return found


def embed_text(text: str, vocab: ConceptVocabulary) -> np.ndarray:
    if not text or not text.strip():
        raise EncoderError("cannot embed empty text")
    concepts = text_concepts(text, vocab)
    if not concepts:
        return vocab.unknown_vector(" ".join(tokenize(text)) or text.strip().lower())
    if len(concepts) == 1:
        return vocab.vector(concepts[0]).copy()
    return _normalize(np.mean([vocab.vector(c) for c in concepts], axis=0))
