"""Crop head: learnable queries attend over image tokens and regress offsets from a union box.

Closed-form parameter count for a configuration with M queries, L layers,
width D and MLP hidden size H:

    L * (8 D^2 + 15 D + 2 D H + H)    attention, MLP and pre-norm blocks
    + 2 D                             final norm
    + 2 D^2 + 6 D + 4                 offset head (D -> D -> D -> 4)
    + D + 1                           score head (D -> 1)
    + M D                             query tokens

For M=90, L=6, D=512, H=2048 this is 25,799,173.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import numpy as np

from . import autograd as ag
from .autograd import AdamWState, Checkpoint, Tensor, load_checkpoint, no_grad, save_checkpoint
from .boxgeom import FULL_CANVAS, SIZE_FLOOR, Box, apply_offset, union_box
from .encoder import EncoderOutput
from .errors import CheckpointError, ConfigError, QueryError, ShapeError
from .querying import QuerySet, Selection, match

ACTIVATIONS = ("gelu", "relu")


@dataclass(frozen=True)
class DecoderConfig:
    num_queries: int = 16
    num_layers: int = 2
    model_dim: int = 64
    num_heads: int = 4
    mlp_hidden: int = 128
    offset_scale: float = 0.5
    activation: str = "gelu"
    ln_eps: float = 1e-5
    # on the scale of the image tokens, so queries stay distinct once the selected mean is added
    query_init_std: float = 0.5

    def problems(self) -> list[str]:
        out = []
        if self.num_queries < 1:
            out.append(f"decoder.num_queries must be >= 1, got {self.num_queries}")
        if self.num_layers < 0:
            out.append(f"decoder.num_layers must be >= 0, got {self.num_layers}")
        if self.model_dim < 1:
            out.append(f"decoder.model_dim must be >= 1, got {self.model_dim}")
        if self.num_heads < 1 or self.model_dim % max(self.num_heads, 1):
            out.append(f"decoder.model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}")
        if self.mlp_hidden < 1:
            out.append(f"decoder.mlp_hidden must be >= 1, got {self.mlp_hidden}")
        if not self.offset_scale > 0.0:
            out.append(f"decoder.offset_scale must be positive, got {self.offset_scale}")
        if self.activation not in ACTIVATIONS:
            out.append(f"decoder.activation must be one of {', '.join(ACTIVATIONS)}, got {self.activation!r}")
        if self.ln_eps < 0.0:
            out.append(f"decoder.ln_eps must be >= 0, got {self.ln_eps}")
        if not self.query_init_std > 0.0:
            out.append(f"decoder.query_init_std must be positive, got {self.query_init_std}")
        return out

    def validate(self) -> "DecoderConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "DecoderConfig":
        known = {k: doc[k] for k in cls.__dataclass_fields__ if k in doc}
        unknown = sorted(set(doc) - set(known))
        if unknown:
            raise ConfigError([f"decoder: unknown key {k!r}" for k in unknown])
        return cls(**known)


def parameter_shapes(cfg: DecoderConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.model_dim, cfg.mlp_hidden
    shapes: dict[str, tuple[int, ...]] = {"query_tokens": (cfg.num_queries, d)}
    for layer in range(cfg.num_layers):
        p = f"layers.{layer}"
        for block in ("self_attn", "cross_attn"):
            shapes[f"{p}.{block}.ln_gamma"] = (d,)
            shapes[f"{p}.{block}.ln_beta"] = (d,)
            for proj in ("q", "k", "v", "o"):
                shapes[f"{p}.{block}.w_{proj}"] = (d, d)
                shapes[f"{p}.{block}.b_{proj}"] = (d,)
        shapes[f"{p}.mlp.ln_gamma"] = (d,)
        shapes[f"{p}.mlp.ln_beta"] = (d,)
        shapes[f"{p}.mlp.w_1"] = (d, h)
        shapes[f"{p}.mlp.b_1"] = (h,)
        shapes[f"{p}.mlp.w_2"] = (h, d)
        shapes[f"{p}.mlp.b_2"] = (d,)
    shapes["final.ln_gamma"] = (d,)
    shapes["final.ln_beta"] = (d,)
    shapes["offset_head.w_1"] = (d, d)
    shapes["offset_head.b_1"] = (d,)
    shapes["offset_head.w_2"] = (d, d)
    shapes["offset_head.b_2"] = (d,)
    shapes["offset_head.w_3"] = (d, 4)
    shapes["offset_head.b_3"] = (4,)
    shapes["score_head.w"] = (d, 1)
    shapes["score_head.b"] = (1,)
    return shapes


def parameter_count(cfg: DecoderConfig) -> int:
    return int(sum(math.prod(s) for s in parameter_shapes(cfg).values()))


def closed_form_parameter_count(cfg: DecoderConfig) -> int:
    d, h, m, layers = cfg.model_dim, cfg.mlp_hidden, cfg.num_queries, cfg.num_layers
    return layers * (8 * d * d + 15 * d + 2 * d * h + h) + 2 * d * d + 9 * d + 5 + m * d


# zero-initialised so an untrained head predicts the union box at score 0.5
_ZERO_INIT = ("offset_head.w_3", "offset_head.b_3", "score_head.w", "score_head.b")


def init_parameters(cfg: DecoderConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "query_tokens":
            params[name] = rng.normal(0.0, cfg.query_init_std, size=shape)
        elif name in _ZERO_INIT or leaf.startswith("b_") or leaf == "ln_beta":
            params[name] = np.zeros(shape)
        elif leaf == "ln_gamma":
            params[name] = np.ones(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


@dataclass
class DecoderOutput:
    offsets: Tensor
    scores: Tensor
    union_box: Box
    pred_boxes: list[Box]
    pred_tensor: Tensor

    @property
    def offset_boxes(self) -> list[Box]:
        return [Box.from_array(row) for row in self.offsets.data]

    def ranked(self, top_k: Optional[int] = None) -> list[tuple[Box, float]]:
        scores = self.scores.data
        order = sorted(range(len(scores)), key=lambda m: (-scores[m], m))
        if top_k is not None:
            order = order[:top_k]
        return [(self.pred_boxes[m], float(scores[m])) for m in order]


class DecoderModel:
    def __init__(self, cfg: DecoderConfig, seed: int = 7, params: Optional[Mapping[str, np.ndarray]] = None) -> None:
        self.cfg = cfg.validate()
        self.seed = seed
        initial = init_parameters(cfg, seed) if params is None else params
        self.params: dict[str, Tensor] = {}
        for name, shape in parameter_shapes(cfg).items():
            if name not in initial:
                raise CheckpointError(f"missing decoder parameter {name!r}")
            value = np.asarray(initial[name], dtype=np.float64)
            if value.shape != shape:
                raise CheckpointError(f"parameter {name!r} has shape {value.shape}, expected {shape}")
            self.params[name] = Tensor(value.copy(), requires_grad=True, name=name)
        extra = sorted(set(initial) - set(self.params))
        if extra:
            raise CheckpointError(f"unexpected decoder parameters: {', '.join(extra)}")

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def zero_grad(self) -> None:
        ag.zero_grad(self.params.values())

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (p.grad if p.grad is not None else np.zeros(p.shape)) for k, p in self.params.items()}

    # -- forward pieces ------------------------------------------------------

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        gamma, beta = self.params[f"{prefix}.ln_gamma"], self.params[f"{prefix}.ln_beta"]
        return ag.add(ag.mul(ag.layernorm(x, eps=self.cfg.ln_eps), gamma), beta)

    def _linear(self, x: Tensor, w: str, b: str) -> Tensor:
        return ag.add(ag.matmul(x, self.params[w]), self.params[b])

    def _attention(self, prefix: str, queries: Tensor, keys: Tensor, values: Tensor) -> Tensor:
        q = self._linear(queries, f"{prefix}.w_q", f"{prefix}.b_q")
        k = self._linear(keys, f"{prefix}.w_k", f"{prefix}.b_k")
        v = self._linear(values, f"{prefix}.w_v", f"{prefix}.b_v")
        heads = self.cfg.num_heads
        dh = self.cfg.model_dim // heads
        scale = 1.0 / math.sqrt(dh)
        outs = []
        for h in range(heads):
            cols = list(range(h * dh, (h + 1) * dh))
            qh = ag.index_select(q, cols, axis=1)
            kh = ag.index_select(k, cols, axis=1)
            vh = ag.index_select(v, cols, axis=1)
            attn = ag.softmax(ag.scalar_mul(ag.matmul(qh, ag.transpose(kh)), scale), axis=-1)
            outs.append(ag.matmul(attn, vh))
        merged = outs[0] if heads == 1 else ag.concat(outs, axis=1)
        return self._linear(merged, f"{prefix}.w_o", f"{prefix}.b_o")

    def _act(self, x: Tensor) -> Tensor:
        return ag.gelu(x) if self.cfg.activation == "gelu" else ag.relu(x)

    def build_query(self, sel: Optional[Selection]) -> Tensor:
        """Q[m] = query_tokens[m] + mean of the selected image tokens (zero mean in base mode)."""
        d = self.cfg.model_dim
        if sel is None or len(sel) == 0:
            mean_token = np.zeros(d)
        else:
            tokens = sel.tokens.data if isinstance(sel.tokens, Tensor) else np.asarray(sel.tokens)
            if tokens.ndim != 2 or tokens.shape[1] != d:
                raise ShapeError("build_query", tokens.shape, (len(sel), d), detail="selected tokens")
            mean_token = tokens.mean(axis=0)
        return ag.add(self.params["query_tokens"], mean_token)

    def decode(
        self,
        q: Tensor,
        image_tokens: Union[Tensor, np.ndarray],
        positional: Optional[np.ndarray],
        union: Box,
    ) -> DecoderOutput:
        cfg = self.cfg
        d = cfg.model_dim
        tokens = image_tokens if isinstance(image_tokens, Tensor) else Tensor(image_tokens)
        if q.ndim != 2 or q.shape[1] != d:
            raise ShapeError("decode", q.shape, (cfg.num_queries, d), detail="query matrix")
        if tokens.ndim != 2 or tokens.shape[1] != d:
            raise ShapeError("decode", tokens.shape, (tokens.shape[0] if tokens.ndim else 0, d), detail="image tokens")
        keys = tokens
        if positional is not None:
            if positional.shape != tokens.shape:
                raise ShapeError("decode", tokens.shape, positional.shape, detail="positional codes")
            keys = ag.add(tokens, positional)

        x = q
        for layer in range(cfg.num_layers):
            p = f"layers.{layer}"
            h = self._ln(x, f"{p}.self_attn")
            x = ag.add(x, self._attention(f"{p}.self_attn", h, h, h))
            h = self._ln(x, f"{p}.cross_attn")
            x = ag.add(x, self._attention(f"{p}.cross_attn", h, keys, tokens))
            h = self._ln(x, f"{p}.mlp")
            hidden = self._act(self._linear(h, f"{p}.mlp.w_1", f"{p}.mlp.b_1"))
            x = ag.add(x, self._linear(hidden, f"{p}.mlp.w_2", f"{p}.mlp.b_2"))
        x = self._ln(x, "final")

        o = ag.relu(self._linear(x, "offset_head.w_1", "offset_head.b_1"))
        o = ag.relu(self._linear(o, "offset_head.w_2", "offset_head.b_2"))
        offsets = ag.scalar_mul(ag.tanh(self._linear(o, "offset_head.w_3", "offset_head.b_3")), cfg.offset_scale)
        logits = self._linear(x, "score_head.w", "score_head.b")
        scores = ag.reshape(ag.sigmoid(logits), (q.shape[0],))

        # loss path: sizes floored, positions left unclamped; pred_boxes hold the clamped form
        raw = ag.add(offsets, union.as_array())
        centers = ag.index_select(raw, [0, 1], axis=1)
        sizes = ag.maximum(ag.index_select(raw, [2, 3], axis=1), SIZE_FLOOR)
        pred_tensor = ag.concat([centers, sizes], axis=1)
        pred_boxes = [apply_offset(union, Box.from_array(row)) for row in offsets.data]
        return DecoderOutput(offsets=offsets, scores=scores, union_box=union, pred_boxes=pred_boxes, pred_tensor=pred_tensor)

    def forward(self, enc: EncoderOutput, sel: Optional[Selection]) -> DecoderOutput:
        union = FULL_CANVAS if sel is None or len(sel) == 0 else union_box(sel.boxes)
        return self.decode(self.build_query(sel), enc.image_tokens, enc.positional, union)


def predict(model: DecoderModel, enc: EncoderOutput, queries: QuerySet, top_k: int) -> list[tuple[Box, float]]:
    """Ranked crops for one image: match, union, decode, sort by score (ties by query index)."""
    if not 1 <= top_k <= model.cfg.num_queries:
        raise QueryError(f"top_k must lie in [1, {model.cfg.num_queries}], got {top_k}")
    sel = match(queries, enc) if queries.size else None
    with no_grad():
        out = model.forward(enc, sel)
    return out.ranked(top_k)


def save_model(
    path: Union[str, Path],
    model: DecoderModel,
    metadata: Optional[Mapping[str, Any]] = None,
    optimizer: Optional[AdamWState] = None,
) -> Path:
    meta = dict(metadata or {})
    meta["decoder"] = model.cfg.to_json()
    meta.setdefault("seed", model.seed)
    save_checkpoint(path, model.params, meta, optimizer)
    return Path(path)


def load_model(path: Union[str, Path], expected: Optional[DecoderConfig] = None) -> tuple[DecoderModel, Checkpoint]:
    ckpt = load_checkpoint(path)
    raw = ckpt.metadata.get("decoder")
    if not isinstance(raw, Mapping):
        raise CheckpointError(f"{path}: metadata carries no decoder config")
    try:
        cfg = DecoderConfig.from_json(raw)
    except (ConfigError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad decoder config ({exc})") from None
    if cfg.problems():
        raise CheckpointError(f"{path}: decoder config is invalid: {'; '.join(cfg.problems())}")
    if expected is not None and expected != cfg:
        raise CheckpointError(f"{path}: decoder config {cfg.to_json()} does not match expected {expected.to_json()}")
    model = DecoderModel(cfg, seed=int(ckpt.metadata.get("seed", 0)), params=ckpt.params)
    return model, ckpt


def zero_model(cfg: DecoderConfig) -> DecoderModel:
    return DecoderModel(cfg, params={k: np.zeros(s) for k, s in parameter_shapes(cfg).items()})
