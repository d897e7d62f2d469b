"""Multi-way transformer: shared multi-head self-attention with one
feed-forward expert per modality in every layer.

Each layer computes

    h⁽ˡ⁾ = LN(h⁽ˡ⁻¹⁾ + MHSA(h⁽ˡ⁻¹⁾) + FFN_tag(h⁽ˡ⁻¹⁾))

with a single post-norm over the three-term sum. The item embedding of a
modality is the final [CLS] row of its sequence.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterator, List, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from . import tensor as T
from .data import Dataset, PatchSequence, TokenSequence, patchify, tokenize
from .errors import ConfigurationError, ContractError, DataFormatError, ShapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)


class ModalityTag(str, Enum):
    VISUAL = "visual"
    TEXTUAL = "textual"


MODALITIES: Tuple[ModalityTag, ...] = (ModalityTag.VISUAL, ModalityTag.TEXTUAL)


class EncoderConfig(BaseModel):
    d: int = Field(default=32, ge=1)
    n_heads: int = Field(default=4, ge=1)
    d_ff: int = Field(default=64, ge=1)
    d_itc: int = Field(default=16, ge=1)
    num_layers: int = Field(default=2, ge=0)     # L_t
    patch_size: int = Field(default=4, ge=1)
    ln_eps: float = Field(default=1e-5, gt=0)

    @model_validator(mode="after")
    def heads_divide_width(self) -> "EncoderConfig":
        if self.d % self.n_heads:
            raise ConfigurationError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        return self


# =============================================================================
# PARAMETERS
# =============================================================================

@dataclass
class ExpertParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class MultiwayLayerParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    experts: Dict[ModalityTag, ExpertParams]
    ln_gamma: Tensor
    ln_beta: Tensor


@dataclass
class EncoderParams:
    patch_projection: Tensor                 # patch_dim × d
    patch_bias: Tensor                       # d
    token_embedding: Tensor                  # vocab_size × d
    cls: Dict[ModalityTag, Tensor]           # 1 × d per modality
    positions: Dict[ModalityTag, Tensor]     # per modality, max_len × d
    layers: List[MultiwayLayerParams]
    itc_heads: Dict[ModalityTag, Tensor]     # d × d_itc per modality
    n_heads: int
    ln_eps: float = 1e-5

    @property
    def d(self) -> int:
        return self.patch_projection.shape[1]

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        yield "encoder.patch_projection", self.patch_projection
        yield "encoder.patch_bias", self.patch_bias
        yield "encoder.token_embedding", self.token_embedding
        for tag in MODALITIES:
            yield f"encoder.cls.{tag.value}", self.cls[tag]
            yield f"encoder.position.{tag.value}", self.positions[tag]
        for k, layer in enumerate(self.layers):
            prefix = f"encoder.layers.{k}"
            yield f"{prefix}.w_q", layer.w_q
            yield f"{prefix}.w_k", layer.w_k
            yield f"{prefix}.w_v", layer.w_v
            yield f"{prefix}.w_o", layer.w_o
            for tag in MODALITIES:
                expert = layer.experts[tag]
                yield f"{prefix}.ffn.{tag.value}.w1", expert.w1
                yield f"{prefix}.ffn.{tag.value}.b1", expert.b1
                yield f"{prefix}.ffn.{tag.value}.w2", expert.w2
                yield f"{prefix}.ffn.{tag.value}.b2", expert.b2
            yield f"{prefix}.ln.gamma", layer.ln_gamma
            yield f"{prefix}.ln.beta", layer.ln_beta
        for tag in MODALITIES:
            yield f"encoder.itc.{tag.value}", self.itc_heads[tag]


def _normal(rng: np.random.Generator, shape, std: float, name: str) -> Tensor:
    return T.parameter(rng.standard_normal(shape) * std, name=name)


def init_encoder(
    config: EncoderConfig,
    patch_dim: int,
    num_patches: int,
    vocab_size: int,
    max_text_len: int,
    rng: np.random.Generator,
) -> EncoderParams:
    d, d_ff = config.d, config.d_ff
    layers = []
    for k in range(config.num_layers):
        experts = {
            tag: ExpertParams(
                w1=_normal(rng, (d, d_ff), 1.0 / math.sqrt(d), f"ffn.{tag.value}.w1"),
                b1=T.parameter(np.zeros(d_ff)),
                w2=_normal(rng, (d_ff, d), 1.0 / math.sqrt(d_ff), f"ffn.{tag.value}.w2"),
                b2=T.parameter(np.zeros(d)),
            )
            for tag in MODALITIES
        }
        layers.append(MultiwayLayerParams(
            w_q=_normal(rng, (d, d), 1.0 / math.sqrt(d), "w_q"),
            w_k=_normal(rng, (d, d), 1.0 / math.sqrt(d), "w_k"),
            w_v=_normal(rng, (d, d), 1.0 / math.sqrt(d), "w_v"),
            w_o=_normal(rng, (d, d), 1.0 / math.sqrt(d), "w_o"),
            experts=experts,
            ln_gamma=T.parameter(np.ones(d)),
            ln_beta=T.parameter(np.zeros(d)),
        ))
    return EncoderParams(
        patch_projection=_normal(rng, (patch_dim, d), 1.0 / math.sqrt(patch_dim), "patch_projection"),
        patch_bias=T.parameter(np.zeros(d)),
        token_embedding=_normal(rng, (vocab_size, d), 0.1, "token_embedding"),
        cls={tag: _normal(rng, (1, d), 0.1, f"cls.{tag.value}") for tag in MODALITIES},
        positions={
            ModalityTag.VISUAL: _normal(rng, (max(num_patches, 1), d), 0.1, "position.visual"),
            ModalityTag.TEXTUAL: _normal(rng, (max(max_text_len, 1), d), 0.1, "position.textual"),
        },
        layers=layers,
        itc_heads={tag: _normal(rng, (d, config.d_itc), 1.0 / math.sqrt(d), f"itc.{tag.value}") for tag in MODALITIES},
        n_heads=config.n_heads,
        ln_eps=config.ln_eps,
    )


# =============================================================================
# INPUT EMBEDDINGS
# =============================================================================

def _prepend_cls(body: Tensor, cls: Tensor) -> Tensor:
    if body.ndim == 2:
        return T.concat([cls, body], axis=0)
    broadcast = T.matmul(T.Tensor(np.ones((body.shape[0], 1, 1))), cls)
    return T.concat([broadcast, body], axis=1)


def embed_visual(patches: Union[PatchSequence, np.ndarray], params: EncoderParams) -> Tensor:
    """[CLS] followed by projected patches plus position embeddings.

    Accepts one sequence (num_patches × patch_dim) or a batch
    (N × num_patches × patch_dim); the output gains one leading row.
    """
    raw = patches.patches if isinstance(patches, PatchSequence) else np.asarray(patches, dtype=np.float64)
    if raw.shape[-1] != params.patch_projection.shape[0]:
        raise ShapeError(f"patch length {raw.shape[-1]} does not match projection input {params.patch_projection.shape[0]}")
    count = raw.shape[-2]
    if count > params.positions[ModalityTag.VISUAL].shape[0]:
        raise ShapeError(f"{count} patches exceed {params.positions[ModalityTag.VISUAL].shape[0]} visual positions")
    body = T.matmul(T.Tensor(raw), params.patch_projection) + params.patch_bias
    body = body + T.gather(params.positions[ModalityTag.VISUAL], np.arange(count))
    return _prepend_cls(body, params.cls[ModalityTag.VISUAL])


def embed_textual(tokens: Union[TokenSequence, np.ndarray], params: EncoderParams) -> Tensor:
    """[CLS] followed by token-table lookups plus position embeddings."""
    ids = tokens.tokens if isinstance(tokens, TokenSequence) else np.asarray(tokens, dtype=np.int64)
    vocab_size = params.token_embedding.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise DataFormatError(f"token id outside [0, {vocab_size})")
    length = ids.shape[-1]
    if length > params.positions[ModalityTag.TEXTUAL].shape[0]:
        raise ShapeError(f"text of length {length} exceeds {params.positions[ModalityTag.TEXTUAL].shape[0]} positions")
    cls = params.cls[ModalityTag.TEXTUAL]
    if length == 0:
        if ids.ndim == 1:
            return T.reshape(cls, (1, params.d))
        return T.matmul(T.Tensor(np.ones((ids.shape[0], 1, 1))), cls)
    body = T.gather(params.token_embedding, ids)
    body = body + T.gather(params.positions[ModalityTag.TEXTUAL], np.arange(length))
    return _prepend_cls(body, cls)


# =============================================================================
# MULTI-WAY LAYER
# =============================================================================

def multi_head_attention(h: Tensor, layer: MultiwayLayerParams, n_heads: int) -> Tuple[Tensor, List[Tensor]]:
    """Full bidirectional self-attention; returns the output and per-head
    probability maps."""
    d = h.shape[-1]
    head_dim = d // n_heads
    scale = 1.0 / math.sqrt(head_dim)
    qs = T.split(h @ layer.w_q, [head_dim] * n_heads)
    ks = T.split(h @ layer.w_k, [head_dim] * n_heads)
    vs = T.split(h @ layer.w_v, [head_dim] * n_heads)
    heads, probs = [], []
    for q, k, v in zip(qs, ks, vs):
        p = T.softmax(T.mul(q @ T.transpose(k), scale), axis=-1)
        probs.append(p)
        heads.append(p @ v)
    return T.concat(heads) @ layer.w_o, probs


def expert_ffn(h: Tensor, expert: ExpertParams) -> Tensor:
    return T.gelu(h @ expert.w1 + expert.b1) @ expert.w2 + expert.b2


def multiway_layer(h: Tensor, tag: ModalityTag, layer_index: int, params: EncoderParams) -> Tensor:
    if not 0 <= layer_index < len(params.layers):
        raise ContractError(f"layer index {layer_index} outside 0..{len(params.layers) - 1}")
    if not isinstance(tag, ModalityTag):
        raise ContractError(f"unknown modality tag {tag!r}")
    layer = params.layers[layer_index]
    if tag not in layer.experts:
        raise ContractError(f"layer {layer_index} has no expert for {tag.value}")
    attended, _ = multi_head_attention(h, layer, params.n_heads)
    return T.layer_norm(h + attended + expert_ffn(h, layer.experts[tag]), layer.ln_gamma, layer.ln_beta, params.ln_eps)


def _run_layers(h: Tensor, tag: ModalityTag, params: EncoderParams) -> Tensor:
    for k in range(len(params.layers)):
        h = multiway_layer(h, tag, k, params)
    return h


def _cls_row(h: Tensor) -> Tensor:
    if h.ndim == 2:
        return T.reshape(T.gather(h, [0], axis=0), (h.shape[-1],))
    return T.reshape(T.gather(h, [0], axis=1), (h.shape[0], h.shape[-1]))


# =============================================================================
# ITEM ENCODING
# =============================================================================

@dataclass
class ItemInputs:
    """Raw model inputs prepared once per dataset: patch batches and token lists."""
    patches: np.ndarray               # num_items × num_patches × patch_dim
    texts: List[np.ndarray]

    @classmethod
    def from_dataset(cls, dataset: Dataset, patch_size: int) -> "ItemInputs":
        patches = np.stack([patchify(img, patch_size).patches for img in dataset.item_images]) \
            if dataset.num_items else np.zeros((0, 0, 0))
        texts = [tokenize(t, dataset.vocab_size).tokens for t in dataset.item_texts]
        return cls(patches=patches, texts=texts)

    @property
    def num_patches(self) -> int:
        return int(self.patches.shape[1])

    @property
    def patch_dim(self) -> int:
        return int(self.patches.shape[2])


def encode_items(item_ids: Sequence[int], inputs: ItemInputs, params: EncoderParams) -> Tuple[Tensor, Tensor]:
    """Batched encoding; returns (H_v, H_t), one row per requested item.

    Texts are grouped by length so each group runs as one padding-free batch.
    """
    ids = np.asarray(item_ids, dtype=np.int64)
    h_v = _cls_row(_run_layers(embed_visual(inputs.patches[ids], params), ModalityTag.VISUAL, params))

    groups: Dict[int, List[int]] = {}
    for row, item in enumerate(ids.tolist()):
        groups.setdefault(len(inputs.texts[item]), []).append(row)
    pieces, order = [], []
    for length in sorted(groups):
        rows = groups[length]
        tokens = np.stack([inputs.texts[ids[r]] for r in rows]) if length else np.zeros((len(rows), 0), dtype=np.int64)
        pieces.append(_cls_row(_run_layers(embed_textual(tokens, params), ModalityTag.TEXTUAL, params)))
        order.extend(rows)
    stacked = T.concat(pieces, axis=0)
    h_t = T.gather(stacked, np.argsort(np.asarray(order), kind="stable"))
    return h_v, h_t


def encode_item(item_id: int, dataset: Dataset, params: EncoderParams, patch_size: int) -> Tuple[Tensor, Tensor]:
    """One item's (h_v, h_t), each of length d."""
    patches = patchify(dataset.item_images[item_id], patch_size)
    tokens = tokenize(dataset.item_texts[item_id], dataset.vocab_size)
    h_v = _cls_row(_run_layers(embed_visual(patches, params), ModalityTag.VISUAL, params))
    h_t = _cls_row(_run_layers(embed_textual(tokens, params), ModalityTag.TEXTUAL, params))
    return h_v, h_t


def itc_project(h: Tensor, tag: ModalityTag, params: EncoderParams) -> Tensor:
    """Linear ITC head followed by L2 normalisation; a zero vector stays zero."""
    head = params.itc_heads[tag]
    if h.ndim == 1:
        return T.reshape(T.l2_normalize(T.reshape(h, (1, h.shape[0])) @ head), (head.shape[1],))
    return T.l2_normalize(h @ head)


# =============================================================================
# FROZEN RAW-FEATURE ENCODER (transformer ablation)
# =============================================================================

@dataclass
class RawFeatureEncoder:
    """Frozen random linear maps over mean-pooled raw patches and mean-pooled
    random token embeddings. Nothing here is trained."""
    patch_map: np.ndarray       # patch_dim × d
    token_table: np.ndarray     # vocab_size × d

    @classmethod
    def create(cls, patch_dim: int, vocab_size: int, d: int, rng: np.random.Generator) -> "RawFeatureEncoder":
        return cls(
            patch_map=rng.standard_normal((patch_dim, d)) / math.sqrt(patch_dim),
            token_table=rng.standard_normal((vocab_size, d)),
        )

    def encode_items(self, item_ids: Sequence[int], inputs: ItemInputs) -> Tuple[Tensor, Tensor]:
        ids = np.asarray(item_ids, dtype=np.int64)
        h_v = inputs.patches[ids].mean(axis=1) @ self.patch_map
        h_t = np.stack([
            self.token_table[inputs.texts[i]].mean(axis=0) if len(inputs.texts[i]) else np.zeros(self.token_table.shape[1])
            for i in ids.tolist()
        ]) if len(ids) else np.zeros((0, self.token_table.shape[1]))
        return Tensor(h_v), Tensor(h_t)
