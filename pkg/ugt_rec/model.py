"""The whole recommender: encoder + unified GNN, its parameter sets, and the
on-disk checkpoint format.

Checkpoint layout (all integers little-endian):

    b"UGTCKPT\\x00" | uint64 header length | JSON header | f64 payload

The header lists every array as {name, offset, shape}; offsets are byte
positions into the payload.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel

from . import tensor as T
from .encoder import (
    EncoderConfig,
    EncoderParams,
    ItemInputs,
    ModalityTag,
    RawFeatureEncoder,
    encode_items,
    init_encoder,
    itc_project,
)
from .errors import ConfigurationError, DataFormatError
from .fusion import (
    FusionConfig,
    FusionParams,
    InteractionGraph,
    attentive_fuse,
    final_embeddings,
    init_fusion,
    lightgcn_modal_streams,
    propagate_id,
    unified_propagate,
)
from .tensor import Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"UGTCKPT\x00"
ABLATION_NAMES = ("attn_fuse", "ugnn", "trans", "cl")


class AblationSwitches(BaseModel):
    """Which components are active. All on = the full model."""
    attn_fuse: bool = True
    unified_gnn: bool = True
    transformer: bool = True
    contrastive: bool = True

    @classmethod
    def from_names(cls, names: List[str]) -> "AblationSwitches":
        """Build from the switched-off component names (attn_fuse, ugnn, trans, cl)."""
        unknown = sorted(set(names) - set(ABLATION_NAMES))
        if unknown:
            raise ConfigurationError(f"unknown ablation {unknown[0]!r}; choose from {', '.join(ABLATION_NAMES)}")
        return cls(
            attn_fuse="attn_fuse" not in names,
            unified_gnn="ugnn" not in names,
            transformer="trans" not in names,
            contrastive="cl" not in names,
        )

    @property
    def label(self) -> str:
        off = [name for name, on in zip(ABLATION_NAMES, (self.attn_fuse, self.unified_gnn, self.transformer, self.contrastive)) if not on]
        return "full" if not off else "w/o " + "+".join(off)


@dataclass
class ForwardOutput:
    X_user: Tensor
    X_item: Tensor
    H_v: Tensor
    H_t: Tensor
    Z_v: Tensor
    Z_t: Tensor


# Parameters with these name endings are not L2-regularised.
_UNREGULARISED_SUFFIXES = (".b1", ".b2", ".patch_bias", ".ln.gamma", ".ln.beta", ".alpha_logit")


@dataclass
class UGTModel:
    encoder: EncoderParams
    fusion: FusionParams
    switches: AblationSwitches
    graph_layers: int
    patch_size: int
    raw_encoder: Optional[RawFeatureEncoder] = None

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        yield from self.encoder.named_parameters()
        yield from self.fusion.named_parameters()

    def trainable_parameters(self) -> Dict[str, Tensor]:
        """Parameters the optimiser updates under the active switches."""
        out = {}
        for name, p in self.named_parameters():
            if not self.switches.transformer and name.startswith("encoder.") and not name.startswith("encoder.itc."):
                continue
            if not self.switches.attn_fuse and name == "fusion.alpha_logit":
                continue
            out[name] = p
        return out

    def regularized_parameters(self) -> Dict[str, Tensor]:
        """Embedding tables and weight matrices (no biases, LN params or α)."""
        return {
            name: p for name, p in self.trainable_parameters().items()
            if not name.endswith(_UNREGULARISED_SUFFIXES)
        }

    @property
    def alpha(self) -> float:
        return self.fusion.alpha if self.switches.attn_fuse else 0.5

    # -- forward ---------------------------------------------------------------

    def encode(self, inputs: ItemInputs) -> Tuple[Tensor, Tensor]:
        item_ids = np.arange(inputs.patches.shape[0])
        if self.raw_encoder is not None:
            return self.raw_encoder.encode_items(item_ids, inputs)
        return encode_items(item_ids, inputs, self.encoder)

    def forward(self, graph: InteractionGraph, inputs: ItemInputs) -> ForwardOutput:
        """Encode every item, fuse, propagate, and read out user/item embeddings."""
        H_v, H_t = self.encode(inputs)
        Z_v = itc_project(H_v, ModalityTag.VISUAL, self.encoder)
        Z_t = itc_project(H_t, ModalityTag.TEXTUAL, self.encoder)

        gate = None if self.switches.attn_fuse else Tensor(np.array([0.5]))
        item_vt = attentive_fuse(H_v, H_t, self.fusion, alpha=gate)

        id_layers = propagate_id(graph, self.fusion.id_embeddings, self.graph_layers)
        if self.switches.unified_gnn:
            modal_layers = unified_propagate(graph, item_vt, id_layers, self.fusion.epsilon, self.graph_layers).modal_layers
        else:
            modal_layers = lightgcn_modal_streams(graph, item_vt, self.graph_layers, item_vt.shape[-1] // 2)
        X_user, X_item = final_embeddings(id_layers, modal_layers, graph)
        return ForwardOutput(X_user=X_user, X_item=X_item, H_v=H_v, H_t=H_t, Z_v=Z_v, Z_t=Z_t)

    # -- state -----------------------------------------------------------------

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        if self.raw_encoder is not None:
            state["raw.patch_map"] = self.raw_encoder.patch_map.copy()
            state["raw.token_table"] = self.raw_encoder.token_table.copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], source: Optional[Path] = None) -> None:
        expected = {name: p for name, p in self.named_parameters()}
        raw_names = {"raw.patch_map", "raw.token_table"} if self.raw_encoder is not None else set()
        missing = sorted((set(expected) | raw_names) - set(state))
        extra = sorted(set(state) - set(expected) - raw_names)
        if missing or extra:
            raise DataFormatError(
                f"checkpoint does not match the model (missing {missing[:3]}, unexpected {extra[:3]})", path=source,
            )
        for name, p in expected.items():
            if state[name].shape != p.shape:
                raise DataFormatError(f"{name}: checkpoint shape {state[name].shape} != model shape {p.shape}", path=source)
        for name, p in expected.items():
            p.data[...] = state[name]
        if self.raw_encoder is not None:
            self.raw_encoder.patch_map = np.array(state["raw.patch_map"])
            self.raw_encoder.token_table = np.array(state["raw.token_table"])


def init_model(
    encoder_config: EncoderConfig,
    fusion_config: FusionConfig,
    switches: AblationSwitches,
    num_users: int,
    num_items: int,
    inputs: ItemInputs,
    vocab_size: int,
    max_text_len: int,
    rng: np.random.Generator,
) -> UGTModel:
    if encoder_config.d != fusion_config.d:
        raise ConfigurationError(f"encoder width {encoder_config.d} != fusion width {fusion_config.d}")
    encoder = init_encoder(encoder_config, inputs.patch_dim, inputs.num_patches, vocab_size, max_text_len, rng)
    fusion = init_fusion(fusion_config, num_users, num_items, rng)
    raw = None
    if not switches.transformer:
        raw = RawFeatureEncoder.create(inputs.patch_dim, vocab_size, encoder_config.d, rng)
    logger.debug(f"Initialised model ({switches.label}) with {sum(p.data.size for _, p in encoder.named_parameters())} "
                 f"encoder and {sum(p.data.size for _, p in fusion.named_parameters())} fusion weights")
    return UGTModel(
        encoder=encoder,
        fusion=fusion,
        switches=switches,
        graph_layers=fusion_config.num_layers,
        patch_size=encoder_config.patch_size,
        raw_encoder=raw,
    )


# =============================================================================
# CHECKPOINT FILES
# =============================================================================

def save_checkpoint(arrays: Dict[str, np.ndarray], path: Union[str, Path], metadata: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        data = np.array(arrays[name], dtype="<f8", order="C")
        entries.append({"name": name, "offset": offset, "shape": list(data.shape)})
        chunks.append(data.tobytes())
        offset += data.nbytes
    header = json.dumps({"arrays": entries, "metadata": metadata or {}}, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for chunk in chunks:
            f.write(chunk)
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Read and validate a checkpoint; any corruption raises DataFormatError."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise DataFormatError(f"cannot read checkpoint: {e.strerror}", path=path) from e
    prefix = len(CHECKPOINT_MAGIC) + 8
    if len(blob) < prefix or blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataFormatError("not a checkpoint file (bad magic)", path=path)
    (header_len,) = struct.unpack("<Q", blob[len(CHECKPOINT_MAGIC):prefix])
    if prefix + header_len > len(blob):
        raise DataFormatError("truncated checkpoint header", path=path)
    try:
        header = json.loads(blob[prefix: prefix + header_len].decode("utf-8"))
        entries = header["arrays"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise DataFormatError(f"unreadable checkpoint header: {e}", path=path) from e

    payload = memoryview(blob)[prefix + header_len:]
    arrays: Dict[str, np.ndarray] = {}
    expected_offset = 0
    for entry in entries:
        try:
            name, offset, shape = entry["name"], int(entry["offset"]), tuple(int(s) for s in entry["shape"])
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"malformed array entry {entry!r}", path=path) from e
        count = int(np.prod(shape, dtype=np.int64))
        if offset != expected_offset or offset + 8 * count > len(payload):
            raise DataFormatError(f"array {name!r} lies outside the payload", path=path)
        values = np.frombuffer(payload[offset: offset + 8 * count], dtype="<f8").astype(np.float64).reshape(shape)
        if not np.all(np.isfinite(values)):
            raise DataFormatError(f"array {name!r} holds non-finite values", path=path)
        arrays[name] = values
        expected_offset = offset + 8 * count
    if expected_offset != len(payload):
        raise DataFormatError(f"{len(payload) - expected_offset} trailing bytes after the last array", path=path)
    return arrays, header.get("metadata", {})
