"""Unified GNN over the user–item graph.

Two streams are propagated with the same symmetric coefficients
1/sqrt(|N_u|·|N_i|):

- the ID stream, plain LightGCN over E_id;
- the modal stream, seeded with each item's attentively fused x_vt and each
  user's mean over interacted items, with a (1+ε)-scaled self connection.

Layer l of the unified embedding is the modal layer plus the ID layer; the
readout averages each stream over layers 0..L_g and adds them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, Field, model_validator

from . import tensor as T
from .data import SplitDataset
from .errors import ConfigurationError, ContractError
from .tensor import Tensor

logger = logging.getLogger(__name__)


class FusionConfig(BaseModel):
    d: int = Field(default=32, ge=2)
    epsilon: float = Field(default=0.5, ge=0.0, le=1.0)
    num_layers: int = Field(default=2, ge=0)     # L_g

    @model_validator(mode="after")
    def even_width(self) -> "FusionConfig":
        if self.d % 2:
            raise ConfigurationError(f"attentive fusion needs an even embedding width, got d={self.d}")
        return self


# =============================================================================
# INTERACTION GRAPH
# =============================================================================

@dataclass(eq=False)
class InteractionGraph:
    """Bipartite user–item graph with degree-normalised edge weights."""
    num_users: int
    num_items: int
    edges: np.ndarray                 # (n, 2) user_id, item_id
    user_degrees: np.ndarray
    item_degrees: np.ndarray
    coefficients: np.ndarray          # per edge, 1/sqrt(|N_u|·|N_i|)
    _dense: Dict[str, Tensor] = field(default_factory=dict, repr=False)

    @property
    def norm_adj(self) -> sp.csr_matrix:
        """|U|×|I| sparse matrix of the normalised coefficients."""
        return sp.csr_matrix(
            (self.coefficients, (self.edges[:, 0], self.edges[:, 1])),
            shape=(self.num_users, self.num_items),
        )

    @property
    def user_mean(self) -> sp.csr_matrix:
        """|U|×|I| sparse matrix averaging each user's interacted items."""
        degrees = self.user_degrees[self.edges[:, 0]].astype(np.float64)
        weights = np.divide(1.0, degrees, out=np.zeros_like(degrees), where=degrees > 0)
        return sp.csr_matrix((weights, (self.edges[:, 0], self.edges[:, 1])), shape=(self.num_users, self.num_items))

    def positives(self) -> Dict[int, np.ndarray]:
        out: Dict[int, List[int]] = {}
        for u, i in self.edges.tolist():
            out.setdefault(u, []).append(i)
        return {u: np.array(sorted(items), dtype=np.int64) for u, items in out.items()}

    # Dense constants let propagation compose from matmul on the tape.
    def dense(self, key: str) -> Tensor:
        if key not in self._dense:
            builders = {
                "adj": lambda: self.norm_adj.toarray(),
                "adj_t": lambda: self.norm_adj.T.toarray(),
                "user_mean": lambda: self.user_mean.toarray(),
                "isolated_users": lambda: (self.user_degrees == 0).astype(np.float64)[:, None],
                "isolated_items": lambda: (self.item_degrees == 0).astype(np.float64)[:, None],
            }
            self._dense[key] = Tensor(builders[key]())
        return self._dense[key]


def graph_from_edges(num_users: int, num_items: int, edges: np.ndarray) -> InteractionGraph:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges):
        edges = np.unique(edges, axis=0)
    user_degrees = np.bincount(edges[:, 0], minlength=num_users) if len(edges) else np.zeros(num_users, dtype=np.int64)
    item_degrees = np.bincount(edges[:, 1], minlength=num_items) if len(edges) else np.zeros(num_items, dtype=np.int64)
    coefficients = 1.0 / np.sqrt(user_degrees[edges[:, 0]] * item_degrees[edges[:, 1]]).astype(np.float64) \
        if len(edges) else np.zeros(0)
    return InteractionGraph(num_users, num_items, edges, user_degrees, item_degrees, coefficients)


def build_graph(split: SplitDataset) -> InteractionGraph:
    """Graph over TRAIN interactions only."""
    return graph_from_edges(split.num_users, split.num_items, split.train)


# =============================================================================
# PARAMETERS
# =============================================================================

@dataclass
class FusionParams:
    id_embeddings: Tensor                    # (|U|+|I|) × d, users first
    alpha_logit: Tensor                      # α = sigmoid(alpha_logit)
    modal_projections: Dict[str, Tensor]     # "visual"/"textual": d × d/2
    epsilon: float = 0.5

    @property
    def alpha(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.alpha_logit.item())))

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        yield "fusion.id_embeddings", self.id_embeddings
        yield "fusion.alpha_logit", self.alpha_logit
        for key in ("visual", "textual"):
            yield f"fusion.modal_projection.{key}", self.modal_projections[key]


def init_fusion(config: FusionConfig, num_users: int, num_items: int, rng: np.random.Generator) -> FusionParams:
    d = config.d
    return FusionParams(
        id_embeddings=T.parameter(rng.standard_normal((num_users + num_items, d)) * 0.1, name="id_embeddings"),
        alpha_logit=T.parameter(np.zeros(1), name="alpha_logit"),
        modal_projections={
            key: T.parameter(rng.standard_normal((d, d // 2)) * (1.0 / np.sqrt(d)), name=f"modal_projection.{key}")
            for key in ("visual", "textual")
        },
        epsilon=config.epsilon,
    )


# =============================================================================
# PROPAGATION
# =============================================================================

def _split_nodes(x: Tensor, graph: InteractionGraph) -> Tuple[Tensor, Tensor]:
    users, items = T.split(x, [graph.num_users, graph.num_items], axis=0)
    return users, items


def propagate_id(graph: InteractionGraph, E_id: Tensor, num_layers: int) -> List[Tensor]:
    """LightGCN layers 0..L_g of the ID embeddings; zero-degree nodes keep
    their previous embedding."""
    if num_layers < 0:
        raise ContractError(f"num_layers must be ≥ 0, got {num_layers}")
    layers = [E_id]
    adj, adj_t = graph.dense("adj"), graph.dense("adj_t")
    iso_u, iso_i = graph.dense("isolated_users"), graph.dense("isolated_items")
    for _ in range(num_layers):
        users, items = _split_nodes(layers[-1], graph)
        new_users = adj @ items + iso_u * users
        new_items = adj_t @ users + iso_i * items
        layers.append(T.concat([new_users, new_items], axis=0))
    return layers


def attentive_fuse(h_v: Tensor, h_t: Tensor, params: FusionParams, alpha: Optional[Tensor] = None) -> Tensor:
    """x_vt = [α·P_v h_v ∥ (1−α)·P_t h_t]; works on single rows or batches.

    `alpha` overrides the learned gate (the fixed-gate ablation passes a
    constant 0.5).
    """
    gate = T.sigmoid(params.alpha_logit) if alpha is None else alpha
    proj_v, proj_t = params.modal_projections["visual"], params.modal_projections["textual"]
    if h_v.ndim == 1:
        d = h_v.shape[0]
        v = T.reshape(T.reshape(h_v, (1, d)) @ proj_v, (proj_v.shape[1],))
        t = T.reshape(T.reshape(h_t, (1, d)) @ proj_t, (proj_t.shape[1],))
    else:
        v, t = h_v @ proj_v, h_t @ proj_t
    return T.concat([gate * v, (1.0 - gate) * t])


@dataclass
class PropagationState:
    """Per-layer streams: ID layers over all nodes, modal layers over all nodes
    (users first, then items)."""
    id_layers: List[Tensor]
    modal_layers: List[Tensor]


def user_modal_seed(graph: InteractionGraph, item_vt: Tensor) -> Tensor:
    """Each user's mean over the fused embeddings of interacted items."""
    return graph.dense("user_mean") @ item_vt


def unified_propagate(
    graph: InteractionGraph,
    item_vt: Tensor,
    id_layers: List[Tensor],
    epsilon: float,
    num_layers: int,
) -> PropagationState:
    """Modal stream with a (1+ε) self connection, layers 0..L_g.

    item⁽ˡ⁾ = (1+ε)·item⁽ˡ⁻¹⁾ + Σ_u c_ui·user⁽ˡ⁻¹⁾, and symmetrically for
    users with the same ε. The ID layers are carried along unchanged and
    only meet the modal stream in `final_embeddings`.
    """
    if len(id_layers) < num_layers + 1:
        raise ContractError(f"need {num_layers + 1} ID layers, got {len(id_layers)}")
    if not 0.0 <= epsilon <= 1.0:
        raise ConfigurationError(f"epsilon must lie in [0, 1], got {epsilon}")
    adj, adj_t = graph.dense("adj"), graph.dense("adj_t")
    users, items = user_modal_seed(graph, item_vt), item_vt
    modal = [T.concat([users, items], axis=0)]
    for _ in range(num_layers):
        users, items = (
            T.mul(users, 1.0 + epsilon) + adj @ items,
            T.mul(items, 1.0 + epsilon) + adj_t @ users,
        )
        modal.append(T.concat([users, items], axis=0))
    return PropagationState(id_layers=id_layers[: num_layers + 1], modal_layers=modal)


def lightgcn_modal_streams(graph: InteractionGraph, item_vt: Tensor, num_layers: int, half: int) -> List[Tensor]:
    """Unified-GNN ablation: the visual and textual halves of x_vt run as
    separate LightGCN streams and are concatenated per layer."""
    streams = []
    for piece in T.split(item_vt, [half, item_vt.shape[-1] - half]):
        seed = T.concat([user_modal_seed(graph, piece), piece], axis=0)
        streams.append(propagate_id(graph, seed, num_layers))
    return [T.concat([v, t]) for v, t in zip(*streams)]


def _layer_mean(layers: Sequence[Tensor]) -> Tensor:
    total = layers[0]
    for layer in layers[1:]:
        total = total + layer
    return T.mul(total, 1.0 / len(layers))


def final_embeddings(
    id_layers: Sequence[Tensor],
    modal_layers: Sequence[Tensor],
    graph: InteractionGraph,
) -> Tuple[Tensor, Tensor]:
    """Mean over ID layers plus mean over modal layers → (X_user, X_item)."""
    if not id_layers or not modal_layers:
        raise ContractError("final_embeddings needs at least layer 0 of both streams")
    combined = _layer_mean(id_layers) + _layer_mean(modal_layers)
    return _split_nodes(combined, graph)


def score(u: int, i: int, X_user: Union[Tensor, np.ndarray], X_item: Union[Tensor, np.ndarray]) -> float:
    users = X_user.data if isinstance(X_user, Tensor) else np.asarray(X_user)
    items = X_item.data if isinstance(X_item, Tensor) else np.asarray(X_item)
    if not 0 <= u < users.shape[0] or not 0 <= i < items.shape[0]:
        raise ContractError(f"score({u}, {i}) outside {users.shape[0]} users × {items.shape[0]} items")
    return float(users[u] @ items[i])


# =============================================================================
# STANDALONE LIGHTGCN (reference path, numpy + scipy only)
# =============================================================================

def lightgcn_reference(graph: InteractionGraph, E_id: np.ndarray, num_layers: int) -> Tuple[np.ndarray, np.ndarray]:
    """Plain LightGCN readout on arrays, sharing no code with the tape path."""
    n_users, n_items = graph.num_users, graph.num_items
    rows = np.concatenate([graph.edges[:, 0], graph.edges[:, 1] + n_users])
    cols = np.concatenate([graph.edges[:, 1] + n_users, graph.edges[:, 0]])
    degree = np.concatenate([graph.user_degrees, graph.item_degrees]).astype(np.float64)
    weights = 1.0 / np.sqrt(degree[rows] * degree[cols]) if len(rows) else np.zeros(0)
    A = sp.coo_matrix((weights, (rows, cols)), shape=(n_users + n_items,) * 2).tocsr()
    isolated = (degree == 0)[:, None]
    x = np.asarray(E_id, dtype=np.float64)
    acc = x.copy()
    for _ in range(num_layers):
        x = np.where(isolated, x, A @ x)
        acc = acc + x
    readout = acc / (num_layers + 1)
    return readout[:n_users], readout[n_users:]


# =============================================================================
# EXPORT
# =============================================================================

def _fmt(row: np.ndarray) -> str:
    return "\t".join(format(float(v), ".17g") for v in row)


def export_embeddings(
    out_dir: Union[str, Path],
    X_user: np.ndarray,
    X_item: np.ndarray,
    H_v: np.ndarray,
    H_t: np.ndarray,
) -> Tuple[Path, Path]:
    """Write embeddings.tsv (node_type, id, d floats) and modal_embeddings.tsv
    (item id, modality, d floats)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"user\t{u}\t{_fmt(row)}\n" for u, row in enumerate(np.asarray(X_user))]
    lines += [f"item\t{i}\t{_fmt(row)}\n" for i, row in enumerate(np.asarray(X_item))]
    embeddings = out / "embeddings.tsv"
    embeddings.write_text("".join(lines))
    modal_lines = []
    for i, (hv, ht) in enumerate(zip(np.asarray(H_v), np.asarray(H_t))):
        modal_lines.append(f"{i}\tvisual\t{_fmt(hv)}\n")
        modal_lines.append(f"{i}\ttextual\t{_fmt(ht)}\n")
    modal = out / "modal_embeddings.tsv"
    modal.write_text("".join(modal_lines))
    logger.info(f"Exported {len(lines)} node embeddings and {len(modal_lines)} modal rows to {out}")
    return embeddings, modal
