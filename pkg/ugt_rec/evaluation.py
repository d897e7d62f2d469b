"""Top-K evaluation: full ranking over all candidate items, Recall@K and
NDCG@K macro-averaged over users, alignment MSE, popularity baseline and
report files."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Collection, Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field

from . import tensor as T
from .data import SplitDataset
from .encoder import ItemInputs
from .errors import ContractError, ReportError
from .fusion import build_graph
from .tensor import Tensor

logger = logging.getLogger(__name__)

DEFAULT_KS = (10, 20)
TARGETS = ("test", "validation", "train")


@dataclass
class RankedList:
    user: int
    items: np.ndarray       # item ids, best first
    scores: np.ndarray      # matching scores

    def top(self, k: int) -> np.ndarray:
        return self.items[:k]


def rank_scores(user: int, scores: np.ndarray, exclusions: Collection[int] = ()) -> RankedList:
    """Sort one user's score row descending, ties by ascending item id."""
    scores = np.asarray(scores, dtype=np.float64)
    candidates = np.ones(scores.shape[0], dtype=bool)
    if len(exclusions):
        candidates[np.fromiter(exclusions, dtype=np.int64)] = False
    items = np.flatnonzero(candidates)
    order = np.lexsort((items, -scores[items]))
    return RankedList(user=user, items=items[order], scores=scores[items][order])


def rank_items(
    u: int,
    X_user: Union[Tensor, np.ndarray],
    X_item: Union[Tensor, np.ndarray],
    exclusions: Collection[int] = (),
) -> RankedList:
    users = X_user.data if isinstance(X_user, Tensor) else np.asarray(X_user)
    items = X_item.data if isinstance(X_item, Tensor) else np.asarray(X_item)
    if not 0 <= u < users.shape[0]:
        raise ContractError(f"user {u} outside {users.shape[0]} users")
    return rank_scores(u, items @ users[u], exclusions)


def _as_ids(ranked: Union[RankedList, Sequence[int], np.ndarray]) -> np.ndarray:
    return ranked.items if isinstance(ranked, RankedList) else np.asarray(ranked, dtype=np.int64)


def recall_at_k(ranked: Union[RankedList, Sequence[int]], test_positives: Collection[int], k: int) -> float:
    if k < 1:
        raise ContractError(f"K must be ≥ 1, got {k}")
    if not len(test_positives):
        raise ContractError("recall needs at least one positive")
    positives = set(int(i) for i in test_positives)
    hits = sum(1 for i in _as_ids(ranked)[:k].tolist() if i in positives)
    return hits / len(positives)


def ndcg_at_k(ranked: Union[RankedList, Sequence[int]], test_positives: Collection[int], k: int) -> float:
    """Binary-relevance NDCG with 1/log2(position + 1) discounts."""
    if k < 1:
        raise ContractError(f"K must be ≥ 1, got {k}")
    if not len(test_positives):
        raise ContractError("NDCG needs at least one positive")
    positives = set(int(i) for i in test_positives)
    dcg = math.fsum(
        1.0 / math.log2(position + 1)
        for position, item in enumerate(_as_ids(ranked)[:k].tolist(), start=1)
        if item in positives
    )
    idcg = math.fsum(1.0 / math.log2(position + 1) for position in range(1, min(k, len(positives)) + 1))
    return dcg / idcg


def alignment_mse(H_v: Union[Tensor, np.ndarray], H_t: Union[Tensor, np.ndarray]) -> float:
    """Mean over items of ‖h_v − h_t‖² / d."""
    a = H_v.data if isinstance(H_v, Tensor) else np.asarray(H_v, dtype=np.float64)
    b = H_t.data if isinstance(H_t, Tensor) else np.asarray(H_t, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"alignment_mse: shapes {a.shape} and {b.shape} differ")
    if a.size == 0:
        return 0.0
    if a.ndim == 1:
        a, b = a[None, :], b[None, :]
    return float(np.mean(np.mean((a - b) ** 2, axis=1)))


# =============================================================================
# REPORTS
# =============================================================================

class MetricsReport(BaseModel):
    target: str = "test"
    num_users: int = 0
    metrics: Dict[str, float] = Field(default_factory=dict)         # "recall@10" → value
    per_user: Dict[int, Dict[str, float]] = Field(default_factory=dict)
    alignment_mse: Optional[float] = None
    alignment_mse_raw: Optional[float] = None
    alpha: Optional[float] = None
    config: Dict[str, Any] = Field(default_factory=dict)
    run_id: Optional[str] = None
    seed: Optional[int] = None
    baseline: Optional["MetricsReport"] = None
    wall_clock_seconds: float = 0.0

    def recall(self, k: int) -> float:
        return self.metrics[f"recall@{k}"]

    def ndcg(self, k: int) -> float:
        return self.metrics[f"ndcg@{k}"]


MetricsReport.model_rebuild()


def _target_sets(split: SplitDataset, target: str):
    if target not in TARGETS:
        raise ContractError(f"unknown evaluation target {target!r}; choose from {', '.join(TARGETS)}")
    train = split.positives("train")
    if target == "train":
        return train, {}
    return split.positives(target), train


def evaluate_scores(
    split: SplitDataset,
    scores: np.ndarray,
    ks: Sequence[int] = DEFAULT_KS,
    target: str = "test",
) -> MetricsReport:
    """Metrics for a |U|×|I| score matrix.

    Users are eligible when they hold a target positive and, for held-out
    targets, at least one training interaction. Training positives are
    excluded from held-out rankings; the train target ranks everything.
    """
    started = time.perf_counter()
    positives, exclusions = _target_sets(split, target)
    train_users = set(split.positives("train"))
    users = sorted(u for u in positives if target == "train" or u in train_users)
    if not users:
        raise ReportError(f"no user has a {target} positive to evaluate")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (split.num_users, split.num_items):
        raise ContractError(f"score matrix {scores.shape} != ({split.num_users}, {split.num_items})")

    per_user: Dict[int, Dict[str, float]] = {}
    for u in users:
        ranked = rank_scores(u, scores[u], exclusions.get(u, ()))
        row = {}
        for k in ks:
            row[f"recall@{k}"] = recall_at_k(ranked, positives[u], k)
            row[f"ndcg@{k}"] = ndcg_at_k(ranked, positives[u], k)
        per_user[u] = row

    metrics = {
        name: math.fsum(per_user[u][name] for u in users) / len(users)
        for k in ks for name in (f"recall@{k}", f"ndcg@{k}")
    }
    return MetricsReport(
        target=target,
        num_users=len(users),
        metrics=metrics,
        per_user=per_user,
        wall_clock_seconds=time.perf_counter() - started,
    )


def evaluate_embeddings(
    split: SplitDataset,
    X_user: Union[Tensor, np.ndarray],
    X_item: Union[Tensor, np.ndarray],
    ks: Sequence[int] = DEFAULT_KS,
    target: str = "test",
) -> MetricsReport:
    users = X_user.data if isinstance(X_user, Tensor) else np.asarray(X_user)
    items = X_item.data if isinstance(X_item, Tensor) else np.asarray(X_item)
    return evaluate_scores(split, users @ items.T, ks=ks, target=target)


def evaluate(
    split: SplitDataset,
    model,
    ks: Sequence[int] = DEFAULT_KS,
    target: str = "test",
    inputs: Optional[ItemInputs] = None,
) -> MetricsReport:
    """Full evaluation of a trained UGTModel, alignment MSE included."""
    started = time.perf_counter()
    inputs = inputs or ItemInputs.from_dataset(split.dataset, model.patch_size)
    with T.no_grad():
        out = model.forward(build_graph(split), inputs)
    report = evaluate_embeddings(split, out.X_user, out.X_item, ks=ks, target=target)
    report.alignment_mse = alignment_mse(out.Z_v, out.Z_t)
    report.alignment_mse_raw = alignment_mse(out.H_v, out.H_t)
    report.alpha = model.alpha
    report.wall_clock_seconds = time.perf_counter() - started
    return report


def popularity_scores(split: SplitDataset) -> np.ndarray:
    counts = np.bincount(split.train[:, 1], minlength=split.num_items).astype(np.float64) \
        if len(split.train) else np.zeros(split.num_items)
    return np.broadcast_to(counts, (split.num_users, split.num_items))


def popularity_baseline(split: SplitDataset, ks: Sequence[int] = DEFAULT_KS, target: str = "test") -> MetricsReport:
    """Rank every user's candidates by training interaction count."""
    return evaluate_scores(split, popularity_scores(split), ks=ks, target=target)


# =============================================================================
# OUTPUT FILES
# =============================================================================

def make_run_id(config: Dict[str, Any], seed: int, fingerprint: str) -> str:
    """12 hex chars of sha256 over the config echo, seed and dataset fingerprint."""
    blob = json.dumps({"config": config, "seed": seed, "data": fingerprint}, sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def write_report(report: MetricsReport, out_dir: Union[str, Path]) -> List[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "report.json"
    report_path.write_text(report.model_dump_json(indent=2) + "\n")
    csv_path = out / "metrics.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["k", "metric", "value"])
        for name, value in report.metrics.items():
            metric, k = name.split("@")
            writer.writerow([k, metric, repr(value)])
        for name in ("alignment_mse", "alignment_mse_raw"):
            value = getattr(report, name)
            if value is not None:
                writer.writerow(["", name, repr(value)])
    logger.info(f"Wrote {report_path} and {csv_path}")
    return [report_path, csv_path]


def read_report(path: Union[str, Path]) -> MetricsReport:
    return MetricsReport.model_validate_json(Path(path).read_text())
