"""Headless checks behind `ugt verify`: closed forms, oracles and the
whole-model gradient check.

Each check returns a CheckResult; `run_checks` collects them in registry
order. The brute-force evaluator here is written against plain Python
lists and shares no code with `evaluation`.
"""

from __future__ import annotations

import logging
import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import Dataset, SplitDataset, generate_synthetic, patchify, split, unpatchify
from .encoder import ItemInputs
from .errors import DataFormatError, UGTError
from .evaluation import evaluate_scores, rank_scores
from .fusion import final_embeddings, graph_from_edges, lightgcn_reference, propagate_id, unified_propagate
from .model import load_checkpoint, save_checkpoint
from .tensor import Tensor
from .train import BprTriple, TrainConfig, TrainState, adam_step, bpr_loss, build_model, itc_loss, joint_loss

logger = logging.getLogger(__name__)


@dataclass
class CheckResult:
    name: str
    passed: bool
    expected: str
    actual: str
    seconds: float = 0.0


CheckFn = Callable[[], Tuple[bool, str, str]]
CHECKS: Dict[str, CheckFn] = {}


def check(name: str):
    def register(fn: CheckFn) -> CheckFn:
        CHECKS[name] = fn
        return fn
    return register


# =============================================================================
# BRUTE-FORCE ORACLE
# =============================================================================

def oracle_ranking(scores: Sequence[float], exclusions) -> List[int]:
    return sorted((i for i in range(len(scores)) if i not in exclusions), key=lambda i: (-scores[i], i))


def oracle_recall(ranking: List[int], positives, k: int) -> float:
    top = ranking[:k]
    return len([i for i in positives if i in top]) / len(positives)


def oracle_ndcg(ranking: List[int], positives, k: int) -> float:
    gains = [1.0 / math.log2(p + 2) for p, i in enumerate(ranking[:k]) if i in positives]
    ideal = [1.0 / math.log2(p + 2) for p in range(min(k, len(positives)))]
    return math.fsum(gains) / math.fsum(ideal)


def oracle_evaluate(scores: np.ndarray, train: Dict[int, set], held_out: Dict[int, set], ks: Sequence[int]) -> Dict[str, float]:
    rows = scores.tolist()
    users = [u for u in sorted(held_out) if u in train]
    out = {}
    for k in ks:
        per_recall, per_ndcg = [], []
        for u in users:
            ranking = oracle_ranking(rows[u], train[u])
            per_recall.append(oracle_recall(ranking, held_out[u], k))
            per_ndcg.append(oracle_ndcg(ranking, held_out[u], k))
        out[f"recall@{k}"] = math.fsum(per_recall) / len(users)
        out[f"ndcg@{k}"] = math.fsum(per_ndcg) / len(users)
    return out


# =============================================================================
# TOY INSTANCES
# =============================================================================

def toy_config(**changes) -> TrainConfig:
    values = dict(d=8, n_heads=2, d_ff=16, d_itc=4, encoder_layers=1, graph_layers=1, patch_size=2,
                  itc_temperature=0.5, lambda_c=0.4, lambda_reg=1e-3, batch_size=8, seed=3)
    values.update(changes)
    return TrainConfig(**values)


def toy_dataset(seed: int = 3, num_users: int = 5, num_items: int = 5) -> Dataset:
    return generate_synthetic(num_users, num_items, latent_dim=2, density=0.4, seed=seed,
                              image_size=4, channels=3, vocab_size=8, max_text_len=4)


def toy_joint_loss(config: Optional[TrainConfig] = None, seed: int = 3):
    """A 5×5 model with a fixed batch: returns (loss_fn, trainable params)."""
    config = config or toy_config(seed=seed)
    dataset = toy_dataset(seed)
    data_split = split(dataset, ratios=(1, 0, 0), seed=seed)
    inputs = ItemInputs.from_dataset(dataset, config.patch_size)
    rng = np.random.default_rng(seed)
    model = build_model(data_split, config, inputs, rng)
    graph = graph_from_edges(dataset.num_users, dataset.num_items, data_split.train)
    positives = data_split.positives("train")
    triples = []
    for u in sorted(positives):
        negatives = [j for j in range(dataset.num_items) if j not in positives[u]]
        if negatives:
            triples.append(BprTriple(u, min(positives[u]), negatives[0]))
    params = model.trainable_parameters()
    regularized = list(model.regularized_parameters().values())

    def loss_fn(*_: Tensor) -> Tensor:
        out = model.forward(graph, inputs)
        bpr = bpr_loss(triples, out.X_user, out.X_item)
        itc = itc_loss(out.Z_v, out.Z_t, config.itc_temperature)
        return joint_loss(bpr, itc, regularized, config.effective_lambda_c, config.lambda_reg)

    return loss_fn, list(params.values())


def random_split(rng: np.random.Generator, num_users: int, num_items: int, density: float) -> SplitDataset:
    """A bare split with random train/test edges (no item content)."""
    mask = rng.random((num_users, num_items)) < density
    edges = np.argwhere(mask)
    is_test = rng.random(len(edges)) < 0.3
    dataset = Dataset(
        num_users=num_users,
        num_items=num_items,
        vocab_size=1,
        interactions=edges.astype(np.int64).reshape(-1, 2),
        item_images=np.zeros((num_items, 1, 1, 1), dtype=np.float32),
        item_texts=[np.zeros(0, dtype=np.int64) for _ in range(num_items)],
    )
    return SplitDataset(dataset, edges[~is_test].reshape(-1, 2), np.zeros((0, 2), dtype=np.int64), edges[is_test].reshape(-1, 2))


# =============================================================================
# CHECKS
# =============================================================================

@check("gradient")
def check_gradient() -> Tuple[bool, str, str]:
    loss_fn, params = toy_joint_loss()
    report = T.grad_check(loss_fn, params, h=1e-4)
    return report.passed, "max rel error < 1e-4", f"{report.max_rel_error:.3e} over {report.rel_errors.size} coordinates"


@check("metric_oracle")
def check_metric_oracle(instances: int = 1000, seed: int = 11) -> Tuple[bool, str, str]:
    rng = np.random.default_rng(seed)
    mismatches = evaluated = 0
    for _ in range(instances):
        num_items = int(rng.integers(2, 51))
        num_users = int(rng.integers(1, 9))
        data_split = random_split(rng, num_users, num_items, float(rng.uniform(0.1, 0.6)))
        held_out = data_split.positives("test")
        train = data_split.positives("train")
        if not any(u in train for u in held_out):
            continue
        # coarse scores force ties
        scores = np.round(rng.standard_normal((num_users, num_items)), int(rng.integers(0, 3)))
        ks = (1, 5, 10, 20)
        got = evaluate_scores(data_split, scores, ks=ks).metrics
        want = oracle_evaluate(scores, train, held_out, ks)
        evaluated += 1
        if any(got[name] != want[name] for name in want):
            mismatches += 1
    return mismatches == 0, "0 mismatches", f"{mismatches} mismatches over {evaluated} instances"


@check("lightgcn_degeneration")
def check_lightgcn_degeneration(graphs: int = 100, seed: int = 5) -> Tuple[bool, str, str]:
    rng = np.random.default_rng(seed)
    differing = 0
    with T.no_grad():
        for _ in range(graphs):
            num_users, num_items, d = int(rng.integers(2, 12)), int(rng.integers(2, 15)), 4
            layers = int(rng.integers(0, 4))
            edges = np.argwhere(rng.random((num_users, num_items)) < 0.3)
            graph = graph_from_edges(num_users, num_items, edges)
            E_id = rng.standard_normal((num_users + num_items, d))
            id_layers = propagate_id(graph, Tensor(E_id), layers)
            state = unified_propagate(graph, Tensor(np.zeros((num_items, d))), id_layers, 0.0, layers)
            X_user, X_item = final_embeddings(state.id_layers, state.modal_layers, graph)
            R_user, R_item = lightgcn_reference(graph, E_id, layers)
            ours, ref = X_user.data @ X_item.data.T, R_user @ R_item.T
            for u in range(num_users):
                if not np.array_equal(rank_scores(u, ours[u]).items, rank_scores(u, ref[u]).items):
                    differing += 1
    return differing == 0, "identical rankings", f"{differing} users rank differently over {graphs} graphs"


@check("itc_closed_form")
def check_itc_closed_form() -> Tuple[bool, str, str]:
    n = 4
    same = Tensor(np.tile([[0.6, 0.8]], (n, 1)))
    coincide = itc_loss(same, same, temperature=0.07).item()
    eye = Tensor(np.eye(2))
    separated = itc_loss(eye, eye, temperature=1.0).item()
    want = -math.log(math.e / (math.e + 1.0))
    ok = abs(coincide - math.log(n)) < 1e-9 and abs(separated - want) < 1e-9
    return ok, f"ln 4={math.log(n):.12f}, {want:.12f}", f"{coincide:.12f}, {separated:.12f}"


@check("bpr_closed_form")
def check_bpr_closed_form() -> Tuple[bool, str, str]:
    X_user = Tensor([[1.0, 0.0]])
    X_item = Tensor([[1.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
    tie = bpr_loss([BprTriple(0, 0, 2)], X_user, X_item).item()
    margin = bpr_loss([BprTriple(0, 0, 1)], X_user, X_item).item()
    want_margin = -math.log(1.0 / (1.0 + math.exp(-1.0)))
    ok = abs(tie - math.log(2.0)) < 1e-12 and abs(margin - want_margin) < 1e-12
    return ok, f"{math.log(2):.6f}, {want_margin:.6f}", f"{tie:.6f}, {margin:.6f}"


@check("adam_first_step")
def check_adam_first_step() -> Tuple[bool, str, str]:
    # a stand-in model exposing one parameter with a known gradient
    weights = T.parameter(np.array([0.5, -0.5, 0.0]))
    fake = type("OneParam", (), {"trainable_parameters": lambda self: {"w": weights}})()
    state = TrainState(model=fake, m={"w": np.zeros(3)}, v={"w": np.zeros(3)})
    adam_step(state, {"w": np.array([2.0, -3.0, 0.0])}, lr=0.01)
    delta = weights.data - np.array([0.5, -0.5, 0.0])
    want = np.array([-0.01, 0.01, 0.0])
    return bool(np.allclose(delta, want, atol=1e-8)), str(want.tolist()), str(np.round(delta, 10).tolist())


@check("patchify_roundtrip")
def check_patchify_roundtrip() -> Tuple[bool, str, str]:
    rng = np.random.default_rng(0)
    image = rng.random((8, 8, 3)).astype(np.float32)
    restored = unpatchify(patchify(image, 4), 8, 3)
    return bool(np.array_equal(image, restored)), "exact round trip", "exact" if np.array_equal(image, restored) else "differs"


@check("checkpoint")
def check_checkpoint(path: Optional[Path] = None) -> Tuple[bool, str, str]:
    if path is not None:
        try:
            arrays, _ = load_checkpoint(path)
        except DataFormatError as e:
            return False, "valid checkpoint", str(e)
        return True, "valid checkpoint", f"{len(arrays)} arrays"
    rng = np.random.default_rng(1)
    arrays = {"a": rng.standard_normal((3, 2)), "b": rng.standard_normal(4)}
    with tempfile.TemporaryDirectory() as tmp:
        target = save_checkpoint(arrays, Path(tmp) / "checkpoint.bin")
        loaded, _ = load_checkpoint(target)
        same = all(np.array_equal(loaded[k], arrays[k]) for k in arrays)
        blob = bytearray(target.read_bytes())
        target.write_bytes(bytes(blob[:-5]))
        try:
            load_checkpoint(target)
            caught = False
        except DataFormatError:
            caught = True
    return same and caught, "round trip + truncation detected", f"round trip {'ok' if same else 'differs'}, truncation {'detected' if caught else 'missed'}"


# =============================================================================
# RUNNER
# =============================================================================

def run_checks(only: Optional[Sequence[str]] = None, checkpoint: Optional[Path] = None) -> List[CheckResult]:
    names = list(only) if only else list(CHECKS)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown check {unknown[0]!r}; choose from {', '.join(CHECKS)}")
    results = []
    for name in names:
        started = time.perf_counter()
        try:
            if name == "checkpoint" and checkpoint is not None:
                passed, expected, actual = check_checkpoint(checkpoint)
            else:
                passed, expected, actual = CHECKS[name]()
        except UGTError as e:
            passed, expected, actual = False, "no error", f"{type(e).__name__}: {e}"
        result = CheckResult(name, passed, expected, actual, time.perf_counter() - started)
        logger.info(f"check {name}: {'PASS' if passed else 'FAIL'} ({result.seconds:.2f}s)")
        results.append(result)
    return results


def format_table(results: Sequence[CheckResult]) -> str:
    width = max([len(r.name) for r in results] + [5])
    lines = [f"{'check':<{width}}  status  seconds  expected | actual"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:7.2f}  {r.expected} | {r.actual}")
    return "\n".join(lines)
