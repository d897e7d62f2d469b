"""Training: BPR + ITC + L2 objective, Adam, early stopping on validation
BPR, ablation switches, grid search and the one-at-a-time sensitivity sweep.

Config files are flat `key = value` lines; `#` starts a comment and list
values are comma-separated.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from . import tensor as T
from .data import SplitDataset
from .encoder import EncoderConfig, ItemInputs
from .errors import ConfigurationError, ContractError, DivergenceError, ReportError
from .evaluation import MetricsReport, evaluate_embeddings
from .fusion import FusionConfig, InteractionGraph, build_graph
from .model import ABLATION_NAMES, AblationSwitches, UGTModel, init_model
from .tensor import Tensor

logger = logging.getLogger(__name__)

DEFAULT_GRID = [round(0.1 * k, 1) for k in range(11)]
LOG_COLUMNS = ["epoch", "train_loss", "bpr", "itc", "val_loss", "val_recall@10"]


class TrainConfig(BaseModel):
    lr: float = Field(default=0.01, gt=0)
    batch_size: int = Field(default=256, ge=1)
    lambda_c: float = Field(default=0.4, ge=0)
    lambda_reg: float = Field(default=1e-4, ge=0)
    epsilon: float = Field(default=0.5, ge=0, le=1)
    itc_temperature: float = Field(default=0.07, gt=0)
    itc_exclude_positive: bool = False
    max_epochs: int = Field(default=100, ge=0)
    patience: int = Field(default=50, ge=1)
    seed: int = 0
    ablation: List[str] = Field(default_factory=list)
    grid_epsilon: List[float] = Field(default_factory=lambda: list(DEFAULT_GRID))
    grid_lambda_c: List[float] = Field(default_factory=lambda: list(DEFAULT_GRID))
    # encoder / graph shape
    d: int = Field(default=32, ge=2)
    n_heads: int = Field(default=4, ge=1)
    d_ff: int = Field(default=64, ge=1)
    d_itc: int = Field(default=16, ge=1)
    encoder_layers: int = Field(default=2, ge=0)
    graph_layers: int = Field(default=2, ge=0)
    patch_size: int = Field(default=4, ge=1)

    @field_validator("ablation", mode="before")
    @classmethod
    def split_names(cls, value):
        if isinstance(value, str):
            value = [v for v in (p.strip() for p in value.split(",")) if v]
        return value

    @field_validator("ablation")
    @classmethod
    def known_ablations(cls, value: List[str]) -> List[str]:
        unknown = [v for v in value if v not in ABLATION_NAMES]
        if unknown:
            raise ValueError(f"unknown ablation {unknown[0]!r}; choose from {', '.join(ABLATION_NAMES)}")
        return sorted(set(value), key=ABLATION_NAMES.index)

    @field_validator("grid_epsilon", "grid_lambda_c", mode="before")
    @classmethod
    def split_values(cls, value):
        if isinstance(value, str):
            value = [p.strip() for p in value.split(",") if p.strip()]
        return value

    @field_validator("grid_epsilon", "grid_lambda_c")
    @classmethod
    def non_empty_grid(cls, value: List[float]) -> List[float]:
        if not value:
            raise ValueError("grid must hold at least one value")
        if any(v < 0 for v in value):
            raise ValueError("grid values must be ≥ 0")
        return value

    @field_validator("grid_epsilon")
    @classmethod
    def epsilon_range(cls, value: List[float]) -> List[float]:
        if any(v > 1 for v in value):
            raise ValueError("epsilon grid values must lie in [0, 1]")
        return value

    @model_validator(mode="after")
    def shapes_agree(self) -> "TrainConfig":
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.d % 2:
            raise ValueError(f"attentive fusion needs an even d, got {self.d}")
        return self

    @property
    def switches(self) -> AblationSwitches:
        return AblationSwitches.from_names(self.ablation)

    @property
    def effective_lambda_c(self) -> float:
        return self.lambda_c if self.switches.contrastive else 0.0

    @property
    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(d=self.d, n_heads=self.n_heads, d_ff=self.d_ff, d_itc=self.d_itc,
                             num_layers=self.encoder_layers, patch_size=self.patch_size)

    @property
    def fusion_config(self) -> FusionConfig:
        return FusionConfig(d=self.d, epsilon=self.epsilon, num_layers=self.graph_layers)

    def with_updates(self, **changes: Any) -> "TrainConfig":
        return make_config({**self.model_dump(), **changes})


def make_config(values: Dict[str, Any]) -> TrainConfig:
    """Validate raw values into a TrainConfig; errors name the key."""
    unknown = sorted(set(values) - set(TrainConfig.model_fields))
    if unknown:
        raise ConfigurationError(f"unknown config key {unknown[0]!r}")
    try:
        return TrainConfig(**values)
    except ValidationError as e:
        first = e.errors()[0]
        key = first["loc"][0] if first["loc"] else "config"
        raise ConfigurationError(f"{key}: {first['msg']}") from e


def parse_config(text: str, source: str = "<config>") -> TrainConfig:
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigurationError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return make_config(values)


def load_config(path: Union[str, Path]) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path}: {e.strerror}") from e
    except UnicodeDecodeError:
        raise ConfigurationError(f"config {path} is not valid UTF-8") from None
    return parse_config(text, source=str(path))


def dump_config(config: TrainConfig) -> str:
    lines = []
    for key, value in config.model_dump().items():
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


# =============================================================================
# NEGATIVE SAMPLING
# =============================================================================

class BprTriple(NamedTuple):
    user: int
    pos: int
    neg: int


def sample_triples(graph: InteractionGraph, batch_size: int, rng: np.random.Generator) -> List[BprTriple]:
    """Exactly `batch_size` (u, i, j) triples.

    Users are drawn uniformly among those with at least one positive and one
    negative, a positive uniformly from the user's items, and the negative by
    rejection against the user's training items.
    """
    positives = graph.positives()
    eligible = sorted(u for u, items in positives.items() if len(items) < graph.num_items)
    skipped = len(positives) - len(eligible)
    if skipped:
        logger.warning(f"Skipping {skipped} users who interacted with every item")
    if not eligible:
        raise ContractError("no user has both a positive and a negative item to sample")
    sets = {u: set(positives[u].tolist()) for u in eligible}
    triples = []
    users = rng.choice(np.asarray(eligible, dtype=np.int64), size=batch_size)
    for u in users.tolist():
        items = positives[u]
        pos = int(items[rng.integers(len(items))])
        while True:
            neg = int(rng.integers(graph.num_items))
            if neg not in sets[u]:
                break
        triples.append(BprTriple(u, pos, neg))
    return triples


def triple_arrays(triples: Sequence[BprTriple]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    arr = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    return arr[:, 0], arr[:, 1], arr[:, 2]


# =============================================================================
# LOSSES
# =============================================================================

def bpr_loss(triples: Sequence[BprTriple], X_user: Tensor, X_item: Tensor) -> Tensor:
    """−mean log σ(x_uᵀx_i − x_uᵀx_j)."""
    if not len(triples):
        raise ContractError("bpr_loss needs at least one triple")
    users, pos, neg = triple_arrays(triples)
    x_u = T.gather(X_user, users)
    margin = T.sum_(x_u * T.gather(X_item, pos), axis=1) - T.sum_(x_u * T.gather(X_item, neg), axis=1)
    return -T.mean(T.log_sigmoid(margin))


def itc_loss(
    Z_v: Tensor,
    Z_t: Tensor,
    temperature: float = 0.07,
    batch_items: Optional[Sequence[int]] = None,
    exclude_positive: bool = False,
) -> Tensor:
    """Symmetric image–text InfoNCE over a batch of unit embeddings.

    S = Z_v Z_tᵀ / τ; each row (image→text) and column (text→image) is a
    softmax over the batch whose target is the diagonal. With
    `exclude_positive` the denominator sums over mismatched pairs only.
    """
    if temperature <= 0:
        raise ConfigurationError(f"ITC temperature must be > 0, got {temperature}")
    if batch_items is not None:
        Z_v, Z_t = T.gather(Z_v, batch_items), T.gather(Z_t, batch_items)
    n = Z_v.shape[0]
    if n < 2:
        raise ContractError(f"ITC needs at least 2 items in the batch, got {n}")
    eye = np.eye(n)
    mask = Tensor(1.0 - eye if exclude_positive else np.ones((n, n)))
    S = T.mul(Z_v @ Z_t.T, 1.0 / temperature)
    diagonal = T.sum_(S * Tensor(eye), axis=1)
    # unit rows bound S by 1/τ, so the shifted exponentials never overflow
    shifted = T.exp(S - 1.0 / temperature) * mask
    log_rows = T.log(T.sum_(shifted, axis=1)) + 1.0 / temperature
    log_cols = T.log(T.sum_(shifted, axis=0)) + 1.0 / temperature
    image_to_text = T.mean(log_rows - diagonal)
    text_to_image = T.mean(log_cols - diagonal)
    return T.mul(image_to_text + text_to_image, 0.5)


def l2_penalty(params: Iterable[Tensor]) -> Tensor:
    total = Tensor(0.0)
    for p in params:
        total = total + T.sum_(p * p)
    return total


def joint_loss(bpr: Tensor, itc: Union[Tensor, float], params: Iterable[Tensor], lambda_c: float, lambda_reg: float) -> Tensor:
    """L = BPR + λ_c·ITC + λ·Σ‖θ‖²."""
    loss = bpr
    if lambda_c:
        loss = loss + T.mul(T.as_tensor(itc), lambda_c)
    if lambda_reg:
        loss = loss + T.mul(l2_penalty(params), lambda_reg)
    return loss


# =============================================================================
# OPTIMISER AND EARLY STOPPING
# =============================================================================

@dataclass
class TrainState:
    model: UGTModel
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0
    best_val_loss: float = math.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0

    @classmethod
    def create(cls, model: UGTModel) -> "TrainState":
        params = model.trainable_parameters()
        return cls(
            model=model,
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
        )


def adam_step(
    state: TrainState,
    grads: Dict[str, Optional[np.ndarray]],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> TrainState:
    """Bias-corrected Adam. A parameter whose gradient is missing or all zero
    keeps its value while its moments decay."""
    state.step += 1
    params = state.model.trainable_parameters()
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        # intended: a parameter whose gradient is all zero keeps its value this step
        if not np.any(g):
            continue
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


class EarlyStopping:
    """Stops once the monitored loss has not decreased for `patience` epochs
    and keeps a copy of the best weights."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = 0
        self.counter = 0
        self.best_state: Optional[Dict[str, np.ndarray]] = None

    def __call__(self, loss: float, epoch: int, model: UGTModel) -> bool:
        """Record one epoch; True means stop."""
        if loss < self.best_loss:
            self.best_loss, self.best_epoch, self.counter = loss, epoch, 0
            self.best_state = model.state_dict()
            return False
        self.counter += 1
        return self.counter >= self.patience


# =============================================================================
# TRAINING LOOP
# =============================================================================

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    bpr: float
    itc: float
    val_loss: float
    val_recall: float

    def row(self) -> List[str]:
        return [str(self.epoch)] + [repr(float(v)) for v in (self.train_loss, self.bpr, self.itc, self.val_loss, self.val_recall)]


@dataclass
class TrainResult:
    state: TrainState
    history: List[EpochRecord]
    config: TrainConfig
    stopped_early: bool = False
    wall_clock_seconds: float = 0.0

    @property
    def model(self) -> UGTModel:
        return self.state.model


def validation_triples(split: SplitDataset, rng: np.random.Generator) -> List[BprTriple]:
    """One fixed negative per validation pair, outside the user's known items."""
    known: Dict[int, set] = {}
    for part in ("train", "validation"):
        for u, items in split.positives(part).items():
            known.setdefault(u, set()).update(items)
    triples = []
    for u, i in split.validation.tolist():
        if len(known[u]) >= split.num_items:
            continue
        while True:
            j = int(rng.integers(split.num_items))
            if j not in known[u]:
                break
        triples.append(BprTriple(int(u), int(i), j))
    return triples


def build_model(split: SplitDataset, config: TrainConfig, inputs: ItemInputs, rng: np.random.Generator) -> UGTModel:
    dataset = split.dataset
    return init_model(
        config.encoder_config, config.fusion_config, config.switches,
        split.num_users, split.num_items, inputs, dataset.vocab_size, dataset.max_text_len, rng,
    )


def _finite(value: float, what: str, epoch: int, step: int) -> float:
    if not math.isfinite(value):
        raise DivergenceError(f"{what} became {value} at epoch {epoch}, step {step}")
    return value


def train(
    split: SplitDataset,
    config: TrainConfig,
    inputs: Optional[ItemInputs] = None,
    log_path: Optional[Union[str, Path]] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """Train until max_epochs or `patience` epochs without a validation-loss
    decrease; the returned model holds the best-validation weights."""
    started = time.perf_counter()
    init_seq, sample_seq, val_seq = np.random.SeedSequence(config.seed).spawn(3)
    inputs = inputs or ItemInputs.from_dataset(split.dataset, config.patch_size)
    graph = build_graph(split)
    model = build_model(split, config, inputs, np.random.default_rng(init_seq))
    state = TrainState.create(model)
    sample_rng = np.random.default_rng(sample_seq)
    val_triples = validation_triples(split, np.random.default_rng(val_seq))
    lambda_c = config.effective_lambda_c
    steps_per_epoch = max(1, math.ceil(len(split.train) / config.batch_size))
    params = model.trainable_parameters()
    regularized = list(model.regularized_parameters().values())
    logger.info(
        f"Training {model.switches.label} on {len(split.train)} interactions: "
        f"{config.max_epochs} epochs × {steps_per_epoch} steps, ε={config.epsilon}, λ_c={lambda_c}"
    )
    if not val_triples:
        logger.warning("No validation pairs; early stopping monitors the training BPR instead")

    stopper = EarlyStopping(config.patience)
    history: List[EpochRecord] = []
    log_file = writer = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(LOG_COLUMNS)
    stopped_early = False
    try:
        for epoch in range(1, config.max_epochs + 1):
            totals = np.zeros(3)
            for step in range(steps_per_epoch):
                triples = sample_triples(graph, config.batch_size, sample_rng)
                out = model.forward(graph, inputs)
                bpr = bpr_loss(triples, out.X_user, out.X_item)
                itc: Union[Tensor, float] = 0.0
                if lambda_c:
                    _, pos, neg = triple_arrays(triples)
                    batch_items = np.unique(np.concatenate([pos, neg]))
                    itc = itc_loss(out.Z_v, out.Z_t, config.itc_temperature, batch_items, config.itc_exclude_positive)
                loss = joint_loss(bpr, itc, regularized, lambda_c, config.lambda_reg)
                _finite(loss.item(), "training loss", epoch, step)
                for p in params.values():
                    p.zero_grad()
                T.backward(loss)
                adam_step(state, {name: p.grad for name, p in params.items()}, config.lr)
                totals += (loss.item(), bpr.item(), float(T.as_tensor(itc).item()))
            totals /= steps_per_epoch

            with T.no_grad():
                out = model.forward(graph, inputs)
                val_loss = bpr_loss(val_triples, out.X_user, out.X_item).item() if val_triples else totals[1]
            _finite(val_loss, "validation loss", epoch, steps_per_epoch)
            try:
                val_recall = evaluate_embeddings(split, out.X_user, out.X_item, ks=(10,), target="validation").recall(10)
            except ReportError:
                val_recall = float("nan")
            record = EpochRecord(epoch, totals[0], totals[1], totals[2], val_loss, val_recall)
            history.append(record)
            if writer is not None:
                writer.writerow(record.row())
            if on_epoch is not None:
                on_epoch(record)
            logger.info(
                f"epoch {epoch}: loss={record.train_loss:.4f} bpr={record.bpr:.4f} itc={record.itc:.4f} "
                f"val_loss={val_loss:.4f} val_recall@10={val_recall:.4f}"
            )
            state.epoch = epoch
            if stopper(val_loss, epoch, model):
                stopped_early = True
                logger.info(f"Early stop at epoch {epoch}; best epoch {stopper.best_epoch} (val_loss={stopper.best_loss:.4f})")
                break
    finally:
        if log_file is not None:
            log_file.close()

    if stopper.best_state is not None:
        model.load_state_dict(stopper.best_state)
    state.best_val_loss = stopper.best_loss
    state.best_epoch = stopper.best_epoch
    state.epochs_since_improvement = stopper.counter
    return TrainResult(
        state=state, history=history, config=config,
        stopped_early=stopped_early, wall_clock_seconds=time.perf_counter() - started,
    )


# =============================================================================
# GRID SEARCH AND SENSITIVITY SWEEP
# =============================================================================

@dataclass
class GridCell:
    epsilon: float
    lambda_c: float
    val_recall: float
    val_ndcg: float
    best_epoch: int


@dataclass
class GridResult:
    cells: List[GridCell]
    best: GridCell

    def table(self) -> List[Dict[str, float]]:
        return [vars(c).copy() for c in self.cells]


def _validation_report(split: SplitDataset, result: TrainResult, inputs: ItemInputs) -> MetricsReport:
    graph = build_graph(split)
    with T.no_grad():
        out = result.model.forward(graph, inputs)
    return evaluate_embeddings(split, out.X_user, out.X_item, ks=(10, 20), target="validation")


def _run_cell(split: SplitDataset, config: TrainConfig, inputs: ItemInputs) -> GridCell:
    result = train(split, config, inputs=inputs)
    report = _validation_report(split, result, inputs)
    cell = GridCell(config.epsilon, config.lambda_c, report.recall(10), report.ndcg(10), result.state.best_epoch)
    logger.info(f"grid cell ε={cell.epsilon} λ_c={cell.lambda_c}: val recall@10={cell.val_recall:.4f}")
    return cell


def best_cell(cells: Sequence[GridCell]) -> GridCell:
    """Highest validation Recall@10; ties go to smaller ε, then smaller λ_c."""
    return min(cells, key=lambda c: (-c.val_recall, c.epsilon, c.lambda_c))


def grid_search(
    split: SplitDataset,
    config: TrainConfig,
    epochs: Optional[int] = None,
    threads: int = 1,
) -> GridResult:
    """Train one model per (ε, λ_c) cell and pick the best on validation Recall@10.

    Cells run on up to `threads` workers; results come back in cell order.
    """
    if not config.grid_epsilon or not config.grid_lambda_c:
        raise ConfigurationError("grid search needs non-empty grid_epsilon and grid_lambda_c")
    overrides = {} if epochs is None else {"max_epochs": epochs}
    configs = [
        config.with_updates(epsilon=eps, lambda_c=lc, **overrides)
        for eps in config.grid_epsilon for lc in config.grid_lambda_c
    ]
    inputs = ItemInputs.from_dataset(split.dataset, config.patch_size)
    logger.info(f"Grid search over {len(configs)} cells with {threads} worker(s)")
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        cells = list(pool.map(lambda c: _run_cell(split, c, inputs), configs))
    return GridResult(cells=cells, best=best_cell(cells))


@dataclass
class SweepPoint:
    parameter: str
    value: float
    validation: Dict[str, float] = field(default_factory=dict)
    test: Dict[str, float] = field(default_factory=dict)


SWEEP_PARAMETERS = ("epsilon", "lambda_c")


def sensitivity_sweep(
    split: SplitDataset,
    config: TrainConfig,
    parameter: str,
    values: Optional[Sequence[float]] = None,
    epochs: Optional[int] = None,
    threads: int = 1,
) -> List[SweepPoint]:
    """Vary one hyper-parameter with everything else held at `config`."""
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigurationError(f"cannot sweep {parameter!r}; choose from {', '.join(SWEEP_PARAMETERS)}")
    if values is None:
        values = config.grid_epsilon if parameter == "epsilon" else config.grid_lambda_c
    overrides = {} if epochs is None else {"max_epochs": epochs}
    configs = [config.with_updates(**{parameter: v}, **overrides) for v in values]
    inputs = ItemInputs.from_dataset(split.dataset, config.patch_size)

    def run(cfg: TrainConfig) -> SweepPoint:
        result = train(split, cfg, inputs=inputs)
        with T.no_grad():
            out = result.model.forward(build_graph(split), inputs)
        point = SweepPoint(parameter, getattr(cfg, parameter))
        for target, sink in (("validation", point.validation), ("test", point.test)):
            try:
                sink.update(evaluate_embeddings(split, out.X_user, out.X_item, target=target).metrics)
            except ReportError:
                logger.warning(f"No {target} users to evaluate for {parameter}={point.value}")
        return point

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(run, configs))
