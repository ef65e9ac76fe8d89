"""Full-graph training: Adam, early stopping on the validation composite,
and grid search over hyperparameter grids.

One "step" is one gradient update computed on the whole graph
(transductive full-batch training). After every update the model is
re-run in evaluation mode on the validation split; the selection signal
is accuracy plus detection AUROC, and training stops once that composite
has gone `patience` consecutive steps without a new maximum.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import metrics
from .engine import GradTape, Tensor, backward
from .errors import ConfigError, MetricError, TrainingAbort
from .graphs import Graph, SplitAssignment
from .layers import (
    ModelConfig,
    clone_params,
    graph_index,
    init_params,
    maybe_sparse_features,
    model_forward,
    restore_params,
)
from .losses import LossBreakdown, LossWeights, compute_objective

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """Everything that varies between training runs of a fixed model."""

    lr: float = 0.01
    weight_decay: float = 5e-4
    dropout_p: float = 0.0
    drop_edge_p: float = 0.0
    max_steps: int = 1000
    patience: int = 200
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not 0.0 <= self.dropout_p < 1.0 or not 0.0 <= self.drop_edge_p < 1.0:
            raise ConfigError("dropout rates must lie in [0, 1)")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")


@dataclass(frozen=True)
class StepRecord:
    step: int                  # 1-based
    losses: LossBreakdown
    val_accuracy: float
    val_auroc: float           # best applicable detection score
    composite: float           # val_accuracy + val_auroc


@dataclass
class TrainHistory:
    steps: list[StepRecord]
    best_step: int
    best_checkpoint: dict[str, np.ndarray]

    @property
    def best_composite(self) -> float:
        return self.steps[self.best_step - 1].composite


@dataclass
class TrainedModel:
    config: ModelConfig
    params: dict[str, Tensor]


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def init_adam(params: dict[str, Tensor]) -> AdamState:
    return AdamState(m={k: np.zeros(t.shape) for k, t in params.items()},
                     v={k: np.zeros(t.shape) for k, t in params.items()})


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, weight_decay: float, t: int) -> None:
    """One Adam update in place. `t` is the 1-based step count.

    L2 regularization enters as weight_decay * param added to the raw
    gradient before the moment updates, so it is adapted like any other
    gradient component.
    """
    if t < 1:
        raise ConfigError("adam step count is 1-based")
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, tensor in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(tensor.shape)
        if not np.all(np.isfinite(g)):
            raise TrainingAbort(f"non-finite gradient for {name!r}", step=t)
        if weight_decay:
            g = g + weight_decay * tensor.values
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        tensor.values = tensor.values - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


# ---------------------------------------------------------------------------
# validation scoring


def validation_scores(outputs, graph: Graph, val_mask: np.ndarray) -> tuple[float, float]:
    """(accuracy over ID validation nodes, best applicable detection AUROC).

    The AUROC uses the entropy score for every model and additionally the
    attention score when the model produces one, keeping the larger of the
    two. A validation set without both identities cannot score detection
    and falls back to 0 for the AUROC term.
    """
    id_mask = val_mask & (graph.identity == 0)
    acc = metrics.accuracy(outputs.probs.values, graph.labels, id_mask)
    try:
        best = metrics.auroc(metrics.ood_scores(outputs, "entropy",
                                                graph.identity, val_mask))
        if getattr(outputs, "att_score", None) is not None:
            att = metrics.auroc(metrics.ood_scores(outputs, "attention",
                                                   graph.identity, val_mask))
            best = max(best, att)
    except MetricError:
        best = 0.0
    return acc, best


# ---------------------------------------------------------------------------
# the training loop


def train(model_config: ModelConfig, graph: Graph, splits: SplitAssignment,
          cfg: TrainConfig, features=None) -> tuple[TrainedModel, TrainHistory]:
    """Train one model to early stopping and return the best checkpoint.

    The seed fixes parameter initialization and every dropout / drop-edge
    draw, so a repeated call is bit-identical. `features` may carry a
    preprocessed (possibly sparse) feature matrix to share across runs.
    """
    config = replace(model_config, dropout_p=cfg.dropout_p,
                     drop_edge_p=cfg.drop_edge_p)
    if features is None:
        features = maybe_sparse_features(graph.features)
    index = graph_index(graph)
    rng = np.random.default_rng(cfg.seed)
    params = init_params(config, graph.num_features, rng)
    state = init_adam(params)

    steps: list[StepRecord] = []
    best_composite = -np.inf
    best_step = 0
    best_checkpoint: dict[str, np.ndarray] = clone_params(params)
    stall = 0
    stochastic = config.dropout_p > 0 or config.drop_edge_p > 0

    for step in range(1, cfg.max_steps + 1):
        with GradTape():
            out = model_forward(config, params, features, index,
                                training=True, rng=rng if stochastic else None)
            total, breakdown = compute_objective(out, graph.labels,
                                                 splits.train_mask,
                                                 cfg.loss_weights, t=step - 1)
            if not np.isfinite(breakdown.total):
                raise TrainingAbort(f"non-finite loss at step {step}",
                                    step=step, breakdown=breakdown.as_dict())
            grads_by_tensor = backward(total)
        grads = {name: grads_by_tensor[t] for name, t in params.items()
                 if t in grads_by_tensor}
        adam_step(params, grads, state, cfg.lr, cfg.weight_decay, step)

        out_eval = model_forward(config, params, features, index)
        acc, det = validation_scores(out_eval, graph, splits.val_mask)
        composite = acc + det
        steps.append(StepRecord(step=step, losses=breakdown,
                                val_accuracy=acc, val_auroc=det,
                                composite=composite))
        if composite > best_composite:
            best_composite = composite
            best_step = step
            best_checkpoint = clone_params(params)
            stall = 0
        else:
            stall += 1
            if stall >= cfg.patience:
                break

    restore_params(params, best_checkpoint)
    history = TrainHistory(steps=steps, best_step=best_step,
                           best_checkpoint=best_checkpoint)
    return TrainedModel(config=config, params=params), history


# ---------------------------------------------------------------------------
# grid search

# which dataclass owns each tunable field
_MODEL_KEYS = {"heads", "hidden_dim", "activation"}
_TRAIN_KEYS = {"lr", "weight_decay", "dropout_p", "drop_edge_p",
               "max_steps", "patience", "seed"}
_LOSS_KEYS = {f.name for f in fields(LossWeights)}


@dataclass(frozen=True)
class GridCell:
    assignment: tuple          # ((key, value), ...) in sorted-key order
    model: ModelConfig
    train: TrainConfig
    score: float               # mean best validation composite over seeds


@dataclass
class GridResult:
    best: GridCell
    leaderboard: list[GridCell]   # score-descending, ties in config order


def expand_space(space: dict[str, list]) -> list[dict]:
    """Cartesian product of a {field: candidates} grid, in lexicographic
    order of the sorted field names."""
    if not space:
        raise ConfigError("grid space is empty")
    keys = sorted(space)
    for key in keys:
        if key not in _MODEL_KEYS | _TRAIN_KEYS | _LOSS_KEYS:
            raise ConfigError(f"unknown grid field {key!r}")
        if not space[key]:
            raise ConfigError(f"grid field {key!r} has no candidate values")
    return [dict(zip(keys, combo))
            for combo in itertools.product(*(space[k] for k in keys))]


def apply_assignment(model: ModelConfig, train_cfg: TrainConfig,
                     assignment: dict) -> tuple[ModelConfig, TrainConfig]:
    model_over = {k: v for k, v in assignment.items() if k in _MODEL_KEYS}
    train_over = {k: v for k, v in assignment.items() if k in _TRAIN_KEYS}
    loss_over = {k: v for k, v in assignment.items() if k in _LOSS_KEYS}
    if model_over:
        model = replace(model, **model_over)
    if loss_over:
        train_over["loss_weights"] = replace(train_cfg.loss_weights, **loss_over)
    if train_over:
        train_cfg = replace(train_cfg, **train_over)
    return model, train_cfg


def grid_search(model_config: ModelConfig, train_config: TrainConfig,
                graph: Graph, splits: SplitAssignment, space: dict[str, list],
                seeds: list[int] | None = None, features=None) -> GridResult:
    """Train every cell of the grid and rank by validation composite.

    Each cell optionally averages over several seeds. Ties are broken by
    the lexicographic order of the cell's assignment, so the result is
    deterministic for any evaluation order.
    """
    if seeds is not None and not seeds:
        raise ConfigError("seed list is empty")
    if features is None:
        features = maybe_sparse_features(graph.features)
    cells = []
    for assignment in expand_space(space):
        model, cfg = apply_assignment(model_config, train_config, assignment)
        cell_seeds = seeds if seeds is not None else [cfg.seed]
        scores = []
        for seed in cell_seeds:
            _, history = train(model, graph, splits,
                               replace(cfg, seed=seed), features=features)
            scores.append(history.best_composite)
        cells.append(GridCell(assignment=tuple(sorted(assignment.items())),
                              model=model, train=cfg,
                              score=float(np.mean(scores))))
    leaderboard = sorted(
        cells, key=lambda c: (-c.score, tuple(repr(v) for _, v in c.assignment)))
    return GridResult(best=leaderboard[0], leaderboard=leaderboard)
