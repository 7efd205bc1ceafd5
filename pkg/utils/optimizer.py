from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, replace

import numpy as np

from models import (
    EpochTrace,
    GradCheckReport,
    ObjectiveConfig,
    ObjectiveMode,
    Phase,
    TensorCheck,
    TrainConfig,
)
from utils.encoder import Corpus, CorpusItem, ModelParams, WordTable
from utils.errors import ConfigError, DivergenceError, EmptyCorpusError
from utils.logging_helper import get_logger
from utils.objective import kink_arguments, objective_gradients, total_objective

logger = get_logger("train")

EpochCallback = Callable[[int, ModelParams, EpochTrace], None]


@dataclass(frozen=True)
class OptimizerState:
    velocity: ModelParams
    epoch: int = 0
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> OptimizerState:
        return cls(velocity=params.zeros_like())


@dataclass(frozen=True)
class TrainOutcome:
    params: ModelParams
    state: OptimizerState
    trace: list[EpochTrace]


def sgd_step(
    params: ModelParams,
    grads: ModelParams,
    state: OptimizerState,
    lr: float,
    momentum: float,
) -> tuple[ModelParams, OptimizerState]:
    """v <- momentum*v - lr*g; theta <- theta + v, for every trainable tensor."""
    if lr < 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")
    for name, g in grads.tensors().items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(state.step, f"non-finite gradient in {name}")
    velocity = state.velocity.combine(grads, lambda v, g: momentum * v - lr * g)
    updated = params.combine(velocity, np.add)
    if not updated.is_finite():
        raise DivergenceError(state.step, "parameters became non-finite")
    return updated, replace(state, velocity=velocity, step=state.step + 1)


def learning_rate_for_epoch(cfg: TrainConfig, epoch: int) -> float:
    if epoch >= cfg.epochs - cfg.anneal_last_epochs:
        return cfg.lr * cfg.anneal_factor
    return cfg.lr


def phase_for_epoch(cfg: TrainConfig, obj_cfg: ObjectiveConfig, epoch: int) -> Phase:
    if obj_cfg.mode == ObjectiveMode.combined_mil and epoch >= cfg.mil_start_epoch:
        return Phase.mil
    return Phase.dense


def _one_sentence_per_item(
    items: Sequence[CorpusItem], order: np.ndarray, rng: np.random.Generator
) -> list[CorpusItem]:
    counts = np.array([len(items[k].sentences) for k in order])
    picks = rng.integers(0, counts)
    return [
        CorpusItem(items[k].image_id, items[k].image_fragments, (items[k].sentences[p],))
        for k, p in zip(order, picks, strict=True)
    ]


def train(
    corpus: Corpus,
    table: WordTable,
    params: ModelParams,
    cfg: TrainConfig,
    obj_cfg: ObjectiveConfig,
    rng: np.random.Generator,
    on_epoch_end: EpochCallback | None = None,
) -> TrainOutcome:
    """Mini-batch SGD with momentum over the staged dense -> MIL schedule.

    Every epoch shuffles the items and picks one of each item's sentences, so
    an image never appears twice in a batch. The last partial batch is kept.
    """
    if len(corpus) == 0:
        raise EmptyCorpusError("training corpus is empty")
    state = OptimizerState.zeros(params)
    trace: list[EpochTrace] = []

    for epoch in range(cfg.epochs):
        lr = learning_rate_for_epoch(cfg, epoch)
        phase = phase_for_epoch(cfg, obj_cfg, epoch)
        order = rng.permutation(len(corpus))
        epoch_items = _one_sentence_per_item(corpus.items, order, rng)

        losses: list[float] = []
        for start in range(0, len(epoch_items), cfg.batch_size):
            batch = epoch_items[start : start + cfg.batch_size]
            result, grads = objective_gradients(
                params, table, batch, obj_cfg, use_mil=phase == Phase.mil
            )
            if not np.isfinite(result.loss):
                raise DivergenceError(state.step, f"loss is {result.loss}")
            params, state = sgd_step(params, grads, state, lr, cfg.momentum)
            losses.append(result.loss)

        state = replace(state, epoch=epoch + 1)
        entry = EpochTrace(epoch=epoch, phase=phase, lr=lr, mean_loss=float(np.mean(losses)))
        trace.append(entry)
        logger.info(
            "epoch %d/%d phase=%s lr=%g mean_loss=%.6f",
            epoch + 1,
            cfg.epochs,
            phase,
            lr,
            entry.mean_loss,
        )
        if on_epoch_end is not None:
            on_epoch_end(epoch, params, entry)

    return TrainOutcome(params=params, state=state, trace=trace)


def _with_entry(params: ModelParams, name: str, index: tuple[int, ...], value: float) -> ModelParams:
    tensors = dict(params.tensors())
    perturbed = tensors[name].copy()
    perturbed[index] = value
    tensors[name] = perturbed
    return ModelParams.from_tensors(params.relations, params.dims, tensors)


def grad_check(
    params: ModelParams,
    table: WordTable,
    items: Sequence[CorpusItem],
    obj_cfg: ObjectiveConfig,
    eps: float = 1e-5,
    kink_tol: float = 1e-4,
    *,
    use_mil: bool = True,
    floor: float = 1e-2,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    MIL labels are assigned once at `params` and frozen for both perturbed points. An
    entry is skipped when a perturbed pair lands on different sides of a kink, or
    moves a quantity that already sits within `kink_tol` of one. The relative
    error is |a - n| / max(|a|, |n|, floor).
    """
    if eps <= 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    labels = total_objective(params, table, items, obj_cfg, use_mil=use_mil).y
    _, grads = objective_gradients(params, table, items, obj_cfg, labels=labels)
    base_kinks = kink_arguments(params, table, items, obj_cfg, labels)
    near_kink = np.abs(base_kinks) < kink_tol
    analytic_tensors = grads.tensors()

    checks: list[TensorCheck] = []
    for name, tensor in params.tensors().items():
        indices = list(np.ndindex(tensor.shape))
        if max_entries is not None and len(indices) > max_entries:
            picker = rng if rng is not None else np.random.default_rng(0)
            chosen = np.sort(picker.choice(len(indices), size=max_entries, replace=False))
            indices = [indices[i] for i in chosen]

        checked = skipped = 0
        worst_err, worst_index, worst_pair = 0.0, None, (None, None)
        for index in indices:
            center = float(tensor[index])
            plus = _with_entry(params, name, index, center + eps)
            minus = _with_entry(params, name, index, center - eps)
            k_plus = kink_arguments(plus, table, items, obj_cfg, labels)
            k_minus = kink_arguments(minus, table, items, obj_cfg, labels)
            crossed = np.any((k_plus > 0) != (k_minus > 0))
            touched = np.any(near_kink & ((k_plus != base_kinks) | (k_minus != base_kinks)))
            if crossed or touched:
                skipped += 1
                logger.debug("gradcheck skip %s%s: perturbed pair crosses a kink", name, list(index))
                continue
            f_plus = total_objective(plus, table, items, obj_cfg, labels=labels).loss
            f_minus = total_objective(minus, table, items, obj_cfg, labels=labels).loss
            numeric = (f_plus - f_minus) / (2 * eps)
            analytic = float(analytic_tensors[name][index])
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            checked += 1
            if worst_index is None or err > worst_err:
                worst_err, worst_index, worst_pair = err, index, (analytic, numeric)

        checks.append(
            TensorCheck(
                name=name,
                checked=checked,
                skipped=skipped,
                max_rel_err=worst_err,
                worst_index=list(worst_index) if worst_index is not None else None,
                analytic=worst_pair[0],
                numeric=worst_pair[1],
            )
        )

    return GradCheckReport(max_rel_err=max((c.max_rel_err for c in checks), default=0.0), tensors=checks)
