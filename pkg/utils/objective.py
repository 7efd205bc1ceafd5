"""Fragment alignment and global ranking objectives with analytic gradients.

All reductions are plain numpy sums over arrays laid out in batch order, so a
loss evaluated twice on the same inputs is bitwise identical.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from models import ObjectiveConfig, ObjectiveMode
from utils.bags import BagStructure
from utils.encoder import CorpusItem, EncodedBatch, ModelParams, WordTable, encode_batch
from utils.errors import BagStructureError, ShapeError

__all__ = [
    "BagStructure",
    "ObjectiveResult",
    "dense_labels",
    "fragment_loss_c0",
    "fragment_loss_mil",
    "global_ranking_loss",
    "image_sentence_matrix",
    "image_sentence_score",
    "kappa_weights",
    "kink_arguments",
    "mil_assign_labels",
    "objective_gradients",
    "score_matrix",
    "total_objective",
]


def score_matrix(V: np.ndarray, S: np.ndarray) -> np.ndarray:
    V = np.asarray(V, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    if V.ndim != 2 or S.ndim != 2 or V.shape[1] != S.shape[1]:
        raise ShapeError(f"cannot score {V.shape} image rows against {S.shape} sentence rows")
    return V @ S.T


def kappa_weights(y: np.ndarray) -> np.ndarray:
    """Per-entry weights giving each label class a total weight of 1/2."""
    positive = np.asarray(y) > 0
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    w_pos = 1.0 / (2 * n_pos) if n_pos else 0.0
    w_neg = 1.0 / (2 * n_neg) if n_neg else 0.0
    return np.where(positive, w_pos, w_neg)


def _check_labels(K: np.ndarray, y: np.ndarray) -> None:
    if K.shape != y.shape:
        raise ShapeError(f"score matrix {K.shape} and label matrix {y.shape} differ")


def fragment_loss_c0(K: np.ndarray, y: np.ndarray) -> float:
    K = np.asarray(K, dtype=np.float64)
    y = np.asarray(y)
    _check_labels(K, y)
    return float(np.sum(kappa_weights(y) * np.maximum(0.0, 1.0 - y * K)))


def dense_labels(bags: BagStructure) -> np.ndarray:
    """+1 on every within-item pair, -1 elsewhere."""
    return np.where(bags.same_item, 1, -1).astype(np.int8)


def mil_assign_labels(K: np.ndarray, bags: BagStructure) -> np.ndarray:
    """Sign heuristic inside each positive bag, repaired so every bag holds a positive.

    sign(0) counts as negative. A bag with no positive score gets its single
    highest-scoring fragment (lowest row on ties) set to +1.
    """
    K = np.asarray(K, dtype=np.float64)
    if K.shape != (bags.n_v, bags.n_s):
        raise ShapeError(f"score matrix {K.shape} does not match bags ({bags.n_v}, {bags.n_s})")
    same = bags.same_item
    if bags.n_s and not np.all(same.any(axis=0)):
        j = int(np.flatnonzero(~same.any(axis=0))[0])
        raise BagStructureError(f"positive bag of sentence fragment {j} is empty")
    y = np.where(same & (K > 0), 1, -1).astype(np.int8)
    unlabeled = np.flatnonzero(~(y > 0).any(axis=0))
    if unlabeled.size:
        best = np.argmax(np.where(same, K, -np.inf), axis=0)
        y[best[unlabeled], unlabeled] = 1
    return y


@dataclass(frozen=True)
class FragmentLoss:
    loss: float
    y: np.ndarray


def fragment_loss_mil(K: np.ndarray, bags: BagStructure, use_mil: bool = True) -> FragmentLoss:
    y = mil_assign_labels(K, bags) if use_mil else dense_labels(bags)
    return FragmentLoss(fragment_loss_c0(K, y), y)


def image_sentence_score(
    K: np.ndarray, bags: BagStructure, k: int, l: int, n: float  # noqa: E741
) -> float:
    rows = bags.image_rows(k)
    cols = bags.sentence_rows(l)
    if rows.size == 0:
        raise BagStructureError(f"item {k} has no image fragments")
    if cols.size == 0:
        raise BagStructureError(f"item {l} has no sentence fragments")
    block = np.asarray(K)[np.ix_(rows, cols)]
    return float(np.sum(np.maximum(0.0, block)) / (rows.size * (cols.size + n)))


def _normalizer(bags: BagStructure, n: float) -> np.ndarray:
    return 1.0 / np.outer(bags.image_counts, bags.sentence_counts + n)


def image_sentence_matrix(K: np.ndarray, bags: BagStructure, n: float) -> np.ndarray:
    """All image_sentence_score values of a batch at once (images x sentences)."""
    K = np.asarray(K, dtype=np.float64)
    bags.require_non_empty()
    block_sums = np.add.reduceat(np.maximum(0.0, K), bags.image_starts, axis=0)
    block_sums = np.add.reduceat(block_sums, bags.sentence_starts, axis=1)
    return block_sums * _normalizer(bags, n)


def _ranking_margins(Smat: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    diag = np.diag(Smat)
    row = Smat - diag[:, None] + delta
    col = Smat - diag[None, :] + delta
    return row, col


def global_ranking_loss(Smat: np.ndarray, delta: float) -> float:
    Smat = np.asarray(Smat, dtype=np.float64)
    if Smat.ndim != 2 or Smat.shape[0] != Smat.shape[1]:
        raise ShapeError(f"image-sentence matrix must be square, got {Smat.shape}")
    row, col = _ranking_margins(Smat, delta)
    off = ~np.eye(Smat.shape[0], dtype=bool)
    return float(np.sum(np.maximum(0.0, row[off])) + np.sum(np.maximum(0.0, col[off])))


@dataclass(frozen=True)
class ObjectiveResult:
    loss: float
    fragment_loss: float
    global_loss: float
    regularizer: float
    y: np.ndarray
    smat: np.ndarray


def _term_weights(cfg: ObjectiveConfig) -> tuple[float, float]:
    w_fragment = 0.0 if cfg.mode == ObjectiveMode.global_only else 1.0
    w_global = 0.0 if cfg.mode == ObjectiveMode.fragment_only else cfg.beta
    return w_fragment, w_global


def _labels_for(
    K: np.ndarray,
    bags: BagStructure,
    cfg: ObjectiveConfig,
    use_mil: bool,
    labels: np.ndarray | None,
) -> np.ndarray:
    if labels is not None:
        labels = np.asarray(labels)
        _check_labels(K, labels)
        return labels
    if use_mil and cfg.mode == ObjectiveMode.combined_mil:
        return mil_assign_labels(K, bags)
    return dense_labels(bags)


def _evaluate(
    params: ModelParams,
    batch: EncodedBatch,
    cfg: ObjectiveConfig,
    use_mil: bool,
    labels: np.ndarray | None,
    with_grads: bool,
) -> tuple[ObjectiveResult, ModelParams | None]:
    bags = batch.bags
    bags.require_non_empty()
    K = score_matrix(batch.V, batch.S)
    y = _labels_for(K, bags, cfg, use_mil, labels)
    w_fragment, w_global = _term_weights(cfg)

    kappa = kappa_weights(y)
    hinge = 1.0 - y * K
    c_fragment = float(np.sum(kappa * np.maximum(0.0, hinge)))

    Smat = image_sentence_matrix(K, bags, cfg.smoothing_n)
    c_global = global_ranking_loss(Smat, cfg.delta)
    reg = cfg.alpha * params.squared_weight_norm()

    result = ObjectiveResult(
        loss=w_fragment * c_fragment + w_global * c_global + reg,
        fragment_loss=c_fragment,
        global_loss=c_global,
        regularizer=reg,
        y=y,
        smat=Smat,
    )
    if not with_grads:
        return result, None

    G_K = np.zeros_like(K)
    if w_fragment:
        G_K -= w_fragment * kappa * y * (hinge > 0)
    if w_global:
        row, col = _ranking_margins(Smat, cfg.delta)
        off = ~np.eye(Smat.shape[0], dtype=bool)
        m_row = ((row > 0) & off).astype(np.float64)
        m_col = ((col > 0) & off).astype(np.float64)
        G_S = m_row + m_col
        G_S[np.diag_indices_from(G_S)] = -m_row.sum(axis=1) - m_col.sum(axis=0)
        scaled = G_S * _normalizer(bags, cfg.smoothing_n)
        G_K += w_global * scaled[np.ix_(bags.m_v, bags.m_s)] * (K > 0)

    dV = G_K @ batch.S
    dS = G_K.T @ batch.V
    dW_m = dV.T @ batch.X + 2 * cfg.alpha * params.W_m

    dZ = dS * (batch.Z > 0)
    dW_R: list[np.ndarray] = []
    db_R: list[np.ndarray] = []
    for r, W in enumerate(params.W_R):
        rows = np.flatnonzero(batch.relation_rows == r)
        dW_R.append(dZ[rows].T @ batch.inputs[rows] + 2 * cfg.alpha * W)
        db_R.append(dZ[rows].sum(axis=0))
    grads = ModelParams(params.relations, params.dims, tuple(dW_R), tuple(db_R), dW_m)
    return result, grads


def total_objective(
    params: ModelParams,
    table: WordTable,
    items: Sequence[CorpusItem],
    cfg: ObjectiveConfig,
    *,
    use_mil: bool = True,
    labels: np.ndarray | None = None,
) -> ObjectiveResult:
    """C = C_F + beta*C_G + alpha*||W||^2, with terms switched off by `cfg.mode`.

    MIL labels are used only in combined_mil mode and only when `use_mil` is
    set; otherwise within-item pairs are all positive. Passing `labels`
    freezes the assignment.
    """
    batch = encode_batch(params, table, items)
    result, _ = _evaluate(params, batch, cfg, use_mil, labels, with_grads=False)
    return result


def objective_gradients(
    params: ModelParams,
    table: WordTable,
    items: Sequence[CorpusItem],
    cfg: ObjectiveConfig,
    *,
    use_mil: bool = True,
    labels: np.ndarray | None = None,
) -> tuple[ObjectiveResult, ModelParams]:
    """Objective value and its subgradients, labels held at their assigned values."""
    batch = encode_batch(params, table, items)
    result, grads = _evaluate(params, batch, cfg, use_mil, labels, with_grads=True)
    assert grads is not None
    return result, grads


def kink_arguments(
    params: ModelParams,
    table: WordTable,
    items: Sequence[CorpusItem],
    cfg: ObjectiveConfig,
    labels: np.ndarray,
) -> np.ndarray:
    """Every quantity whose sign switches a piece of the objective, flattened.

    These are the ReLU pre-activations of trainable sentence fragments, the
    hinge margins of the fragment term, the pair scores thresholded by the
    image-sentence score and the ranking margins of the global term.
    """
    batch = encode_batch(params, table, items)
    K = score_matrix(batch.V, batch.S)
    w_fragment, w_global = _term_weights(cfg)
    parts = [batch.Z[batch.relation_rows >= 0].ravel()]
    if w_fragment:
        parts.append((1.0 - np.asarray(labels) * K).ravel())
    if w_global:
        Smat = image_sentence_matrix(K, batch.bags, cfg.smoothing_n)
        row, col = _ranking_margins(Smat, cfg.delta)
        off = ~np.eye(Smat.shape[0], dtype=bool)
        parts.extend((K.ravel(), row[off], col[off]))
    return np.concatenate(parts)
