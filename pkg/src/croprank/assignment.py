"""Set matching between predicted and annotated crops, plus training.

High-quality ground truths (MOS >= 4) are padded with empty targets to
the prediction count and matched one-to-one by cost. Matched
predictions get the full three-term loss (L1 + weighted GIoU deficit +
weighted focal); unmatched predictions that still sit on an annotated
crop (IoU >= tau) get a soft score target; the rest are pushed to zero
score. One training step is forward -> assign -> loss -> backward ->
SGD.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .decoder import HeadOutputs, ModelState, Prediction, forward_train
from .errors import CardinalityMismatch, DomainError, NonFinite, NonSquare, OutOfRange
from .geometry import ScoredCrop, boxes_array, giou, giou_matrix, giou_pairs, iou_matrix, l1_box, l1_pairs
from .tensor import Tensor

SCORE_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Loss/matching weights: both paths share the same lambdas."""

    giou_weight: float = 0.4
    focal_weight: float = 0.4
    focal_gamma: float = 2.0
    soft_iou_threshold: float = 0.85

    def __post_init__(self):
        if self.giou_weight < 0.0 or self.focal_weight < 0.0:
            raise OutOfRange("loss weights must be nonnegative")
        if not (0.0 < self.soft_iou_threshold <= 1.0):
            raise OutOfRange(f"soft IoU threshold {self.soft_iou_threshold} outside (0, 1]")
        if self.focal_gamma < 1.0:
            raise OutOfRange(f"focal gamma {self.focal_gamma} must be >= 1")


@dataclass(frozen=True)
class Role:
    """What one prediction is supervised against."""

    kind: str  # "matched" | "soft" | "negative"
    target: int | None = None  # ground-truth index (original list order)
    soft_score: float | None = None


@dataclass(frozen=True)
class Assignment:
    roles: tuple[Role, ...]
    perm: np.ndarray  # row i -> padded target column
    good_indices: tuple[int, ...]  # columns [0, len) map to these ground-truth indices

    @property
    def n_good(self) -> int:
        return len(self.good_indices)


def select_good(ground_truths: list[ScoredCrop]) -> list[ScoredCrop]:
    """Crops with MOS >= 4, original order preserved (may be empty)."""
    return [g for g in ground_truths if g.mos >= 4.0]


def normalize_mos(s: float) -> float:
    """Map the 1..5 opinion scale onto [0, 1] linearly: (s - 1) / 4."""
    if not (1.0 <= s <= 5.0):
        raise OutOfRange(f"mos {s} outside [1, 5]")
    return (s - 1.0) / 4.0


def _focal_np(v_hat: np.ndarray, v: np.ndarray | float, gamma: float) -> np.ndarray:
    vc = np.clip(v_hat, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    ce = -(v * np.log(vc) + (1.0 - v) * np.log1p(-vc))
    return np.abs(v - vc) ** gamma * ce


def focal(v_hat: float, v: float, gamma: float = 2.0) -> float:
    """Quality-focal penalty -|v - v_hat|^gamma [v log v_hat + (1-v) log(1-v_hat)].

    v_hat is clamped to [1e-7, 1 - 1e-7]; zero exactly when the clamped
    prediction equals the target.
    """
    if not (0.0 <= v <= 1.0):
        raise OutOfRange(f"target score {v} outside [0, 1]")
    return float(_focal_np(np.float64(v_hat), np.float64(v), gamma))


def focal_terms(v_hat: Tensor, targets: np.ndarray, gamma: float) -> Tensor:
    """Differentiable focal penalties, one per row of v_hat (m, 1)."""
    tv = np.asarray(targets, dtype=v_hat.data.dtype).reshape(v_hat.dims)
    vc = T.clamp(v_hat, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    one_minus = T.add_const(T.scale(vc, -1.0), 1.0)
    ce = T.scale(
        T.add(T.mul(T.constant(tv), T.log(vc)), T.mul(T.constant(1.0 - tv), T.log(one_minus))),
        -1.0,
    )
    gap = T.absolute(T.sub(vc, T.constant(tv)))
    return T.mul(T.pow_const(gap, gamma), ce)


def match_cost(pred: Prediction, target: ScoredCrop, w: LossWeights) -> float:
    """L1 + lambda_giou (1 - giou) + lambda_focal focal(v_hat, v)."""
    v = normalize_mos(target.mos)
    return (
        l1_box(pred.box, target.box)
        + w.giou_weight * (1.0 - giou(pred.box, target.box))
        + w.focal_weight * focal(pred.score, v, w.focal_gamma)
    )


def empty_cost(pred: Prediction, w: LossWeights) -> float:
    """Cost of assigning a prediction to a padding target: focal vs 0 only."""
    return w.focal_weight * focal(pred.score, 0.0, w.focal_gamma)


def build_cost_matrix(preds: list[Prediction], good: list[ScoredCrop], w: LossWeights) -> np.ndarray:
    """(N, N) padded cost matrix; columns beyond len(good) are padding."""
    n = len(preds)
    g = len(good)
    if g > n:
        raise CardinalityMismatch(f"{g} matchable targets but only {n} predictions")
    pred_boxes = boxes_array([p.box for p in preds])
    scores = np.array([p.score for p in preds], dtype=np.float64)
    costs = np.empty((n, n), dtype=np.float64)
    pad = w.focal_weight * _focal_np(scores, 0.0, w.focal_gamma)
    costs[:, g:] = pad[:, None]
    if g:
        tgt_boxes = boxes_array([t.box for t in good])
        v = np.array([normalize_mos(t.mos) for t in good], dtype=np.float64)
        l1 = np.abs(pred_boxes[:, None, :] - tgt_boxes[None, :, :]).sum(axis=2)
        gi = giou_matrix(pred_boxes, tgt_boxes)
        fo = _focal_np(scores[:, None], v[None, :], w.focal_gamma)
        costs[:, :g] = l1 + w.giou_weight * (1.0 - gi) + w.focal_weight * fo
    return costs


# -- Hungarian solver -----------------------------------------------------------


def _lap_solve(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shortest-augmenting-path assignment on a square matrix.

    Returns (col_of_row, u, v) where u, v are the 1-indexed dual
    potentials (index 0 is a virtual column/row).
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    assigned_row = np.zeros(n + 1, dtype=np.int64)  # per column, 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        assigned_row[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = assigned_row[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[assigned_row[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if assigned_row[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            assigned_row[j0] = assigned_row[j1]
            j0 = j1
    col_of_row = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        if assigned_row[j] > 0:
            col_of_row[assigned_row[j] - 1] = j - 1
    return col_of_row, u, v


def _selection_total(cost: np.ndarray, cols: np.ndarray) -> float:
    return float(cost[np.arange(cost.shape[0]), cols].sum())


def hungarian(costs: np.ndarray) -> np.ndarray:
    """Exact minimum-cost bijection rows -> columns.

    Among equal-total optima the lexicographically smallest column
    sequence (by row index) is returned; candidate ties are detected
    through zero reduced cost under the solver's dual potentials and
    verified by sub-solves, so the refinement costs nothing when the
    optimum is unique.
    """
    arr = np.asarray(costs)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] == 0:
        raise NonSquare(f"cost matrix must be square and non-empty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFinite("cost matrix contains NaN or infinity")
    arr = arr.astype(np.float64, copy=False)
    n = arr.shape[0]
    incumbent, u, v = _lap_solve(arr)
    tol = 1e-7 * max(1.0, float(np.abs(arr).max()))
    available = np.ones(n, dtype=bool)
    for i in range(n):
        # only zero-reduced-cost columns can belong to an optimal solution
        reduced = arr[i] - u[i + 1] - v[1:]
        cands = np.nonzero(available & (reduced <= tol))[0]
        cands = cands[cands < incumbent[i]]
        if cands.size:
            inc_total = _selection_total(arr, incumbent)
            for j in cands:
                trial = incumbent.copy()
                trial[i] = j
                rest_cols = np.nonzero(available)[0]
                rest_cols = rest_cols[rest_cols != j]
                if i + 1 < n:
                    sub_sel, _, _ = _lap_solve(arr[np.ix_(np.arange(i + 1, n), rest_cols)])
                    trial[i + 1 :] = rest_cols[sub_sel]
                if _selection_total(arr, trial) <= inc_total:
                    incumbent = trial
                    break
        available[incumbent[i]] = False
    return incumbent


def assign(preds: list[Prediction], ground_truths: list[ScoredCrop], w: LossWeights) -> Assignment:
    """Match predictions to good targets, then classify the remainder.

    (1) Hungarian over the padded cost matrix; (2) rows landing on a
    real column become matched; (3) unmatched rows overlapping ANY
    annotated crop at IoU >= tau become soft with score
    normalize_mos(neighbor MOS) * IoU; (4) the rest are negatives.
    """
    n = len(preds)
    if n == 0:
        raise CardinalityMismatch("assign requires at least one prediction")
    good_indices = tuple(i for i, g in enumerate(ground_truths) if g.mos >= 4.0)
    good = [ground_truths[i] for i in good_indices]
    if len(good) > n:
        raise CardinalityMismatch(f"{len(good)} matchable targets but only {n} predictions")
    costs = build_cost_matrix(preds, good, w)
    perm = hungarian(costs)
    if ground_truths:
        ious = iou_matrix(boxes_array([p.box for p in preds]), boxes_array([g.box for g in ground_truths]))
    else:
        ious = np.zeros((n, 0))
    roles: list[Role] = []
    for i in range(n):
        col = int(perm[i])
        if col < len(good):
            roles.append(Role(kind="matched", target=good_indices[col]))
            continue
        if ious.shape[1]:
            neighbor = int(np.argmax(ious[i]))  # ties resolve to the lowest index
            overlap = float(ious[i, neighbor])
            if overlap >= w.soft_iou_threshold:
                soft = normalize_mos(ground_truths[neighbor].mos) * overlap
                roles.append(Role(kind="soft", target=neighbor, soft_score=soft))
                continue
        roles.append(Role(kind="negative"))
    return Assignment(roles=tuple(roles), perm=perm, good_indices=good_indices)


def training_loss(head: HeadOutputs, assignment: Assignment, ground_truths: list[ScoredCrop], w: LossWeights) -> Tensor:
    """Role-dependent loss, summed and averaged over all N predictions.

    Matched rows: L1 + lambda_giou (1 - giou) + lambda_focal focal
    against their target; soft rows: focal toward the soft score;
    negative rows: focal toward zero. The assignment itself is taken
    as given (no gradient flows through the matching).
    """
    n = head.scores.dims[0]
    if len(assignment.roles) != n:
        raise CardinalityMismatch(f"assignment covers {len(assignment.roles)} rows, head has {n}")
    matched = [i for i, r in enumerate(assignment.roles) if r.kind == "matched"]
    softs = [i for i, r in enumerate(assignment.roles) if r.kind == "soft"]
    negatives = [i for i, r in enumerate(assignment.roles) if r.kind == "negative"]
    dtype = head.scores.data.dtype
    terms: list[Tensor] = []
    if matched:
        tgt = boxes_array([ground_truths[assignment.roles[i].target].box for i in matched]).astype(dtype)
        v = np.array(
            [normalize_mos(ground_truths[assignment.roles[i].target].mos) for i in matched], dtype=dtype
        ).reshape(-1, 1)
        pb = T.gather_rows(head.boxes, matched)
        terms.append(T.sum_all(l1_pairs(pb, T.constant(tgt))))
        giou_deficit = T.add_const(T.scale(giou_pairs(pb, T.constant(tgt)), -1.0), 1.0)
        terms.append(T.scale(T.sum_all(giou_deficit), w.giou_weight))
        terms.append(
            T.scale(T.sum_all(focal_terms(T.gather_rows(head.scores, matched), v, w.focal_gamma)), w.focal_weight)
        )
    if softs:
        sv = np.array([assignment.roles[i].soft_score for i in softs], dtype=dtype).reshape(-1, 1)
        terms.append(
            T.scale(T.sum_all(focal_terms(T.gather_rows(head.scores, softs), sv, w.focal_gamma)), w.focal_weight)
        )
    if negatives:
        zeros = np.zeros((len(negatives), 1), dtype=dtype)
        terms.append(
            T.scale(
                T.sum_all(focal_terms(T.gather_rows(head.scores, negatives), zeros, w.focal_gamma)), w.focal_weight
            )
        )
    if not terms:
        raise DomainError("training_loss: empty assignment")
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.scale(total, 1.0 / n)


@dataclass(frozen=True)
class TrainExample:
    """One training item: raw image, optional prior, annotated crops."""

    image: np.ndarray
    prior: object | None  # CompositionPrior or None (bias off)
    crops: tuple[ScoredCrop, ...]


def train_step(state: ModelState, batch: list[TrainExample], w: LossWeights, lr: float, optimizer=None) -> float:
    """One SGD (or supplied optimizer) update; returns the pre-step loss."""
    losses = []
    for ex in batch:
        head = forward_train(ex.image, ex.prior, state)
        with T.no_grad():
            preds = head.to_predictions()
        a = assign(preds, list(ex.crops), w)
        losses.append(training_loss(head, a, list(ex.crops), w))
    total = losses[0]
    for extra in losses[1:]:
        total = T.add(total, extra)
    loss = T.scale(total, 1.0 / len(batch))
    value = loss.item()
    T.backward(loss)
    params = state.parameters()
    if optimizer is None:
        T.sgd_step(params, lr)
    else:
        optimizer.step(params, lr)
    return value
