"""Set-to-set training objective: bipartite matching cost, Hungarian
assignment, focal classification + L1 box regression.

Predictions and ground truths are matched one-to-one by minimizing
-p(class) + L1(box) over permutations; the ground-truth side is padded with
no-object entries (cost 0 against every prediction) to make the problem
square. The training loss then applies a focal term over all predictions
(no-object matches are supervised toward an explicit background class) and
an L1 term over the matched real pairs only. The assignment itself is
treated as non-differentiable and recomputed every step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import encode_box

PHI = -1  # column label for a no-object match in reported pairs


@dataclass
class CostMatrix:
    """Square matching cost: K real ground-truth columns, N-K no-object pads."""

    values: np.ndarray
    gt_count: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n, m = self.values.shape
        if n != m:
            raise ValueError("cost matrix must be square after padding")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("cost matrix entries must be finite")


@dataclass
class Assignment:
    """A perfect matching: prediction index -> column index, plus its cost."""

    pairs: list  # pairs[i] = column assigned to prediction i
    total_cost: float

    def matched_real(self, gt_count: int):
        """(prediction, ground truth) index pairs, no-object columns dropped."""
        return [(i, j) for i, j in enumerate(self.pairs) if j < gt_count]


@dataclass
class LossBreakdown:
    classification: float
    box_l1: float
    total: float
    matched_count: int


REG_WIDTH = 10


def box_l1(pred_reg: np.ndarray, reference_point: np.ndarray,
           gt, vel_weight: float = 1.0) -> float:
    """L1 distance between a regression vector and the encoded target.

    Both sides live in encoded space: center offsets against the reference
    point, log dims, heading sin/cos, velocities. The velocity components
    carry ``vel_weight``.
    """
    pred_reg = np.asarray(pred_reg, dtype=np.float64)
    target = encode_box(reference_point, gt)
    w = np.ones(REG_WIDTH)
    w[8:] = vel_weight
    return float(np.abs(pred_reg - target) @ w)


def build_cost(preds, gts, vel_weight: float = 1.0) -> CostMatrix:
    """Matching cost: -p(class_j) + L1(box_j) for real columns, 0 for pads.

    ``preds`` are BoxPrediction records (class scores over real classes plus
    the regression against their own reference points).
    """
    n, k = len(preds), len(gts)
    if n < k:
        raise ValueError(f"cannot match {k} ground truths with {n} predictions")
    values = np.zeros((n, n), dtype=np.float64)
    for j, gt in enumerate(gts):
        for i, pred in enumerate(preds):
            values[i, j] = -float(pred.class_scores[gt.cls]) + box_l1(
                pred.reg, pred.reference_point, gt, vel_weight
            )
    return CostMatrix(values=values, gt_count=k)


def _lsap_kernel(cost, u, v, col4row, row4col):
    """Shortest-augmenting-path core; plain loops so numba can compile it.

    Maintains dual potentials with u[i] + v[j] <= cost[i, j] and equality on
    matched edges (up to float rounding). Iteration order is fixed, so the
    result is deterministic.
    """
    n = cost.shape[0]
    for cur_row in range(n):
        shortest = np.full(n, np.inf)
        pred = np.full(n, -1, dtype=np.int64)
        scanned_rows = np.zeros(n, dtype=np.bool_)
        done_cols = np.zeros(n, dtype=np.bool_)
        i = cur_row
        min_val = 0.0
        sink = -1
        while sink == -1:
            scanned_rows[i] = True
            j_min = -1
            lowest = np.inf
            for j in range(n):
                if done_cols[j]:
                    continue
                d = min_val + cost[i, j] - u[i] - v[j]
                if d < shortest[j]:
                    shortest[j] = d
                    pred[j] = i
                if shortest[j] < lowest or (shortest[j] == lowest and j_min == -1):
                    lowest = shortest[j]
                    j_min = j
            if j_min == -1 or lowest == np.inf:
                return -1
            min_val = lowest
            done_cols[j_min] = True
            if row4col[j_min] == -1:
                sink = j_min
            else:
                i = row4col[j_min]
        u[cur_row] += min_val
        for r in range(n):
            if scanned_rows[r] and r != cur_row:
                u[r] += min_val - shortest[col4row[r]]
        for j in range(n):
            if done_cols[j]:
                v[j] -= min_val - shortest[j]
        j = sink
        while j != -1:
            i = pred[j]
            row4col[j] = i
            col4row[i], j = j, col4row[i]
    return 0


try:  # the jitted kernel cuts matching cost by ~100x in the training loop
    from numba import njit

    _lsap_kernel_fast = njit(cache=True)(_lsap_kernel)
except ImportError:  # pragma: no cover - numba is normally available
    _lsap_kernel_fast = _lsap_kernel


def _solve_lsap(cost: np.ndarray):
    """O(n^3) assignment on a square matrix; returns (row_to_col, u, v)."""
    n = cost.shape[0]
    u = np.zeros(n)
    v = np.zeros(n)
    col4row = np.full(n, -1, dtype=np.int64)
    row4col = np.full(n, -1, dtype=np.int64)
    status = _lsap_kernel_fast(np.ascontiguousarray(cost), u, v, col4row, row4col)
    if status != 0:
        raise ValueError("assignment problem is infeasible")
    return col4row, u, v


def _lexicographic_refine(cost: np.ndarray, row_to_col, u, v):
    """Pick the lexicographically smallest assignment among the minimizers.

    By complementary slackness every minimum-cost assignment lies inside the
    tight subgraph {(i, j): cost[i, j] - u[i] - v[j] == 0} of the optimal
    dual, and every perfect matching of that subgraph is optimal. Greedily
    fix rows in order to their smallest tight column that still leaves the
    remaining rows matchable, checking feasibility with single
    augmenting-path repairs of the current matching. Tightness is tested at
    exact zero (rounded slightly negative is accepted), so discrete ties are
    resolved exactly.
    """
    n = cost.shape[0]
    reduced = cost - u[:, None] - v[None, :]
    # Dual potentials carry float rounding of order eps * scale; a truly
    # tight edge may come out a few ulp positive, so accept a hair above 0.
    tol = 2e-14 * max(1.0, float(np.abs(cost).max()))
    tight = reduced <= tol
    tight[np.arange(n), row_to_col] = True  # matched edges are tight by duality

    match_col = row_to_col.copy()  # row -> column of the evolving matching
    match_row = np.empty(n, dtype=np.int64)  # column -> row
    match_row[match_col] = np.arange(n)
    col_open = np.ones(n, dtype=bool)  # columns not yet fixed to earlier rows

    def reseat(r, visited):
        """Kuhn DFS: find row r a free open column; mutates only on success."""
        for jj in np.nonzero(tight[r] & col_open & ~visited)[0]:
            visited[jj] = True
            holder = match_row[jj]
            if holder == -1 or reseat(holder, visited):
                match_col[r] = jj
                match_row[jj] = r
                return True
        return False

    for i in range(n):
        current = match_col[i]
        for j in np.nonzero(tight[i] & col_open)[0]:
            if j >= current:
                break
            displaced = match_row[j]
            match_row[current] = -1  # row i releases its column for the repair
            visited = np.zeros(n, dtype=bool)
            visited[j] = True
            if reseat(displaced, visited):
                match_col[i] = j
                match_row[j] = i
                current = j
                break
            match_row[current] = i  # repair failed; restore
        col_open[current] = False
    return match_col


def hungarian(cost: CostMatrix) -> Assignment:
    """Minimum-cost perfect matching with a deterministic tie-break.

    Among all assignments achieving the minimum total cost, returns the one
    whose column tuple (pairs[0], pairs[1], ...) is lexicographically
    smallest.
    """
    values = cost.values
    if not np.all(np.isfinite(values)):
        raise ValueError("cost matrix entries must be finite")
    row_to_col, u, v = _solve_lsap(values)
    pairs = _lexicographic_refine(values, row_to_col, u, v)
    total = float(values[np.arange(len(pairs)), pairs].sum())
    return Assignment(pairs=[int(j) for j in pairs], total_cost=total)


PROB_FLOOR = 1e-12


def focal_term(probs: ad.Tensor, target_idx: np.ndarray,
               alpha: float, gamma: float) -> ad.Tensor:
    """Sum over rows of -alpha (1 - p_t)^gamma log(p_t).

    ``probs`` are per-row class probabilities (background included);
    ``target_idx`` picks the supervised class per row. Probabilities are
    clamped at 1e-12 before the log so degenerate outputs stay finite. With
    gamma = 0 and alpha = 1 this is plain cross-entropy.
    """
    n = probs.data.shape[0]
    p_t = ad.clamp_min(ad.take_pairs(probs, np.arange(n), target_idx), PROB_FLOOR)
    if gamma == 0.0:
        weight = ad.constant(np.ones(n))
    else:
        weight = ad.pow_const(ad.add(ad.neg(p_t), 1.0), gamma)
    terms = ad.mul(ad.mul(weight, ad.log(p_t)), -alpha)
    return ad.sum_(terms)


def match_prediction_set(logits: ad.Tensor, reg: ad.Tensor, refs: ad.Tensor,
                         gts, vel_weight: float = 1.0):
    """Hungarian assignment for one supervised prediction set.

    Works on the forward values only; the matching is non-differentiable
    and recomputed per step. Returns (assignment, probs tensor).
    """
    probs = ad.softmax(logits, axis=-1)
    n = logits.data.shape[0]
    k = len(gts)
    if n < k:
        raise ValueError(f"cannot match {k} ground truths with {n} predictions")
    values = np.zeros((n, n), dtype=np.float64)
    w = np.ones(REG_WIDTH)
    w[8:] = vel_weight
    for j, gt in enumerate(gts):
        target = np.concatenate(
            [gt.center, np.log(gt.dims),
             [np.sin(gt.heading), np.cos(gt.heading)], gt.velocity]
        )
        enc = reg.data.copy()
        enc[:, 0:3] += refs.data  # predicted absolute center
        values[:, j] = -probs.data[:, gt.cls] + np.abs(enc - target) @ w
    assignment = hungarian(CostMatrix(values=values, gt_count=k))
    return assignment, probs


def set_loss(logits: ad.Tensor, reg: ad.Tensor, refs: ad.Tensor, gts,
             alpha: float = 0.25, gamma: float = 2.0, lambda_box: float = 0.25,
             vel_weight: float = 1.0, assignment: Assignment | None = None):
    """Loss for one prediction set: focal over all rows + L1 over matches.

    Predictions assigned to a no-object column are supervised toward the
    background class (the last logit). Center offsets are compared in
    encoded space against each prediction's own reference point; gradients
    flow into the offsets and the reference points alike. Returns
    (scalar loss tensor, LossBreakdown, assignment).
    """
    n, width = logits.data.shape
    n_classes = width - 1
    if assignment is None:
        assignment, probs = match_prediction_set(logits, reg, refs, gts, vel_weight)
    else:
        probs = ad.softmax(logits, axis=-1)

    target_idx = np.full(n, n_classes, dtype=np.int64)  # background by default
    matched = assignment.matched_real(len(gts))
    for i, j in matched:
        target_idx[i] = gts[j].cls
    cls_loss = focal_term(probs, target_idx, alpha, gamma)

    if matched:
        rows = np.array([i for i, _ in matched])
        targets = np.stack(
            [
                np.concatenate(
                    [gts[j].center, np.log(gts[j].dims),
                     [np.sin(gts[j].heading), np.cos(gts[j].heading)],
                     gts[j].velocity]
                )
                for _, j in matched
            ]
        )
        pred_reg = ad.take_rows(reg, rows)
        pred_refs = ad.take_rows(refs, rows)
        absolute = ad.add(
            ad.slice_cols(pred_reg, 0, 3), pred_refs
        )  # predicted centers
        rest = ad.slice_cols(pred_reg, 3, REG_WIDTH)
        full = ad.concat([absolute, rest], axis=1)
        w = np.ones(REG_WIDTH)
        w[8:] = vel_weight
        box_loss = ad.sum_(ad.mul(ad.abs_(ad.sub(full, targets)), w))
    else:
        box_loss = ad.constant(0.0)

    total = ad.add(cls_loss, ad.mul(box_loss, lambda_box))
    breakdown = LossBreakdown(
        classification=float(cls_loss.data),
        box_l1=float(box_loss.data),
        total=float(total.data),
        matched_count=len(matched),
    )
    return total, breakdown, assignment


def hungarian_loss(prediction_sets, gts, alpha: float = 0.25, gamma: float = 2.0,
                   lambda_box: float = 0.25, vel_weight: float = 1.0):
    """Total training objective over every supervised layer and stage.

    ``prediction_sets`` is a list of dicts with graph tensors ``logits``
    (N, n_classes+1), ``reg`` (N, 10) and ``refs`` (N, 3); each set is
    matched independently. Returns (scalar loss tensor, LossBreakdown).
    """
    total = None
    cls_sum = 0.0
    box_sum = 0.0
    matched = 0
    for ps in prediction_sets:
        loss, bd, _ = set_loss(
            ps["logits"], ps["reg"], ps["refs"], gts,
            alpha=alpha, gamma=gamma, lambda_box=lambda_box,
            vel_weight=vel_weight,
        )
        total = loss if total is None else ad.add(total, loss)
        cls_sum += bd.classification
        box_sum += bd.box_l1
        matched += bd.matched_count
    if total is None:
        raise ValueError("need at least one supervised prediction set")
    return total, LossBreakdown(
        classification=cls_sum,
        box_l1=box_sum,
        total=float(total.data),
        matched_count=matched,
    )
