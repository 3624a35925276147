"""Set-prediction matching and losses.

One-to-one Hungarian assignment for the class-agnostic branch, replication
based many-to-one assignment for per-class candidate queries, and the dice /
pixel / objectness loss terms both matchers price with.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ShapeMismatchError

# relative term weights, used identically for matching costs and losses
LAMBDA_OBJ = 2.0
LAMBDA_DICE = 5.0
LAMBDA_PIX = 5.0

# pixel losses use every pixel up to this count, then a fixed random sample
MAX_LOSS_POINTS = 4096


@dataclass
class MatchResult:
    pairs: list  # (query index, gt index), sorted by query index
    unmatched_queries: list

    def total_cost(self, cost):
        return float(sum(cost[q][g] for q, g in self.pairs))


def _solve_rectangular(cost):
    """Shortest-augmenting-path assignment for an n x m matrix with n <= m.

    Returns row -> column. Ties are resolved toward smaller indices, so the
    result is a deterministic function of the matrix.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row matched to column j (1-based, 0 = free)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = cost[i0 - 1, :] - u[i0] - v[1:]
            cur = np.concatenate([[np.inf], cur])
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            masked = np.where(free, minv, np.inf)
            j1 = int(np.argmin(masked))
            delta = masked[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j] != 0:
            row_to_col[p[j] - 1] = j - 1
    return row_to_col


def hungarian_match(cost) -> MatchResult:
    """Minimum-total-cost one-to-one assignment covering min(n_q, n_g) pairs.

    Accepts a torch tensor, numpy array, or nested lists. Empty inputs
    return an all-unmatched result.
    """
    if torch.is_tensor(cost):
        cost = cost.detach().cpu().numpy()
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeMismatchError(f"cost must be 2-D, got shape {cost.shape}")
    n_q, n_g = cost.shape
    if n_q == 0 or n_g == 0:
        return MatchResult(pairs=[], unmatched_queries=list(range(n_q)))
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")
    if n_q <= n_g:
        row_to_col = _solve_rectangular(cost)
        pairs = [(i, int(j)) for i, j in enumerate(row_to_col)]
    else:
        col_to_row = _solve_rectangular(cost.T)
        pairs = sorted((int(q), g) for g, q in enumerate(col_to_row))
    matched = {q for q, _ in pairs}
    unmatched = [q for q in range(n_q) if q not in matched]
    return MatchResult(pairs=pairs, unmatched_queries=unmatched)


def many_to_one_match(cost, k) -> MatchResult:
    """Assign k same-class queries to that class's ground truths, replicating
    each gt floor(k / G) times (at least once) before the optimal assignment.
    With k >= G every gt receives at least one query; surplus queries stay
    unmatched."""
    if torch.is_tensor(cost):
        cost = cost.detach().cpu().numpy()
    cost = np.asarray(cost, dtype=np.float64)
    n_q, n_g = cost.shape
    if n_q != k:
        raise ShapeMismatchError(f"expected {k} queries, cost has {n_q} rows")
    if n_g == 0:
        return MatchResult(pairs=[], unmatched_queries=list(range(n_q)))
    rep = max(1, k // n_g)
    replicated = np.repeat(cost, rep, axis=1)  # column j*rep+t maps back to gt j
    result = hungarian_match(replicated)
    pairs = [(q, col // rep) for q, col in result.pairs]
    return MatchResult(pairs=sorted(pairs), unmatched_queries=result.unmatched_queries)


def dice_loss(pred_probs, gt_mask):
    """1 - 2|P.G| / (|P|+|G|); exactly 0 for identical binary masks and 1 for
    disjoint ones (no smoothing term)."""
    p = pred_probs.reshape(-1)
    g = gt_mask.reshape(-1).to(p.dtype)
    if p.shape != g.shape:
        raise ShapeMismatchError(f"{tuple(pred_probs.shape)} vs {tuple(gt_mask.shape)}")
    denom = p.sum() + g.sum()
    if float(denom) == 0.0:
        return torch.zeros((), dtype=p.dtype, device=p.device)
    return 1.0 - 2.0 * (p * g).sum() / denom


def pixel_loss(mask_logits, gt_mask):
    """Mean per-pixel binary cross entropy on logits."""
    x = mask_logits.reshape(-1)
    g = gt_mask.reshape(-1).to(x.dtype)
    if x.shape != g.shape:
        raise ShapeMismatchError(f"{tuple(mask_logits.shape)} vs {tuple(gt_mask.shape)}")
    return F.binary_cross_entropy_with_logits(x, g)


def objectness_loss(score_logits, labels):
    """Mean binary cross entropy of per-query score logits against 0/1 labels."""
    return F.binary_cross_entropy_with_logits(
        score_logits.reshape(-1), labels.reshape(-1).to(score_logits.dtype)
    )


def match_cost(pred_mask_logits, pred_score_logit, gt_mask):
    """Price of pairing one prediction with one ground truth."""
    obj = F.softplus(-pred_score_logit.reshape(()))
    d = dice_loss(pred_mask_logits.sigmoid(), gt_mask)
    p = pixel_loss(pred_mask_logits, gt_mask)
    return LAMBDA_OBJ * obj + LAMBDA_DICE * d + LAMBDA_PIX * p


def pairwise_cost(mask_logits, score_logits, gt_masks, point_idx=None):
    """(n_q, n_g) match_cost matrix, vectorized over all pairs."""
    n_q = mask_logits.shape[0]
    n_g = gt_masks.shape[0]
    x = mask_logits.reshape(n_q, -1)
    g = gt_masks.reshape(n_g, -1).to(x.dtype)
    if x.shape[1] != g.shape[1]:
        raise ShapeMismatchError("prediction and gt pixel counts differ")
    if point_idx is not None:
        x = x[:, point_idx]
        g = g[:, point_idx]
    probs = x.sigmoid()
    inter = probs @ g.T
    denom = probs.sum(1, keepdim=True) + g.sum(1)
    dice = 1.0 - 2.0 * inter / denom.clamp_min(torch.finfo(x.dtype).tiny)
    # per-pixel BCE folded into one matmul via softplus(-x) = softplus(x) - x
    bce = (F.softplus(x).sum(1, keepdim=True) - x @ g.T) / x.shape[1]
    obj = F.softplus(-score_logits).reshape(n_q, 1)
    return LAMBDA_OBJ * obj + LAMBDA_DICE * dice + LAMBDA_PIX * bce


def masked_pair_terms(mask_logits, gt_masks, pairs, point_idx=None):
    """Mean dice and pixel loss over matched (query, gt) pairs."""
    if not pairs:
        zero = mask_logits.sum() * 0.0
        return zero, zero
    q_idx = torch.as_tensor([q for q, _ in pairs], device=mask_logits.device)
    g_idx = torch.as_tensor([g for _, g in pairs], device=mask_logits.device)
    x = mask_logits.reshape(mask_logits.shape[0], -1)[q_idx]
    g = gt_masks.reshape(gt_masks.shape[0], -1).to(x.dtype)[g_idx]
    if point_idx is not None:
        x = x[:, point_idx]
        g = g[:, point_idx]
    probs = x.sigmoid()
    denom = probs.sum(1) + g.sum(1)
    dice = (1.0 - 2.0 * (probs * g).sum(1) / denom.clamp_min(torch.finfo(x.dtype).tiny)).mean()
    pix = F.binary_cross_entropy_with_logits(x, g)
    return dice, pix


def class_agnostic_point_loss(mask_logits, score_logits, gt_masks, point_idx=None):
    """One prediction point of the class-agnostic branch: Hungarian match with
    all ground truth treated as one class, objectness toward matched=1."""
    n_q = score_logits.shape[0]
    labels = torch.zeros(n_q, dtype=mask_logits.dtype, device=mask_logits.device)
    if gt_masks is None or gt_masks.shape[0] == 0:
        zero = mask_logits.sum() * 0.0
        return objectness_loss(score_logits, labels), zero, zero
    with torch.no_grad():
        cost = pairwise_cost(mask_logits, score_logits, gt_masks, point_idx)
    result = hungarian_match(cost)
    for q, _ in result.pairs:
        labels[q] = 1.0
    obj = objectness_loss(score_logits, labels)
    dice, pix = masked_pair_terms(mask_logits, gt_masks, result.pairs, point_idx)
    return obj, dice, pix


def prompt_branch_point_loss(
    mask_logits, score_logits, query_classes, gts_by_class, k, point_idx=None, weak_positives=()
):
    """One prediction point of the per-class candidate queries.

    query_classes: class id per query row, in K-sized groups. Negative classes
    (no gt) contribute objectness toward 0 and never enter matching; positive
    classes run many-to-one matching, matched queries get objectness toward 1
    plus mask terms, unmatched get objectness toward 0. Classes in
    weak_positives carry an image-level presence label only: objectness toward
    1 for the whole group, no matching and no mask terms.
    """
    n_q = score_logits.shape[0]
    labels = torch.zeros(n_q, dtype=mask_logits.dtype, device=mask_logits.device)
    all_pairs = []
    classes = []
    for c in query_classes:
        if c not in classes:
            classes.append(c)
    for c in classes:
        rows = [i for i, qc in enumerate(query_classes) if qc == c]
        gt = gts_by_class.get(c)
        if gt is None or gt.shape[0] == 0:
            if c in weak_positives:
                for q in rows:
                    labels[q] = 1.0
            continue
        with torch.no_grad():
            cost = pairwise_cost(mask_logits[rows], score_logits[rows], gt, point_idx)
        result = many_to_one_match(cost, len(rows))
        for q_local, g_local in result.pairs:
            q = rows[q_local]
            labels[q] = 1.0
            all_pairs.append((q, c, g_local))
    obj = objectness_loss(score_logits, labels)
    if all_pairs:
        dices, pixes = [], []
        for c in classes:
            trip = [(q, g) for q, cc, g in all_pairs if cc == c]
            if not trip:
                continue
            d, p = masked_pair_terms(mask_logits, gts_by_class[c], trip, point_idx)
            dices.append(d * len(trip))
            pixes.append(p * len(trip))
        total = sum(len([1 for q, cc, g in all_pairs if cc == c]) for c in classes)
        dice = torch.stack(dices).sum() / total
        pix = torch.stack(pixes).sum() / total
    else:
        dice = mask_logits.sum() * 0.0
        pix = mask_logits.sum() * 0.0
    return obj, dice, pix


def example_point_terms(mask_logits, gt_masks, point_idx=None):
    """Dice and pixel terms of example supervision for one prediction point:
    query i is scored against its own gt mask i, no matching."""
    n = mask_logits.shape[0]
    if gt_masks.shape[0] != n:
        raise ShapeMismatchError("one gt mask per example query required")
    pairs = [(i, i) for i in range(n)]
    return masked_pair_terms(mask_logits, gt_masks, pairs, point_idx)


def example_supervision_loss(mask_logits_per_point, gt_masks, point_idx=None):
    """Weighted dice+pixel loss of example queries against their own masks,
    summed over prediction points."""
    total = None
    for logits in mask_logits_per_point:
        d, p = example_point_terms(logits, gt_masks, point_idx)
        term = LAMBDA_DICE * d + LAMBDA_PIX * p
        total = term if total is None else total + term
    if total is None:
        raise ValueError("need at least one prediction point")
    return total


@dataclass
class LossBreakdown:
    objectness: float = 0.0
    dice: float = 0.0
    pixel: float = 0.0
    example_objectness: float = 0.0
    example_dice: float = 0.0
    example_pixel: float = 0.0
    total: float = 0.0

    @staticmethod
    def weighted_total(obj, dice, pix, ex_obj, ex_dice, ex_pix):
        return (
            LAMBDA_OBJ * (obj + ex_obj)
            + LAMBDA_DICE * (dice + ex_dice)
            + LAMBDA_PIX * (pix + ex_pix)
        )
