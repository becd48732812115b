"""Minimum-cost bipartite matching of query predictions to ground truth.

The production solver is an O(n^3) shortest-augmenting-path Hungarian
method; ``brute_force_assignment`` is the independent enumeration oracle it
is verified against. Both break cost ties the same way: the assignment
whose target-ordered query indices are lexicographically smallest wins.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .errors import ContractError, ShapeError

# Cost for padding columns when the matrix is rectangular; far above any
# feasible real cost so padding never displaces a real target.
SENTINEL = 1e6

# Tolerances for tie handling, scaled by the largest real cost magnitude.
_REDUCED_EPS = 1e-7
_TIE_EPS = 1e-9


@dataclass(frozen=True)
class Assignment:
    """Injective query-to-target pairs covering every target."""

    pairs: tuple[tuple[int, int], ...]  # (query_index, target_index), sorted by target

    def __post_init__(self):
        queries = [q for q, _ in self.pairs]
        targets = [t for _, t in self.pairs]
        if len(set(queries)) != len(queries) or list(targets) != sorted(set(targets)):
            raise ContractError("assignment must be injective and target-sorted")

    def query_for_target(self) -> dict[int, int]:
        return {t: q for q, t in self.pairs}

    def target_for_query(self) -> dict[int, int]:
        return {q: t for q, t in self.pairs}


def assignment_cost(cost: np.ndarray, assignment: Assignment) -> float:
    """Total real cost, accumulated in target order (shared by both solvers
    so equal assignments give bit-equal totals)."""
    total = 0.0
    for q, t in assignment.pairs:
        total += float(cost[q, t])
    return total


def _solve_square(cost: np.ndarray):
    """Hungarian method with potentials on a square matrix.

    Returns (col_to_row, u, v) where reduced costs c - u - v are
    nonnegative everywhere and zero on assignment edges.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.intp)  # p[j]: row matched to column j (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=np.intp)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        used[0] = True
        while True:
            i0 = p[j0]
            free = ~used
            cur = np.empty(n + 1)
            cur[1:] = cost[i0 - 1, :] - u[i0] - v[1:]
            cur[0] = np.inf
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            masked = np.where(free, minv, np.inf)
            j1 = int(masked.argmin())
            delta = masked[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            used[j0] = True
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_to_row = p[1:] - 1  # back to 0-based
    return col_to_row, u[1:], v[1:]


def _pad_square(cost: np.ndarray) -> np.ndarray:
    nq, ng = cost.shape
    padded = np.full((nq, nq), SENTINEL)
    padded[:, :ng] = cost
    return padded


def _optimal_completion(cost: np.ndarray, fixed: dict[int, int]):
    """Best completion of a partial target->query fixing; returns the full
    target->query map and its real total."""
    nq, ng = cost.shape
    free_rows = [q for q in range(nq) if q not in fixed.values()]
    free_cols = [t for t in range(ng) if t not in fixed]
    mapping = dict(fixed)
    if free_cols:
        sub = _pad_square(cost[np.ix_(free_rows, free_cols)])
        col_to_row, _, _ = _solve_square(sub)
        for j, t in enumerate(free_cols):
            mapping[t] = free_rows[col_to_row[j]]
    total = 0.0
    for t in range(ng):
        total += float(cost[mapping[t], t])
    return mapping, total


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-cost assignment with lexicographic (target, query) tie-break.

    Rectangular inputs are padded with sentinel columns. After the solve,
    complementary slackness prunes tie candidates: only zero-reduced-cost
    entries can appear in an alternative optimum, so on tie-free instances
    the refinement loop does no extra solves.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeError("cost matrix must be 2-D")
    nq, ng = cost.shape
    if ng > nq:
        raise ContractError(f"more targets ({ng}) than queries ({nq})")
    if not np.all(np.isfinite(cost)):
        raise ContractError("cost matrix must be finite")
    padded = _pad_square(cost)
    col_to_row, u, v = _solve_square(padded)
    mapping = {t: int(col_to_row[t]) for t in range(ng)}
    opt = 0.0
    for t in range(ng):
        opt += float(cost[mapping[t], t])

    scale = max(1.0, float(np.abs(cost).max())) if cost.size else 1.0
    reduced = padded - u[:, None] - v[None, :]
    fixed: dict[int, int] = {}
    for t in range(ng):
        q_star = mapping[t]
        taken = set(fixed.values())
        candidates = [q for q in range(q_star)
                      if q not in taken and reduced[q, t] <= _REDUCED_EPS * scale]
        for q in candidates:
            trial, total = _optimal_completion(cost, {**fixed, t: q})
            if total <= opt + _TIE_EPS * scale:
                mapping = trial
                break
        fixed[t] = mapping[t]
    return Assignment(tuple((fixed[t], t) for t in range(ng)))


def brute_force_assignment(cost: np.ndarray) -> Assignment:
    """Exhaustive minimum over injections; verification oracle.

    Enumeration order is lexicographic in the target-ordered query tuple
    and ties keep the first minimum, matching ``hungarian``'s tie-break.
    """
    cost = np.asarray(cost, dtype=np.float64)
    nq, ng = cost.shape
    if nq > 8:
        raise ContractError(f"brute force guarded to 8 queries, got {nq}")
    if ng > nq:
        raise ContractError(f"more targets ({ng}) than queries ({nq})")
    best = None
    best_total = np.inf
    targets = range(ng)
    for perm in permutations(range(nq), ng):
        total = 0.0
        for t in targets:
            total += float(cost[perm[t], t])
        if total < best_total:
            best_total = total
            best = perm
    return Assignment(tuple((best[t], t) for t in range(ng)))


# ---------------------------------------------------------------------------
# Matching cost between predictions and targets
# ---------------------------------------------------------------------------

def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _bce_from_logits(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    # softplus(x) - x*y is the stable form of the per-element BCE
    return np.logaddexp(0.0, logits) - logits * targets


def matching_cost(preds, targets, weights) -> np.ndarray:
    """Per-(query, target) matching cost mirroring the loss terms.

    cost = lambda_c * (1 - class prob) + lambda_b * (L1 human + L1 object)
         + lambda_u * ((1 - giou human) + (1 - giou object))
         + lambda_a * mean verb BCE
    """
    from .boxes import Box, giou, pair_l1  # local import keeps module load light

    if len(targets) < 1:
        raise ContractError("matching needs at least one target")
    nq = preds.class_logits.data.shape[0]
    ng = len(targets)
    class_probs = _softmax(preds.class_logits.data)
    verb_logits = preds.verb_logits.data
    hboxes = preds.human_boxes.data
    oboxes = preds.object_boxes.data
    cost = np.zeros((nq, ng))
    for t, pair in enumerate(targets):
        verbs = pair.verb_array()
        verb_cost = _bce_from_logits(verb_logits, verbs[None, :]).mean(axis=1)
        for q in range(nq):
            ph = Box(*np.clip(hboxes[q], [0, 0, 1e-9, 1e-9], 1.0))
            po = Box(*np.clip(oboxes[q], [0, 0, 1e-9, 1e-9], 1.0))
            geom = (weights.lambda_b * (pair_l1(ph, pair.human) + pair_l1(po, pair.object))
                    + weights.lambda_u * ((1.0 - giou(ph, pair.human))
                                          + (1.0 - giou(po, pair.object))))
            cost[q, t] = (weights.lambda_c * (1.0 - class_probs[q, pair.object_class])
                          + geom
                          + weights.lambda_a * verb_cost[q])
    return cost
