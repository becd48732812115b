"""The four supervision terms and their weighted assembly.

The same form serves both branches: learnable queries are supervised
through the matched assignment, hard-positive queries through an identity
assignment onto their origin pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boxes import giou_pairs, l1_pairs
from .errors import ConfigError, ContractError
from .matching import Assignment


@dataclass(frozen=True)
class LossWeights:
    """Term weights for one branch plus the branch mixing weights."""

    lambda_b: float = 2.5   # L1 box term
    lambda_u: float = 1.0   # GIoU box term
    lambda_c: float = 1.0   # object-class cross-entropy
    lambda_a: float = 1.0   # verb focal term
    alpha: float = 1.0      # learnable-branch weight
    beta: float = 1.0       # hard-branch weight
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    no_object_weight: float = 0.1

    def __post_init__(self):
        values = (self.lambda_b, self.lambda_u, self.lambda_c, self.lambda_a,
                  self.alpha, self.beta, self.focal_gamma, self.no_object_weight)
        if any(v < 0 for v in values):
            raise ConfigError("loss weights must be nonnegative")
        if not (0.0 <= self.focal_alpha <= 1.0):
            raise ConfigError("focal_alpha must be in [0, 1]")


@dataclass
class LossBreakdown:
    l1: Tensor
    giou: Tensor
    ce: Tensor
    focal: Tensor
    weighted_total: Tensor


def _matched_rows(assignment: Assignment):
    if not assignment.pairs:
        raise ContractError("assignment is empty")
    queries = [q for q, _ in assignment.pairs]
    targets = [t for _, t in assignment.pairs]
    return queries, targets


def box_losses(preds, targets, assignment: Assignment):
    """Mean L1 and mean (1 - GIoU), each summed over human plus object."""
    queries, matched = _matched_rows(assignment)
    tgt_h = Tensor(np.stack([targets[t].human.as_array() for t in matched]))
    tgt_o = Tensor(np.stack([targets[t].object.as_array() for t in matched]))
    pred_h = ad.gather_rows(preds.human_boxes, queries)
    pred_o = ad.gather_rows(preds.object_boxes, queries)
    l1 = ad.mean_all(ad.add(l1_pairs(pred_h, tgt_h), l1_pairs(pred_o, tgt_o)))
    ones = Tensor(np.ones((len(matched), 1)))
    giou = ad.mean_all(ad.add(ad.sub(ones, giou_pairs(pred_h, tgt_h)),
                              ad.sub(ones, giou_pairs(pred_o, tgt_o))))
    return l1, giou


def ce_object_loss(class_logits: Tensor, targets, assignment: Assignment,
                   no_object_weight: float) -> Tensor:
    """Weighted cross-entropy over all queries.

    Matched queries are supervised with their target class, the rest with
    the no-object class at ``no_object_weight``; the result is the
    weight-normalized mean.
    """
    n, width = class_logits.data.shape
    no_object = width - 1
    labels = np.full(n, no_object)
    weights = np.full(n, no_object_weight)
    for q, t in assignment.pairs:
        labels[q] = targets[t].object_class
        weights[q] = 1.0
    picked = np.zeros((n, width))
    picked[np.arange(n), labels] = weights
    logp = ad.log_softmax_rows(class_logits)
    return ad.scale(ad.sum_all(ad.mul(logp, Tensor(picked))), -1.0 / weights.sum())


def focal_verb_loss(verb_logits: Tensor, targets, assignment: Assignment,
                    focal_gamma: float, focal_alpha: float) -> Tensor:
    """Per-element sigmoid focal loss, normalized by the positive count.

    Positives use alpha * (1-p)^gamma * (-ln p) and negatives the mirrored
    form; the powers are computed as exp(-gamma * softplus(+-x)) so the
    gamma = 0 case collapses exactly to the alpha-weighted BCE. Matched
    queries are supervised against their verbs, the rest against zeros.
    """
    n, v = verb_logits.data.shape
    target = np.zeros((n, v))
    for q, t in assignment.pairs:
        target[q] = targets[t].verb_array()
    num_pos = max(1.0, target.sum())
    x = verb_logits
    neg_x = ad.scale(x, -1.0)
    sp_pos = ad.softplus(x)        # -ln(1 - p)
    sp_neg = ad.softplus(neg_x)    # -ln p
    pos_elem = ad.mul(ad.exp(ad.scale(sp_pos, -focal_gamma)), sp_neg)
    neg_elem = ad.mul(ad.exp(ad.scale(sp_neg, -focal_gamma)), sp_pos)
    combined = ad.add(ad.scale(ad.mul(Tensor(target), pos_elem), focal_alpha),
                      ad.scale(ad.mul(Tensor(1.0 - target), neg_elem), 1.0 - focal_alpha))
    return ad.scale(ad.sum_all(combined), 1.0 / num_pos)


def branch_loss(preds, targets, assignment: Assignment,
                weights: LossWeights) -> LossBreakdown:
    """Assemble the four terms for one branch."""
    l1, giou = box_losses(preds, targets, assignment)
    ce = ce_object_loss(preds.class_logits, targets, assignment,
                        weights.no_object_weight)
    focal = focal_verb_loss(preds.verb_logits, targets, assignment,
                            weights.focal_gamma, weights.focal_alpha)
    weighted = ad.add(
        ad.add(ad.scale(l1, weights.lambda_b), ad.scale(giou, weights.lambda_u)),
        ad.add(ad.scale(ce, weights.lambda_c), ad.scale(focal, weights.lambda_a)),
    )
    return LossBreakdown(l1=l1, giou=giou, ce=ce, focal=focal, weighted_total=weighted)


def total_loss(loss_l: Tensor, loss_h, weights: LossWeights) -> Tensor:
    """alpha * L_l + beta * L_h; with no hard branch, alpha * L_l alone."""
    scaled_l = ad.scale(loss_l, weights.alpha)
    if loss_h is None:
        return scaled_l
    return ad.add(scaled_l, ad.scale(loss_h, weights.beta))
