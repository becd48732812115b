"""Detection-quality evaluation: scored triplet candidates against one-use
ground truths, per-verb average precision, and their mean."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelParams, Predictions, decoder_forward, detection_heads, learnable_queries
from .scenes import Scene, encode_scene


@dataclass(frozen=True)
class Candidate:
    """One scored (human box, object box, class, verb) detection."""

    scene_index: int
    human_box: tuple
    object_box: tuple
    object_class: int
    verb: int
    score: float


@dataclass
class EvalReport:
    per_verb_ap: dict[int, float]
    mean_ap: float
    true_positives: dict[int, int]
    false_positives: dict[int, int]
    gt_counts: dict[int, int]


def _iou_cs(a, b) -> float:
    """IoU between two center-size arrays."""
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def predictions_to_candidates(preds: Predictions, scene_index: int) -> list[Candidate]:
    """Expand raw head outputs into per-verb scored candidates.

    Queries whose most likely class is no-object are dropped; the rest emit
    one candidate per verb scored as class probability times that verb's
    probability.
    """
    class_probs = _softmax(preds.class_logits.data)
    verb_probs = _sigmoid(preds.verb_logits.data)
    no_object = class_probs.shape[1] - 1
    out = []
    for q in range(class_probs.shape[0]):
        best = int(class_probs[q].argmax())
        if best == no_object:
            continue
        for v in range(verb_probs.shape[1]):
            out.append(Candidate(
                scene_index=scene_index,
                human_box=tuple(preds.human_boxes.data[q]),
                object_box=tuple(preds.object_boxes.data[q]),
                object_class=best,
                verb=v,
                score=float(class_probs[q, best] * verb_probs[q, v]),
            ))
    return out


def average_precision(scores: np.ndarray, hits: np.ndarray, gt_count: int) -> float:
    """All-points interpolated AP from unsorted scored hits."""
    if gt_count == 0:
        return 0.0
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(hits[order])
    fp = np.cumsum(~hits[order])
    recall = tp / gt_count
    precision = tp / (tp + fp)
    mrec = np.concatenate(([0.0], recall))
    mpre = np.concatenate(([0.0], precision))
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def evaluate_candidates(candidates: list[Candidate], scenes: list[Scene],
                        iou_threshold: float = 0.5) -> EvalReport:
    """Score candidates against ground truth, verb by verb.

    A candidate is a true positive for its verb when both boxes clear the
    IoU threshold against a ground-truth pair with the right class and that
    verb active; every ground truth is usable once per verb, claimed
    greedily in score order (best overlap first on ties).
    """
    num_verbs = len(scenes[0].pairs[0].verbs) if scenes else 0
    gt_counts = {v: 0 for v in range(num_verbs)}
    for scene in scenes:
        for pair in scene.pairs:
            for v, active in enumerate(pair.verbs):
                gt_counts[v] += int(active)

    per_verb_ap, tps, fps = {}, {}, {}
    for v in range(num_verbs):
        cands = [c for c in candidates if c.verb == v]
        cands.sort(key=lambda c: -c.score)
        used: set[tuple[int, int]] = set()
        hits = np.zeros(len(cands), dtype=bool)
        scores = np.empty(len(cands))
        for i, cand in enumerate(cands):
            scores[i] = cand.score
            scene = scenes[cand.scene_index]
            best_overlap, best_pair = 0.0, None
            for p, pair in enumerate(scene.pairs):
                if (cand.scene_index, p) in used:
                    continue
                if not pair.verbs[v] or pair.object_class != cand.object_class:
                    continue
                iou_h = _iou_cs(np.asarray(cand.human_box), pair.human.as_array())
                iou_o = _iou_cs(np.asarray(cand.object_box), pair.object.as_array())
                overlap = min(iou_h, iou_o)
                if iou_h >= iou_threshold and iou_o >= iou_threshold and overlap > best_overlap:
                    best_overlap, best_pair = overlap, p
            if best_pair is not None:
                used.add((cand.scene_index, best_pair))
                hits[i] = True
        per_verb_ap[v] = average_precision(scores, hits, gt_counts[v])
        tps[v] = int(hits.sum())
        fps[v] = int((~hits).sum())

    with_gt = [v for v in range(num_verbs) if gt_counts[v] > 0]
    mean_ap = float(np.mean([per_verb_ap[v] for v in with_gt])) if with_gt else 0.0
    return EvalReport(per_verb_ap=per_verb_ap, mean_ap=mean_ap,
                      true_positives=tps, false_positives=fps, gt_counts=gt_counts)


def evaluate_model(params: ModelParams, scenes: list[Scene], table: np.ndarray,
                   grids=None, iou_threshold: float = 0.5) -> EvalReport:
    """Pure function of (parameters, dataset): forward every scene without a
    tape and score the resulting candidates."""
    candidates = []
    for i, scene in enumerate(scenes):
        grid = grids[i] if grids is not None else encode_scene(scene, table)
        outputs = decoder_forward(learnable_queries(params), grid, params)
        preds = detection_heads(outputs.embeddings[-1], params)
        candidates.extend(predictions_to_candidates(preds, i))
    return evaluate_candidates(candidates, scenes, iou_threshold=iou_threshold)
