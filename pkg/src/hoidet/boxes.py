"""Axis-aligned boxes in normalized center-size form, IoU/GIoU kernels, and
the IoU-constrained shift sampler used to build hard location priors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, SamplingError


@dataclass(frozen=True)
class Box:
    """Center coordinates in [0,1], strictly positive width/height.

    Corners may fall outside the unit square for shifted boxes; generated
    ground-truth boxes are clamped inside at creation time.
    """

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ContractError(f"box center ({self.cx}, {self.cy}) outside [0,1]")
        if self.w <= 0.0 or self.h <= 0.0:
            raise ContractError(f"box size ({self.w}, {self.h}) must be positive")

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])


@dataclass(frozen=True)
class ShiftConfig:
    """Bounds and sampling budget for the box shift sampler.

    ``jitter_scale`` sets the translation range (offsets uniform in
    +-jitter_scale*(w,h)); the size perturbation range scales with it so a
    zero jitter collapses the proposal to the identity. At the default 0.5
    the size factors span [0.75, 1.25].
    """

    iou_lo: float = 0.4
    iou_hi: float = 0.6
    max_attempts: int = 64
    jitter_scale: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.iou_lo < self.iou_hi <= 1.0):
            raise ContractError(f"invalid IoU bounds [{self.iou_lo}, {self.iou_hi}]")
        if self.max_attempts < 1:
            raise ContractError("max_attempts must be >= 1")
        if self.jitter_scale < 0.0:
            raise ContractError("jitter_scale must be >= 0")


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for disjoint boxes.

    Areas are derived from corner coordinates so identical boxes yield an
    exact 1.0 regardless of rounding in the center-size conversion.
    """
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def giou(a: Box, b: Box) -> float:
    """IoU minus the enclosing-box penalty (enclose - union) / enclose."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    enclose = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return inter / union - (enclose - union) / enclose


def pair_l1(a: Box, b: Box) -> float:
    """Sum of absolute differences over the four center-size coordinates."""
    return (abs(a.cx - b.cx) + abs(a.cy - b.cy)
            + abs(a.w - b.w) + abs(a.h - b.h))


def fallback_shift(gt: Box, cfg: ShiftConfig) -> Box:
    """Deterministic pure-x translation hitting the midpoint of the IoU band.

    Translating by dx keeps IoU = (w-dx)/(w+dx), so dx solves exactly for
    the target value. Used when rejection sampling runs out of attempts.
    """
    target = 0.5 * (cfg.iou_lo + cfg.iou_hi)
    dx = gt.w * (1.0 - target) / (1.0 + target)
    return Box(gt.cx + dx, gt.cy, gt.w, gt.h)


def shift_box(gt: Box, cfg: ShiftConfig, rng: np.random.Generator) -> Box:
    """Jitter a box until its IoU with ``gt`` lands inside the configured band.

    Translation and size are perturbed independently and the candidate is
    rejected until the IoU constraint holds. The postcondition is hard: on
    budget exhaustion the analytic fallback translation is returned, which
    satisfies the band by construction.
    """
    half = 0.25 * (cfg.jitter_scale / 0.5)
    for _ in range(cfg.max_attempts):
        dx = rng.uniform(-1.0, 1.0) * cfg.jitter_scale * gt.w
        dy = rng.uniform(-1.0, 1.0) * cfg.jitter_scale * gt.h
        sw = rng.uniform(1.0 - half, 1.0 + half)
        sh = rng.uniform(1.0 - half, 1.0 + half)
        candidate = Box(gt.cx + dx, gt.cy + dy, gt.w * sw, gt.h * sh)
        if cfg.iou_lo <= iou(gt, candidate) <= cfg.iou_hi:
            return candidate
    fallback = fallback_shift(gt, cfg)
    if not (cfg.iou_lo <= iou(gt, fallback) <= cfg.iou_hi):
        raise SamplingError(f"shift sampler cannot satisfy [{cfg.iou_lo}, {cfg.iou_hi}]")
    return fallback


# ---------------------------------------------------------------------------
# Differentiable kernels over stacked boxes (rows of [cx, cy, w, h])
# ---------------------------------------------------------------------------

# Linear map from center-size rows to corner rows [x1, y1, x2, y2].
_TO_CORNERS = np.array([
    [1.0, 0.0, 1.0, 0.0],
    [0.0, 1.0, 0.0, 1.0],
    [-0.5, 0.0, 0.5, 0.0],
    [0.0, -0.5, 0.0, 0.5],
])


def _col(t: ad.Tensor, j: int) -> ad.Tensor:
    return ad.gather_cols(t, [j])


def giou_pairs(a: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    """Row-wise GIoU between two [n,4] center-size tensors, differentiable.

    Returns an [n,1] tensor. Widths and heights must be positive, which the
    sigmoid-bounded box heads and valid ground truths guarantee.
    """
    corners = ad.Tensor(_TO_CORNERS)
    ca, cb = ad.matmul(a, corners), ad.matmul(b, corners)
    ax1, ay1, ax2, ay2 = (_col(ca, j) for j in range(4))
    bx1, by1, bx2, by2 = (_col(cb, j) for j in range(4))
    iw = ad.relu(ad.sub(ad.minimum(ax2, bx2), ad.maximum(ax1, bx1)))
    ih = ad.relu(ad.sub(ad.minimum(ay2, by2), ad.maximum(ay1, by1)))
    inter = ad.mul(iw, ih)
    area_a = ad.mul(_col(a, 2), _col(a, 3))
    area_b = ad.mul(_col(b, 2), _col(b, 3))
    union = ad.sub(ad.add(area_a, area_b), inter)
    ew = ad.sub(ad.maximum(ax2, bx2), ad.minimum(ax1, bx1))
    eh = ad.sub(ad.maximum(ay2, by2), ad.minimum(ay1, by1))
    enclose = ad.mul(ew, eh)
    return ad.sub(ad.div(inter, union),
                  ad.div(ad.sub(enclose, union), enclose))


def l1_pairs(a: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    """Row-wise L1 distance between [n,4] center-size tensors, as [n,1]."""
    return ad.matmul(ad.absval(ad.sub(a, b)), ad.Tensor(np.ones((4, 1))))
