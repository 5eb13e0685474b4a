"""Quality-weighted sparse instance distillation.

Teacher predictions are scored against ground truth (classification
confidence blended with BEV IoU); those scores down-weight the per-pair
distillation terms so unreliable teacher outputs transfer little. The
classification term is either a KL divergence on class distributions or a
per-anchor contrastive loss on penultimate embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue
from .core_types import BevBox, ClassDistribution, DistillConfig, PredictionSet
from .set_matching import (Assignment, CostMatrix, LOG_FLOOR, hungarian_assign,
                           normalized_box_vector)


# -- rotated BEV IoU ------------------------------------------------------

def _clip_polygon(poly: list[tuple[float, float]], a, b) -> list[tuple[float, float]]:
    """Keep the part of `poly` on or left of the directed line a->b."""
    out: list[tuple[float, float]] = []
    n = len(poly)
    ex, ey = b[0] - a[0], b[1] - a[1]
    for i in range(n):
        p = poly[i]
        q = poly[(i + 1) % n]
        cp = ex * (p[1] - a[1]) - ey * (p[0] - a[0])
        cq = ex * (q[1] - a[1]) - ey * (q[0] - a[0])
        if cp >= 0.0:
            out.append(p)
        if (cp > 0.0 > cq) or (cq > 0.0 > cp):
            t = cp / (cp - cq)
            out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return out


def _polygon_area(poly: Sequence[tuple[float, float]]) -> float:
    if len(poly) < 3:
        return 0.0
    s = 0.0
    for i in range(len(poly)):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % len(poly)]
        s += x0 * y1 - x1 * y0
    return abs(s) * 0.5


def rotated_bev_iou(a: BevBox, b: BevBox) -> float:
    """Intersection-over-union of the two yaw-rotated BEV footprints."""
    poly = [tuple(p) for p in a.footprint_corners()]
    clip = [tuple(p) for p in b.footprint_corners()]
    for i in range(4):
        if len(poly) < 3:
            break
        poly = _clip_polygon(poly, clip[i], clip[(i + 1) % 4])
    inter = _polygon_area(poly)
    union = a.footprint_area() + b.footprint_area() - inter
    if union <= 0.0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


# -- quality scores -------------------------------------------------------

def quality_score(class_score: float, iou: float, gamma: float) -> float:
    """class_score^gamma * iou^(1-gamma), with 0^0 defined as 1."""
    if not 0.0 <= class_score <= 1.0:
        raise ValueError("class_score must lie in [0, 1]")
    if not 0.0 <= iou <= 1.0:
        raise ValueError("iou must lie in [0, 1]")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    return float(np.power(class_score, gamma) * np.power(iou, 1.0 - gamma))


@dataclass(frozen=True)
class QualityWeights:
    """One weight in [0, 1] per teacher prediction; 0 where unmatched."""

    weights: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.weights, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError("quality weights must be a vector")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("quality weights must lie in [0, 1]")
        object.__setattr__(self, "weights", arr)

    def __len__(self):
        return self.weights.size


def gt_cost_matrix(gt_boxes: Sequence[BevBox], preds: PredictionSet,
                   extent: float) -> CostMatrix:
    """Match cost with ground truth as the target side (one-hot classes)."""
    g_n, p_n = len(gt_boxes), len(preds)
    if g_n == 0 or p_n == 0:
        return CostMatrix(np.zeros((g_n, p_n)))
    p_probs = np.stack([d.probs for d in preds.class_dists])  # (P, K)
    gt_cls = np.array([b.class_id for b in gt_boxes])
    cls_cost = -np.log(np.maximum(p_probs[:, gt_cls].T, LOG_FLOOR))  # (G, P)
    g_vec = np.stack([normalized_box_vector(b, extent) for b in gt_boxes])
    p_vec = np.stack([normalized_box_vector(b, extent) for b in preds.boxes])
    l1 = np.abs(g_vec[:, None, :] - p_vec[None, :, :]).sum(axis=2)
    return CostMatrix(cls_cost + l1)


def prediction_class_score(dist: ClassDistribution, background_last: bool) -> float:
    """Detection confidence: the max class probability (foreground only
    when the distribution carries a trailing background entry)."""
    probs = dist.probs[:-1] if background_last else dist.probs
    return float(probs.max())


def teacher_quality_weights(teacher: PredictionSet, gt_boxes: Sequence[BevBox],
                            config: DistillConfig, extent: float,
                            background_last: bool = False) -> QualityWeights:
    """Eq-style quality per teacher prediction via optimal matching to GT."""
    n = len(teacher)
    weights = np.zeros(n)
    if n == 0 or len(gt_boxes) == 0:
        return QualityWeights(weights)
    assignment = hungarian_assign(gt_cost_matrix(gt_boxes, teacher, extent))
    for gt_idx, pred_idx in assignment.pairs:
        score = prediction_class_score(teacher.class_dists[pred_idx], background_last)
        iou = rotated_bev_iou(gt_boxes[gt_idx], teacher.boxes[pred_idx])
        weights[pred_idx] = quality_score(score, iou, config.gamma)
    return QualityWeights(weights)


# -- distillation losses --------------------------------------------------

def _as_prob_rows(x) -> DiffValue:
    if isinstance(x, ClassDistribution):
        x = x.probs
    x = ad.coerce(x)
    if x.value.ndim == 1:
        x = ad.reshape(x, (1, x.value.size))
    return x


def kl_divergence_rows(teacher_probs: np.ndarray, student_probs) -> DiffValue:
    """Row-wise KL(teacher || student) with the student's mass floored."""
    t = np.atleast_2d(np.asarray(teacher_probs, dtype=np.float64))
    s = _as_prob_rows(student_probs)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_logt = np.where(t > 0.0, t * np.log(np.where(t > 0.0, t, 1.0)), 0.0)
    cross = ad.vsum(ad.constant(t) * ad.log(ad.maximum(s, LOG_FLOOR)), axis=1)
    return ad.constant(t_logt.sum(axis=1)) - cross


def kl_class_distill(student: ClassDistribution, teacher: ClassDistribution) -> DiffValue:
    """KL(teacher || student); gradient reaches the student side only."""
    rows = kl_divergence_rows(teacher.probs, student)
    return ad.reshape(rows, ())


def box_l1_rows(teacher_vecs: np.ndarray, student_vecs) -> DiffValue:
    """Row-wise L1 over normalized 8-vectors."""
    t = np.atleast_2d(np.asarray(teacher_vecs, dtype=np.float64))
    s = ad.coerce(student_vecs)
    if s.value.ndim == 1:
        s = ad.reshape(s, (1, s.value.size))
    return ad.vsum(ad.absolute(s - ad.constant(t)), axis=1)


def box_distill_l1(teacher_box: BevBox, student_box: BevBox, extent: float) -> DiffValue:
    t = normalized_box_vector(teacher_box, extent)
    s = normalized_box_vector(student_box, extent)
    return ad.reshape(box_l1_rows(t, ad.constant(s)), ())


def _student_box_rows(student: PredictionSet, indices, extent: float) -> DiffValue:
    if student.diff is not None:
        return ad.take_rows(student.diff.box8, indices)
    vecs = np.stack([normalized_box_vector(student.boxes[j], extent) for j in indices])
    return ad.constant(vecs)


def _student_prob_rows(student: PredictionSet, indices) -> DiffValue:
    if student.diff is not None:
        return ad.take_rows(student.diff.class_probs, indices)
    return ad.constant(np.stack([student.class_dists[j].probs for j in indices]))


def _student_embed_rows(student: PredictionSet, indices) -> DiffValue:
    if student.diff is not None:
        return ad.take_rows(student.diff.embeddings, indices)
    return ad.constant(np.stack([student.embeddings[j] for j in indices]))


def instance_loss_components(teacher: PredictionSet, student: PredictionSet,
                             q: QualityWeights, assignment: Assignment,
                             config: DistillConfig, extent: float,
                             critic=None, critic_loss: str = "infonce"
                             ) -> tuple[DiffValue, DiffValue]:
    """(classification term, box term), each already quality- and
    alpha/beta-weighted and summed over matched pairs."""
    if config.use_contrastive_cls and critic is None:
        raise ValueError("contrastive classification loss requires a critic")
    pairs = sorted(assignment.pairs)
    if not pairs:
        zero = ad.constant(0.0)
        return zero, zero
    t_idx = [r for r, _ in pairs]
    s_idx = [c for _, c in pairs]
    qv = ad.constant(q.weights[t_idx])

    t_box = np.stack([normalized_box_vector(teacher.boxes[i], extent) for i in t_idx])
    box_rows = box_l1_rows(t_box, _student_box_rows(student, s_idx, extent))
    box_term = ad.vsum(qv * box_rows) * config.beta

    if config.alpha == 0.0:
        return ad.constant(0.0), box_term
    if config.use_contrastive_cls:
        from .contrastive_critic import (infonce_per_anchor, ncs_per_anchor,
                                         project)
        s_emb = _student_embed_rows(student, s_idx)
        t_emb = np.stack([teacher.embeddings[i] for i in t_idx])
        x2d = project(critic.head_2d, s_emb)
        x3d = project(critic.head_3d, ad.constant(t_emb))
        if critic_loss == "ncs":
            cls_rows = ncs_per_anchor(x2d, x3d)
        else:
            cls_rows = infonce_per_anchor(x2d, x3d, critic.tau,
                                          config.include_positive_in_denominator)
    else:
        t_probs = np.stack([teacher.class_dists[i].probs for i in t_idx])
        cls_rows = kl_divergence_rows(t_probs, _student_prob_rows(student, s_idx))
    cls_term = ad.vsum(qv * cls_rows) * config.alpha
    return cls_term, box_term


def instance_loss(teacher: PredictionSet, student: PredictionSet,
                  q: QualityWeights, assignment: Assignment,
                  config: DistillConfig, extent: float, critic=None) -> DiffValue:
    """Sum over matched pairs of q_i * (alpha * L_cls + beta * L_box)."""
    cls_term, box_term = instance_loss_components(
        teacher, student, q, assignment, config, extent, critic)
    return cls_term + box_term
