"""Objective terms for dual-task mean-teacher training.

All losses take channel-softmaxed probability maps (N x C x H x W). Targets
are either integer label maps (N x H x W) or probability maps shaped like the
prediction; targets are always treated as constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

if TYPE_CHECKING:
    from .partition import SubclassTable

LOG_FLOOR = 1e-12
DICE_SMOOTH = 1e-5
RAMP_EXPONENT = 5.0


@dataclass
class LossWeights:
    mu: float = 1.0
    lambda1_max: float = 0.1
    lambda2: float = 0.5
    lambda3: float = 1.0

    def lambda1(self, step: int, total_steps: int) -> float:
        """Sigmoid-shaped ramp ``lambda1_max * exp(-5 (1 - step/total)^2)``."""
        if total_steps <= 0:
            return self.lambda1_max
        phase = 1.0 - min(max(step / total_steps, 0.0), 1.0)
        return self.lambda1_max * math.exp(-RAMP_EXPONENT * phase * phase)


def one_hot(labels: np.ndarray, num_channels: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_channels):
        raise ValueError(f"label out of range [0, {num_channels})")
    return np.moveaxis(np.eye(num_channels)[labels], -1, 1)


def _target_probs(probs: Tensor, target) -> np.ndarray:
    data = target.data if isinstance(target, Tensor) else np.asarray(target)
    c = probs.shape[1]
    if data.ndim == probs.ndim - 1:
        if data.shape != (probs.shape[0],) + probs.shape[2:]:
            raise ad.ShapeError("loss", "label map shape", (probs.shape[0],) + probs.shape[2:], data.shape)
        return one_hot(data.astype(np.int64), c)
    if data.shape[1] != c:
        raise ad.ShapeError("loss", "channels", c, data.shape[1])
    if data.shape != probs.shape:
        raise ad.ShapeError("loss", "target shape", probs.shape, data.shape)
    return data.astype(np.float64)


def pixel_cross_entropy(probs: Tensor, target) -> Tensor:
    """Per-pixel ``-sum_c t_c log p_c`` with shape N x H x W."""
    t = _target_probs(probs, target)
    return ad.neg(ad.sum(ad.mul(ad.log_clamped(probs, LOG_FLOOR), t), axis=1))


def cross_entropy(probs: Tensor, target) -> Tensor:
    return ad.mean(pixel_cross_entropy(probs, target))


def dice_loss(probs: Tensor, target) -> Tensor:
    """Soft Dice loss averaged over every channel, background included."""
    t = _target_probs(probs, target)
    inter = ad.sum(ad.mul(probs, t), axis=(0, 2, 3))
    denom = ad.add(ad.sum(probs, axis=(0, 2, 3)), t.sum(axis=(0, 2, 3)) + DICE_SMOOTH)
    per_class = ad.div(ad.add(ad.mul(inter, 2.0), DICE_SMOOTH), denom)
    return ad.sub(1.0, ad.mean(per_class))


def seg_loss(probs: Tensor, target) -> Tensor:
    return ad.add(cross_entropy(probs, target), dice_loss(probs, target))


def mse(pred: Tensor, target) -> Tensor:
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ad.ShapeError("mse", "shape", pred.shape, t.shape)
    return ad.mean(ad.square(ad.sub(pred, t)))


def map_subclass_probs(scs_probs, table: "SubclassTable") -> Tensor:
    """Marginalize subclass probabilities onto their parent classes."""
    scs_probs = scs_probs if isinstance(scs_probs, Tensor) else Tensor(scs_probs)
    if scs_probs.shape[1] != table.num_subclasses:
        raise ad.ShapeError("map_subclass_probs", "channels", table.num_subclasses, scs_probs.shape[1])
    return ad.channel_matmul(scs_probs, table.membership())


def map_subclass_labels(labels, table: "SubclassTable") -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= table.num_subclasses):
        raise ValueError(f"subclass label out of range [0, {table.num_subclasses})")
    return table.parent_of[labels]


def task_consistency_loss(student_mos: Tensor, teacher_scs, table: "SubclassTable") -> Tensor:
    """Student MoS vs. the parent marginal of the (detached) teacher SCS map."""
    teacher_scs = teacher_scs.data if isinstance(teacher_scs, Tensor) else np.asarray(teacher_scs)
    target = map_subclass_probs(Tensor(teacher_scs), table).data
    return seg_loss(student_mos, target)


def conflict_loss(student_scs: Tensor, sub_labels, table: "SubclassTable") -> Tensor:
    """CE on pixels whose predicted subclass lies under the wrong parent.

    Masked CE is summed and divided by the total pixel count, so the term
    vanishes when no pixel conflicts.
    """
    sub_labels = np.asarray(sub_labels)
    pred = np.argmax(student_scs.data, axis=1)
    conflict = map_subclass_labels(pred, table) != map_subclass_labels(sub_labels, table)
    per_pixel = pixel_cross_entropy(student_scs, sub_labels)
    return ad.div(ad.sum(ad.mul(per_pixel, conflict.astype(np.float64))), float(conflict.size))


def supervised_loss(mos: Tensor, scs: Tensor | None, labels, sub_labels, mu: float) -> Tensor:
    loss = seg_loss(mos, labels)
    if mu != 0.0 and scs is not None:
        loss = ad.add(loss, ad.mul(seg_loss(scs, sub_labels), mu))
    return loss


def model_consistency_loss(student_mos, student_scs, teacher_mos, teacher_scs) -> Tensor:
    """MSE between student and teacher maps; the SCS pair may be omitted."""
    loss = mse(student_mos, teacher_mos)
    if student_scs is not None and teacher_scs is not None:
        loss = ad.add(loss, mse(student_scs, teacher_scs))
    return loss


TERMS = ("sup", "model_con", "task_con", "cnf")


def total_loss(
    terms: dict[str, Tensor | None], weights: LossWeights, step: int, total_steps: int
) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the four terms; missing terms count as zero.

    Returns the scalar loss and a per-term breakdown including ``lambda1``.
    """
    lam1 = weights.lambda1(step, total_steps)
    coef = {"sup": 1.0, "model_con": lam1, "task_con": weights.lambda2, "cnf": weights.lambda3}
    total = None
    breakdown: dict[str, float] = {}
    for name in TERMS:
        term = terms.get(name)
        breakdown[name] = 0.0 if term is None else term.data.item()
        if term is None or coef[name] == 0.0:
            continue
        weighted = ad.mul(term, coef[name])
        total = weighted if total is None else ad.add(total, weighted)
    if total is None:
        total = Tensor(0.0)
    breakdown["lambda1"] = lam1
    breakdown["total"] = total.data.item()
    return total, breakdown
