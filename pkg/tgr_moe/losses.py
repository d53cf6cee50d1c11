"""
Scalar objectives: task cross-entropy, importance/load balancing, routing entropy,
KL routing distillation, z-loss, and the composite objectives built from them.
"""

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import structlog

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .models import LossWeights

logger = structlog.get_logger()

LOG_EPS = 1e-12

LayerTensors = Dict[int, Tensor]


@dataclass
class LossBreakdown:
    """
    A composite objective and its parts.

    coefficients maps each family ('task', 'load', 'entropy', 'distill', 'zloss')
    to the multiplier its per-layer terms carry in total. A family whose
    coefficient is zero is recorded for reporting but never enters the graph.
    """
    total: Tensor
    task: Optional[Tensor] = None
    load: LayerTensors = field(default_factory=dict)
    entropy: LayerTensors = field(default_factory=dict)
    distill: LayerTensors = field(default_factory=dict)
    zloss: LayerTensors = field(default_factory=dict)
    coefficients: Dict[str, float] = field(default_factory=dict)

    def resum(self) -> float:
        """Re-add the parts with their coefficients."""
        value = 0.0
        if self.task is not None:
            value += self.coefficients.get('task', 1.0) * self.task.item()
        for family in ('load', 'entropy', 'distill', 'zloss'):
            coef = self.coefficients.get(family, 0.0)
            for term in getattr(self, family).values():
                value += coef * term.item()
        return value

    def as_floats(self) -> Dict[str, object]:
        """Plain-float view for metrics records."""
        def layer_map(terms: LayerTensors) -> Dict[str, float]:
            return {str(layer): term.item() for layer, term in sorted(terms.items())}

        return {
            'total': self.total.item(),
            'task': self.task.item() if self.task is not None else 0.0,
            'load': layer_map(self.load),
            'entropy': layer_map(self.entropy),
            'distill': layer_map(self.distill),
            'zloss': layer_map(self.zloss),
        }


def _constant(value: float) -> Tensor:
    return Tensor(np.array(value))


def _check_rank2(p: Tensor, what: str) -> None:
    if len(p.shape) != 2:
        raise ShapeError(f"{what} expects [N_tok x E], got shape {p.shape}")


def importance(p: Tensor) -> Tensor:
    """Imp_e = mean over tokens of p[i][e]."""
    _check_rank2(p, "importance")
    return ad.reduce_mean(p, axis=0)


def load_loss(p: Tensor) -> Tensor:
    """Squared coefficient of variation of importance, E^2 * var(Imp) with population variance."""
    _check_rank2(p, "load_loss")
    num_experts = p.shape[-1]
    if num_experts == 1:
        return _constant(0.0)
    return ad.reduce_var(importance(p)) * float(num_experts ** 2)


def entropy_loss(p: Tensor) -> Tensor:
    """Mean per-token routing entropy, with p * log(p + 1e-12)."""
    _check_rank2(p, "entropy_loss")
    plogp = ad.reduce_sum(p * ad.log(p + LOG_EPS), axis=-1)
    return -ad.reduce_mean(plogp)


def kl_distill(p_student: Tensor, p_teacher: Tensor) -> Tensor:
    """
    KL(stopgrad(p_teacher) || p_student), averaged over tokens.

    The teacher side is always detached, so teacher parameters get exactly
    zero gradient from this term.
    """
    if p_student.shape != p_teacher.shape:
        raise ShapeError(f"kl_distill shapes differ: student {p_student.shape}, teacher {p_teacher.shape}")
    _check_rank2(p_student, "kl_distill")
    target = ad.stop_gradient(p_teacher)
    log_ratio = ad.log(target + LOG_EPS) - ad.log(p_student + LOG_EPS)
    return ad.reduce_mean(ad.reduce_sum(target * log_ratio, axis=-1))


def task_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of [B x C] logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = logits.shape[-1]
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"expected {logits.shape[0]} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ShapeError(f"label outside [0, {num_classes})")
    return ad.cross_entropy_with_logits(logits, labels)


def z_loss(z: Tensor) -> Tensor:
    """Mean over tokens of logsumexp(z_i)^2."""
    _check_rank2(z, "z_loss")
    shift = z.data.max(axis=-1, keepdims=True)
    lse = ad.log(ad.reduce_sum(ad.exp(z - shift), axis=-1)) + shift[:, 0]
    return ad.reduce_mean(lse * lse)


def _weighted_layer_sum(terms: LayerTensors, coef: float) -> Optional[Tensor]:
    if coef == 0 or not terms:
        return None
    acc = None
    for layer in sorted(terms):
        term = terms[layer] * coef
        acc = term if acc is None else acc + term
    return acc


def compose_vmoe_loss(task: Tensor, router_probs: LayerTensors, weights: LossWeights,
                      router_logits: Optional[LayerTensors] = None) -> LossBreakdown:
    """
    task + lambda_load * sum_i load(p_i), plus lambda_zloss * sum_i z_loss(z_i) when
    router_logits is given.
    """
    load = {layer: load_loss(p) for layer, p in router_probs.items()}
    zloss = {layer: z_loss(z) for layer, z in (router_logits or {}).items()}
    coefficients = {'task': 1.0, 'load': weights.lambda_load, 'zloss': weights.lambda_zloss if zloss else 0.0}

    total = task
    for family, terms in (('load', load), ('zloss', zloss)):
        part = _weighted_layer_sum(terms, coefficients[family])
        if part is not None:
            total = total + part
    return LossBreakdown(total=total, task=task, load=load, zloss=zloss, coefficients=coefficients)


def compose_teacher_loss(teacher_probs: LayerTensors, weights: LossWeights) -> LossBreakdown:
    """Sum over layers of lambda_load * load + lambda_ent * entropy; no task term."""
    load = {layer: load_loss(p) for layer, p in teacher_probs.items()}
    entropy = {layer: entropy_loss(p) for layer, p in teacher_probs.items()}
    coefficients = {'task': 0.0, 'load': weights.lambda_load, 'entropy': weights.lambda_ent}

    total = None
    for family, terms in (('load', load), ('entropy', entropy)):
        part = _weighted_layer_sum(terms, coefficients[family])
        if part is not None:
            total = part if total is None else total + part
    if total is None:
        total = _constant(0.0)
    return LossBreakdown(total=total, load=load, entropy=entropy, coefficients=coefficients)


def compose_student_loss(task: Tensor, student_probs: LayerTensors, teacher_probs: LayerTensors,
                         weights: LossWeights, lambda_distill: Optional[float] = None,
                         load_probs: Optional[LayerTensors] = None) -> LossBreakdown:
    """
    task + (lambda_distill / |S|) * sum_i KL(p_t_i || p_i).

    Args:
        task: Task loss of the student forward
        student_probs: Student routing probabilities per MoE layer
        teacher_probs: Teacher routing probabilities per MoE layer
        weights: Loss coefficients
        lambda_distill: Override of weights.lambda_distill (schedule masking)
        load_probs: When given, adds lambda_load * sum_i load(load_probs_i)
    """
    if set(student_probs) != set(teacher_probs):
        raise ShapeError(f"student layers {sorted(student_probs)} != teacher layers {sorted(teacher_probs)}")
    lam = weights.lambda_distill if lambda_distill is None else lambda_distill
    distill = {layer: kl_distill(student_probs[layer], teacher_probs[layer]) for layer in student_probs}
    load = {layer: load_loss(p) for layer, p in (load_probs or {}).items()}
    coefficients = {
        'task': 1.0,
        'distill': lam / len(distill) if distill else 0.0,
        'load': weights.lambda_load if load else 0.0,
    }

    total = task
    if coefficients['distill'] != 0:
        kl_sum = None
        for layer in sorted(distill):
            kl_sum = distill[layer] if kl_sum is None else kl_sum + distill[layer]
        total = total + kl_sum * coefficients['distill']
    load_part = _weighted_layer_sum(load, coefficients['load'])
    if load_part is not None:
        total = total + load_part
    return LossBreakdown(total=total, task=task, load=load, distill=distill, coefficients=coefficients)


def compose_upper_bound_losses(task: Tensor, teacher_probs: LayerTensors, student_probs: LayerTensors,
                               weights: LossWeights) -> Tuple[LossBreakdown, LossBreakdown]:
    """
    Objectives of the teacher-routed configuration.

    Returns:
        (teacher side, student side). The teacher side is task + lambda_load * sum
        of load on the teacher probabilities that performed routing. The student
        side is task + lambda_distill * sum of KL terms; the student router only
        appears in the KL terms, so it receives no task gradient.
    """
    teacher_side = compose_vmoe_loss(task, teacher_probs, weights)

    distill = {layer: kl_distill(student_probs[layer], teacher_probs[layer]) for layer in sorted(student_probs)}
    router_term = _weighted_layer_sum(distill, weights.lambda_distill)
    total = task if router_term is None else task + router_term
    student_side = LossBreakdown(total=total, task=task, distill=distill,
                                 coefficients={'task': 1.0, 'distill': weights.lambda_distill})
    return teacher_side, student_side
