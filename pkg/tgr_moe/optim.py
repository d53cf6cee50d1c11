"""
AdamW with decoupled weight decay, and the warmup + cosine learning-rate schedule.
"""

import math
from typing import Dict, Iterable, Mapping, Optional

import numpy as np
import structlog

from .autodiff import Tensor
from .models import OptimizerConfig, TrainConfig

logger = structlog.get_logger()

NO_DECAY = ('pos_embed',)


def lr_at(step: int, config: TrainConfig, steps_per_epoch: int) -> float:
    """
    Learning rate for 0-based optimizer step `step`.

    Linear warmup from warmup_start_lr to base_lr over warmup_epochs, then cosine
    annealing that reaches 0 on the final step of the run. Warmup is capped at
    epochs - 1 so at least one epoch anneals.
    """
    warmup_steps = warmup_epochs_used(config) * steps_per_epoch
    total_steps = config.epochs * steps_per_epoch
    if step < warmup_steps:
        return config.warmup_start_lr + (config.base_lr - config.warmup_start_lr) * step / warmup_steps
    span = max(1, total_steps - 1 - warmup_steps)
    progress = min(1.0, max(0.0, (step - warmup_steps) / span))
    return max(0.0, config.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress)))


def warmup_epochs_used(config: TrainConfig) -> int:
    return max(0, min(config.warmup_epochs, config.epochs - 1))


def named_gradients(grad_map: Mapping[Tensor, np.ndarray], params: Mapping[str, Tensor]) -> Dict[str, np.ndarray]:
    """Translate backward()'s leaf->grad map into name->grad for `params`; absent leaves get zeros."""
    named = {}
    for name, param in params.items():
        grad = grad_map.get(param)
        named[name] = np.zeros_like(param.data) if grad is None else grad
    return named


class AdamW:
    """AdamW over a named parameter set; decay applies to matrices only."""

    def __init__(self, params: Mapping[str, Tensor], config: Optional[OptimizerConfig] = None,
                 no_decay: Iterable[str] = NO_DECAY):
        self.params = dict(params)
        self.config = config or OptimizerConfig()
        self.no_decay = tuple(no_decay)
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def decays(self, name: str) -> bool:
        return self.params[name].data.ndim >= 2 and not name.endswith(self.no_decay)

    def step(self, grads: Mapping[str, np.ndarray], lr: float) -> None:
        """Apply one update. Parameter arrays are replaced, never mutated in place."""
        self.step_count += 1
        cfg = self.config
        bias1 = 1.0 - cfg.beta1 ** self.step_count
        bias2 = 1.0 - cfg.beta2 ** self.step_count
        for name in sorted(self.params):
            param = self.params[name]
            grad = grads.get(name)
            if grad is None:
                grad = np.zeros_like(param.data)
            value = param.data
            if cfg.weight_decay and self.decays(name):
                value = value * (1.0 - lr * cfg.weight_decay)
            self.m[name] = cfg.beta1 * self.m[name] + (1.0 - cfg.beta1) * grad
            self.v[name] = cfg.beta2 * self.v[name] + (1.0 - cfg.beta2) * grad * grad
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            param.data = value - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
