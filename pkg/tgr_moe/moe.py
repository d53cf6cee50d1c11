"""
Sparse MoE feed-forward layer: linear router, Gaussian logit noise, top-K selection
and probability-weighted aggregation of expert MLPs.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import structlog

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError

logger = structlog.get_logger()


@dataclass
class RouterOutput:
    """Routing state of one MoE layer for a flat batch of N_tok tokens.

    gate_weights[b][j] is the selection probability of expert topk_indices[b][j]:
    noisy probabilities in training, clean ones in evaluation. Gate weights are
    not renormalised over the selected set.
    """
    logits_clean: Tensor
    logits_noisy: Tensor
    probs_clean: Tensor
    probs_noisy: Tensor
    topk_indices: np.ndarray
    gate_weights: Tensor
    train_mode: bool = False

    @property
    def num_experts(self) -> int:
        return self.probs_clean.shape[-1]

    @property
    def top1(self) -> np.ndarray:
        return self.topk_indices[:, 0]

    @property
    def selection_probs(self) -> Tensor:
        return self.probs_noisy if self.train_mode else self.probs_clean


@dataclass
class ExpertBank:
    """E independent two-layer GELU MLPs with identical architecture."""
    experts: List[Dict[str, Tensor]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.experts)

    @classmethod
    def from_params(cls, params: Dict[str, Tensor], prefix: str, num_experts: int) -> "ExpertBank":
        experts = []
        for e in range(num_experts):
            base = f"{prefix}.expert{e:02d}"
            experts.append({key: params[f"{base}.{key}"] for key in ('w1', 'b1', 'w2', 'b2')})
        return cls(experts=experts)


def mlp_forward(h: Tensor, params: Dict[str, Tensor]) -> Tensor:
    """D -> ffn_dim -> D with GELU; shared by dense FFNs and experts."""
    hidden = ad.gelu(ad.matmul(h, params['w1']) + params['b1'])
    return ad.matmul(hidden, params['w2']) + params['b2']


def routing_from_logits(logits_clean: Tensor, logits_noisy: Tensor, top_k: int,
                        train_mode: bool) -> RouterOutput:
    """Softmax both logit tensors and select top-K on the probabilities in use."""
    probs_clean = ad.softmax(logits_clean)
    probs_noisy = probs_clean if logits_noisy is logits_clean else ad.softmax(logits_noisy)
    selection = probs_noisy if train_mode else probs_clean
    gate_weights = ad.topk_select(selection, top_k)
    return RouterOutput(
        logits_clean=logits_clean,
        logits_noisy=logits_noisy,
        probs_clean=probs_clean,
        probs_noisy=probs_noisy,
        topk_indices=gate_weights.attrs['indices'],
        gate_weights=gate_weights,
        train_mode=train_mode,
    )


def route(h: Tensor, router_params: Dict[str, Tensor], noise_std: float,
          rng: Optional[np.random.Generator], train_mode: bool, top_k: int = 1) -> RouterOutput:
    """
    Compute z = h W_r + b_r, optionally perturb it, and pick the top-K experts.

    Args:
        h: Token representations [N_tok x D]
        router_params: Mapping with 'weight' [D x E] and 'bias' [E]
        noise_std: Std of iid Gaussian noise added to the logits in training
        rng: Generator used for the noise draw
        train_mode: Noise and noisy selection only when True
        top_k: Experts selected per token

    Returns:
        RouterOutput with clean and noisy tensors both populated
    """
    if noise_std < 0:
        raise ValueError(f"noise_std must be >= 0, got {noise_std}")
    logits_clean = ad.matmul(h, router_params['weight']) + router_params['bias']
    if train_mode and noise_std > 0:
        noise = rng.normal(0.0, noise_std, size=logits_clean.shape)
        logits_noisy = logits_clean + noise
    else:
        logits_noisy = logits_clean
    return routing_from_logits(logits_clean, logits_noisy, top_k, train_mode)


def moe_forward(h: Tensor, routing: RouterOutput, experts: ExpertBank,
                detach_gates: bool = False) -> Tensor:
    """
    Aggregate selected expert outputs: out_b = sum_j gate[b][j] * f_{idx[b][j]}(h_b).

    No capacity limit is applied and no token is dropped. Experts selected by no
    token are never evaluated, so their parameters receive exactly zero gradient.

    Args:
        h: Token representations [N_tok x D] the routing was computed from
        routing: RouterOutput for h
        experts: ExpertBank with E experts
        detach_gates: Block the task gradient from reaching the router through the gates
    """
    indices = routing.topk_indices
    num_tokens, top_k = indices.shape
    if num_tokens != h.shape[0]:
        raise ShapeError(f"routing covers {num_tokens} tokens but h has {h.shape[0]}")
    if indices.size and (indices.min() < 0 or indices.max() >= len(experts)):
        raise ShapeError(f"expert index outside [0, {len(experts)})")

    gates = ad.stop_gradient(routing.gate_weights) if detach_gates else routing.gate_weights
    flat_gates = ad.reshape(gates, (num_tokens * top_k, 1))
    flat_indices = indices.reshape(-1)

    output = None
    for e, expert in enumerate(experts.experts):
        positions = np.flatnonzero(flat_indices == e)
        if positions.size == 0:
            continue
        rows = positions // top_k
        expert_out = mlp_forward(ad.gather_rows(h, rows), expert)
        weighted = expert_out * ad.gather_rows(flat_gates, positions)
        contribution = ad.scatter_add_rows(weighted, rows, num_tokens)
        output = contribution if output is None else output + contribution
    return output
