"""
Minimal pre-layernorm transformer used both as the dense teacher backbone and
as the dense part of the MoE student.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple

import numpy as np
import structlog

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .models import ModelConfig
from .moe import ExpertBank, RouterOutput, mlp_forward, moe_forward, route
from .utils import count_parameters, param_checksum

logger = structlog.get_logger()

INIT_STD = 0.02

ParameterSet = Dict[str, Tensor]


def block_prefix(layer: int) -> str:
    """Parameter-name prefix of 1-based block `layer`."""
    return f"block{layer:02d}"


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[Tuple[int, ...], str]]:
    """
    Name -> (shape, kind) for every parameter of the model described by config.
    kind is 'weight' (normal init), 'bias' (zeros) or 'gain' (ones).
    """
    d, f = config.hidden_dim, config.ffn_dim
    shapes = {
        'embed.weight': ((config.input_dim, d), 'weight'),
        'embed.bias': ((d,), 'bias'),
        'pos_embed': ((config.tokens_per_sample, d), 'weight'),
        'final_ln.gain': ((d,), 'gain'),
        'final_ln.bias': ((d,), 'bias'),
        'head.weight': ((d, config.num_classes), 'weight'),
        'head.bias': ((config.num_classes,), 'bias'),
    }

    def mlp(prefix: str) -> None:
        shapes[f'{prefix}.w1'] = ((d, f), 'weight')
        shapes[f'{prefix}.b1'] = ((f,), 'bias')
        shapes[f'{prefix}.w2'] = ((f, d), 'weight')
        shapes[f'{prefix}.b2'] = ((d,), 'bias')

    for layer in range(1, config.depth + 1):
        p = block_prefix(layer)
        for ln in ('ln1', 'ln2'):
            shapes[f'{p}.{ln}.gain'] = ((d,), 'gain')
            shapes[f'{p}.{ln}.bias'] = ((d,), 'bias')
        for proj in ('q', 'k', 'v', 'o'):
            shapes[f'{p}.attn.w{proj}'] = ((d, d), 'weight')
            shapes[f'{p}.attn.b{proj}'] = ((d,), 'bias')
        if layer in config.moe_layers:
            shapes[f'{p}.moe.router.weight'] = ((d, config.num_experts), 'weight')
            shapes[f'{p}.moe.router.bias'] = ((config.num_experts,), 'bias')
            for e in range(config.num_experts):
                mlp(f'{p}.moe.expert{e:02d}')
        else:
            mlp(f'{p}.ffn')
    return shapes


def init_model(config: ModelConfig, seed: int) -> ParameterSet:
    """
    Deterministically initialize all parameters.

    Weights are drawn from N(0, 0.02^2) in lexicographic name order from a
    generator seeded with `seed`; biases are zero and layernorm gains one.

    Args:
        config: Model topology
        seed: Integer seed

    Returns:
        Mapping of parameter name to trainable Tensor
    """
    config.validate()
    rng = np.random.default_rng(seed)
    params: ParameterSet = {}
    for name, (shape, kind) in sorted(parameter_shapes(config).items()):
        if kind == 'weight':
            value = rng.normal(0.0, INIT_STD, size=shape)
        elif kind == 'gain':
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[name] = Tensor(value, requires_grad=True, name=name)
    return params


@dataclass
class TransformerModel:
    """Parameter set plus the config that shaped it."""
    config: ModelConfig
    params: ParameterSet

    @classmethod
    def create(cls, config: ModelConfig, seed: int) -> "TransformerModel":
        model = cls(config=config, params=init_model(config, seed))
        logger.debug("model_initialized", seed=seed, parameters=count_parameters(model.params),
                     moe_layers=list(config.moe_layers))
        return model

    def checksum(self) -> str:
        return param_checksum(self.params)

    def subset(self, prefix: str) -> ParameterSet:
        return {name: t for name, t in self.params.items() if name.startswith(prefix)}

    def router_params(self) -> ParameterSet:
        return {name: t for name, t in self.params.items() if '.moe.router.' in name}


@dataclass
class ForwardRecord:
    """Everything a forward pass exposes to losses and analytics."""
    logits: Tensor
    layer_features: Dict[int, Tensor] = field(default_factory=dict)
    router_outputs: Dict[int, RouterOutput] = field(default_factory=dict)
    gating_outputs: Dict[int, RouterOutput] = field(default_factory=dict)
    attention: Dict[int, np.ndarray] = field(default_factory=dict)


def _layer_norm(x: Tensor, params: ParameterSet, prefix: str) -> Tensor:
    return ad.layernorm(x) * params[f'{prefix}.gain'] + params[f'{prefix}.bias']


def _split_heads(x: Tensor, batch: int, tokens: int, heads: int) -> Tensor:
    head_dim = x.shape[-1] // heads
    return ad.transpose(ad.reshape(x, (batch, tokens, heads, head_dim)), (0, 2, 1, 3))


def attention_forward(x: Tensor, params: ParameterSet, prefix: str, heads: int) -> Tuple[Tensor, Tensor]:
    """Multi-head self-attention over [B x N x D]; returns (output, attention probs)."""
    batch, tokens, dim = x.shape
    q = _split_heads(ad.matmul(x, params[f'{prefix}.wq']) + params[f'{prefix}.bq'], batch, tokens, heads)
    k = _split_heads(ad.matmul(x, params[f'{prefix}.wk']) + params[f'{prefix}.bk'], batch, tokens, heads)
    v = _split_heads(ad.matmul(x, params[f'{prefix}.wv']) + params[f'{prefix}.bv'], batch, tokens, heads)
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dim // heads))
    probs = ad.softmax(scores)
    context = ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3))
    merged = ad.reshape(context, (batch, tokens, dim))
    return ad.matmul(merged, params[f'{prefix}.wo']) + params[f'{prefix}.bo'], probs


def embed(params: ParameterSet, batch: Tensor) -> Tensor:
    return ad.matmul(batch, params['embed.weight']) + params['embed.bias'] + params['pos_embed']


def classify(params: ParameterSet, h: Tensor) -> Tensor:
    """Final layernorm, mean-pool over tokens, linear head."""
    pooled = ad.reduce_mean(_layer_norm(h, params, 'final_ln'), axis=1)
    return ad.matmul(pooled, params['head.weight']) + params['head.bias']


def _as_batch(config: ModelConfig, batch) -> Tensor:
    batch = ad.as_tensor(batch)
    expected = (config.tokens_per_sample, config.input_dim)
    if len(batch.shape) != 3 or tuple(batch.shape[1:]) != expected:
        raise ShapeError(f"batch shape {batch.shape} does not match [B x {expected[0]} x {expected[1]}]")
    return batch


def _run_blocks(model: TransformerModel, batch, ffn, capture_layers: Iterable[int]) -> ForwardRecord:
    config, params = model.config, model.params
    batch = _as_batch(config, batch)
    b, n = batch.shape[0], batch.shape[1]
    capture = set(capture_layers) | set(config.moe_layers)

    record = ForwardRecord(logits=None)
    h = embed(params, batch)
    for layer in range(1, config.depth + 1):
        p = block_prefix(layer)
        attn_out, probs = attention_forward(_layer_norm(h, params, f'{p}.ln1'), params, f'{p}.attn', config.heads)
        record.attention[layer] = probs.data
        h = h + attn_out
        flat = ad.reshape(_layer_norm(h, params, f'{p}.ln2'), (b * n, config.hidden_dim))
        h = h + ad.reshape(ffn(layer, flat, record), (b, n, config.hidden_dim))
        if layer in capture:
            record.layer_features[layer] = h
    record.logits = classify(params, h)
    return record


def forward_dense(model: TransformerModel, batch, capture_layers: Optional[Iterable[int]] = None) -> ForwardRecord:
    """
    Dense forward pass; layer_features holds the post-block representations of
    every block in capture_layers (a paired student's MoE layer indices).

    A model with MoE layers is evaluated with noise-free routing; no router
    state is ever built for a dense model.
    """
    config = model.config
    capture_layers = list(capture_layers or [])
    for layer in capture_layers:
        if not 1 <= layer <= config.depth:
            raise ShapeError(f"capture layer {layer} outside 1..{config.depth}")
    if not config.is_dense:
        return _run_blocks(model, batch, _moe_ffn(model, None, False, None, False), capture_layers)

    def dense_ffn(layer: int, flat: Tensor, record: ForwardRecord) -> Tensor:
        p = block_prefix(layer)
        return mlp_forward(flat, {key: model.params[f'{p}.ffn.{key}'] for key in ('w1', 'b1', 'w2', 'b2')})

    return _run_blocks(model, batch, dense_ffn, capture_layers)


def _moe_ffn(model: TransformerModel, rng, train_mode: bool,
             gating_override: Optional[Dict[int, RouterOutput]], detach_gates: bool):
    config, params = model.config, model.params

    def ffn(layer: int, flat: Tensor, record: ForwardRecord) -> Tensor:
        p = block_prefix(layer)
        if layer not in config.moe_layers:
            return mlp_forward(flat, {key: params[f'{p}.ffn.{key}'] for key in ('w1', 'b1', 'w2', 'b2')})
        router = {'weight': params[f'{p}.moe.router.weight'], 'bias': params[f'{p}.moe.router.bias']}
        routing = route(flat, router, config.noise_std, rng, train_mode, config.top_k)
        record.router_outputs[layer] = routing
        gating = routing
        if gating_override is not None:
            if layer not in gating_override:
                raise ConfigError(f"no external routing supplied for MoE layer {layer}")
            gating = gating_override[layer]
        record.gating_outputs[layer] = gating
        experts = ExpertBank.from_params(params, f'{p}.moe', config.num_experts)
        return moe_forward(flat, gating, experts, detach_gates=detach_gates)

    return ffn


def forward_student(model: TransformerModel, batch, rng: Optional[np.random.Generator], train_mode: bool,
                    gating_override: Optional[Dict[int, RouterOutput]] = None,
                    detach_gates: bool = False) -> ForwardRecord:
    """
    MoE forward pass: the FFN of every block in moe_layers is replaced by a
    routed expert bank.

    Args:
        model: Student model with at least one MoE layer
        batch: [B x N x D_in] tokens
        rng: Generator for router noise (unused when train_mode is False)
        train_mode: Enables router noise and noisy selection
        gating_override: Per-layer RouterOutput that performs selection and gating
            instead of the student router (teacher-routed configuration); the student
            router still runs and its output is kept in router_outputs
        detach_gates: Stop the task gradient from reaching the router via the gates
    """
    if model.config.is_dense:
        raise ConfigError("forward_student requires at least one MoE layer")
    if train_mode and rng is None and model.config.noise_std > 0:
        raise ConfigError("train-mode routing with noise needs an rng")
    ffn = _moe_ffn(model, rng, train_mode, gating_override, detach_gates)
    return _run_blocks(model, batch, ffn, [])


def predict_logits(model: TransformerModel, tokens: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits for every sample, computed in chunks without gradient tracking."""
    chunks = []
    with ad.no_grad():
        for start in range(0, len(tokens), batch_size):
            chunks.append(forward_dense(model, tokens[start:start + batch_size]).logits.data)
    if not chunks:
        return np.zeros((0, model.config.num_classes))
    return np.concatenate(chunks)
