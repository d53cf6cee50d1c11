#!/usr/bin/env python3
"""
Tests for parameter initialization and the dense / MoE forward passes, plus the
finite-difference checks of the composite objectives on a tiny model.
"""

import numpy as np
import pytest

from conftest import tiny_model_config, tiny_teacher_config
from tgr_moe import autodiff as ad
from tgr_moe.backbone import (TransformerModel, forward_dense, forward_student, init_model, parameter_shapes,
                              predict_logits)
from tgr_moe.errors import ConfigError, ShapeError
from tgr_moe.losses import compose_student_loss, compose_teacher_loss, compose_vmoe_loss, task_loss
from tgr_moe.models import LossWeights
from tgr_moe.teacher import build_teacher_bundle, teacher_features, teacher_route
from tgr_moe.utils import param_checksum

GRADCHECK_TOLERANCE = 1e-4


def batch(seed=0, b=2, config=None):
    config = config or tiny_model_config()
    rng = np.random.default_rng(seed)
    return rng.normal(size=(b, config.tokens_per_sample, config.input_dim)), rng.integers(0, config.num_classes, b)


def test_init_is_deterministic_per_seed():
    config = tiny_model_config()
    assert param_checksum(init_model(config, 7)) == param_checksum(init_model(config, 7))
    assert param_checksum(init_model(config, 7)) != param_checksum(init_model(config, 8))


def test_init_kinds():
    params = init_model(tiny_model_config(), 0)
    assert np.all(params['block01.ln1.gain'].data == 1.0)
    assert np.all(params['head.bias'].data == 0.0)
    assert 0.0 < params['embed.weight'].data.std() < 0.05


def test_parameter_names_follow_layout():
    shapes = parameter_shapes(tiny_model_config(moe_layers=[2], num_experts=3))
    assert 'block01.ffn.w1' in shapes
    assert 'block02.moe.router.weight' in shapes
    assert 'block02.moe.expert02.b2' in shapes
    assert 'block02.ffn.w1' not in shapes
    assert shapes['block02.moe.router.weight'][0] == (8, 3)


def test_zero_model_returns_head_bias():
    config = tiny_teacher_config(depth=1)
    model = TransformerModel.create(config, 0)
    for tensor in model.params.values():
        tensor.data = np.zeros_like(tensor.data)
    bias = np.array([0.3, -1.2, 2.0])
    model.params['head.bias'].data = bias.copy()
    tokens, _ = batch(config=config)
    logits = forward_dense(model, tokens).logits.data
    assert np.allclose(logits, np.tile(bias, (2, 1)))


def test_dense_forward_captures_requested_layers():
    model = TransformerModel.create(tiny_teacher_config(), 0)
    tokens, _ = batch()
    record = forward_dense(model, tokens, capture_layers=[1, 2])
    assert sorted(record.layer_features) == [1, 2]
    assert record.layer_features[1].shape == (2, 4, 8)
    assert record.logits.shape == (2, 3)
    assert not record.router_outputs


def test_dense_forward_rejects_bad_capture_layer():
    model = TransformerModel.create(tiny_teacher_config(), 0)
    with pytest.raises(ShapeError):
        forward_dense(model, batch()[0], capture_layers=[5])


def test_batch_shape_is_checked():
    model = TransformerModel.create(tiny_teacher_config(), 0)
    with pytest.raises(ShapeError):
        forward_dense(model, np.zeros((2, 3, 4)))


def test_forward_student_requires_moe_layers():
    model = TransformerModel.create(tiny_teacher_config(), 0)
    with pytest.raises(ConfigError):
        forward_student(model, batch()[0], None, train_mode=False)


def test_forward_student_requires_rng_for_noise():
    model = TransformerModel.create(tiny_model_config(), 0)
    with pytest.raises(ConfigError):
        forward_student(model, batch()[0], None, train_mode=True)


def test_forward_student_exposes_router_outputs():
    model = TransformerModel.create(tiny_model_config(), 0)
    record = forward_student(model, batch()[0], np.random.default_rng(0), train_mode=True)
    assert sorted(record.router_outputs) == [1, 2]
    assert record.router_outputs[1].probs_clean.shape == (8, 2)
    assert record.gating_outputs[1] is record.router_outputs[1]


def test_zero_noise_train_equals_eval():
    model = TransformerModel.create(tiny_model_config(noise_std=0.0), 3)
    tokens, _ = batch()
    train = forward_student(model, tokens, np.random.default_rng(0), train_mode=True).logits.data
    evaluation = forward_student(model, tokens, None, train_mode=False).logits.data
    assert train.tobytes() == evaluation.tobytes()


def test_single_expert_student_matches_dense():
    student = TransformerModel.create(tiny_model_config(num_experts=1, moe_layers=[2]), 4)
    dense = TransformerModel.create(tiny_teacher_config(), 5)
    for name, tensor in dense.params.items():
        source = name.replace('block02.ffn', 'block02.moe.expert00')
        tensor.data = student.params[source].data.copy()
    tokens, _ = batch()
    student_logits = forward_student(student, tokens, None, train_mode=False).logits.data
    dense_logits = forward_dense(dense, tokens).logits.data
    assert np.allclose(student_logits, dense_logits, atol=1e-12, rtol=0)


def test_predict_logits_matches_forward():
    model = TransformerModel.create(tiny_model_config(), 0)
    tokens, _ = batch(b=5)
    chunked = predict_logits(model, tokens, batch_size=2)
    assert chunked.shape == (5, 3)
    assert np.allclose(chunked, forward_dense(model, tokens).logits.data, atol=1e-12)


# --- composite gradient checks ------------------------------------------------------

def _rescaled(model, factor=20.0):
    """Scale the N(0, 0.02^2) weights up so gradients sit well above finite-difference noise."""
    for name, tensor in model.params.items():
        if tensor.data.ndim >= 2:
            tensor.data = tensor.data * factor
    return model


def _checked(params):
    """Every parameter except the key biases, whose gradient is exactly zero (softmax shift invariance)."""
    return {name: t for name, t in params.items() if not name.endswith('.attn.bk')}


def test_key_bias_gradient_is_exactly_zero():
    model = TransformerModel.create(tiny_model_config(noise_std=0.0), 10)
    tokens, labels = batch(seed=4)
    grads = ad.backward(task_loss(forward_student(model, tokens, None, train_mode=False).logits, labels))
    key_biases = [t for name, t in model.params.items() if name.endswith('.attn.bk')]
    assert key_biases
    for tensor in key_biases:
        assert np.allclose(grads.get(tensor, np.zeros_like(tensor.data)), 0.0, rtol=0, atol=1e-14)


def test_gradcheck_vmoe_objective():
    model = _rescaled(TransformerModel.create(tiny_model_config(noise_std=0.0), 11))
    tokens, labels = batch(seed=1)
    weights = LossWeights(lambda_load=0.5)

    def objective():
        record = forward_student(model, tokens, None, train_mode=False)
        probs = {layer: out.probs_clean for layer, out in record.router_outputs.items()}
        return compose_vmoe_loss(task_loss(record.logits, labels), probs, weights).total

    report = ad.finite_difference_check(objective, _checked(model.params))
    assert report.passed(GRADCHECK_TOLERANCE), report.per_parameter


def test_gradcheck_teacher_objective():
    student_config = tiny_model_config(noise_std=0.0)
    teacher = build_teacher_bundle(_rescaled(TransformerModel.create(tiny_teacher_config(), 12)),
                                   student_config, seed=3)
    for tensor in teacher.router_params().values():
        tensor.data = tensor.data * 40.0 + 0.1
    tokens, _ = batch(seed=2)
    features = teacher_features(teacher, tokens)
    weights = LossWeights(lambda_load=0.5, lambda_ent=0.2)

    report = ad.finite_difference_check(
        lambda: compose_teacher_loss(teacher_route(teacher, features=features), weights).total,
        teacher.router_params())
    assert report.passed(GRADCHECK_TOLERANCE), report.per_parameter


def test_gradcheck_student_objective():
    student_config = tiny_model_config(noise_std=0.0)
    model = _rescaled(TransformerModel.create(student_config, 13))
    teacher = build_teacher_bundle(_rescaled(TransformerModel.create(tiny_teacher_config(), 14)),
                                   student_config, seed=4)
    for tensor in teacher.router_params().values():
        tensor.data = tensor.data * 40.0
    tokens, labels = batch(seed=3)
    teacher_probs = teacher_route(teacher, tokens)
    weights = LossWeights(lambda_distill=5.0)

    def objective():
        record = forward_student(model, tokens, None, train_mode=False)
        probs = {layer: out.probs_clean for layer, out in record.router_outputs.items()}
        return compose_student_loss(task_loss(record.logits, labels), probs, teacher_probs, weights).total

    report = ad.finite_difference_check(objective, _checked(model.params))
    assert report.passed(GRADCHECK_TOLERANCE), report.per_parameter
