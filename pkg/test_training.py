#!/usr/bin/env python3
"""
Tests for the training harness: schedule, optimizer, per-variant steps, the run
loop and evaluation.
"""

import json
import math

import numpy as np
import pytest

from conftest import tiny_model_config, tiny_spec, tiny_teacher_config
from tgr_moe import autodiff as ad
from tgr_moe.backbone import TransformerModel, _run_blocks, block_prefix, forward_student
from tgr_moe.datasets import TokenBatch, build_synthetic, load_dataset_dir
from tgr_moe.errors import ConfigError, TeacherError
from tgr_moe.losses import task_loss
from tgr_moe.models import VARIANTS, LossWeights, OptimizerConfig, TrainConfig
from tgr_moe.moe import ExpertBank, mlp_forward
from tgr_moe.optim import AdamW, lr_at, named_gradients
from tgr_moe.teacher import build_teacher_bundle, teacher_features, teacher_router_outputs
from tgr_moe.trace import read_trace
from tgr_moe.training import (TrainingEngine, collect_routing, evaluate, evaluate_checkpoint, load_student,
                              read_metrics, run_training, train_upper_bound, warm_start)
from tgr_moe.utils import param_checksum


def tiny_batch(seed=0, b=6):
    rng = np.random.default_rng(seed)
    return TokenBatch(rng.normal(size=(b, 4, 4)), rng.integers(0, 3, size=b), np.arange(b))


def tiny_bundle(seed=0):
    return build_teacher_bundle(TransformerModel.create(tiny_teacher_config(), 100 + seed), tiny_model_config(), seed)


def engine_for(variant, weights=None, optimizer=None, epochs=4, **overrides):
    config = TrainConfig(variant=variant, model=tiny_model_config(), teacher_checkpoint="unused",
                         weights=weights or LossWeights(), optimizer=optimizer or OptimizerConfig(),
                         epochs=epochs, **overrides)
    teacher = tiny_bundle() if config.needs_teacher else None
    return TrainingEngine(config, TransformerModel.create(config.model, 0), teacher)


# --- schedule and optimizer ------------------------------------------------------

def test_lr_schedule_endpoints():
    config = TrainConfig(epochs=10, warmup_epochs=2, base_lr=5e-4, warmup_start_lr=1e-6)
    steps = 7
    assert lr_at(0, config, steps) == 1e-6
    assert lr_at(2 * steps, config, steps) == pytest.approx(5e-4, abs=1e-15)
    assert abs(lr_at(10 * steps - 1, config, steps)) < 1e-12
    values = [lr_at(s, config, steps) for s in range(2 * steps, 10 * steps)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_lr_schedule_without_warmup():
    config = TrainConfig(epochs=1, warmup_epochs=0, base_lr=1e-3)
    assert lr_at(0, config, 1) == 1e-3


@pytest.mark.parametrize("warmup", [4, 5, 9])
def test_lr_schedule_anneals_when_warmup_covers_the_run(warmup):
    config = TrainConfig(epochs=4, warmup_epochs=warmup, base_lr=5e-4, warmup_start_lr=1e-6)
    steps = 3
    assert lr_at(4 * steps - 1, config, steps) == 0.0
    assert lr_at(3 * steps, config, steps) == pytest.approx(5e-4, abs=1e-15)
    assert lr_at(0, config, steps) == 1e-6


def test_adamw_decays_matrices_only():
    params = {
        'embed.weight': ad.Tensor(np.ones((2, 2)), requires_grad=True),
        'embed.bias': ad.Tensor(np.ones(2), requires_grad=True),
        'pos_embed': ad.Tensor(np.ones((3, 2)), requires_grad=True),
    }
    optimizer = AdamW(params, OptimizerConfig(weight_decay=0.5))
    assert optimizer.decays('embed.weight')
    assert not optimizer.decays('embed.bias')
    assert not optimizer.decays('pos_embed')
    old = params['embed.weight'].data
    optimizer.step({name: np.zeros_like(p.data) for name, p in params.items()}, lr=0.1)
    assert np.allclose(params['embed.weight'].data, 0.95)
    assert np.array_equal(params['embed.bias'].data, np.ones(2))
    assert np.array_equal(params['pos_embed'].data, np.ones((3, 2)))
    assert np.array_equal(old, np.ones((2, 2)))


def test_named_gradients_fills_missing_with_zeros():
    x = ad.Tensor(np.ones(2), requires_grad=True)
    y = ad.Tensor(np.ones(3), requires_grad=True)
    named = named_gradients(ad.backward(ad.reduce_sum(x)), {'x': x, 'y': y})
    assert np.array_equal(named['x'], np.ones(2))
    assert np.array_equal(named['y'], np.zeros(3))


# --- variant steps -------------------------------------------------------------------

def test_joint_step_without_guidance_matches_vmoe_without_load():
    batch = tiny_batch()
    joint = engine_for("tgr", LossWeights(lambda_distill=0.0, lambda_load=0.0, lambda_ent=0.0))
    plain = engine_for("vmoe", LossWeights(lambda_load=0.0))
    joint.train_step(batch, epoch=1, lr=1e-3)
    plain.train_step(batch, epoch=1, lr=1e-3)
    assert joint.model.checksum() == plain.model.checksum()


def test_joint_step_with_student_load_term_matches_vmoe():
    batch = tiny_batch(1)
    joint = engine_for("tgr", LossWeights(lambda_distill=0.0, lambda_load=0.01, lambda_ent=0.0),
                       student_load_term=True)
    plain = engine_for("vmoe", LossWeights(lambda_load=0.01))
    for epoch in (1, 2):
        joint.train_step(batch, epoch=epoch, lr=1e-3)
        plain.train_step(batch, epoch=epoch, lr=1e-3)
    assert joint.model.checksum() == plain.model.checksum()


def test_joint_step_updates_teacher_routers_but_not_backbone():
    engine = engine_for("tgr", LossWeights(lambda_load=1.0, lambda_ent=0.1))
    backbone = engine.teacher.backbone_checksum()
    routers = param_checksum(engine.teacher.router_params())
    result = engine.train_step(tiny_batch(), epoch=1, lr=1e-3)
    assert engine.teacher.backbone_checksum() == backbone
    assert param_checksum(engine.teacher.router_params()) != routers
    assert result.teacher is not None
    assert sorted(result.student.distill) == [1, 2]


def test_first_half_schedule_matches_tgr_until_switch():
    batch = tiny_batch(2)
    full = engine_for("tgr", epochs=4)
    half = engine_for("tgr_first_half", epochs=4)
    assert half.switch_epoch == 2
    for epoch in (1, 2):
        full.train_step(batch, epoch, 1e-3)
        half.train_step(batch, epoch, 1e-3)
    assert full.model.checksum() == half.model.checksum()
    assert not half.distill_active(3) and not half.teacher_router_trainable(3)
    routers = param_checksum(half.teacher.router_params())
    full.train_step(batch, 3, 1e-3)
    half.train_step(batch, 3, 1e-3)
    assert full.model.checksum() != half.model.checksum()
    assert param_checksum(half.teacher.router_params()) == routers


def test_distill_only_router_learns_only_from_distillation():
    engine = engine_for("distill_only", LossWeights(lambda_distill=0.0), OptimizerConfig(weight_decay=0.0))
    before = {name: t.data.copy() for name, t in engine.model.router_params().items()}
    engine.train_step(tiny_batch(3), epoch=1, lr=1e-2)
    for name, tensor in engine.model.router_params().items():
        assert np.array_equal(tensor.data, before[name])
    guided = engine_for("distill_only", LossWeights(lambda_distill=5.0), OptimizerConfig(weight_decay=0.0))
    guided.train_step(tiny_batch(3), epoch=1, lr=1e-2)
    assert any(not np.array_equal(t.data, before[n]) for n, t in guided.model.router_params().items())


def test_teacher_routed_task_gives_student_router_no_gradient():
    model = TransformerModel.create(tiny_model_config(), 0)
    teacher = tiny_bundle()
    batch = tiny_batch(4)
    gating = teacher_router_outputs(teacher, teacher_features(teacher, batch.tokens), top_k=1)
    record = forward_student(model, batch.tokens, np.random.default_rng(0), train_mode=True,
                             gating_override=gating)
    assert record.gating_outputs[1] is gating[1]
    grads = named_gradients(ad.backward(task_loss(record.logits, batch.labels)), model.router_params())
    assert all(not np.any(g) for g in grads.values())


def test_upper_bound_step_trains_teacher_router():
    engine = engine_for("upper_bound", LossWeights(lambda_load=0.5))
    routers = param_checksum(engine.teacher.router_params())
    backbone = engine.teacher.backbone_checksum()
    result = engine.train_step(tiny_batch(5), epoch=1, lr=1e-3)
    assert param_checksum(engine.teacher.router_params()) != routers
    assert engine.teacher.backbone_checksum() == backbone
    assert engine.eval_routing_mode == "teacher"
    assert result.teacher.coefficients['load'] == 0.5


def test_student_routed_evaluates_with_student_router():
    assert engine_for("student_routed").eval_routing_mode == "student"


def test_teacher_variant_needs_bundle():
    config = TrainConfig(variant="tgr", model=tiny_model_config(), teacher_checkpoint="unused")
    with pytest.raises(TeacherError):
        TrainingEngine(config, TransformerModel.create(config.model, 0), None)


def test_trainable_count_excludes_teacher_backbone():
    engine = engine_for("tgr")
    student = sum(t.data.size for t in engine.model.params.values())
    routers = sum(t.data.size for t in engine.teacher.router_params().values())
    assert engine.trainable_parameter_count() == student + routers


def test_step_reports_utilization():
    result = engine_for("vmoe").train_step(tiny_batch(), epoch=1, lr=1e-3)
    assert sorted(result.utilization) == [1, 2]
    assert int(result.utilization[1].sum()) == 6 * 4


# --- run loop --------------------------------------------------------------------------

def _metrics_without_clock(path):
    records = [r.to_dict() for r in read_metrics(path)]
    for record in records:
        record.pop('wall_clock_seconds')
    return records


def test_run_is_deterministic(make_config, data_dir, tmp_path):
    dataset = load_dataset_dir(data_dir)
    first = run_training(make_config("vmoe", epochs=3), dataset, tmp_path / "a")
    second = run_training(make_config("vmoe", epochs=3), dataset, tmp_path / "b")
    assert _metrics_without_clock(first.metrics) == _metrics_without_clock(second.metrics)
    assert first.trace.read_bytes() == second.trace.read_bytes()
    assert (first.checkpoint / "params.bin").read_bytes() == (second.checkpoint / "params.bin").read_bytes()


def test_run_writes_artifacts(make_config, data_dir, tmp_path):
    config = make_config("vmoe", epochs=2, checkpoint_every_epochs=1)
    result = run_training(config, load_dataset_dir(data_dir), tmp_path)
    for name in ("metrics.jsonl", "trace.bin", "summary.json", "checkpoint/manifest.json",
                 "checkpoints/epoch_001/params.bin"):
        assert (tmp_path / name).exists(), name

    records = read_metrics(result.metrics)
    assert [r.step for r in records] == [2, 3, 4, 6]
    assert [r.val_accuracy is not None for r in records] == [False, True, False, True]
    first_line = result.metrics.read_text().splitlines()[0]
    keys = list(json.loads(first_line))
    assert keys == sorted(keys)

    trace = read_trace(result.trace)
    assert trace.epochs == [1, 2]
    assert trace.assignments[0].shape == (2, 6 * 4)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary['val_accuracy'] == result.val_accuracy


@pytest.mark.parametrize("variant", VARIANTS)
def test_every_variant_runs(variant, make_config, data_dir, tmp_path):
    result = run_training(make_config(variant, epochs=1), load_dataset_dir(data_dir), tmp_path)
    assert 0.0 <= result.val_accuracy <= 1.0
    assert (result.trace is None) == (variant == "dense")


def test_checkpoint_reload_evaluates_identically(make_config, data_dir, tmp_path):
    dataset = load_dataset_dir(data_dir)
    result = run_training(make_config("tgr", epochs=1), dataset, tmp_path)
    first = evaluate_checkpoint(result.checkpoint, dataset.val)
    second = evaluate_checkpoint(result.checkpoint, dataset.val)
    assert first.to_dict() == second.to_dict()
    assert first.accuracy == result.val_accuracy
    loaded = load_student(result.checkpoint)
    assert loaded.teacher_router
    teacher = loaded.teacher_bundle()
    collection = collect_routing(loaded.model, dataset.val.tokens, "student", teacher)
    assert sorted(collection.teacher_top1) == [1, 2]


def test_train_upper_bound_reports_both_modes(make_config, data_dir, teacher_checkpoint, tmp_path):
    from tgr_moe.teacher import load_teacher_bundle
    config = make_config("upper_bound", epochs=1)
    teacher = load_teacher_bundle(teacher_checkpoint, config.model, config.seed)
    result, reports = train_upper_bound(config, load_dataset_dir(data_dir), teacher, tmp_path)
    assert set(reports) == {"student", "teacher"}
    assert reports["teacher"].accuracy == result.val_accuracy
    assert (tmp_path / "eval_teacher.json").exists()


def test_dataset_shape_mismatch_is_a_config_error(make_config, data_dir, tmp_path):
    config = make_config("vmoe", model=tiny_model_config(input_dim=5))
    with pytest.raises(ConfigError):
        run_training(config, load_dataset_dir(data_dir), tmp_path)


def test_warm_start_reinitializes_new_head(make_config, data_dir, tmp_path):
    result = run_training(make_config("vmoe", epochs=1), load_dataset_dir(data_dir), tmp_path / "phase1")
    model = TransformerModel.create(tiny_model_config(num_classes=5), 1)
    reinitialized = warm_start(model, result.checkpoint)
    assert sorted(reinitialized) == ['head.bias', 'head.weight']
    source = load_student(result.checkpoint).model
    assert np.array_equal(model.params['embed.weight'].data, source.params['embed.weight'].data)


def test_dense_evaluation_reports_dense_mode(tiny_splits):
    report = evaluate(TransformerModel.create(tiny_teacher_config(), 0), tiny_splits.val)
    assert report.routing_mode == "dense"
    assert report.layers == []


def test_full_top_k_evaluation_is_soft_mixture(tiny_splits):
    model = TransformerModel.create(tiny_model_config(top_k=2), 0)
    params = model.params

    def soft_ffn(layer, flat, record):
        p = block_prefix(layer)
        z = flat.data @ params[f'{p}.moe.router.weight'].data + params[f'{p}.moe.router.bias'].data
        probs = np.exp(z - z.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        experts = ExpertBank.from_params(params, f'{p}.moe', 2)
        mixed = sum(probs[:, e:e + 1] * mlp_forward(flat, expert).data for e, expert in enumerate(experts.experts))
        return ad.as_tensor(mixed)

    with ad.no_grad():
        expected = _run_blocks(model, tiny_splits.val.tokens, soft_ffn, []).logits.data
    collected = collect_routing(model, tiny_splits.val.tokens)
    assert np.allclose(collected.logits, expected, rtol=0, atol=1e-9)

    report = evaluate(model, tiny_splits.val)
    assert report.accuracy == float((expected.argmax(axis=-1) == tiny_splits.val.labels).mean())
    assert sum(report.layers[0].counts) == len(tiny_splits.val) * 4


@pytest.mark.slow
def test_memorizes_sixteen_samples(tmp_path):
    splits, _ = build_synthetic(tiny_spec(samples_train=16, samples_val=16))
    config = TrainConfig(variant="vmoe", model=tiny_model_config(hidden_dim=16, ffn_dim=32), epochs=150,
                         batch_size=16, base_lr=5e-3, warmup_epochs=5, probe_set_size=4, prefetch_depth=0,
                         log_every_steps=50)
    result = run_training(config, splits, tmp_path)
    report = evaluate(load_student(result.checkpoint).model, splits.train)
    assert report.accuracy == 1.0


@pytest.mark.slow
def test_tiny_teacher_router_balances_under_strong_weights(tiny_splits):
    from tgr_moe.losses import entropy_loss, load_loss
    from tgr_moe.teacher import pretrain_teacher, pretrain_teacher_router, teacher_route
    backbone, _ = pretrain_teacher(tiny_teacher_config(), tiny_splits, epochs=20, seed=0, batch_size=8)
    bundle = build_teacher_bundle(backbone, tiny_model_config(), seed=0)
    config = TrainConfig(variant="tgr", model=tiny_model_config(), teacher_checkpoint="unused", batch_size=8,
                         base_lr=1e-2, weights=LossWeights(lambda_load=1.0, lambda_ent=0.5),
                         teacher_router_pretrain_epochs=200)
    pretrain_teacher_router(bundle, tiny_splits.train, config)
    for p in teacher_route(bundle, tiny_splits.val.tokens).values():
        assert load_loss(p).item() < 0.05
        assert entropy_loss(p).item() < 0.5 * math.log(2)
