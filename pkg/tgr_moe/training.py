"""
Training harness: per-variant train steps, the epoch loop with metrics, routing
traces and checkpoints, and evaluation.
"""

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import structlog

from . import autodiff as ad
from .analytics import normalized_probability_entropy, normalized_routing_entropy, utilization_histogram
from .backbone import TransformerModel, forward_dense, forward_student
from .checkpoint import CheckpointState, load_checkpoint, save_checkpoint
from .datasets import DatasetSplits, TokenBatch, TokenDataset, batch_iterator, prefetch_batches
from .errors import ConfigError, NonFiniteError, TeacherError
from .losses import (LossBreakdown, compose_student_loss, compose_teacher_loss, compose_upper_bound_losses,
                     compose_vmoe_loss, task_loss)
from .models import (EvalReport, JOINT_VARIANTS, LayerRoutingSummary, MetricsRecord, TrainConfig,
                     UPPER_BOUND_VARIANTS)
from .optim import AdamW, lr_at, named_gradients, warmup_epochs_used
from .teacher import (TEACHER_ROUTER_PREFIX, TeacherBundle, apply_teacher_update, load_teacher_bundle,
                      pretrain_teacher_router, teacher_features, teacher_route, teacher_router_outputs)
from .trace import RoutingTraceWriter
from .utils import count_parameters, log_duration

logger = structlog.get_logger()

ROUTING_MODES = ("student", "teacher")
EVAL_BATCH = 256


@dataclass
class StepResult:
    """What one optimizer step reports back to the loop."""
    student: LossBreakdown
    teacher: Optional[LossBreakdown]
    correct: int
    count: int
    utilization: Dict[int, np.ndarray] = field(default_factory=dict)


def _top1_counts(record, num_experts: int) -> Dict[int, np.ndarray]:
    return {layer: utilization_histogram([out], num_experts).counts
            for layer, out in record.gating_outputs.items()}


def _require_finite(loss: LossBreakdown, what: str) -> None:
    if not np.isfinite(loss.total.item()):
        raise NonFiniteError(f"{what} loss is not finite")


class TrainingEngine:
    """Owns the optimizers and RNG streams of one run and applies one step per batch."""

    def __init__(self, config: TrainConfig, model: TransformerModel, teacher: Optional[TeacherBundle] = None):
        self.config = config
        self.model = model
        self.teacher = teacher
        self.variant = config.variant
        if config.needs_teacher and teacher is None:
            raise TeacherError(f"variant '{self.variant}' needs a teacher bundle")
        self.noise_rng = np.random.default_rng([config.seed, 1])
        self.optimizer = AdamW(model.params, config.optimizer)
        self.teacher_optimizer = AdamW(teacher.router_params(), config.optimizer) if teacher is not None else None
        self.switch_epoch = int(math.ceil(config.epochs / 2))

    @property
    def eval_routing_mode(self) -> str:
        return "teacher" if self.variant == "upper_bound" else "student"

    def distill_active(self, epoch: int) -> bool:
        return self.variant != "tgr_first_half" or epoch <= self.switch_epoch

    def teacher_router_trainable(self, epoch: int) -> bool:
        return self.teacher is not None and not self.teacher.router_frozen and self.distill_active(epoch)

    def trainable_parameter_count(self) -> int:
        """Student parameters plus teacher routers; the frozen teacher backbone is excluded."""
        total = count_parameters(self.model.params)
        if self.teacher is not None:
            total += count_parameters(self.teacher.router_params())
        return total

    def train_step(self, batch: TokenBatch, epoch: int, lr: float) -> StepResult:
        if self.variant == "dense":
            return self._step_dense(batch, lr)
        if self.variant in ("vmoe", "vmoe_zloss"):
            return self._step_vmoe(batch, lr)
        if self.variant in JOINT_VARIANTS:
            return self.train_step_joint(batch, epoch, lr)
        if self.variant in UPPER_BOUND_VARIANTS:
            return self._step_upper_bound(batch, lr)
        raise ConfigError(f"Unknown variant '{self.variant}'")

    def _finish(self, loss: LossBreakdown, logits: ad.Tensor, batch: TokenBatch, record=None,
                teacher_loss: Optional[LossBreakdown] = None) -> StepResult:
        correct = int((logits.data.argmax(axis=-1) == batch.labels).sum())
        utilization = _top1_counts(record, self.config.model.num_experts) if record is not None else {}
        return StepResult(student=loss, teacher=teacher_loss, correct=correct, count=len(batch),
                          utilization=utilization)

    def _step_dense(self, batch: TokenBatch, lr: float) -> StepResult:
        record = forward_dense(self.model, batch.tokens)
        task = task_loss(record.logits, batch.labels)
        loss = LossBreakdown(total=task, task=task, coefficients={'task': 1.0})
        _require_finite(loss, "task")
        self.optimizer.step(named_gradients(ad.backward(loss.total), self.model.params), lr)
        return self._finish(loss, record.logits, batch)

    def _step_vmoe(self, batch: TokenBatch, lr: float) -> StepResult:
        record = forward_student(self.model, batch.tokens, self.noise_rng, train_mode=True)
        task = task_loss(record.logits, batch.labels)
        probs = {layer: out.selection_probs for layer, out in record.router_outputs.items()}
        logits = None
        if self.variant == "vmoe_zloss":
            logits = {layer: out.logits_clean for layer, out in record.router_outputs.items()}
        loss = compose_vmoe_loss(task, probs, self.config.weights, router_logits=logits)
        _require_finite(loss, "student")
        self.optimizer.step(named_gradients(ad.backward(loss.total), self.model.params), lr)
        return self._finish(loss, record.logits, batch, record)

    def _student_distill_probs(self, record) -> Dict[int, ad.Tensor]:
        if self.config.distill_on_noisy:
            return {layer: out.probs_noisy for layer, out in record.router_outputs.items()}
        return {layer: out.probs_clean for layer, out in record.router_outputs.items()}

    def train_step_joint(self, batch: TokenBatch, epoch: int, lr: float) -> StepResult:
        """
        One joint step: student forward, teacher features and routing, teacher
        objective, distillation, then one update each for the student and the
        teacher routers. The teacher backbone is never updated.
        """
        if self.variant not in JOINT_VARIANTS:
            raise ConfigError(f"joint step called for variant '{self.variant}'")
        detach = self.variant == "distill_only"
        record = forward_student(self.model, batch.tokens, self.noise_rng, train_mode=True, detach_gates=detach)
        task = task_loss(record.logits, batch.labels)

        features = teacher_features(self.teacher, batch.tokens)
        teacher_probs = teacher_route(self.teacher, features=features)
        teacher_loss = compose_teacher_loss(teacher_probs, self.config.weights)

        load_probs = None
        if self.config.student_load_term:
            load_probs = {layer: out.selection_probs for layer, out in record.router_outputs.items()}
        lam = self.config.weights.lambda_distill if self.distill_active(epoch) else 0.0
        student_loss = compose_student_loss(task, self._student_distill_probs(record), teacher_probs,
                                            self.config.weights, lambda_distill=lam, load_probs=load_probs)
        _require_finite(student_loss, "student")
        _require_finite(teacher_loss, "teacher")

        student_grads = named_gradients(ad.backward(student_loss.total), self.model.params)
        teacher_grads = None
        if self.teacher_router_trainable(epoch) and teacher_loss.total.requires_grad:
            teacher_grads = named_gradients(ad.backward(teacher_loss.total), self.teacher.router_params())

        self.optimizer.step(student_grads, lr)
        if teacher_grads is not None:
            apply_teacher_update(self.teacher, teacher_loss, self.teacher_optimizer, lr, grads=teacher_grads)
        return self._finish(student_loss, record.logits, batch, record, teacher_loss)

    def _step_upper_bound(self, batch: TokenBatch, lr: float) -> StepResult:
        """Teacher routers select and gate experts; the student router learns only by distillation."""
        features = teacher_features(self.teacher, batch.tokens)
        gating = teacher_router_outputs(self.teacher, features, self.config.model.top_k)
        record = forward_student(self.model, batch.tokens, self.noise_rng, train_mode=True, gating_override=gating)
        task = task_loss(record.logits, batch.labels)
        teacher_probs = {layer: out.probs_clean for layer, out in gating.items()}
        teacher_side, student_side = compose_upper_bound_losses(
            task, teacher_probs, self._student_distill_probs(record), self.config.weights)
        _require_finite(student_side, "student")
        _require_finite(teacher_side, "teacher")

        student_grads = named_gradients(ad.backward(student_side.total), self.model.params)
        teacher_grads = None
        if not self.teacher.router_frozen:
            teacher_grads = named_gradients(ad.backward(teacher_side.total), self.teacher.router_params())

        self.optimizer.step(student_grads, lr)
        if teacher_grads is not None:
            self.teacher_optimizer.step(teacher_grads, lr)
        return self._finish(student_side, record.logits, batch, record, teacher_side)


# --- routing collection and evaluation -------------------------------------------

@dataclass
class RoutingCollection:
    """Eval-mode outputs over a token set, flattened per MoE layer."""
    logits: np.ndarray
    topk: Dict[int, np.ndarray] = field(default_factory=dict)
    probs: Dict[int, np.ndarray] = field(default_factory=dict)
    student_top1: Dict[int, np.ndarray] = field(default_factory=dict)
    teacher_top1: Dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def top1(self) -> Dict[int, np.ndarray]:
        return {layer: ids[:, 0] for layer, ids in self.topk.items()}


def collect_routing(model: TransformerModel, tokens: np.ndarray, routing_mode: str = "student",
                    teacher: Optional[TeacherBundle] = None, batch_size: int = EVAL_BATCH) -> RoutingCollection:
    """
    Noise-free forward over `tokens`, recording the routing that performed
    selection plus both routers' top-1 choices when a teacher is available.
    """
    if routing_mode not in ROUTING_MODES:
        raise ConfigError(f"routing mode must be one of {ROUTING_MODES}, got '{routing_mode}'")
    if routing_mode == "teacher" and teacher is None:
        raise TeacherError("teacher routing needs a teacher bundle")
    logits, topk, probs, student_top1, teacher_top1 = [], {}, {}, {}, {}

    def extend(store, layer, value):
        store.setdefault(layer, []).append(value)

    with ad.no_grad():
        for start in range(0, len(tokens), batch_size):
            chunk = tokens[start:start + batch_size]
            if model.config.is_dense:
                logits.append(forward_dense(model, chunk).logits.data)
                continue
            gating = None
            if teacher is not None:
                features = teacher_features(teacher, chunk)
                teacher_outputs = teacher_router_outputs(teacher, features, model.config.top_k)
                for layer, out in teacher_outputs.items():
                    extend(teacher_top1, layer, out.top1)
                if routing_mode == "teacher":
                    gating = teacher_outputs
            record = forward_student(model, chunk, None, train_mode=False, gating_override=gating)
            logits.append(record.logits.data)
            for layer, out in record.gating_outputs.items():
                extend(topk, layer, out.topk_indices)
                extend(probs, layer, out.probs_clean.data)
            for layer, out in record.router_outputs.items():
                extend(student_top1, layer, out.top1)

    def join(store):
        return {layer: np.concatenate(parts) for layer, parts in store.items()}

    stacked = np.concatenate(logits) if logits else np.zeros((0, model.config.num_classes))
    return RoutingCollection(logits=stacked, topk=join(topk), probs=join(probs),
                             student_top1=join(student_top1), teacher_top1=join(teacher_top1))


def evaluate(model: TransformerModel, dataset: TokenDataset, routing_mode: str = "student",
             teacher: Optional[TeacherBundle] = None, entropy_mode: str = "frequency",
             trainable_params: Optional[int] = None) -> EvalReport:
    """
    Accuracy plus per-layer utilization and normalized routing entropy; noise is off.

    Args:
        entropy_mode: 'frequency' (empirical top-1) or 'probability' (mean probabilities)
    """
    collection = collect_routing(model, dataset.tokens, routing_mode, teacher)
    accuracy = float((collection.logits.argmax(axis=-1) == dataset.labels).mean()) if len(dataset) else 0.0
    num_experts = model.config.num_experts
    layers = []
    for layer in sorted(collection.topk):
        top1 = collection.topk[layer][:, 0]
        probs = collection.probs[layer]
        entropy = (normalized_probability_entropy(probs) if entropy_mode == "probability"
                   else normalized_routing_entropy(top1, num_experts))
        usage = utilization_histogram([(top1, probs)], num_experts)
        layers.append(LayerRoutingSummary(
            layer=layer,
            counts=usage.counts.tolist(),
            importance=usage.importance.tolist(),
            normalized_entropy=entropy,
        ))
    if trainable_params is None:
        trainable_params = count_parameters(model.params)
        if teacher is not None and not model.config.is_dense:
            trainable_params += count_parameters(teacher.router_params())
    return EvalReport(accuracy=accuracy, routing_mode=routing_mode if not model.config.is_dense else "dense",
                      num_samples=len(dataset), layers=layers, trainable_params=trainable_params)


# --- metrics stream ---------------------------------------------------------------

class MetricsStream:
    """metrics.jsonl writer: one JSON object per line, keys sorted."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.write_text("", encoding='utf-8')

    def append(self, record: MetricsRecord) -> None:
        with open(self.path, 'a', encoding='utf-8') as f:
            f.write(record.to_json(sort_keys=True) + "\n")


def read_metrics(path) -> List[MetricsRecord]:
    with open(path, encoding='utf-8') as f:
        return [MetricsRecord.from_json(line) for line in f if line.strip()]


# --- checkpoints ------------------------------------------------------------------

def student_state(config: TrainConfig, model: TransformerModel, teacher: Optional[TeacherBundle],
                  epoch: int, metrics: Optional[str] = "metrics.jsonl") -> CheckpointState:
    params = {name: t.data for name, t in model.params.items()}
    if teacher is not None:
        params.update({name: t.data for name, t in teacher.router_params().items()})
    return CheckpointState(params=params, config=config.to_dict(), kind="student", metrics=metrics, epoch=epoch)


@dataclass
class LoadedStudent:
    config: TrainConfig
    model: TransformerModel
    teacher_router: Dict[str, np.ndarray]
    state: CheckpointState

    def teacher_bundle(self) -> Optional[TeacherBundle]:
        """Rebuild the teacher with the routers saved alongside the student."""
        if not self.teacher_router or not self.config.teacher_checkpoint:
            return None
        bundle = load_teacher_bundle(self.config.teacher_checkpoint, self.config.model, self.config.seed,
                                     self.config.teacher_feature_layer)
        bundle.load_router_params(self.teacher_router)
        bundle.freeze_routers()
        return bundle


def load_student(path) -> LoadedStudent:
    state = load_checkpoint(path)
    if state.kind != "student":
        raise ConfigError(f"{path} holds a {state.kind} checkpoint, not a student")
    config = TrainConfig.from_dict(state.config)
    params = {name: ad.Tensor(value, requires_grad=True, name=name)
              for name, value in state.params.items() if not name.startswith(TEACHER_ROUTER_PREFIX)}
    teacher_router = {name: value for name, value in state.params.items() if name.startswith(TEACHER_ROUTER_PREFIX)}
    return LoadedStudent(config=config, model=TransformerModel(config=config.model, params=params),
                         teacher_router=teacher_router, state=state)


def evaluate_checkpoint(path, dataset: TokenDataset, routing_mode: Optional[str] = None,
                        entropy_mode: str = "frequency") -> EvalReport:
    loaded = load_student(path)
    mode = routing_mode or ("teacher" if loaded.config.variant == "upper_bound" else "student")
    teacher = loaded.teacher_bundle() if not loaded.model.config.is_dense else None
    return evaluate(loaded.model, dataset, mode, teacher, entropy_mode)


def warm_start(model: TransformerModel, path) -> List[str]:
    """
    Copy every same-named, same-shaped tensor from a checkpoint; the rest (e.g. a
    classifier head for a new class count) keep their fresh initialization.

    Returns:
        Names of parameters left re-initialized
    """
    state = load_checkpoint(path)
    reinitialized = []
    for name, tensor in model.params.items():
        value = state.params.get(name)
        if value is not None and value.shape == tensor.shape:
            tensor.data = np.array(value, dtype=np.float64)
        else:
            reinitialized.append(name)
    logger.info("warm_start", source=str(path), reinitialized=reinitialized)
    return reinitialized


# --- run loop -----------------------------------------------------------------------

@dataclass
class TrainingResult:
    out_dir: Path
    checkpoint: Path
    metrics: Path
    trace: Optional[Path]
    val_accuracy: float
    records: List[MetricsRecord]
    seconds_per_epoch: float
    trainable_params: int
    probe_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def probe_indices(config: TrainConfig, val: TokenDataset) -> np.ndarray:
    """Fixed validation samples whose routing is traced, drawn once per run."""
    size = min(config.probe_set_size, len(val))
    rng = np.random.default_rng([config.seed, 4])
    return np.sort(rng.choice(len(val), size=size, replace=False))


def _check_dataset(config: TrainConfig, dataset: DatasetSplits) -> None:
    model = config.model
    for split_name, split in (("train", dataset.train), ("val", dataset.val)):
        if split.tokens_per_sample != model.tokens_per_sample or split.token_dim != model.input_dim:
            raise ConfigError(
                f"{split_name} tokens are [{split.tokens_per_sample} x {split.token_dim}] but the model expects "
                f"[{model.tokens_per_sample} x {model.input_dim}]")
        if split.num_classes > model.num_classes:
            raise ConfigError(f"{split_name} has {split.num_classes} classes, model head has {model.num_classes}")


class _Interval:
    """Accumulates accuracy and utilization between two metrics records."""

    def __init__(self):
        self.correct = 0
        self.count = 0
        self.utilization: Dict[int, np.ndarray] = {}

    def add(self, result: StepResult) -> None:
        self.correct += result.correct
        self.count += result.count
        for layer, counts in result.utilization.items():
            self.utilization[layer] = self.utilization.get(layer, 0) + counts


def _make_record(epoch: int, step: int, result: StepResult, interval: _Interval, lr: float,
                 val_accuracy: Optional[float], wall_clock: float) -> MetricsRecord:
    parts = result.student.as_floats()
    record = MetricsRecord(
        epoch=epoch, step=step, total=parts['total'], task=parts['task'],
        load=parts['load'], distill=parts['distill'], zloss=parts['zloss'],
        train_accuracy=interval.correct / max(interval.count, 1),
        val_accuracy=val_accuracy,
        utilization={str(layer): counts.tolist() for layer, counts in sorted(interval.utilization.items())},
        lr=lr, wall_clock_seconds=wall_clock,
    )
    if result.teacher is not None:
        teacher_parts = result.teacher.as_floats()
        record.teacher_total = teacher_parts['total']
        record.teacher_load = teacher_parts['load']
        record.entropy = teacher_parts['entropy']
    return record


def _val_accuracy(engine: TrainingEngine, val: TokenDataset) -> float:
    teacher = engine.teacher if engine.eval_routing_mode == "teacher" else None
    collection = collect_routing(engine.model, val.tokens, engine.eval_routing_mode, teacher)
    return float((collection.logits.argmax(axis=-1) == val.labels).mean()) if len(val) else 0.0


def _probe_snapshot(engine: TrainingEngine, probe_tokens: np.ndarray) -> np.ndarray:
    teacher = engine.teacher if engine.eval_routing_mode == "teacher" else None
    collection = collect_routing(engine.model, probe_tokens, engine.eval_routing_mode, teacher)
    return np.stack([collection.top1[layer] for layer in engine.config.model.moe_layers])


@log_duration("training_run")
def run_training(config: TrainConfig, dataset: DatasetSplits, out_dir,
                 teacher: Optional[TeacherBundle] = None) -> TrainingResult:
    """
    Train one variant end to end.

    Writes into out_dir: metrics.jsonl, trace.bin (MoE variants), checkpoint/ (final),
    checkpoints/epoch_XXX/ every checkpoint_every_epochs, summary.json.
    """
    config.validate()
    _check_dataset(config, dataset)
    if warmup_epochs_used(config) != config.warmup_epochs:
        logger.warning("warmup_capped", warmup_epochs=config.warmup_epochs, used=warmup_epochs_used(config),
                       epochs=config.epochs)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    model = TransformerModel.create(config.model, config.seed)
    if config.init_from:
        warm_start(model, config.init_from)
    if config.needs_teacher and teacher is None:
        teacher = load_teacher_bundle(config.teacher_checkpoint, config.model, config.seed,
                                      config.teacher_feature_layer)
    if teacher is not None and config.teacher_router_schedule == "pretrained" and not teacher.router_frozen:
        pretrain_teacher_router(teacher, dataset.train, config)
    backbone_checksum = teacher.backbone_checksum() if teacher is not None else None

    engine = TrainingEngine(config, model, teacher)
    probe = probe_indices(config, dataset.val)
    probe_tokens = dataset.val.tokens[probe]
    trace_path = None
    writer = None
    if not config.model.is_dense:
        trace_path = out_dir / "trace.bin"
        writer = RoutingTraceWriter(trace_path, config.model.moe_layers,
                                    len(probe) * config.model.tokens_per_sample, config.model.num_experts)
    metrics_path = out_dir / "metrics.jsonl"
    stream = MetricsStream(metrics_path)

    steps_per_epoch = int(math.ceil(len(dataset.train) / config.batch_size))
    logger.info("training_started", variant=config.variant, seed=config.seed, epochs=config.epochs,
                steps_per_epoch=steps_per_epoch, trainable_params=engine.trainable_parameter_count())

    records: List[MetricsRecord] = []
    run_start = time.perf_counter()
    epoch_seconds = []
    global_step = 0
    val_accuracy = 0.0
    for epoch in range(1, config.epochs + 1):
        epoch_start = time.perf_counter()
        interval = _Interval()
        batches = prefetch_batches(batch_iterator(dataset.train, config.batch_size, config.seed, True, epoch),
                                   config.prefetch_depth)
        for index, batch in enumerate(batches):
            lr = lr_at(global_step, config, steps_per_epoch)
            result = engine.train_step(batch, epoch, lr)
            global_step += 1
            interval.add(result)
            last = index == steps_per_epoch - 1
            if global_step % config.log_every_steps == 0 or last:
                val = _val_accuracy(engine, dataset.val) if last else None
                if val is not None:
                    val_accuracy = val
                record = _make_record(epoch, global_step, result, interval, lr, val,
                                      time.perf_counter() - run_start)
                stream.append(record)
                records.append(record)
                logger.info("train_metrics", epoch=epoch, step=global_step, total=record.total,
                            train_accuracy=record.train_accuracy, val_accuracy=val, lr=lr)
                interval = _Interval()
        epoch_seconds.append(time.perf_counter() - epoch_start)

        if writer is not None and epoch % config.trace_every_epochs == 0:
            writer.append(epoch, _probe_snapshot(engine, probe_tokens))
        if epoch % config.checkpoint_every_epochs == 0 and epoch != config.epochs:
            save_checkpoint(student_state(config, model, teacher, epoch, metrics="../../metrics.jsonl"),
                            out_dir / "checkpoints" / f"epoch_{epoch:03d}")

    if teacher is not None and teacher.backbone_checksum() != backbone_checksum:
        raise TeacherError("teacher backbone changed during training")

    checkpoint_path = save_checkpoint(student_state(config, model, teacher, config.epochs), out_dir / "checkpoint")
    result = TrainingResult(
        out_dir=out_dir, checkpoint=checkpoint_path, metrics=metrics_path, trace=trace_path,
        val_accuracy=val_accuracy, records=records,
        seconds_per_epoch=float(np.mean(epoch_seconds)) if epoch_seconds else 0.0,
        trainable_params=engine.trainable_parameter_count(), probe_indices=probe,
    )
    summary = {
        'variant': config.variant,
        'seed': config.seed,
        'val_accuracy': val_accuracy,
        'seconds_per_epoch': result.seconds_per_epoch,
        'trainable_params': result.trainable_params,
        'moe_layers': list(config.model.moe_layers),
        'probe_size': int(len(probe)),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding='utf-8')
    logger.info("training_finished", **summary)
    return result


def train_upper_bound(config: TrainConfig, dataset: DatasetSplits, teacher: TeacherBundle,
                      out_dir) -> Tuple[TrainingResult, Dict[str, EvalReport]]:
    """
    Train with the teacher routers performing selection, then evaluate the same
    parameters under teacher-routed and student-routed inference.
    """
    if config.variant not in UPPER_BOUND_VARIANTS:
        raise ConfigError(f"train_upper_bound needs an upper-bound variant, got '{config.variant}'")
    result = run_training(config, dataset, out_dir, teacher=teacher)
    reports = {}
    for mode in ROUTING_MODES:
        reports[mode] = evaluate(result_model(result), dataset.val, mode, teacher,
                                 trainable_params=result.trainable_params)
        path = Path(out_dir) / f"eval_{mode}.json"
        path.write_text(json.dumps(reports[mode].to_dict(), sort_keys=True, indent=2) + "\n", encoding='utf-8')
    logger.info("upper_bound_evaluated", teacher_routed=reports["teacher"].accuracy,
                student_routed=reports["student"].accuracy)
    return result, reports


def result_model(result: TrainingResult) -> TransformerModel:
    """Student model of a finished run, reloaded from its final checkpoint."""
    return load_student(result.checkpoint).model
