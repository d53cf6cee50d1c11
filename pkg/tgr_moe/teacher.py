"""
Teacher guidance: a frozen dense backbone plus one trainable linear router per
student MoE layer, producing the routing distributions the student distills from.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import structlog

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import TransformerModel, block_prefix, forward_dense, predict_logits
from .checkpoint import CheckpointState, load_checkpoint, save_checkpoint
from .datasets import DatasetSplits, TokenDataset, batch_iterator
from .errors import NonFiniteError, TeacherError
from .losses import LossBreakdown, compose_teacher_loss, task_loss
from .models import LossWeights, ModelConfig, OptimizerConfig, TeacherProvenance, TrainConfig
from .moe import RouterOutput, routing_from_logits
from .optim import AdamW, lr_at, named_gradients
from .utils import log_duration, param_checksum

logger = structlog.get_logger()

TEACHER_ROUTER_PREFIX = "teacher_router."


def router_param_name(layer: int, key: str) -> str:
    return f"{TEACHER_ROUTER_PREFIX}{block_prefix(layer)}.{key}"


@dataclass
class TeacherBundle:
    """Frozen dense backbone, per-layer teacher routers and the student->teacher layer map."""
    backbone: TransformerModel
    routers: Dict[int, Dict[str, Tensor]]
    layer_map: Dict[int, int]
    num_experts: int
    provenance: Optional[TeacherProvenance] = None
    router_frozen: bool = False
    source: Optional[str] = None

    @property
    def layers(self):
        return sorted(self.routers)

    def router_params(self) -> Dict[str, Tensor]:
        return {router_param_name(layer, key): tensor
                for layer, router in self.routers.items() for key, tensor in router.items()}

    def backbone_checksum(self) -> str:
        return param_checksum(self.backbone.params)

    def freeze_routers(self) -> None:
        self.router_frozen = True
        for tensor in self.router_params().values():
            tensor.requires_grad = False

    def load_router_params(self, params: Dict[str, np.ndarray]) -> None:
        """Overwrite router values from `teacher_router.*` arrays (e.g. a student checkpoint)."""
        for name, tensor in self.router_params().items():
            if name not in params:
                raise TeacherError(f"checkpoint lacks teacher router tensor {name}")
            if params[name].shape != tensor.shape:
                raise TeacherError(f"{name} has shape {params[name].shape}, expected {tensor.shape}")
            tensor.data = np.array(params[name], dtype=np.float64)


def freeze(model: TransformerModel) -> TransformerModel:
    for tensor in model.params.values():
        tensor.requires_grad = False
    return model


def build_layer_map(student: ModelConfig, teacher: ModelConfig, feature_layer: str = "aligned") -> Dict[int, int]:
    """Student MoE layer -> teacher block whose features feed its router."""
    if feature_layer == "final":
        return {layer: teacher.depth for layer in student.moe_layers}
    layer_map = {layer: layer for layer in student.moe_layers}
    missing = [layer for layer in layer_map.values() if layer > teacher.depth]
    if missing:
        raise TeacherError(f"teacher has {teacher.depth} blocks; cannot align student layers {missing}")
    return layer_map


def build_teacher_bundle(backbone: TransformerModel, student: ModelConfig, seed: int,
                         feature_layer: str = "aligned",
                         provenance: Optional[TeacherProvenance] = None) -> TeacherBundle:
    """
    Attach one linear router D_teacher -> E per student MoE layer to a frozen backbone.
    Router weights start from N(0, 0.02^2) drawn from the (seed, 2) stream.
    """
    if not backbone.config.is_dense:
        raise TeacherError("teacher backbone must be dense")
    layer_map = build_layer_map(student, backbone.config, feature_layer)
    rng = np.random.default_rng([seed, 2])
    routers = {}
    for layer in sorted(layer_map):
        routers[layer] = {
            'weight': Tensor(rng.normal(0.0, 0.02, size=(backbone.config.hidden_dim, student.num_experts)),
                             requires_grad=True, name=router_param_name(layer, 'weight')),
            'bias': Tensor(np.zeros(student.num_experts), requires_grad=True, name=router_param_name(layer, 'bias')),
        }
    return TeacherBundle(backbone=freeze(backbone), routers=routers, layer_map=layer_map,
                         num_experts=student.num_experts, provenance=provenance)


def teacher_features(bundle: TeacherBundle, batch) -> Dict[int, Tensor]:
    """Frozen-backbone features per student MoE layer, flattened to [B*N x D_teacher]."""
    with ad.no_grad():
        record = forward_dense(bundle.backbone, batch, capture_layers=sorted(set(bundle.layer_map.values())))
    features = {}
    for layer, source in bundle.layer_map.items():
        if source not in record.layer_features:
            raise TeacherError(f"teacher forward did not expose block {source}")
        h = record.layer_features[source]
        b, n, d = h.shape
        features[layer] = ad.reshape(ad.stop_gradient(h), (b * n, d))
    return features


def teacher_logits(bundle: TeacherBundle, features: Dict[int, Tensor]) -> Dict[int, Tensor]:
    return {layer: ad.matmul(features[layer], router['weight']) + router['bias']
            for layer, router in bundle.routers.items()}


def teacher_route(bundle: TeacherBundle, batch=None, features: Optional[Dict[int, Tensor]] = None) -> Dict[int, Tensor]:
    """
    Teacher routing probabilities p_t per student MoE layer; no noise is injected.

    Either a raw batch or precomputed teacher_features must be given.
    """
    if features is None:
        if batch is None:
            raise TeacherError("teacher_route needs a batch or precomputed features")
        features = teacher_features(bundle, batch)
    return {layer: ad.softmax(z) for layer, z in teacher_logits(bundle, features).items()}


def teacher_router_outputs(bundle: TeacherBundle, features: Dict[int, Tensor], top_k: int) -> Dict[int, RouterOutput]:
    """Noise-free RouterOutputs from the teacher routers, used when the teacher performs selection."""
    return {layer: routing_from_logits(z, z, top_k, train_mode=False)
            for layer, z in teacher_logits(bundle, features).items()}


def apply_teacher_update(bundle: TeacherBundle, loss: LossBreakdown, optimizer: AdamW, lr: float,
                         grads: Optional[Dict[str, np.ndarray]] = None) -> bool:
    """
    One optimizer step on the teacher routers. Returns False when nothing was
    updated (frozen routers or an objective with no active term).
    """
    if bundle.router_frozen or not loss.total.requires_grad:
        return False
    if grads is None:
        grads = named_gradients(ad.backward(loss.total), bundle.router_params())
    optimizer.step(grads, lr)
    return True


def teacher_router_step(bundle: TeacherBundle, batch, weights: LossWeights, optimizer: AdamW,
                        lr: float) -> LossBreakdown:
    """Minimize the teacher objective on one batch; the backbone is never touched."""
    before = bundle.backbone_checksum()
    loss = compose_teacher_loss(teacher_route(bundle, batch), weights)
    if not np.isfinite(loss.total.item()):
        raise NonFiniteError("teacher router loss is not finite")
    apply_teacher_update(bundle, loss, optimizer, lr)
    if bundle.backbone_checksum() != before:
        raise TeacherError("teacher backbone changed during a router step")
    return loss


@log_duration("teacher_router_pretrained")
def pretrain_teacher_router(bundle: TeacherBundle, train: TokenDataset, config: TrainConfig) -> TeacherBundle:
    """
    Train the teacher routers alone on a fixed subset of the training set, then freeze them.
    """
    rng = np.random.default_rng([config.seed, 3])
    size = max(1, int(math.ceil(config.teacher_subset_fraction * len(train))))
    subset = train.subset(np.sort(rng.choice(len(train), size=size, replace=False)))
    optimizer = AdamW(bundle.router_params(), config.optimizer)
    steps_per_epoch = int(math.ceil(len(subset) / config.batch_size))
    schedule = TrainConfig(epochs=config.teacher_router_pretrain_epochs, base_lr=config.base_lr,
                           warmup_epochs=0, warmup_start_lr=config.warmup_start_lr)
    step = 0
    for epoch in range(1, config.teacher_router_pretrain_epochs + 1):
        for batch in batch_iterator(subset, config.batch_size, config.seed, shuffle=True, epoch=epoch):
            loss = teacher_router_step(bundle, batch.tokens, config.weights, optimizer,
                                       lr_at(step, schedule, steps_per_epoch))
            step += 1
        logger.info("teacher_router_epoch", epoch=epoch, teacher_total=loss.total.item())
    bundle.freeze_routers()
    return bundle


def accuracy(model: TransformerModel, dataset: TokenDataset) -> float:
    if not len(dataset):
        return 0.0
    predictions = predict_logits(model, dataset.tokens).argmax(axis=-1)
    return float((predictions == dataset.labels).mean())


@log_duration("teacher_pretrained")
def pretrain_teacher(config: ModelConfig, dataset: DatasetSplits, epochs: int, seed: int,
                     batch_size: int = 64, base_lr: float = 5e-4, warmup_epochs: int = 5,
                     optimizer: Optional[OptimizerConfig] = None):
    """
    Train a dense backbone with plain cross-entropy, then freeze it.

    Returns:
        (frozen TransformerModel, TeacherProvenance)

    Raises:
        TeacherError: config has MoE layers
        NonFiniteError: the loss diverged
    """
    if not config.is_dense:
        raise TeacherError("the teacher backbone must be dense (moe_layers = [])")
    schedule = TrainConfig(variant="dense", model=config, epochs=epochs, batch_size=batch_size, base_lr=base_lr,
                           warmup_epochs=warmup_epochs, seed=seed)
    model = TransformerModel.create(config, seed)
    opt = AdamW(model.params, optimizer or schedule.optimizer)
    steps_per_epoch = int(math.ceil(len(dataset.train) / batch_size))
    step = 0
    for epoch in range(1, epochs + 1):
        for batch in batch_iterator(dataset.train, batch_size, seed, shuffle=True, epoch=epoch):
            loss = task_loss(forward_dense(model, batch.tokens).logits, batch.labels)
            if not np.isfinite(loss.item()):
                raise NonFiniteError(f"teacher loss diverged at epoch {epoch}, step {step}")
            opt.step(named_gradients(ad.backward(loss), model.params), lr_at(step, schedule, steps_per_epoch))
            step += 1
        logger.info("teacher_epoch", epoch=epoch, task=loss.item())

    val_accuracy = accuracy(model, dataset.val)
    provenance = TeacherProvenance(seed=seed, epochs=epochs, val_accuracy=val_accuracy,
                                   checksum=param_checksum(model.params))
    logger.info("teacher_trained", val_accuracy=val_accuracy, checksum=provenance.checksum)
    return freeze(model), provenance


def save_teacher(model: TransformerModel, provenance: TeacherProvenance, path) -> Path:
    state = CheckpointState(params={name: t.data for name, t in model.params.items()},
                            config={'model': model.config.to_dict()}, kind="teacher", frozen=True,
                            provenance=provenance.to_dict())
    return save_checkpoint(state, path)


def load_teacher(path):
    """Load a frozen teacher checkpoint as (TransformerModel, TeacherProvenance)."""
    state = load_checkpoint(path)
    if state.kind != "teacher" or not state.frozen:
        raise TeacherError(f"{path} is not a frozen teacher checkpoint")
    config = ModelConfig.from_dict(state.config['model'])
    model = TransformerModel(config=config, params={
        name: Tensor(value, requires_grad=False, name=name) for name, value in state.params.items()})
    provenance = TeacherProvenance.from_dict(state.provenance) if state.provenance else None
    return model, provenance


def load_teacher_bundle(path, student: ModelConfig, seed: int, feature_layer: str = "aligned") -> TeacherBundle:
    model, provenance = load_teacher(path)
    bundle = build_teacher_bundle(model, student, seed, feature_layer, provenance)
    bundle.source = str(path)
    logger.info("teacher_loaded", path=str(path), layer_map=bundle.layer_map,
                val_accuracy=provenance.val_accuracy if provenance else None)
    return bundle
