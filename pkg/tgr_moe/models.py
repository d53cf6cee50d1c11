"""
Data models for the TGR-MoE lab.
Configuration objects mirror the JSON config files field-for-field.
"""

import json
from dataclasses import dataclass, field
from typing import Optional, List, Dict, Any

from dataclasses_json import dataclass_json, Undefined

from .errors import ConfigError

VARIANTS = (
    "dense", "vmoe", "vmoe_zloss", "tgr", "tgr_first_half",
    "distill_only", "upper_bound", "student_routed",
)
JOINT_VARIANTS = ("tgr", "tgr_first_half", "distill_only")
UPPER_BOUND_VARIANTS = ("upper_bound", "student_routed")
TEACHER_VARIANTS = JOINT_VARIANTS + UPPER_BOUND_VARIANTS

LABEL_RULES = ("majority-component", "component-pair-parity")


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class ModelConfig:
    """Transformer topology; MoE placement is given by 1-based block indices."""
    depth: int = 6
    hidden_dim: int = 64
    heads: int = 4
    ffn_dim: int = 128
    num_classes: int = 8
    tokens_per_sample: int = 16
    input_dim: int = 16
    moe_layers: List[int] = field(default_factory=lambda: [4, 5, 6])
    num_experts: int = 8
    top_k: int = 1
    noise_std: float = 1.0

    @property
    def is_dense(self) -> bool:
        return not self.moe_layers

    def validate(self) -> "ModelConfig":
        """Check invariants, raising ConfigError on the first violation."""
        for name in ('depth', 'hidden_dim', 'heads', 'ffn_dim', 'num_classes',
                     'tokens_per_sample', 'input_dim', 'num_experts'):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.hidden_dim % self.heads != 0:
            raise ConfigError(f"heads={self.heads} must divide hidden_dim={self.hidden_dim}")
        if list(self.moe_layers) != sorted(set(self.moe_layers)):
            raise ConfigError(f"moe_layers must be sorted and unique, got {self.moe_layers}")
        for layer in self.moe_layers:
            if not 1 <= layer <= self.depth:
                raise ConfigError(f"MoE layer {layer} outside 1..{self.depth}")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"top_k={self.top_k} must lie in [1, {self.num_experts}]")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        return self

    @classmethod
    def teacher_default(cls) -> "ModelConfig":
        """Wider dense backbone used as the frozen teacher."""
        return cls(hidden_dim=128, ffn_dim=256, moe_layers=[])


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class LossWeights:
    """Loss coefficients; z-loss is only applied by the vmoe_zloss variant."""
    lambda_load: float = 0.005
    lambda_distill: float = 5.0
    lambda_ent: float = 0.005
    lambda_zloss: float = 0.001

    def validate(self) -> "LossWeights":
        for name, value in self.to_dict().items():
            if value < 0:
                raise ConfigError(f"{name} must be >= 0, got {value}")
        return self


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class OptimizerConfig:
    """AdamW hyperparameters."""
    name: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class TrainConfig:
    """Complete description of one training run."""
    variant: str = "tgr"
    model: ModelConfig = field(default_factory=ModelConfig)
    teacher_checkpoint: Optional[str] = None
    weights: LossWeights = field(default_factory=LossWeights)
    epochs: int = 60
    batch_size: int = 64
    base_lr: float = 5e-4
    warmup_epochs: int = 5
    warmup_start_lr: float = 1e-6
    schedule: str = "cosine"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    probe_set_size: int = 512
    trace_every_epochs: int = 1
    checkpoint_every_epochs: int = 10
    log_every_steps: int = 20
    data_dir: Optional[str] = None
    init_from: Optional[str] = None
    teacher_feature_layer: str = "aligned"  # aligned | final
    teacher_router_schedule: str = "joint"  # joint | pretrained
    teacher_router_pretrain_epochs: int = 5
    teacher_subset_fraction: float = 1.0
    distill_on_noisy: bool = False
    student_load_term: bool = False
    prefetch_depth: int = 2

    @property
    def needs_teacher(self) -> bool:
        return self.variant in TEACHER_VARIANTS

    def validate(self) -> "TrainConfig":
        """Check variant-specific requirements and numeric ranges."""
        if self.variant not in VARIANTS:
            raise ConfigError(f"Unknown variant '{self.variant}'; expected one of {', '.join(VARIANTS)}")
        self.model.validate()
        self.weights.validate()
        if self.variant == "dense" and not self.model.is_dense:
            raise ConfigError("dense variant requires an empty moe_layers list")
        if self.variant != "dense" and self.model.is_dense:
            raise ConfigError(f"variant '{self.variant}' requires at least one MoE layer")
        if self.needs_teacher and not self.teacher_checkpoint:
            raise ConfigError(f"variant '{self.variant}' requires teacher_checkpoint")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("epochs and batch_size must be positive")
        if self.base_lr <= 0 or self.warmup_epochs < 0:
            raise ConfigError("base_lr must be positive and warmup_epochs non-negative")
        if self.schedule != "cosine":
            raise ConfigError(f"Unsupported schedule '{self.schedule}'")
        if self.optimizer.name != "adamw":
            raise ConfigError(f"Unsupported optimizer '{self.optimizer.name}'")
        if self.trace_every_epochs <= 0 or self.log_every_steps <= 0 or self.checkpoint_every_epochs <= 0:
            raise ConfigError("trace/log/checkpoint intervals must be positive")
        if self.teacher_feature_layer not in ("aligned", "final"):
            raise ConfigError(f"teacher_feature_layer must be aligned or final, got {self.teacher_feature_layer}")
        if self.teacher_router_schedule not in ("joint", "pretrained"):
            raise ConfigError(f"teacher_router_schedule must be joint or pretrained")
        if not 0.0 < self.teacher_subset_fraction <= 1.0:
            raise ConfigError("teacher_subset_fraction must lie in (0, 1]")
        return self

    def to_json_text(self) -> str:
        """Canonical JSON echo (sorted keys) used in run.json and checkpoint manifests."""
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class SyntheticSpec:
    """Cluster-token dataset description."""
    num_classes: int = 8
    num_components: int = 16
    token_dim: int = 16
    tokens_per_sample: int = 16
    noise_sigma: float = 0.35
    samples_train: int = 8000
    samples_val: int = 2000
    seed: int = 0
    label_rule: str = "majority-component"
    min_angle_deg: float = 30.0

    def validate(self) -> "SyntheticSpec":
        if self.num_classes <= 0 or self.token_dim <= 0 or self.tokens_per_sample <= 0:
            raise ConfigError("num_classes, token_dim and tokens_per_sample must be positive")
        if self.num_components < self.num_classes:
            raise ConfigError(f"num_components ({self.num_components}) must be >= num_classes ({self.num_classes})")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.label_rule not in LABEL_RULES:
            raise ConfigError(f"Unknown label_rule '{self.label_rule}'")
        if self.samples_train <= 0 or self.samples_val <= 0:
            raise ConfigError("sample counts must be positive")
        return self

    @classmethod
    def transfer_default(cls) -> "SyntheticSpec":
        """Second-phase task with its own prototypes and class count."""
        return cls(num_classes=6, num_components=12, seed=1000, samples_train=4000, samples_val=1000)


@dataclass_json
@dataclass
class MetricsRecord:
    """One line of metrics.jsonl. Per-layer maps are keyed by the MoE block index."""
    epoch: int = 0
    step: int = 0
    total: float = 0.0
    task: float = 0.0
    load: Dict[str, float] = field(default_factory=dict)
    entropy: Dict[str, float] = field(default_factory=dict)
    distill: Dict[str, float] = field(default_factory=dict)
    zloss: Dict[str, float] = field(default_factory=dict)
    teacher_total: Optional[float] = None
    teacher_load: Dict[str, float] = field(default_factory=dict)
    train_accuracy: float = 0.0
    val_accuracy: Optional[float] = None
    utilization: Dict[str, List[int]] = field(default_factory=dict)
    lr: float = 0.0
    wall_clock_seconds: float = 0.0


@dataclass_json
@dataclass
class TeacherProvenance:
    """Where a frozen teacher came from."""
    seed: int = 0
    epochs: int = 0
    val_accuracy: float = 0.0
    checksum: str = ""


@dataclass_json
@dataclass
class LayerRoutingSummary:
    """Per-layer routing statistics reported by evaluation."""
    layer: int = 0
    counts: List[int] = field(default_factory=list)
    importance: List[float] = field(default_factory=list)
    normalized_entropy: float = 0.0


@dataclass_json
@dataclass
class EvalReport:
    """Evaluation result for one checkpoint and routing mode."""
    accuracy: float = 0.0
    routing_mode: str = "student"
    num_samples: int = 0
    layers: List[LayerRoutingSummary] = field(default_factory=list)
    trainable_params: int = 0

    def to_summary(self) -> Dict[str, Any]:
        """Compact dict for logs and CSV rows."""
        return {
            'accuracy': self.accuracy,
            'routing_mode': self.routing_mode,
            'num_samples': self.num_samples,
            'trainable_params': self.trainable_params,
            'normalized_entropy': {str(s.layer): s.normalized_entropy for s in self.layers},
        }
