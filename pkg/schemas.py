from pydantic import BaseModel, Field, model_validator
from typing import List, Optional, Dict, Any, Literal, Tuple
import math

Variant = Literal["early_concat", "xad", "xaed"]
Strategy = Literal["independent", "consistent"]
Task = Literal["multilabel", "single"]
ModalityCondition = Literal["s1", "s2", "s1s2"]


class ModelConfig(BaseModel):
    """
    Architecture hyperparameters. Defaults are the desk configuration:
    32x32 tiles, 8x8 patches (T=16), a 4-block encoder of width 64 and two
    2-block decoders of width 32.
    """
    H: int = Field(default=32, ge=1)
    W: int = Field(default=32, ge=1)
    C_1: int = Field(default=2, ge=1)
    C_2: int = Field(default=4, ge=1)
    P: int = Field(default=8, ge=1)
    N: int = Field(default=4, ge=1)
    d: int = Field(default=64, ge=4)
    d_dec: int = Field(default=32, ge=4)
    N_dec: int = Field(default=2, ge=1)
    h: int = Field(default=4, ge=1)
    h_dec: int = Field(default=4, ge=1)
    mlp_ratio: int = Field(default=4, ge=1)
    r: float = Field(default=0.75, ge=0.0, lt=1.0)
    strategy: Strategy = "independent"
    variant: Variant = "xaed"
    xattn_shared_weights: bool = True
    xattn_decoder_kv: Literal["full", "visible"] = "full"
    norm_pix_loss: bool = False
    ln_eps: float = Field(default=1e-6, gt=0.0)

    @model_validator(mode="after")
    def check_consistency(self) -> "ModelConfig":
        if self.H % self.P or self.W % self.P:
            raise ValueError(f"H={self.H} and W={self.W} must be divisible by P={self.P}")
        if self.d % self.h:
            raise ValueError(f"d={self.d} must be divisible by h={self.h}")
        if self.d_dec % self.h_dec:
            raise ValueError(f"d_dec={self.d_dec} must be divisible by h_dec={self.h_dec}")
        if self.d % 4 or self.d_dec % 4:
            raise ValueError("d and d_dec must be divisible by 4 for the 2-D sine-cosine embedding")
        n_masked = math.floor(self.r * self.num_patches)
        if not 0 < n_masked < self.num_patches:
            raise ValueError(
                f"mask ratio r={self.r} gives {n_masked} masked of {self.num_patches} patches; "
                "need at least one masked and one visible"
            )
        return self

    @property
    def grid(self) -> Tuple[int, int]:
        return self.H // self.P, self.W // self.P

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def num_masked(self) -> int:
        return math.floor(self.r * self.num_patches)

    def patch_dim(self, modality: int) -> int:
        channels = {1: self.C_1, 2: self.C_2, 0: self.C_1 + self.C_2}[modality]
        return self.P * self.P * channels


class DataConfig(BaseModel):
    """Synthetic scene generator settings; image extents come from ModelConfig."""
    n: int = Field(default=2048, ge=1)
    K: int = Field(default=6, ge=2)
    n_blobs: int = Field(default=5, ge=1)
    noise_sigma: float = Field(default=0.25, ge=0.0)
    looks: float = Field(default=4.0, ge=1.0)


class OptimizerConfig(BaseModel):
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.95, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)
    weight_decay: float = Field(default=0.05, ge=0.0)
    exclude_1d_from_decay: bool = True


class TrainConfig(BaseModel):
    lr: float = Field(default=1.5625e-4, gt=0.0)
    steps: int = Field(default=300, ge=1)
    batch_size: int = Field(default=64, ge=1)
    warmup_fraction: float = Field(default=0.1, ge=0.0, le=1.0)
    checkpoint_every: int = Field(default=100, ge=0)
    log_every: int = Field(default=10, ge=1)
    smoothing_window: int = Field(default=20, ge=1)


class Schedule(BaseModel):
    """Warmup-then-cosine schedule, expressed in (possibly fractional) epochs."""
    base_lr: float = Field(gt=0.0)
    warmup_epochs: float = Field(ge=0.0)
    total_epochs: float = Field(gt=0.0)
    steps_per_epoch: int = Field(ge=1)

    @model_validator(mode="after")
    def check_warmup(self) -> "Schedule":
        if self.warmup_epochs > self.total_epochs:
            raise ValueError("warmup_epochs must not exceed total_epochs")
        return self

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_epochs * self.steps_per_epoch))

    @property
    def total_steps(self) -> int:
        return int(round(self.total_epochs * self.steps_per_epoch))

    @classmethod
    def from_steps(cls, base_lr: float, total_steps: int, steps_per_epoch: int, warmup_fraction: float) -> "Schedule":
        total_epochs = total_steps / steps_per_epoch
        return cls(
            base_lr=base_lr,
            warmup_epochs=warmup_fraction * total_epochs,
            total_epochs=total_epochs,
            steps_per_epoch=steps_per_epoch,
        )


class EvalConfig(BaseModel):
    probe_epochs: int = Field(default=20, ge=1)
    probe_batch_size: int = Field(default=128, ge=1)
    probe_lr: float = Field(default=1e-2, gt=0.0)
    single_epochs: int = Field(default=10, ge=1)
    single_batch_size: int = Field(default=256, ge=1)
    label_smoothing: float = Field(default=0.1, ge=0.0, lt=1.0)
    finetune_epochs: int = Field(default=10, ge=1)
    finetune_batch_size: int = Field(default=32, ge=1)
    finetune_lr: float = Field(default=5e-4, gt=0.0)
    label_fraction: float = Field(default=1.0, gt=0.0, le=1.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)


class RunConfig(BaseModel):
    """Everything needed to replay a run; serialized into every output directory."""
    model: ModelConfig = Field(default_factory=ModelConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    optim: OptimizerConfig = Field(default_factory=OptimizerConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    seed: int = 0
    output_dir: str = ""

    def to_kv(self) -> str:
        """Flat `section.field=value` text, one line per field, fixed order."""
        lines = []
        for section in ("model", "data", "optim", "train", "eval"):
            values = getattr(self, section).model_dump()
            for key, value in values.items():
                lines.append(f"{section}.{key}={_format_value(value)}")
        lines.append(f"seed={self.seed}")
        lines.append(f"output_dir={self.output_dir}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_flat(cls, flat: Dict[str, str]) -> "RunConfig":
        nested: Dict[str, Any] = {}
        for key, value in flat.items():
            if "." in key:
                section, field = key.split(".", 1)
                nested.setdefault(section, {})[field] = value
            else:
                nested[key] = value
        return cls.model_validate(nested)


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class MaskPlan(BaseModel):
    """Visible / masked patch indices per modality, each list sorted ascending."""
    visible_1: List[int]
    masked_1: List[int]
    visible_2: List[int]
    masked_2: List[int]
    ratio: float
    strategy: Strategy

    @model_validator(mode="after")
    def check_partition(self) -> "MaskPlan":
        for visible, masked in ((self.visible_1, self.masked_1), (self.visible_2, self.masked_2)):
            if set(visible) & set(masked):
                raise ValueError("visible and masked index sets overlap")
            if sorted(visible + masked) != list(range(len(visible) + len(masked))):
                raise ValueError("visible and masked indices must partition [0, T)")
        if len(self.visible_1) + len(self.masked_1) != len(self.visible_2) + len(self.masked_2):
            raise ValueError("both modalities must cover the same patch grid")
        return self

    @property
    def num_patches(self) -> int:
        return len(self.visible_1) + len(self.masked_1)

    def visible(self, modality: int) -> List[int]:
        return self.visible_1 if modality == 1 else self.visible_2

    def masked(self, modality: int) -> List[int]:
        return self.masked_1 if modality == 1 else self.masked_2

    @classmethod
    def unmasked(cls, num_patches: int) -> "MaskPlan":
        everything = list(range(num_patches))
        return cls(visible_1=everything, masked_1=[], visible_2=everything, masked_2=[],
                   ratio=0.0, strategy="consistent")


METRICS_CSV_COLUMNS = [
    "label", "task", "modality", "n", "mAP", "top1", "top3", "precision", "recall", "f1",
]


class MetricsReport(BaseModel):
    """
    Downstream evaluation summary. Ranking metrics are filled for the
    multilabel task, accuracy / weighted P-R-F1 for the single-label task.
    """
    task: Task
    modality: ModalityCondition = "s1s2"
    label: str = ""
    n: int
    mAP: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    per_class_ap: List[Optional[float]] = []
    top1: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    top3: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    precision: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    recall: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    f1: Optional[float] = Field(default=None, ge=0.0, le=1.0)

    def to_text(self) -> str:
        lines = [
            f"label={self.label}",
            f"task={self.task}",
            f"modality={self.modality}",
            f"n={self.n}",
        ]
        for key in ("mAP", "top1", "top3", "precision", "recall", "f1"):
            value = getattr(self, key)
            lines.append(f"{key}={'' if value is None else repr(value)}")
        aps = ",".join("" if ap is None else repr(ap) for ap in self.per_class_ap)
        lines.append(f"per_class_ap={aps}")
        return "\n".join(lines) + "\n"

    def to_row(self) -> Dict[str, Any]:
        return {column: getattr(self, column) for column in METRICS_CSV_COLUMNS}


class DatasetManifest(BaseModel):
    path: str
    n: int
    seed: int
    H: int
    W: int
    C_1: int
    C_2: int
    K: int
    n_blobs: int
    noise_sigma: float
    looks: float
    checksum: str

    def to_text(self) -> str:
        values = self.model_dump()
        checksum = values.pop("checksum")
        lines = [f"{key}={_format_value(value)}" for key, value in values.items()]
        lines.append(f"checksum={checksum}")
        return "\n".join(lines) + "\n"


class LossRecord(BaseModel):
    step: int
    lr: float
    loss: float
