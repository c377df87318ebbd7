from enum import Enum
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class ScheduleDirection(str, Enum):
    AS_WRITTEN_DECAY = "as_written_decay"
    INVERTED_RAMP = "inverted_ramp"


class SparsityScheduleConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    initial_rate: float = Field(0.005, gt=0)
    total_epochs: int = Field(100, ge=1)
    direction: ScheduleDirection = ScheduleDirection.AS_WRITTEN_DECAY


class AlphaSchedule(str, Enum):
    CONSTANT = "constant"
    EXPONENTIAL_DECAY = "exponential_decay"
    TIME_BASED_DECAY = "time_based_decay"
    COSINE_ANNEALING = "cosine_annealing"
    INVERSE_SIGMOID_DECAY = "inverse_sigmoid_decay"


class Alignment(str, Enum):
    INDEX_MAP = "index_map"
    LEARNED_PROJECTION = "learned_projection"


class TapPoint(BaseModel):
    model_config = ConfigDict(extra="forbid")

    teacher: str
    student: str


class ScheduleParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    k: float = Field(5.0, gt=0)
    # None means 0.1 * alpha0
    alpha_min: Optional[float] = Field(None, ge=0)


class DistillationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    tap_points: list[TapPoint] = Field(default_factory=list)
    tap_preset: Optional[Literal["C1", "C2", "C3"]] = None
    temperature: float = Field(6.0, gt=0)
    alpha0: float = Field(0.5, ge=0)
    alpha_schedule: AlphaSchedule = AlphaSchedule.CONSTANT
    schedule_params: ScheduleParams = Field(default_factory=ScheduleParams)
    alignment: Alignment = Alignment.INDEX_MAP

    @property
    def alpha_min(self) -> float:
        if self.schedule_params.alpha_min is None:
            return 0.1 * self.alpha0
        return self.schedule_params.alpha_min


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(0.01, gt=0)
    momentum: float = Field(0.937, ge=0)
    weight_decay: float = Field(0.0005, ge=0)
    batch_size: int = Field(8, gt=0)
    epochs: int = Field(100, ge=0)
    image_size: int = Field(32, gt=0)
    seed: int = 0
    sparsity: Optional[SparsityScheduleConfig] = None
    distill: Optional[DistillationConfig] = None


class TaskKind(str, Enum):
    CLASSIFICATION = "multiclass_classification"
    HEATMAP = "dense_heatmap_detection"


class ToyTaskSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: TaskKind = TaskKind.HEATMAP
    image_size: int = Field(32, ge=8)
    num_classes: int = Field(3, ge=2)
    samples_per_split: tuple[int, int] = (2000, 500)
    seed: int = 0

    @field_validator("image_size")
    @classmethod
    def _divisible_by_output_stride(cls, v: int) -> int:
        if v % 4:
            raise ValueError("image_size must be a multiple of 4 (heatmap stride)")
        return v


class Rounding(str, Enum):
    NONE = "none"
    MULTIPLE_OF_8 = "multiple_of_8"


class PruningSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ratio: float = Field(0.5, ge=0, lt=1)
    floor: int = Field(2, ge=1)
    rounding: Rounding = Rounding.NONE


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    threads: int = Field(1, ge=1)
    output_dir: Optional[str] = None
    graph: str = "toy_detector"
    teacher_graph: Optional[str] = None
    task: ToyTaskSpec = Field(default_factory=ToyTaskSpec)
    train: TrainConfig = Field(default_factory=lambda: TrainConfig(epochs=30))
    finetune: TrainConfig = Field(default_factory=lambda: TrainConfig(epochs=30))
    sparsity: SparsityScheduleConfig = Field(default_factory=lambda: SparsityScheduleConfig(total_epochs=30))
    pruning: PruningSettings = Field(default_factory=PruningSettings)
    distill: DistillationConfig = Field(default_factory=lambda: DistillationConfig(tap_preset="C1"))
    sparse_from_baseline: bool = True
    distill_ordering: Literal["joint", "finetune_then_distill"] = "joint"

    @model_validator(mode="after")
    def _sync_image_size(self) -> "RunConfig":
        for stage in (self.train, self.finetune):
            if stage.image_size != self.task.image_size:
                stage.image_size = self.task.image_size
        return self
