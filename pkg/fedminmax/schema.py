"""Experiment and algorithm configuration models.

Every section rejects unknown keys so that typos in a config file fail
validation instead of silently falling back to a default.
"""

from enum import Enum
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from fedminmax.data import CsvSchema, PartitionPlan, PartitionSetting, SyntheticSpec
from fedminmax.model import Activation, LossKind

SCHEMA_VERSION = 1


class Algorithm(str, Enum):
    FEDMINMAX = "fedminmax"
    CENTRALIZED_MINMAX = "centralized_minmax"
    LOCAL_FEDMINMAX = "local_fedminmax"
    AFL = "afl"
    FEDAVG = "fedavg"

    @property
    def is_minimax(self) -> bool:
        return self is not Algorithm.FEDAVG


class OutputMode(str, Enum):
    ITERATE_AVERAGE = "iterate_average"
    FINAL_ITERATE = "final_iterate"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", use_enum_values=False)


# ---------------------------------------------------------------------------
# Algorithm
# ---------------------------------------------------------------------------


class AlgorithmConfig(_Section):
    name: Algorithm = Field(Algorithm.FEDMINMAX, description="Training procedure to run.")
    rounds: int = Field(2000, gt=0, description="Communication rounds T.")
    lr_theta: float = Field(0.1, gt=0, description="Learner (model) learning rate.")
    lr_adversary: Optional[float] = Field(
        0.1,
        ge=0,
        description="Adversary learning rate (mu, or lambda for AFL). Required for minimax algorithms.",
    )
    epsilon: float = Field(0.0, ge=0, description="Entry floor of the adversary simplex.")
    loss: LossKind = Field(LossKind.BRIER, description="Training and evaluation loss.")
    output_mode: Optional[OutputMode] = Field(
        None,
        description="Returned model. Defaults to the iterate average for minimax algorithms "
        "and the final iterate for FedAvg.",
    )
    local_epochs: int = Field(15, gt=0, description="FedAvg local epochs E.")
    batch_size: int = Field(100, gt=0, description="FedAvg minibatch size.")
    seed: int = Field(0, description="Seed for initialization and FedAvg shuffling.")
    workers: int = Field(1, ge=1, description="Client computations run concurrently within a round.")
    record_params: bool = Field(
        True, description="Keep every round's parameters in the trace (needed by compare)."
    )

    @model_validator(mode="after")
    def check_adversary_rate(self):
        if self.name.is_minimax and self.lr_adversary is None:
            raise ValueError(f"lr_adversary is required for {self.name.value}")
        return self

    @property
    def resolved_output_mode(self) -> OutputMode:
        if self.output_mode is not None:
            return self.output_mode
        return OutputMode.FINAL_ITERATE if self.name is Algorithm.FEDAVG else OutputMode.ITERATE_AVERAGE


# ---------------------------------------------------------------------------
# Experiment sections
# ---------------------------------------------------------------------------


class SyntheticSection(_Section):
    u_low: list[float] = Field([0.3, 0.1], min_length=1, description="P(Y=1 | A=a, x <= 0) per group.")
    u_high: list[float] = Field([0.6, 0.9], min_length=1, description="P(Y=1 | A=a, x > 0) per group.")
    n_samples: int = Field(120_000, gt=0, description="Samples drawn before the train/test split.")
    seed: Optional[int] = Field(None, description="Fixed generator seed; defaults to the run seed.")

    @model_validator(mode="after")
    def check_groups(self):
        if len(self.u_low) != len(self.u_high):
            raise ValueError("u_low and u_high need the same number of groups")
        if any(not 0.0 <= u <= 1.0 for u in [*self.u_low, *self.u_high]):
            raise ValueError("u values must lie in [0, 1]")
        return self

    def spec(self, run_seed: int) -> SyntheticSpec:
        seed = self.seed if self.seed is not None else run_seed
        return SyntheticSpec(tuple(self.u_low), tuple(self.u_high), self.n_samples, seed)


class CsvSection(_Section):
    path: Path = Field(..., description="UTF-8 CSV file with a header row.")
    features: list[str] = Field(..., min_length=1)
    target: str
    group: str
    categorical: list[str] = Field(default_factory=list, description="Features to one-hot encode.")
    standardize: bool = True
    target_classes: Optional[list[str]] = None
    group_values: Optional[list[str]] = None

    @model_validator(mode="after")
    def check_categorical(self):
        unknown = sorted(set(self.categorical) - set(self.features))
        if unknown:
            raise ValueError(f"categorical columns {unknown} are not listed in features")
        return self

    def to_schema(self) -> CsvSchema:
        return CsvSchema(
            features=tuple(self.features),
            target=self.target,
            group=self.group,
            categorical=tuple(self.categorical),
            standardize=self.standardize,
            target_classes=tuple(self.target_classes) if self.target_classes else None,
            group_values=tuple(self.group_values) if self.group_values else None,
        )


class DatasetSection(_Section):
    kind: Literal["synthetic", "csv"] = "synthetic"
    synthetic: SyntheticSection = Field(default_factory=SyntheticSection)
    csv: Optional[CsvSection] = None

    @model_validator(mode="after")
    def check_csv_present(self):
        if self.kind == "csv" and self.csv is None:
            raise ValueError("kind = 'csv' needs a [dataset.csv] table")
        return self


class PartitionSection(_Section):
    setting: PartitionSetting = PartitionSetting.ESG
    num_clients: int = Field(40, gt=0)
    seed: Optional[int] = Field(None, description="Fixed partition seed; defaults to the run seed.")
    psg_group_split: Optional[list[list[int]]] = Field(
        None, description="Groups held by the first and second half of the clients (PSG only)."
    )
    dirichlet_alpha: float = Field(5.0, gt=0)
    min_cell_size: int = Field(10, ge=0)

    @field_validator("setting", mode="before")
    @classmethod
    def normalize_setting(cls, value):
        return value.upper() if isinstance(value, str) else value

    def plan(self, run_seed: int) -> PartitionPlan:
        split = None
        if self.psg_group_split is not None:
            split = tuple(tuple(half) for half in self.psg_group_split)
        return PartitionPlan(
            setting=self.setting,
            num_clients=self.num_clients,
            seed=self.seed if self.seed is not None else run_seed,
            psg_group_split=split,
            dirichlet_alpha=self.dirichlet_alpha,
            min_cell_size=self.min_cell_size,
        )


class ModelSection(_Section):
    hidden_layers: list[int] = Field([32, 32], description="Hidden layer widths; empty for logistic regression.")
    activation: Activation = Activation.RELU

    @field_validator("hidden_layers")
    @classmethod
    def check_widths(cls, value):
        if any(width <= 0 for width in value):
            raise ValueError("hidden layer widths must be positive")
        return value


class EvaluationSection(_Section):
    test_fraction: float = Field(0.2, gt=0, lt=1)
    seeds: list[int] = Field([0, 1, 2], min_length=1, description="One run per seed; mean and std are reported.")


class CompareSection(_Section):
    lr_theta: Optional[float] = Field(None, gt=0, description="Centralized learner rate; must match the algorithm's.")
    lr_adversary: Optional[float] = Field(None, ge=0, description="Centralized adversary rate; must match the algorithm's.")


class ExperimentConfig(_Section):
    version: Literal[1] = SCHEMA_VERSION
    output_dir: Optional[Path] = None
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    partition: PartitionSection = Field(default_factory=PartitionSection)
    model: ModelSection = Field(default_factory=ModelSection)
    algorithm: AlgorithmConfig = Field(default_factory=AlgorithmConfig)
    evaluation: EvaluationSection = Field(default_factory=EvaluationSection)
    compare: CompareSection = Field(default_factory=CompareSection)

    @model_validator(mode="after")
    def check_identical_rates(self):
        # federated and centralized runs only coincide under identical rates
        if self.compare.lr_theta is not None and self.compare.lr_theta != self.algorithm.lr_theta:
            raise ValueError("compare.lr_theta must equal algorithm.lr_theta")
        if (
            self.compare.lr_adversary is not None
            and self.compare.lr_adversary != self.algorithm.lr_adversary
        ):
            raise ValueError("compare.lr_adversary must equal algorithm.lr_adversary")
        return self
