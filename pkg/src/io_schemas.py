from __future__ import annotations

from typing import Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

SEARCHED_PARAMETERS = ("num_convs", "num_hidden_layers", "hidden_units", "dropout_p")

Subset = Literal["full", "reduced", "low", "high", "low-vs-high"]
Part = Literal["mouth", "face"]
SelectOn = Literal["test", "validation", "accuracy"]


class NetworkConfig(BaseModel):
    """The four searched hyperparameters plus the fixed architectural constants."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    num_convs: int = Field(default=1, ge=0, le=3, description="Convolution-pooling pairs")
    num_hidden_layers: int = Field(default=1, ge=1)
    hidden_units: int = Field(default=100, ge=1)
    dropout_p: float = Field(default=0.5, ge=0.0, lt=1.0)
    input_height: int = Field(default=85, ge=1)
    input_width: int = Field(default=69, ge=1)
    num_classes: int = Field(default=2, ge=2)
    conv_maps: int = Field(default=32, ge=1)
    conv_kernel: int = Field(default=5, ge=1)
    pool_size: int = Field(default=2, ge=2)

    def searched_values(self) -> Tuple[int, int, int, float]:
        return (self.num_convs, self.num_hidden_layers, self.hidden_units, self.dropout_p)

    def label(self) -> str:
        return (
            f"convs={self.num_convs} hidden_layers={self.num_hidden_layers} "
            f"units={self.hidden_units} dropout={self.dropout_p:g}"
        )


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    alpha: float = Field(default=0.01, gt=0.0, description="Learning rate")
    mu: float = Field(default=0.9, ge=0.0, lt=1.0, description="Momentum coefficient")
    batch_size: int = Field(default=500, ge=1)
    epochs: int = Field(default=10, ge=0)


class SplitSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    train_frac: float = Field(default=0.6, gt=0.0, le=1.0)
    val_frac: float = Field(default=0.2, gt=0.0, le=1.0)
    test_frac: float = Field(default=0.2, gt=0.0, le=1.0)
    seed: int = 0

    @model_validator(mode="after")
    def _fractions_sum_to_one(self) -> "SplitSpec":
        total = self.train_frac + self.val_frac + self.test_frac
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {total}")
        return self


class SearchParameter(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: Literal["num_convs", "num_hidden_layers", "hidden_units", "dropout_p"]
    values: List[Union[int, float]] = Field(min_length=1)
    default: Union[int, float]

    @model_validator(mode="after")
    def _default_in_values(self) -> "SearchParameter":
        if self.default not in self.values:
            raise ValueError(f"default {self.default} of {self.name} is not one of {self.values}")
        return self


class SearchSpace(BaseModel):
    """Per-parameter value lists, kept in the row order of the selection tables."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    parameters: List[SearchParameter]

    @field_validator("parameters")
    @classmethod
    def _table_order(cls, parameters: List[SearchParameter]) -> List[SearchParameter]:
        return sorted(parameters, key=lambda p: SEARCHED_PARAMETERS.index(p.name))

    @model_validator(mode="after")
    def _unique_names(self) -> "SearchSpace":
        names = [p.name for p in self.parameters]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate search parameters: {names}")
        return self

    @classmethod
    def standard(cls) -> "SearchSpace":
        return cls(
            parameters=[
                SearchParameter(name="num_convs", values=[1, 2, 3], default=1),
                SearchParameter(name="num_hidden_layers", values=[1, 2, 3], default=1),
                SearchParameter(name="hidden_units", values=[100, 200, 300, 400], default=100),
                SearchParameter(name="dropout_p", values=[0.0, 0.1, 0.5, 0.7], default=0.5),
            ]
        )

    def defaults(self) -> Dict[str, Union[int, float]]:
        return {p.name: p.default for p in self.parameters}

    def get(self, name: str) -> SearchParameter:
        for p in self.parameters:
            if p.name == name:
                return p
        raise KeyError(name)


class RunResult(BaseModel):
    """Outcome of training one configuration once."""

    model_config = ConfigDict(extra="forbid")

    ordinal: int = Field(ge=0)
    parameter: Optional[str] = Field(default=None, description="Varied parameter, None for the all-defaults run")
    config: NetworkConfig
    epochs: int = Field(ge=0)
    test_loss: float = Field(ge=0.0)
    test_accuracy: float = Field(ge=0.0, le=1.0)
    val_loss: Optional[float] = None
    median_epoch_seconds: Optional[float] = None
    epoch_seconds: List[float] = Field(default_factory=list)
    seed: int = 0


class SelectionReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    results: List[RunResult]
    chosen: Dict[str, Union[int, float]]
    final_config: NetworkConfig
    metric: SelectOn = "test"
    jobs: int = 1


class CommandConfig(BaseModel):
    """Resolved flags of one CLI invocation."""

    model_config = ConfigDict(extra="forbid")

    subcommand: Literal["gen-data", "stats", "train", "select", "repeat", "eval"]
    data_path: Optional[str] = None
    out_path: Optional[str] = None
    seed: int = 20150901
    subset: Subset = "full"
    part: Part = "mouth"
    resize: Optional[Tuple[int, int]] = None
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    timing: bool = False
