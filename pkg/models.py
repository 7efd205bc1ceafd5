from __future__ import annotations

from enum import StrEnum
from pathlib import Path
from typing import Any, Literal, Self

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class ObjectiveMode(StrEnum):
    fragment_only = "fragment_only"
    global_only = "global_only"
    combined_dense = "combined_dense"
    combined_mil = "combined_mil"


class FragmentMode(StrEnum):
    triplets = "triplets"
    bow = "bow"
    bigram = "bigram"
    devise = "devise"
    fullframe_only = "fullframe_only"


class InitScheme(StrEnum):
    scaled_uniform = "scaled_uniform"
    zeros = "zeros"


class Direction(StrEnum):
    image_annotation = "image_annotation"
    image_search = "image_search"


class Phase(StrEnum):
    dense = "dense"
    mil = "mil"


class _Config(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", allow_inf_nan=False)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False, allow_unicode=True)

    @classmethod
    def from_yaml(cls, path: str | Path) -> Self:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        return cls.model_validate(data)


class ObjectiveConfig(_Config):
    beta: float = Field(default=0.5, ge=0)
    alpha: float = Field(default=1e-5, ge=0)
    delta: float = Field(default=1.0, gt=0)
    smoothing_n: float = Field(default=10.0, ge=0)
    mode: ObjectiveMode = ObjectiveMode.combined_mil


class TrainConfig(_Config):
    batch_size: int = Field(default=100, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    epochs: int = Field(default=15, gt=0)
    lr: float = Field(default=1e-2, ge=0)
    anneal_factor: float = Field(default=0.1, ge=0)
    anneal_last_epochs: int = Field(default=2, ge=0)
    mil_start_epoch: int = Field(default=10, ge=0)
    seed: int = Field(default=0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _check_schedule(self) -> Self:
        if self.anneal_last_epochs >= self.epochs:
            raise ValueError(
                f"anneal_last_epochs ({self.anneal_last_epochs}) must be < epochs ({self.epochs}); "
                "lower --anneal-last-epochs or raise --epochs"
            )
        if self.mil_start_epoch > self.epochs:
            raise ValueError(
                f"mil_start_epoch ({self.mil_start_epoch}) must be <= epochs ({self.epochs}); "
                "lower --mil-start-epoch or raise --epochs"
            )
        return self


class SyntheticSpec(_Config):
    num_items: int = Field(default=250, gt=0)
    num_concepts: int = Field(default=8, gt=0)
    fragments_per_image: int = Field(default=5, gt=0)
    triplets_per_sentence: int = Field(default=3, gt=0)
    noise_sigma: float = Field(default=0.1, ge=0)
    dim_image: int = Field(default=16, gt=0)
    dim_word: int = Field(default=32, gt=0)
    fullframe: bool = True
    seed: int = Field(default=0, ge=0, lt=2**64)


class SplitSpec(_Config):
    train: int | None = Field(default=None, ge=0)
    val: int = Field(default=0, ge=0)
    test: int = Field(default=0, ge=0)
    seed: int = Field(default=0, ge=0, lt=2**64)


class PathSpec(_Config):
    corpus: str | None = None
    word_vectors: str | None = None
    output_dir: str | None = None


class RunConfig(_Config):
    """Fully resolved configuration of one run; written next to every output."""

    train: TrainConfig = TrainConfig()
    objective: ObjectiveConfig = ObjectiveConfig()
    fragment_mode: FragmentMode = FragmentMode.triplets
    embedding_dim: int = Field(default=64, gt=0)
    init: InitScheme = InitScheme.scaled_uniform
    min_relation_frac: float = Field(default=0.01, ge=0, lt=1)
    split: SplitSpec = SplitSpec()
    paths: PathSpec = PathSpec()
    eval_ks: list[int] = [1, 5, 10]

    @field_validator("eval_ks")
    @classmethod
    def _positive_sorted_ks(cls, ks: list[int]) -> list[int]:
        if not ks or any(k <= 0 for k in ks):
            raise ValueError("eval_ks must be a non-empty list of positive integers")
        return sorted(set(ks))

    def with_overrides(self, overrides: dict[str, Any]) -> RunConfig:
        """Return a copy with dotted-key overrides applied (`train.lr`, `paths.corpus`, ...)."""
        data = self.model_dump(mode="json")
        for dotted, value in overrides.items():
            node = data
            *parents, leaf = dotted.split(".")
            for key in parents:
                node = node[key]
            node[leaf] = value
        return RunConfig.model_validate(data)


class EvalSettings(_Config):
    """Everything `eval` was asked for, with paths resolved against the checkpoint's config."""

    checkpoint: str
    corpus: str | None = None
    word_vectors: str | None = None
    split: Literal["test", "val", "all"] = "test"
    hodosh: bool = False
    ground_truth: str | None = None
    random_baseline: bool = False
    threads: int = Field(default=1, gt=0)
    ks: list[int]


class EvalConfig(_Config):
    run: RunConfig
    evaluation: EvalSettings


class RawSentence(BaseModel):
    tokens: list[str] = []
    triplets: list[tuple[str, str, str]] = []


class RawRecord(BaseModel):
    image_id: str
    image_fragments: list[list[float]]
    sentences: list[RawSentence]


class CorpusDims(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    dim_image: int = Field(alias="D_img", gt=0)


class CorpusHeader(BaseModel):
    dims: CorpusDims


class AlignmentRow(BaseModel):
    item: int
    triplet_index: int
    fragment_index: int


class EpochTrace(BaseModel):
    epoch: int
    phase: Phase
    lr: float
    mean_loss: float


class RetrievalReport(BaseModel):
    direction: Direction
    recall_at: dict[int, float]
    median_rank: float
    mean_rank: float
    ranks: list[int]


class TensorCheck(BaseModel):
    name: str
    checked: int
    skipped: int
    max_rel_err: float
    worst_index: list[int] | None = None
    analytic: float | None = None
    numeric: float | None = None


class GradCheckReport(BaseModel):
    max_rel_err: float
    tensors: list[TensorCheck]

    @property
    def checked(self) -> int:
        return sum(t.checked for t in self.tensors)

    @property
    def skipped(self) -> int:
        return sum(t.skipped for t in self.tensors)

    @property
    def worst(self) -> TensorCheck | None:
        candidates = [t for t in self.tensors if t.worst_index is not None]
        return max(candidates, key=lambda t: t.max_rel_err, default=None)


class TrainResult(BaseModel):
    checkpoint_path: str
    trace_path: str
    config_path: str
    trace: list[EpochTrace]


class EvalResult(BaseModel):
    n_images: int
    n_sentences: int
    reports: list[RetrievalReport]
    report_path: str
    csv_path: str
    config_path: str
    random_baseline: list[RetrievalReport] | None = None
    alignment_accuracy: float | None = None


class GenerateResult(BaseModel):
    corpus_path: str
    word_vectors_path: str
    alignments_path: str
    spec_path: str
    n_items: int
    n_image_fragments: int
    n_triplets: int


class AblationRow(BaseModel):
    label: str
    reports: list[RetrievalReport]


class AblationResult(BaseModel):
    rows: list[AblationRow]
    table_path: str
    csv_path: str
