"""Experiment configuration: JSON loading, defaults and invariant checks."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .acquisition import Strategy
from .losses import AuxLossMode
from .models import ModelSpec


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


# Strategies whose query rule needs a trained loss-prediction head.
_AUX_DEFAULT = {Strategy.LPLGRAD: True, Strategy.LEARNING_LOSS: True}


@dataclass
class ExperimentConfig:
    strategy: str = "lplgrad"
    rounds: int = 5
    epochs_per_round: int = 20
    query_budget: int = 100
    candidate_size: int = 2000
    total_annotation_budget: int | None = None
    initial_labeled: int = 100
    margin: float = 1.0
    pair_batch: int = 32
    aux_weight: float = 1.0
    aux_loss_mode: str = "paper-literal"
    detach_taps: bool = False
    with_aux: bool | None = None
    cold_start: bool = False
    grad_last_layer_only: bool = False
    lr: float = 0.05
    momentum: float = 0.9
    lr_decay_factor: float = 0.1
    lr_decay_epoch: int = 16
    minibatch: int = 32
    trials: int = 3
    base_seed: int = 0
    record_wall_clock: bool = False
    export_embeddings: bool = False
    record_confidence: bool = False
    dataset: dict[str, Any] = field(default_factory=lambda: {
        "kind": "idx",
        "train_images": "data/mnist/train-images-idx3-ubyte",
        "train_labels": "data/mnist/train-labels-idx1-ubyte",
        "test_images": "data/mnist/t10k-images-idx3-ubyte",
        "test_labels": "data/mnist/t10k-labels-idx1-ubyte",
        "num_classes": 10,
    })
    model: dict[str, Any] = field(default_factory=dict)
    output_dir: str = "results/desk_mnist"

    @property
    def strategy_enum(self) -> Strategy:
        return Strategy(self.strategy)

    @property
    def use_aux(self) -> bool:
        if self.with_aux is None:
            return _AUX_DEFAULT.get(self.strategy_enum, False)
        return bool(self.with_aux)

    @property
    def annotation_budget(self) -> int:
        if self.total_annotation_budget is None:
            return self.initial_labeled + self.rounds * self.query_budget
        return self.total_annotation_budget

    @property
    def model_spec(self) -> ModelSpec:
        return ModelSpec.from_dict(self.model)

    def validate(self, train_size: int | None = None) -> "ExperimentConfig":
        """Raise ConfigError naming the first offending field."""
        try:
            Strategy(self.strategy)
        except ValueError:
            raise ConfigError("strategy", f"unknown strategy {self.strategy!r}; "
                              f"choose from {[s.value for s in Strategy]}") from None
        try:
            AuxLossMode(self.aux_loss_mode)
        except ValueError:
            raise ConfigError("aux_loss_mode", f"unknown mode {self.aux_loss_mode!r}") from None
        ints = ("rounds", "epochs_per_round", "query_budget", "candidate_size", "initial_labeled",
                "pair_batch", "lr_decay_epoch", "minibatch", "trials", "base_seed")
        for name in ints:
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(name, f"must be an integer, got {value!r}")
        for name in ("margin", "aux_weight", "lr", "momentum", "lr_decay_factor"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(name, f"must be a number, got {value!r}")
        for name in ("detach_taps", "cold_start", "grad_last_layer_only", "record_wall_clock",
                     "export_embeddings", "record_confidence"):
            if not isinstance(getattr(self, name), bool):
                raise ConfigError(name, "must be true or false")
        if self.with_aux is not None and not isinstance(self.with_aux, bool):
            raise ConfigError("with_aux", "must be true, false or null")
        if self.rounds < 0:
            raise ConfigError("rounds", "must be >= 0")
        if self.epochs_per_round < 1:
            raise ConfigError("epochs_per_round", "must be >= 1")
        if self.query_budget < 0:
            raise ConfigError("query_budget", "must be >= 0")
        if self.candidate_size < 1:
            raise ConfigError("candidate_size", "must be >= 1")
        if self.initial_labeled < 1:
            raise ConfigError("initial_labeled", "must be >= 1")
        if self.pair_batch < 0 or self.pair_batch % 2:
            raise ConfigError("pair_batch", f"must be a non-negative even integer, got {self.pair_batch}")
        if self.margin <= 0:
            raise ConfigError("margin", "must be positive")
        if self.lr <= 0:
            raise ConfigError("lr", "must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum", "must lie in [0, 1)")
        if self.lr_decay_factor <= 0:
            raise ConfigError("lr_decay_factor", "must be positive")
        if self.minibatch < 1:
            raise ConfigError("minibatch", "must be >= 1")
        if self.trials < 1:
            raise ConfigError("trials", "must be >= 1")
        if self.aux_weight < 0:
            raise ConfigError("aux_weight", "must be >= 0")
        needed = self.initial_labeled + self.rounds * self.query_budget
        if self.total_annotation_budget is not None:
            if not isinstance(self.total_annotation_budget, int) or isinstance(self.total_annotation_budget, bool):
                raise ConfigError("total_annotation_budget", "must be an integer or null")
            if self.total_annotation_budget < needed:
                raise ConfigError("total_annotation_budget",
                                  f"{self.total_annotation_budget} < initial_labeled + rounds*query_budget = {needed}")
        if train_size is not None and needed > train_size:
            raise ConfigError("rounds", f"initial_labeled + rounds*query_budget = {needed} "
                              f"exceeds the {train_size} train samples")
        if self.strategy_enum is Strategy.LEARNING_LOSS and not self.use_aux:
            raise ConfigError("with_aux", "learning-loss queries with the auxiliary model; it cannot be disabled")
        if not isinstance(self.dataset, dict) or "kind" not in self.dataset:
            raise ConfigError("dataset", "must be an object with a 'kind'")
        if self.dataset["kind"] not in ("idx", "csv", "blobs"):
            raise ConfigError("dataset", f"unknown dataset kind {self.dataset['kind']!r}")
        try:
            self.model_spec
        except (TypeError, ValueError) as exc:
            raise ConfigError("model", str(exc)) from None
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown key")
        return cls(**data)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    cfg = ExperimentConfig.from_dict(data)
    cfg.config_dir = path.resolve().parent
    return cfg.validate()


def resolve_path(cfg: ExperimentConfig, p: str) -> Path:
    path = Path(p)
    if path.is_absolute():
        return path
    base = getattr(cfg, "config_dir", None)
    return (base / path) if base is not None else path
