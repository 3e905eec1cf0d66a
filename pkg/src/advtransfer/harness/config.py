"""Experiment configuration, read from a strict JSON document (unknown keys are errors)."""
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from ..attack import AttackConfig
from ..classifiers import TrainingSpec
from ..errors import AdvTransferError, ConfigError

DATASET_FORMATS = ("digits", "blobs", "csv", "idx")


def _strict(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except AdvTransferError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class BlobSpec:
    class_count: int = 10
    feature_dim: int = 20
    samples_per_class: int = 200
    spread: float = 0.12


@dataclass(frozen=True)
class DatasetSpec:
    """Where the data comes from and how it is split.

    ``format`` is ``csv`` or ``idx`` for files on disk, ``digits`` for the
    8x8 handwritten digits bundled with scikit-learn, or ``blobs`` for the
    synthetic Gaussian-cluster generator.
    """

    format: str = "digits"
    path: str | None = None
    labels_path: str | None = None
    header: bool = False
    train_fraction: float = 0.8
    max_train: int | None = 2000
    blobs: BlobSpec = field(default_factory=BlobSpec)

    def __post_init__(self):
        if self.format not in DATASET_FORMATS:
            raise ConfigError(f"dataset.format must be one of {DATASET_FORMATS}")
        if self.format in ("csv", "idx") and not self.path:
            raise ConfigError(f"dataset.path is required for format {self.format!r}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("dataset.train_fraction must lie in (0, 1)")
        if isinstance(self.blobs, dict):
            object.__setattr__(self, "blobs", _strict(BlobSpec, self.blobs, "dataset.blobs"))


@dataclass(frozen=True)
class TargetFamily:
    name: str
    count: int
    training: TrainingSpec

    def __post_init__(self):
        if not self.name.isidentifier():
            raise ConfigError(f"target family name {self.name!r} must be an identifier")
        if self.count < 1:
            raise ConfigError(f"target family {self.name!r}: count must be >= 1")
        if isinstance(self.training, dict):
            object.__setattr__(
                self, "training", _strict(TrainingSpec, self.training, f"targets.{self.name}.training")
            )


@dataclass(frozen=True)
class ExperimentConfig:
    root_seed: int
    epsilon: float
    surrogates: tuple
    targets: tuple
    source_count: int = 50
    perturbations_per_source: int = 20
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    attack: AttackConfig = field(default_factory=AttackConfig)
    output_dir: str = "run"
    display_sources: int | None = None
    histogram_bins: int = 20

    def __post_init__(self):
        if not 0 <= int(self.root_seed) < 2 ** 64:
            raise ConfigError("root_seed must be a 64-bit unsigned integer")
        if not (isinstance(self.epsilon, (int, float)) and self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ConfigError("epsilon must be a positive number")
        if isinstance(self.dataset, dict):
            object.__setattr__(self, "dataset", _strict(DatasetSpec, self.dataset, "dataset"))
        if isinstance(self.attack, dict):
            attack = dict(self.attack)
            if attack.get("epsilon") not in (None, self.epsilon):
                raise ConfigError("attack.epsilon disagrees with the top-level epsilon")
            attack["epsilon"] = float(self.epsilon)
            object.__setattr__(self, "attack", _strict(AttackConfig, attack, "attack"))
        surrogates = tuple(
            s if isinstance(s, TrainingSpec) else _strict(TrainingSpec, s, f"surrogates[{i}]")
            for i, s in enumerate(self.surrogates)
        )
        if not 1 <= len(surrogates) <= 2:
            raise ConfigError("one or two surrogates are supported")
        if any(s.kind == "forest" for s in surrogates) and self.attack.mode == "whitebox":
            raise ConfigError("white-box attacks need differentiable surrogates")
        object.__setattr__(self, "surrogates", surrogates)
        targets = tuple(
            t if isinstance(t, TargetFamily) else _strict(TargetFamily, t, f"targets[{i}]")
            for i, t in enumerate(self.targets)
        )
        if not targets:
            raise ConfigError("at least one target family is required")
        if len({t.name for t in targets}) != len(targets):
            raise ConfigError("target family names must be unique")
        object.__setattr__(self, "targets", targets)
        if self.source_count < 1 or self.perturbations_per_source < 1:
            raise ConfigError("source_count and perturbations_per_source must be >= 1")
        if self.histogram_bins < 1:
            raise ConfigError("histogram_bins must be >= 1")

    @classmethod
    def from_dict(cls, data):
        return _strict(cls, data, "config")

    @classmethod
    def from_file(cls, path):
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)

    def with_overrides(self, seed=None, out=None):
        changes = {}
        if seed is not None:
            changes["root_seed"] = int(seed)
        if out is not None:
            changes["output_dir"] = str(out)
        return dataclasses.replace(self, **changes) if changes else self

    def to_dict(self):
        return {
            "root_seed": self.root_seed,
            "epsilon": self.epsilon,
            "surrogates": [s.to_dict() for s in self.surrogates],
            "targets": [
                {"name": t.name, "count": t.count, "training": t.training.to_dict()}
                for t in self.targets
            ],
            "source_count": self.source_count,
            "perturbations_per_source": self.perturbations_per_source,
            "dataset": dataclasses.asdict(self.dataset),
            "attack": self.attack.to_dict(),
            "output_dir": self.output_dir,
            "display_sources": self.display_sources,
            "histogram_bins": self.histogram_bins,
        }
