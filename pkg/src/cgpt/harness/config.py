"""Experiment configuration with a lossless JSON round trip."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from ..transformer import ModelConfig, TrainConfig


@dataclass
class DatasetSpec:
    kind: str = "images"
    classes: int = 4
    per_class: int = 300
    side: int = 8
    patch: int = 2
    size: int = 1000
    max_len: int = 12

    def __post_init__(self):
        if self.kind not in ("images", "grammar"):
            raise ValueError("dataset kind must be 'images' or 'grammar'")


@dataclass
class MetricOptions:
    bins: int = 15
    severities: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    ood: bool = True
    oversmoothing_samples: int = 64

    def __post_init__(self):
        self.severities = list(self.severities)
        if self.bins < 1:
            raise ValueError("bins must be positive")
        if any(s not in (1, 2, 3, 4, 5) for s in self.severities):
            raise ValueError("severities must lie in 1..5")


def _build(cls, data: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**data)


@dataclass
class RunConfig:
    """Everything needed to reproduce one experiment.

    ``seed`` is the root seed: it generates the dataset and (through a
    derived stream) the model initialization, shuffling and MC draws,
    overriding ``train.seed``.
    """

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    metrics: MetricOptions = field(default_factory=MetricOptions)
    out_dir: str = "out"
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"]["betas"] = list(d["train"]["betas"])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown RunConfig fields: {sorted(unknown)}")
        return cls(
            model=_build(ModelConfig, data.get("model", {})),
            train=_build(TrainConfig, data.get("train", {})),
            dataset=_build(DatasetSpec, data.get("dataset", {})),
            metrics=_build(MetricOptions, data.get("metrics", {})),
            out_dir=data.get("out_dir", "out"),
            seed=int(data.get("seed", 0)),
        )

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_json(fh.read())

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON, excluding the output directory."""
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()
