"""Run configuration: one section per pipeline stage, plus named profiles."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Tuple

from .boundary import ClassifierSpec
from .corpus import GeneratorConfig
from .pretrain import PretrainConfig

PROFILES = ("desk", "paper-scale")


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.5
    window_s: float = 3.0
    knn_k: Tuple[int, ...] = (1, 5, 10, 20)
    split: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    split_seed: int = 0
    task: str = "scene"                 # "scene" or "cuepoint"
    cue_radius: int = 2
    cue_min_gap_s: float = 90.0
    cue_max_per_hour: int = 12

    def __post_init__(self):
        object.__setattr__(self, "knn_k", tuple(int(k) for k in self.knn_k))
        object.__setattr__(self, "split", tuple(float(r) for r in self.split))
        if self.task not in ("scene", "cuepoint"):
            raise ValueError(f"unknown task {self.task!r}")


@dataclass(frozen=True)
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    classifier: ClassifierSpec = field(default_factory=lambda: ClassifierSpec.for_embedding_dim(64))
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    @classmethod
    def profile(cls, name: str = "desk") -> "RunConfig":
        if name == "desk":
            return cls(generator=GeneratorConfig(titles=200))
        if name == "paper-scale":
            return cls(generator=GeneratorConfig(titles=200),
                       pretrain=PretrainConfig.paper_scale(),
                       classifier=ClassifierSpec(hidden=(4096, 1024), dropout=(0.9, 0.9),
                                                 learning_rate=0.1, momentum=0.0,
                                                 batch_size=1024, epochs=200))
        raise ValueError(f"unknown profile {name!r}; choose from {PROFILES}")

    def to_dict(self) -> dict:
        return json.loads(json.dumps({
            "generator": self.generator.to_dict(),
            "pretrain": self.pretrain.to_dict(),
            "classifier": self.classifier.to_dict(),
            "eval": dataclasses.asdict(self.eval),
            "seed": self.seed,
        }))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict, base: "RunConfig" = None) -> "RunConfig":
        """Overlay ``d`` on ``base`` (default: the desk profile); unknown keys are errors."""
        base = base or cls.profile("desk")
        unknown = set(d) - {"generator", "pretrain", "classifier", "eval", "seed"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        cur = base.to_dict()
        for section in ("generator", "pretrain", "classifier", "eval"):
            overrides = d.get(section, {})
            if not isinstance(overrides, dict):
                raise ValueError(f"section {section!r} must be a mapping")
            cur[section].update(overrides)
        eval_fields = {f.name for f in dataclasses.fields(EvalConfig)}
        bad = set(cur["eval"]) - eval_fields
        if bad:
            raise ValueError(f"unknown eval keys: {sorted(bad)}")
        return cls(generator=GeneratorConfig.from_dict(cur["generator"]),
                   pretrain=PretrainConfig.from_dict(cur["pretrain"]),
                   classifier=ClassifierSpec.from_dict(cur["classifier"]),
                   eval=EvalConfig(**{k: tuple(v) if isinstance(v, list) else v
                                      for k, v in cur["eval"].items()}),
                   seed=int(d.get("seed", cur["seed"])))

    @classmethod
    def from_json(cls, text: str, base: "RunConfig" = None) -> "RunConfig":
        return cls.from_dict(json.loads(text), base)
