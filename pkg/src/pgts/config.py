"""Run configuration: one JSON document that reproduces a synthetic run given its seed.

Schema (every key optional; defaults shown by ``RunConfig().to_dict()``)::

    {
      "seed": 0,
      "out_dir": "runs",
      "depth_limit": 4, "breadth_limit": 2,
      "tasks": {"source": "synthetic" | "file", "path": null,
                "train_count": 1000, "eval_count": 200,
                "train_seed": 1, "eval_seed": 2},
      "generator": "synthetic" | "llm",
      "synthetic": {SyntheticTaskConfig fields},
      "llm": {LLMConfig fields},
      "episode": {"cost": {CostConfig fields}, "max_steps", "discount", "terminal_mode"},
      "train": {TrainConfig fields},
      "policy": {PolicyConfig fields except feature_dim and depth_limit},
      "mcts": {MCTSConfig fields},
      "sc_chains": [4]
    }
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

from pgts.baselines import MCTSConfig
from pgts.mdp import CostConfig, EpisodeConfig
from pgts.policy import PolicyConfig
from pgts.stepgen import (
    StepGenerator,
    SyntheticGenerator,
    SyntheticTaskConfig,
    TaskInstance,
    load_tasks,
    synthetic_suite,
)
from pgts.stepgen.llm import LLMConfig, LLMGenerator
from pgts.trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class TaskSource:
    source: str = "synthetic"
    path: Optional[str] = None
    train_count: int = 1000
    eval_count: int = 200
    train_seed: int = 1
    eval_seed: int = 2


@dataclass
class PolicyShape:
    rwse_steps: int = 8
    hidden: int = 32
    layers: int = 2
    use_edge_features: bool = True
    use_global_attention: bool = True
    use_local_mpnn: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs"
    depth_limit: int = 4
    breadth_limit: int = 2
    tasks: TaskSource = field(default_factory=TaskSource)
    generator: str = "synthetic"
    synthetic: SyntheticTaskConfig = field(default_factory=SyntheticTaskConfig)
    llm: LLMConfig = field(default_factory=LLMConfig)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    policy: PolicyShape = field(default_factory=PolicyShape)
    mcts: MCTSConfig = field(default_factory=lambda: MCTSConfig(breadth=2))
    sc_chains: list[int] = field(default_factory=lambda: [4])

    def __post_init__(self):
        if self.depth_limit < 1 or self.breadth_limit < 1:
            raise ConfigError("depth_limit and breadth_limit must be >= 1")
        if self.generator not in ("synthetic", "llm"):
            raise ConfigError(f"generator must be 'synthetic' or 'llm', got {self.generator!r}")
        if self.tasks.source not in ("synthetic", "file"):
            raise ConfigError(f"tasks.source must be 'synthetic' or 'file', got {self.tasks.source!r}")
        if self.tasks.source == "file" and not self.tasks.path:
            raise ConfigError("tasks.path is required when tasks.source is 'file'")
        if self.tasks.source == "synthetic" and self.generator != "synthetic":
            raise ConfigError("synthetic tasks need the synthetic generator")
        if self.generator == "synthetic" and (
            self.synthetic.depth != self.depth_limit or self.synthetic.breadth != self.breadth_limit
        ):
            raise ConfigError("synthetic depth/breadth must equal depth_limit/breadth_limit")
        if min(self.tasks.train_count, self.tasks.eval_count) < 0:
            raise ConfigError("task counts must be >= 0")
        if any(n < 1 for n in self.sc_chains):
            raise ConfigError("sc_chains entries must be >= 1")

    # -- derived objects

    @property
    def feature_dim(self) -> int:
        return self.synthetic.feature_dim if self.generator == "synthetic" else self.llm.feature_dim

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(feature_dim=self.feature_dim, depth_limit=self.depth_limit, **asdict(self.policy))

    def make_generator(self) -> StepGenerator:
        if self.generator == "synthetic":
            return SyntheticGenerator(self.synthetic)
        return LLMGenerator(self.llm)

    def train_tasks(self) -> list[TaskInstance]:
        if self.tasks.source == "file":
            return _read_task_file(self.tasks.path)
        return synthetic_suite(self.tasks.train_count, self.synthetic, self.tasks.train_seed, "train")

    def eval_tasks(self) -> list[TaskInstance]:
        if self.tasks.source == "file":
            return _read_task_file(self.tasks.path)
        return synthetic_suite(self.tasks.eval_count, self.synthetic, self.tasks.eval_seed, "eval")

    # -- serialization

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["synthetic"]["planted"] is not None:
            d["synthetic"]["planted"] = list(d["synthetic"]["planted"])
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            kw: dict[str, Any] = {}
            nested = {
                "tasks": TaskSource, "synthetic": SyntheticTaskConfig, "llm": LLMConfig,
                "train": TrainConfig, "policy": PolicyShape, "mcts": MCTSConfig,
            }
            for key, value in data.items():
                if key in nested:
                    kw[key] = _build(nested[key], value, key)
                elif key == "episode":
                    ep = dict(value)
                    if "cost" in ep:
                        ep["cost"] = _build(CostConfig, ep["cost"], "episode.cost")
                    kw[key] = _build(EpisodeConfig, ep, key)
                elif key == "sc_chains":
                    kw[key] = [int(n) for n in value]
                else:
                    kw[key] = value
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, train=replace(self.train, seed=seed))


def _build(cls, value, where: str):
    if not isinstance(value, dict):
        raise ConfigError(f"{where} must be an object")
    allowed = {f.name for f in fields(cls)}
    unknown = set(value) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**value)


def _read_task_file(path: str) -> list[TaskInstance]:
    return load_tasks(path)


def load_config(path: str | Path) -> RunConfig:
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return RunConfig.from_dict(data)


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")
