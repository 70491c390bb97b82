"""Shared step-generator types plus sentence splitting and answer detection."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Protocol

import numpy as np

DEFAULT_ANSWER_MARKER = "The answer is"


class GenerationError(RuntimeError):
    """A step generator could not produce a proposal."""


@dataclass(frozen=True)
class TaskInstance:
    task_id: str
    prompt: str
    ground_truth: Optional[str] = None
    seed: Optional[int] = None


@dataclass
class StepProposal:
    content: str
    features: np.ndarray
    step_reward: float
    is_final: bool

    def __post_init__(self):
        r = float(self.step_reward)
        if not np.isfinite(r):
            raise GenerationError("step reward is not finite")
        self.step_reward = min(max(r, 0.0), 1.0)
        self.features = np.asarray(self.features, dtype=np.float64)
        if not np.all(np.isfinite(self.features)):
            raise GenerationError("step features are not finite")


@dataclass
class GenerationCost:
    proposals: int = 0
    tokens: int = 0

    def as_tuple(self) -> tuple[int, int]:
        return self.proposals, self.tokens


class StepSession(Protocol):
    """A generator bound to one task. Counters only ever grow."""

    task: TaskInstance
    cost: GenerationCost

    def root_features(self) -> np.ndarray: ...

    def propose_step(self, path: list[str], sibling_index: int) -> StepProposal: ...

    def extract_answer(self, content: str) -> Optional[str]: ...


class StepGenerator(Protocol):
    feature_dim: int

    def session(self, task: TaskInstance) -> StepSession: ...


def generation_cost(session: StepSession) -> tuple[int, int]:
    return session.cost.as_tuple()


_SENTENCE_END = re.compile(r"(?<=[.!?])\s+|\n")


def split_steps(completion: str) -> list[str]:
    """Split text into sentences on terminal punctuation or newlines."""
    return [s.strip() for s in _SENTENCE_END.split(completion) if s.strip()]


def detect_final(content: str, marker: str = DEFAULT_ANSWER_MARKER) -> Optional[str]:
    idx = content.lower().find(marker.lower())
    if idx < 0:
        return None
    answer = content[idx + len(marker):].strip()
    answer = answer.rstrip(".!?,;: \t\n").strip()
    return answer or None


def answers_match(answer: Optional[str], truth: Optional[str]) -> bool:
    if answer is None or truth is None:
        return False
    return answer.strip().lower() == truth.strip().lower()


def load_tasks(path: str | Path) -> list[TaskInstance]:
    tasks = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                tasks.append(
                    TaskInstance(
                        task_id=str(rec["task_id"]),
                        prompt=rec["prompt"],
                        ground_truth=rec.get("ground_truth"),
                        seed=rec.get("seed"),
                    )
                )
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: missing field {exc}") from None
    return tasks


def save_tasks(tasks: Iterable[TaskInstance], path: str | Path) -> None:
    with open(path, "w") as f:
        for t in tasks:
            rec = {"task_id": t.task_id, "prompt": t.prompt}
            if t.ground_truth is not None:
                rec["ground_truth"] = t.ground_truth
            if t.seed is not None:
                rec["seed"] = t.seed
            f.write(json.dumps(rec) + "\n")
