"""Seeded synthetic reasoning trees with one planted correct chain.

Every task hides a chain of child indices c_1..c_D. A step is "on path" when
its whole prefix follows the planted chain; on-path steps draw higher rewards
and carry a shifted first feature. All randomness is derived from a hash of
(task seed, prefix, sibling index), so proposals are pure functions.
"""

from __future__ import annotations

import hashlib
import itertools
import re
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from pgts.stepgen.base import (
    DEFAULT_ANSWER_MARKER,
    GenerationCost,
    StepProposal,
    TaskInstance,
    answers_match,
    detect_final,
)

_CHAIN_TAG = re.compile(r"Choose ([0-9]+(?:-[0-9]+)*)")


@dataclass(frozen=True)
class SyntheticTaskConfig:
    depth: int = 4
    breadth: int = 2
    on_path_mean: float = 0.8
    off_path_mean: float = 0.3
    noise_std: float = 0.1
    feature_dim: int = 32
    feature_shift: float = 1.0
    planted: Optional[tuple[int, ...]] = None  # fixes the hidden chain for every task

    def __post_init__(self):
        if self.planted is not None:
            object.__setattr__(self, "planted", tuple(int(i) for i in self.planted))
            if len(self.planted) != self.depth or not all(0 <= i < self.breadth for i in self.planted):
                raise ValueError("planted chain must have length depth with indices below breadth")
        if self.depth < 1 or self.breadth < 1:
            raise ValueError("depth and breadth must be >= 1")
        if not self.on_path_mean > self.off_path_mean:
            raise ValueError("on_path_mean must exceed off_path_mean")
        if self.noise_std < 0 or self.feature_dim < 1:
            raise ValueError("noise_std must be >= 0 and feature_dim >= 1")
        vals = (self.on_path_mean, self.off_path_mean, self.noise_std, self.feature_shift)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("synthetic config values must be finite")
        if self.breadth**self.depth > 10**6:
            raise ValueError("breadth**depth must stay <= 1e6")


def _stream(*parts) -> np.random.Generator:
    key = "|".join(str(p) for p in parts).encode()
    seed = int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")
    return np.random.Generator(np.random.PCG64(seed))


def planted_chain(seed: int, config: SyntheticTaskConfig) -> tuple[int, ...]:
    if config.planted is not None:
        return config.planted
    rng = _stream("planted", seed)
    return tuple(int(i) for i in rng.integers(0, config.breadth, size=config.depth))


def chain_label(chain: Sequence[int]) -> str:
    return "-".join(str(i) for i in chain)


def make_task(seed: int, config: SyntheticTaskConfig, task_id: Optional[str] = None) -> TaskInstance:
    chain = planted_chain(seed, config)
    return TaskInstance(
        task_id=task_id or f"syn-{seed}",
        prompt=f"Find the hidden path (seed {seed}, depth {config.depth}, breadth {config.breadth}).",
        ground_truth=chain_label(chain),
        seed=seed,
    )


def synthetic_suite(n: int, config: SyntheticTaskConfig, seed: int, prefix: str = "syn") -> list[TaskInstance]:
    seeds = np.random.default_rng(seed).integers(0, 2**62, size=n)
    return [make_task(int(s), config, f"{prefix}-{seed}-{i}") for i, s in enumerate(seeds)]


def step_reward(seed: int, prefix: Sequence[int], index: int, config: SyntheticTaskConfig) -> tuple[float, np.ndarray, bool]:
    """(reward, features, on_path) of choosing child ``index`` after ``prefix``."""
    chain = planted_chain(seed, config)
    d = len(prefix)
    on_path = tuple(prefix) == chain[:d] and index == chain[d]
    rng = _stream("step", seed, chain_label(prefix), index)
    mean = config.on_path_mean if on_path else config.off_path_mean
    reward = float(np.clip(mean + config.noise_std * rng.standard_normal(), 0.0, 1.0))
    feats = rng.standard_normal(config.feature_dim)
    if on_path:
        feats[0] += config.feature_shift
    return reward, feats, on_path


def parse_chain(content: str) -> tuple[int, ...]:
    m = _CHAIN_TAG.search(content)
    if m is None:
        return ()
    return tuple(int(x) for x in m.group(1).split("-"))


class SyntheticSession:
    def __init__(self, task: TaskInstance, config: SyntheticTaskConfig):
        if task.seed is None:
            raise ValueError(f"synthetic task {task.task_id} has no seed")
        self.task = task
        self.config = config
        self.cost = GenerationCost()

    def root_features(self) -> np.ndarray:
        return _stream("root", self.task.seed).standard_normal(self.config.feature_dim)

    def propose_step(self, path: list[str], sibling_index: int) -> StepProposal:
        if not 0 <= sibling_index < self.config.breadth:
            raise ValueError(f"sibling_index {sibling_index} outside breadth {self.config.breadth}")
        prefix = parse_chain(path[-1]) if len(path) > 1 else ()
        if len(prefix) >= self.config.depth:
            raise ValueError("cannot extend a complete chain")
        reward, feats, _ = step_reward(self.task.seed, prefix, sibling_index, self.config)
        chain = prefix + (sibling_index,)
        content = f"Choose {chain_label(chain)}."
        is_final = len(chain) == self.config.depth
        if is_final:
            content += f" {DEFAULT_ANSWER_MARKER} {chain_label(chain)}."
        self.cost.proposals += 1
        return StepProposal(content, feats, reward, is_final)

    def extract_answer(self, content: str) -> Optional[str]:
        return detect_final(content)


class SyntheticGenerator:
    def __init__(self, config: SyntheticTaskConfig):
        self.config = config
        self.feature_dim = config.feature_dim

    def session(self, task: TaskInstance) -> SyntheticSession:
        return SyntheticSession(task, self.config)


def exhaustive_best_leaf(
    task: TaskInstance, config: SyntheticTaskConfig, max_leaves: int = 10**6
) -> tuple[tuple[int, ...], float, bool]:
    """Brute force over all B**D leaves: (best chain, its path reward sum, matches truth)."""
    if config.breadth**config.depth > max_leaves:
        raise ValueError(f"{config.breadth}**{config.depth} leaves exceeds guard {max_leaves}")
    cache: dict[tuple[int, ...], float] = {}

    def prefix_sum(chain: tuple[int, ...]) -> float:
        if not chain:
            return 0.0
        if chain not in cache:
            r, _, _ = step_reward(task.seed, chain[:-1], chain[-1], config)
            cache[chain] = prefix_sum(chain[:-1]) + r
        return cache[chain]

    best, best_sum = None, -np.inf
    for leaf in itertools.product(range(config.breadth), repeat=config.depth):
        s = prefix_sum(leaf)
        if s > best_sum:
            best, best_sum = leaf, s
    return best, float(best_sum), answers_match(chain_label(best), task.ground_truth)
