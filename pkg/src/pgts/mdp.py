"""Tree-search MDP: meta-actions, transitions, shaped rewards and episode bookkeeping."""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from typing import IO, Iterable, Optional, Union

import numpy as np

from pgts.stepgen.base import StepGenerator, StepSession, TaskInstance, answers_match
from pgts.tree import ReasoningTree, compute_constraints


class InvalidAction(ValueError):
    pass


class EpisodeDone(RuntimeError):
    pass


class ActionKind(enum.Enum):
    EXPAND = "expand"
    BRANCH = "branch"
    BACKTRACK = "backtrack"
    TERMINATE = "terminate"


@dataclass(frozen=True)
class SearchAction:
    kind: ActionKind
    steps: int = 0  # backtrack distance; unused by the other kinds

    def index(self, depth_limit: int) -> int:
        if self.kind is ActionKind.EXPAND:
            return 0
        if self.kind is ActionKind.BRANCH:
            return 1
        if self.kind is ActionKind.TERMINATE:
            return depth_limit + 1
        if not 1 <= self.steps <= depth_limit - 1:
            raise InvalidAction(f"backtrack distance {self.steps} outside 1..{depth_limit - 1}")
        return 1 + self.steps

    @classmethod
    def from_index(cls, index: int, depth_limit: int) -> "SearchAction":
        if index == 0:
            return EXPAND
        if index == 1:
            return BRANCH
        if index == depth_limit + 1:
            return TERMINATE
        if 2 <= index <= depth_limit:
            return cls(ActionKind.BACKTRACK, index - 1)
        raise InvalidAction(f"action index {index} outside 0..{depth_limit + 1}")

    @classmethod
    def backtrack(cls, steps: int) -> "SearchAction":
        return cls(ActionKind.BACKTRACK, steps)

    def __str__(self) -> str:
        if self.kind is ActionKind.BACKTRACK:
            return f"backtrack({self.steps})"
        return self.kind.value


EXPAND = SearchAction(ActionKind.EXPAND)
BRANCH = SearchAction(ActionKind.BRANCH)
TERMINATE = SearchAction(ActionKind.TERMINATE)


@dataclass(frozen=True)
class CostConfig:
    expand_cost: float = 0.1
    branch_cost: float = 0.2
    backtrack_cost: float = 0.5
    terminate_cost: float = 0.0

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")

    def of(self, kind: ActionKind) -> float:
        return {
            ActionKind.EXPAND: self.expand_cost,
            ActionKind.BRANCH: self.branch_cost,
            ActionKind.BACKTRACK: self.backtrack_cost,
            ActionKind.TERMINATE: self.terminate_cost,
        }[kind]


TERMINAL_MODES = ("train", "eval")


@dataclass(frozen=True)
class EpisodeConfig:
    cost: CostConfig = field(default_factory=CostConfig)
    max_steps: int = 32
    discount: float = 0.99
    terminal_mode: str = "train"

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not 0 < self.discount <= 1:
            raise ValueError("discount must lie in (0, 1]")
        if self.terminal_mode not in TERMINAL_MODES:
            raise ValueError(f"terminal_mode must be one of {TERMINAL_MODES}")


@dataclass
class StepOutcome:
    reward: float
    done: bool
    new_node: Optional[int]
    action: SearchAction
    cost: float = 0.0
    budget_exhausted: bool = False


def expand_reward(step_reward: float, cost: float) -> float:
    return step_reward - cost


def branch_reward(sibling_edge: float, current_edge: float, cost: float) -> float:
    return sibling_edge - current_edge - cost


def backtrack_reward(new_edge: float, reverted_edges: Iterable[float], cost: float) -> float:
    return new_edge - float(sum(reverted_edges)) - cost


def terminal_reward(
    tree: ReasoningTree,
    task: TaskInstance,
    session: StepSession,
    mode: str = "train",
) -> float:
    """Outcome score of the chain ending at the current node.

    ``train`` scores 1/0 against the ground truth (a non-final node has no
    answer and scores 0); ``eval`` needs no ground truth and returns the mean
    step reward along the chain.
    """
    if mode == "train":
        if task.ground_truth is None:
            raise ValueError(f"task {task.task_id} has no ground truth for training rewards")
        cur = tree.current_node
        answer = session.extract_answer(cur.content) if cur.is_final else None
        return 1.0 if answers_match(answer, task.ground_truth) else 0.0
    if mode == "eval":
        edges = tree.path_edge_rewards(tree.current)
        return float(np.mean(edges)) if edges else 0.0
    raise ValueError(f"unknown terminal mode {mode!r}")


def episode_return(rewards: Iterable[Union[float, StepOutcome]], discount: float) -> float:
    vals = [r.reward if isinstance(r, StepOutcome) else float(r) for r in rewards]
    if not vals:
        raise ValueError("episode_return needs at least one reward")
    return float(sum(discount**t * r for t, r in enumerate(vals)))


class TreeSearchEnv:
    """One episode at a time over a single task.

    Every Expand/Branch/Backtrack creates exactly one node and moves onto it.
    Backtrack(k) replaces the ancestor k levels up with a fresh sibling, so it
    revokes the k+1 edges between the grandparent of that ancestor and the
    current node; Branch is the k=0 case.
    """

    def __init__(self, generator: StepGenerator, depth_limit: int, breadth_limit: int,
                 config: EpisodeConfig = EpisodeConfig()):
        self.generator = generator
        self.depth_limit = depth_limit
        self.breadth_limit = breadth_limit
        self.config = config
        self.task: Optional[TaskInstance] = None
        self.session: Optional[StepSession] = None
        self.tree: Optional[ReasoningTree] = None
        self.steps = 0
        self.done = False
        self.total_cost = 0.0

    def reset(self, task: TaskInstance, session: Optional[StepSession] = None) -> ReasoningTree:
        """Start an episode. Passing ``session`` accumulates generation cost across episodes."""
        self.task = task
        self.session = session or self.generator.session(task)
        self.tree = ReasoningTree(
            task.prompt, self.session.root_features(), self.depth_limit, self.breadth_limit
        )
        self.steps = 0
        self.done = False
        self.total_cost = 0.0
        return self.tree

    def constraints(self) -> np.ndarray:
        return compute_constraints(self.tree)

    def step(self, action: SearchAction) -> StepOutcome:
        if self.tree is None:
            raise RuntimeError("call reset() before step()")
        if self.done:
            raise EpisodeDone("episode already finished")
        tree, cfg = self.tree, self.config
        idx = action.index(self.depth_limit)
        if not compute_constraints(tree)[idx]:
            raise InvalidAction(f"{action} is not valid at node {tree.current}")
        cur = tree.current_node
        cost = cfg.cost.of(action.kind)
        new_node = None
        done = False

        if action.kind is ActionKind.TERMINATE:
            reward = terminal_reward(tree, self.task, self.session, cfg.terminal_mode) - cost
            done = True
        else:
            if action.kind is ActionKind.EXPAND:
                parent = cur.id
            elif action.kind is ActionKind.BRANCH:
                parent = cur.parent
            else:
                anc = tree.ancestor_at_depth(cur.id, cur.depth - action.steps)
                parent = tree.node(anc).parent
            proposal = self.session.propose_step(
                tree.path_contents(parent), len(tree.node(parent).children)
            )
            revoked = tree.path_edge_rewards(cur.id)[tree.node(parent).depth:]
            new_node = tree.add_child(parent, proposal)
            tree.current = new_node
            if action.kind is ActionKind.EXPAND:
                reward = expand_reward(proposal.step_reward, cost)
            elif action.kind is ActionKind.BRANCH:
                reward = branch_reward(proposal.step_reward, cur.edge_reward, cost)
            else:
                reward = backtrack_reward(proposal.step_reward, revoked, cost)

        self.steps += 1
        exhausted = False
        if not done and self.steps >= cfg.max_steps:
            term_cost = cfg.cost.terminate_cost
            reward += terminal_reward(tree, self.task, self.session, cfg.terminal_mode) - term_cost
            cost += term_cost
            done = exhausted = True
        self.done = done
        self.total_cost += cost
        return StepOutcome(reward, done, new_node, action, cost, exhausted)


class TrajectoryLog:
    """JSON-lines trajectory writer: a header per episode, then one record per step."""

    def __init__(self, stream: IO[str]):
        self.stream = stream

    def header(self, task: TaskInstance, seed: Optional[int], config: dict) -> None:
        self._write({"task_id": task.task_id, "seed": seed, "config": config})

    def step(self, step: int, outcome: StepOutcome, depth_limit: int, current_node: int) -> None:
        self._write({
            "step": step,
            "action_index": outcome.action.index(depth_limit),
            "action_kind": str(outcome.action),
            "reward": outcome.reward,
            "cost": outcome.cost,
            "current_node": current_node,
            "done": outcome.done,
        })

    def _write(self, rec: dict) -> None:
        self.stream.write(json.dumps(rec) + "\n")


def read_trajectories(stream: IO[str]) -> list[dict]:
    """Parse a trajectory log into [{'header': ..., 'steps': [...]}, ...]."""
    episodes: list[dict] = []
    for line in stream:
        if not line.strip():
            continue
        rec = json.loads(line)
        if "task_id" in rec:
            episodes.append({"header": rec, "steps": []})
        else:
            if not episodes:
                raise ValueError("step record before any episode header")
            episodes[-1]["steps"].append(rec)
    return episodes
