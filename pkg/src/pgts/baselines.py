"""Comparison strategies: UCT search, single chains, and answer aggregation."""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from pgts.mdp import EpisodeConfig, TreeSearchEnv
from pgts.policy import GraphPolicy
from pgts.stepgen.base import (
    GenerationError,
    StepGenerator,
    StepSession,
    TaskInstance,
    answers_match,
)
from pgts.trainer import policy_chooser, run_episode
from pgts.tree import ReasoningTree

logger = logging.getLogger(__name__)

AGGREGATION_MODES = ("majority", "weighted", "best")


@dataclass(frozen=True)
class MCTSConfig:
    iterations: int = 16
    uct_c: float = math.sqrt(2)
    breadth: int = 4
    oracle: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.uct_c < 0:
            raise ValueError("uct_c must be >= 0")
        if self.breadth < 1:
            raise ValueError("breadth must be >= 1")


@dataclass
class ChainResult:
    answer: Optional[str]
    traj_reward: float
    steps: list[str]
    generation_cost: tuple[int, int]


def uct_score(q: float, parent_visits: int, child_visits: int, c: float) -> float:
    if child_visits == 0:
        return math.inf
    return q + c * math.sqrt(math.log(parent_visits) / child_visits)


def _chain_from_tree(tree: ReasoningTree, node_id: int, session: StepSession) -> ChainResult:
    node = tree.node(node_id)
    edges = tree.path_edge_rewards(node_id)
    answer = session.extract_answer(node.content) if node.is_final else None
    return ChainResult(
        answer=answer,
        traj_reward=float(np.mean(edges)) if edges else 0.0,
        steps=tree.path_contents(node_id)[1:],
        generation_cost=session.cost.as_tuple(),
    )


class MCTS:
    """UCT over a reasoning tree with step likelihoods as the only signal.

    Each simulation selects through fully expanded nodes, adds one new child
    where there is room, then rolls out by always taking a fresh first child
    until a final node (or the depth limit). Rollout nodes stay in the tree.
    The backed-up value is the leaf chain's mean step reward, plus 1 when
    ``oracle`` is set and the leaf's answer matches the ground truth.
    """

    ORACLE_BONUS = 1.0

    def __init__(self, task: TaskInstance, generator: StepGenerator, config: MCTSConfig,
                 depth_limit: int, session: Optional[StepSession] = None):
        self.task = task
        self.config = config
        self.session = session or generator.session(task)
        self.tree = ReasoningTree(task.prompt, self.session.root_features(), depth_limit, config.breadth)
        self.visits: list[int] = [0]
        self.value_sum: list[float] = [0.0]
        self.simulations: list[dict] = []  # {"path": [...], "value": v}
        self.chains: list[ChainResult] = []

    def q(self, node_id: int) -> float:
        n = self.visits[node_id]
        return self.value_sum[node_id] / n if n else 0.0

    def _terminal(self, node_id: int) -> bool:
        node = self.tree.node(node_id)
        return node.is_final or node.depth >= self.tree.depth_limit

    def _new_child(self, node_id: int) -> int:
        tree = self.tree
        proposal = self.session.propose_step(tree.path_contents(node_id), len(tree.node(node_id).children))
        child = tree.add_child(node_id, proposal)
        self.visits.append(0)
        self.value_sum.append(0.0)
        return child

    def select_child(self, node_id: int) -> int:
        children = self.tree.node(node_id).children
        n_parent = self.visits[node_id]
        scores = [uct_score(self.q(c), n_parent, self.visits[c], self.config.uct_c) for c in children]
        return children[int(np.argmax(scores))]  # argmax keeps the leftmost tie

    def simulate(self) -> Optional[ChainResult]:
        node = 0
        try:
            while not self._terminal(node) and not self.tree.has_room(node):
                node = self.select_child(node)
            if not self._terminal(node):
                node = self._new_child(node)
                while not self._terminal(node):
                    node = self._new_child(node)
        except GenerationError as exc:
            logger.error("simulation on task %s aborted: %s", self.task.task_id, exc)
            return None
        chain = _chain_from_tree(self.tree, node, self.session)
        value = chain.traj_reward
        if self.config.oracle and answers_match(chain.answer, self.task.ground_truth):
            value += self.ORACLE_BONUS
        path = self.tree.path_to_root(node)
        for v in path:
            self.visits[v] += 1
            self.value_sum[v] += value
        self.simulations.append({"path": path, "value": value})
        self.chains.append(chain)
        return chain

    def search(self) -> list[ChainResult]:
        for _ in range(self.config.iterations):
            self.simulate()
        return self.chains


def mcts_search(task: TaskInstance, generator: StepGenerator, config: MCTSConfig,
                depth_limit: int, session: Optional[StepSession] = None) -> list[ChainResult]:
    """One ChainResult per completed simulation."""
    return MCTS(task, generator, config, depth_limit, session).search()


def greedy_chain(task: TaskInstance, generator: StepGenerator, depth_limit: int,
                 session: Optional[StepSession] = None,
                 rng: Optional[np.random.Generator] = None, breadth: int = 1) -> ChainResult:
    """A single chain, no branching.

    With ``rng`` and ``breadth > 1`` each step's sibling index is drawn
    uniformly, which is how distinct chains are sampled from a generator that
    is deterministic per sibling index.
    """
    session = session or generator.session(task)
    path, rewards = [task.prompt], []
    final = False
    while not final and len(rewards) < depth_limit:
        idx = int(rng.integers(breadth)) if rng is not None and breadth > 1 else 0
        p = session.propose_step(path, idx)
        path.append(p.content)
        rewards.append(p.step_reward)
        final = p.is_final
    return ChainResult(
        answer=session.extract_answer(path[-1]) if final else None,
        traj_reward=float(np.mean(rewards)) if rewards else 0.0,
        steps=path[1:],
        generation_cost=session.cost.as_tuple(),
    )


def cot_self_consistency(task: TaskInstance, generator: StepGenerator, n_chains: int,
                         rng: np.random.Generator, depth_limit: int, breadth: int,
                         session: Optional[StepSession] = None) -> tuple[Optional[str], list[ChainResult]]:
    session = session or generator.session(task)
    chains = [greedy_chain(task, generator, depth_limit, session, rng, breadth) for _ in range(n_chains)]
    return aggregate(chains, "majority"), chains


def aggregate(chains: Sequence[ChainResult], mode: str) -> Optional[str]:
    """Vote over chain answers; ties go to the answer generated first.

    Chains without an answer do not vote unless no chain has one.
    """
    if not chains:
        raise ValueError("cannot aggregate an empty list of chains")
    if mode not in AGGREGATION_MODES:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    answered = [c for c in chains if c.answer is not None]
    if not answered:
        return None
    if mode == "best":
        best = max(range(len(answered)), key=lambda i: (answered[i].traj_reward, -i))
        return answered[best].answer
    tally: "OrderedDict[str, float]" = OrderedDict()
    for c in answered:
        tally[c.answer] = tally.get(c.answer, 0.0) + (1.0 if mode == "majority" else c.traj_reward)
    top = max(tally.values())
    return next(a for a, v in tally.items() if v == top)


@dataclass
class PGTSChains:
    answer: Optional[str]
    chains: list[ChainResult] = field(default_factory=list)


def pgts_chains(policy: GraphPolicy, task: TaskInstance, generator: StepGenerator, n_chains: int,
                rng: np.random.Generator, depth_limit: int, breadth_limit: int,
                episode_config: EpisodeConfig = EpisodeConfig(terminal_mode="eval"),
                session: Optional[StepSession] = None, greedy: bool = False) -> PGTSChains:
    """``n_chains`` independent policy-guided episodes, aggregated by weighted vote.

    Episodes draw from ``rng`` one after another, so each gets its own stream
    and ``n_chains=1`` reproduces a single episode on the same generator.
    """
    if n_chains < 1:
        raise ValueError("n_chains must be >= 1")
    session = session or generator.session(task)
    env = TreeSearchEnv(generator, depth_limit, breadth_limit, episode_config)
    choose = policy_chooser(policy, greedy)
    chains = []
    for _ in range(n_chains):
        res = run_episode(env, task, choose, rng, session=session)
        chains.append(_chain_from_tree(res.tree, res.tree.current, session))
    return PGTSChains(aggregate(chains, "weighted"), chains)


def pgts_self_consistency(policy: GraphPolicy, task: TaskInstance, generator: StepGenerator,
                          n_chains: int, rng: np.random.Generator, depth_limit: int,
                          breadth_limit: int, **kwargs) -> Optional[str]:
    return pgts_chains(policy, task, generator, n_chains, rng, depth_limit, breadth_limit, **kwargs).answer
