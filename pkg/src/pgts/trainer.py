"""PPO training of the graph policy on tree-search episodes."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from pgts.mdp import EpisodeConfig, SearchAction, StepOutcome, TrajectoryLog, TreeSearchEnv
from pgts.policy import (
    GraphBatch,
    GraphPolicy,
    LossSpec,
    PolicyError,
    collate,
    evaluate,
    graph_batch,
    ppo_loss,
    sample_index,
    save_checkpoint,
)
from pgts.stepgen.base import GenerationError, StepGenerator, StepSession, TaskInstance, answers_match
from pgts.tree import ReasoningTree, compute_constraints

logger = logging.getLogger(__name__)

CURVE_COLUMNS = [
    "batch", "episodes_seen", "mean_traj_reward", "mean_entropy",
    "policy_loss", "value_loss", "eval_success_rate",
]


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    entropy_weight: float = 0.01
    lr_policy: float = 3e-4
    lr_value: float = 3e-4
    epochs_per_batch: int = 4
    minibatch_size: int = 64
    episodes_per_batch: int = 16
    total_episodes: int = 1000
    seed: int = 0
    advantage: str = "gae"  # or "plain": A = G - V
    normalize_advantages: bool = True
    optimizer: str = "sgd"  # or "adam"
    max_grad_norm: float = 0.0  # 0 disables gradient-norm clipping
    lr_anneal: bool = False  # decay learning rates linearly to 0 over total_episodes
    eval_every: int = 0  # batches; 0 disables periodic evaluation
    checkpoint_every: int = 0  # batches; 0 keeps only the final checkpoint

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise ValueError("clip must lie in (0, 1)")
        if not (0 < self.gamma <= 1 and 0 < self.gae_lambda <= 1):
            raise ValueError("gamma and gae_lambda must lie in (0, 1]")
        if self.advantage not in ("gae", "plain"):
            raise ValueError(f"unknown advantage estimator {self.advantage!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if min(self.epochs_per_batch, self.minibatch_size, self.episodes_per_batch) < 1:
            raise ValueError("epochs, minibatch size and episodes per batch must be >= 1")
        if self.max_grad_norm < 0:
            raise ValueError("max_grad_norm must be >= 0")
        if self.total_episodes < 0 or self.lr_policy <= 0 or self.lr_value < 0:
            raise ValueError("total_episodes and learning rates must be non-negative")


@dataclass
class Transition:
    state: GraphBatch
    action_index: int
    log_prob_old: float
    reward: float
    value_old: float
    done: bool


@dataclass
class EpisodeResult:
    task: TaskInstance
    tree: ReasoningTree
    transitions: list[Transition]
    outcomes: list[StepOutcome]
    answer: Optional[str]
    correct: bool
    session: StepSession

    @property
    def total_reward(self) -> float:
        return float(sum(o.reward for o in self.outcomes))

    @property
    def traj_reward(self) -> float:
        """Mean step reward along the final chain."""
        edges = self.tree.path_edge_rewards(self.tree.current)
        return float(np.mean(edges)) if edges else 0.0


@dataclass
class RolloutBuffer:
    transitions: list[Transition] = field(default_factory=list)
    episodes: list[tuple[int, int]] = field(default_factory=list)  # [start, end) per episode
    episode_rewards: list[float] = field(default_factory=list)
    results: list[EpisodeResult] = field(default_factory=list)
    failures: list[tuple[str, str]] = field(default_factory=list)  # (task_id, error)

    def __len__(self) -> int:
        return len(self.transitions)

    def add_episode(self, result: EpisodeResult) -> None:
        start = len(self.transitions)
        self.transitions.extend(result.transitions)
        self.episodes.append((start, len(self.transitions)))
        self.episode_rewards.append(result.total_reward)
        self.results.append(result)


# A chooser maps the current tree to (action index, log prob, value, snapshot).
Chooser = Callable[[ReasoningTree, np.random.Generator], tuple[int, float, float, Optional[GraphBatch]]]


def policy_chooser(policy: GraphPolicy, greedy: bool = False) -> Chooser:
    k = policy.config.rwse_steps

    def choose(tree, rng):
        batch = graph_batch(tree, k)
        dist, v = evaluate(policy, batch)
        i = int(np.argmax(dist.probs)) if greedy else sample_index(dist, rng)
        return i, float(dist.log_probs[i]), v, batch

    return choose


def random_chooser(tree: ReasoningTree, rng: np.random.Generator):
    valid = np.flatnonzero(compute_constraints(tree))
    return int(rng.choice(valid)), -math.log(len(valid)), 0.0, None


def run_episode(
    env: TreeSearchEnv,
    task: TaskInstance,
    choose: Chooser,
    rng: np.random.Generator,
    session: Optional[StepSession] = None,
    log: Optional[TrajectoryLog] = None,
) -> EpisodeResult:
    tree = env.reset(task, session)
    transitions, outcomes = [], []
    while not env.done:
        i, logp, v, snap = choose(tree, rng)
        out = env.step(SearchAction.from_index(i, env.depth_limit))
        outcomes.append(out)
        if snap is not None:
            transitions.append(Transition(snap, i, logp, out.reward, v, out.done))
        if log is not None:
            log.step(len(outcomes), out, env.depth_limit, tree.current)
    cur = tree.current_node
    answer = env.session.extract_answer(cur.content) if cur.is_final else None
    return EpisodeResult(task, tree, transitions, outcomes, answer,
                         answers_match(answer, task.ground_truth), env.session)


def collect_rollouts(
    policy: GraphPolicy,
    tasks: Sequence[TaskInstance],
    generator: StepGenerator,
    episode_config: EpisodeConfig,
    n_episodes: int,
    rng: np.random.Generator,
    depth_limit: int,
    breadth_limit: int,
) -> RolloutBuffer:
    """Play ``n_episodes`` episodes, cycling through ``tasks`` in order."""
    buf = RolloutBuffer()
    if n_episodes and not tasks:
        raise ValueError("task pool is empty")
    env = TreeSearchEnv(generator, depth_limit, breadth_limit, episode_config)
    choose = policy_chooser(policy)
    for i in range(n_episodes):
        task = tasks[i % len(tasks)]
        try:
            buf.add_episode(run_episode(env, task, choose, rng))
        except GenerationError as exc:
            logger.error("episode on task %s aborted: %s", task.task_id, exc)
            buf.failures.append((task.task_id, str(exc)))
    return buf


def compute_returns_advantages(buffer: RolloutBuffer, config: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-transition returns and (unnormalised) advantages, episode by episode."""
    n = len(buffer)
    returns, adv = np.zeros(n), np.zeros(n)
    for start, end in buffer.episodes:
        if end > start and not buffer.transitions[end - 1].done:
            raise ValueError("episode in buffer is incomplete")
        rewards = np.array([t.reward for t in buffer.transitions[start:end]])
        values = np.array([t.value_old for t in buffer.transitions[start:end]])
        if config.advantage == "plain":
            g = 0.0
            for t in reversed(range(end - start)):
                g = rewards[t] + config.gamma * g
                returns[start + t] = g
            adv[start:end] = returns[start:end] - values
        else:
            next_v = np.append(values[1:], 0.0)
            deltas = rewards + config.gamma * next_v - values
            a = 0.0
            for t in reversed(range(end - start)):
                a = deltas[t] + config.gamma * config.gae_lambda * a
                adv[start + t] = a
            returns[start:end] = adv[start:end] + values
    return returns, adv


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    minibatches: int
    first_ratios: np.ndarray  # ratios of the first minibatch before any step


class PPOUpdater:
    """Holds optimiser state across batches; each update returns a new policy."""

    def __init__(self, config: TrainConfig, rng: Optional[np.random.Generator] = None):
        self.config = config
        self.rng = rng or np.random.default_rng(config.seed)
        self._opt_state: Optional[dict] = None

    def _optimizer(self, policy: GraphPolicy, lr: float) -> torch.optim.Optimizer:
        c = self.config
        if c.optimizer == "adam":
            opt = torch.optim.Adam(policy.parameters(), lr=lr)
        else:
            opt = torch.optim.SGD(policy.parameters(), lr=lr)
        if self._opt_state is not None:
            opt.load_state_dict(self._opt_state)
            for group in opt.param_groups:
                group["lr"] = lr
        return opt

    def update(self, policy: GraphPolicy, buffer: RolloutBuffer, returns: np.ndarray,
               advantages: np.ndarray, lr_scale: float = 1.0) -> tuple[GraphPolicy, UpdateStats]:
        c = self.config
        new = copy.deepcopy(policy)
        opt = self._optimizer(new, c.lr_policy * lr_scale)
        n = len(buffer)
        adv = advantages.astype(np.float64)
        if c.normalize_advantages and n > 1:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        states = [t.state for t in buffer.transitions]
        actions = np.array([t.action_index for t in buffer.transitions])
        logp_old = np.array([t.log_prob_old for t in buffer.transitions])
        # Backbone is shared: weighting the value loss by lr_value / lr_policy
        # makes one SGD step equal to separate steps with each learning rate.
        value_weight = c.lr_value / c.lr_policy
        p_losses, v_losses, ents, first_ratios, count = [], [], [], None, 0
        for _ in range(c.epochs_per_batch if n else 0):
            order = self.rng.permutation(n)
            for lo in range(0, n, c.minibatch_size):
                idx = order[lo:lo + c.minibatch_size]
                spec = LossSpec(actions[idx], logp_old[idx], adv[idx], returns[idx], c.clip,
                                1.0, value_weight, c.entropy_weight)
                terms = ppo_loss(new, collate([states[i] for i in idx]), spec)
                if not bool(torch.isfinite(terms.total)):
                    raise PolicyError(f"non-finite loss in minibatch {count}: {float(terms.total)}")
                if first_ratios is None:
                    first_ratios = terms.ratio.detach().numpy().copy()
                opt.zero_grad()
                terms.total.backward()
                if c.max_grad_norm > 0:
                    torch.nn.utils.clip_grad_norm_(new.parameters(), c.max_grad_norm)
                opt.step()
                p_losses.append(float(terms.policy.detach()))
                v_losses.append(float(terms.value.detach()))
                ents.append(float(terms.entropy.detach()))
                count += 1
        self._opt_state = copy.deepcopy(opt.state_dict())
        mean = lambda xs: float(np.mean(xs)) if xs else float("nan")
        stats = UpdateStats(mean(p_losses), mean(v_losses), mean(ents), count,
                            first_ratios if first_ratios is not None else np.zeros(0))
        return new, stats


def ppo_update(policy: GraphPolicy, buffer: RolloutBuffer, config: TrainConfig,
               rng: Optional[np.random.Generator] = None) -> tuple[GraphPolicy, UpdateStats]:
    """One-off PPO update with fresh optimiser state."""
    returns, adv = compute_returns_advantages(buffer, config)
    return PPOUpdater(config, rng).update(policy, buffer, returns, adv)


@dataclass
class EvalSummary:
    success_rate: float
    mean_proposals: float
    mean_tokens: float
    results: list[EpisodeResult]


def evaluate_chooser(
    choose_for: Callable[[int], Chooser],
    tasks: Sequence[TaskInstance],
    generator: StepGenerator,
    episode_config: EpisodeConfig,
    depth_limit: int,
    breadth_limit: int,
    seed: int,
) -> EvalSummary:
    env = TreeSearchEnv(generator, depth_limit, breadth_limit, episode_config)
    results = []
    for i, task in enumerate(tasks):
        rng = np.random.default_rng([seed, i])
        results.append(run_episode(env, task, choose_for(i), rng))
    costs = np.array([r.session.cost.as_tuple() for r in results], dtype=float).reshape(-1, 2)
    return EvalSummary(
        float(np.mean([r.correct for r in results])) if results else 0.0,
        float(costs[:, 0].mean()) if results else 0.0,
        float(costs[:, 1].mean()) if results else 0.0,
        results,
    )


def evaluate_policy(policy: GraphPolicy, tasks, generator, episode_config, depth_limit,
                    breadth_limit, seed: int = 0, greedy: bool = False) -> EvalSummary:
    choose = policy_chooser(policy, greedy)
    return evaluate_chooser(lambda _: choose, tasks, generator, episode_config,
                            depth_limit, breadth_limit, seed)


def evaluate_random(tasks, generator, episode_config, depth_limit, breadth_limit, seed: int = 0) -> EvalSummary:
    return evaluate_chooser(lambda _: random_chooser, tasks, generator, episode_config,
                            depth_limit, breadth_limit, seed)


@dataclass
class TrainResult:
    policy: GraphPolicy
    curve: list[dict]
    checkpoints: list[Path]
    episodes_seen: int
    failures: list[tuple[str, str]]


def train(
    config: TrainConfig,
    tasks: Sequence[TaskInstance],
    generator: StepGenerator,
    policy: GraphPolicy,
    episode_config: EpisodeConfig,
    depth_limit: int,
    breadth_limit: int,
    eval_tasks: Sequence[TaskInstance] = (),
    out_dir: Optional[Path] = None,
    run_id: str = "run",
    start_episodes: int = 0,
) -> TrainResult:
    """Alternate rollout collection and PPO updates until ``total_episodes``.

    Tasks are visited in a seeded shuffled order, so with
    ``total_episodes == len(tasks)`` each task is seen once. ``start_episodes``
    resumes a run: that many tasks of the order are skipped.
    """
    rng = np.random.default_rng(config.seed)
    order = [tasks[i] for i in rng.permutation(len(tasks))] if tasks else []
    updater = PPOUpdater(config, np.random.default_rng([config.seed, 1]))
    curve, ckpts, failures = [], [], []
    seen = start_episodes
    batch = 0
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    while seen < config.total_episodes:
        n = min(config.episodes_per_batch, config.total_episodes - seen)
        chunk = [order[(seen + j) % len(order)] for j in range(n)]
        buf = collect_rollouts(policy, chunk, generator, episode_config, n, rng,
                               depth_limit, breadth_limit)
        failures += buf.failures
        returns, adv = compute_returns_advantages(buf, config)
        scale = 1.0 - seen / config.total_episodes if config.lr_anneal else 1.0
        policy, stats = updater.update(policy, buf, returns, adv, scale)
        seen += n
        batch += 1
        row = {
            "batch": batch,
            "episodes_seen": seen,
            "mean_traj_reward": float(np.mean(buf.episode_rewards)) if buf.episode_rewards else float("nan"),
            "mean_entropy": stats.entropy,
            "policy_loss": stats.policy_loss,
            "value_loss": stats.value_loss,
            "eval_success_rate": "",
        }
        last = seen >= config.total_episodes
        if eval_tasks and config.eval_every and (batch % config.eval_every == 0 or last):
            ev = evaluate_policy(policy, eval_tasks, generator,
                                 _eval_config(episode_config), depth_limit, breadth_limit,
                                 seed=config.seed)
            row["eval_success_rate"] = ev.success_rate
        curve.append(row)
        logger.info("batch %d episodes %d reward %.3f entropy %.3f", batch, seen,
                    row["mean_traj_reward"], stats.entropy)
        if out_dir is not None and (last or (config.checkpoint_every and batch % config.checkpoint_every == 0)):
            path = out_dir / f"{run_id}-{seen}.ckpt"
            save_checkpoint(policy, path, episodes_seen=seen, run_id=run_id, train_seed=config.seed)
            ckpts.append(path)
    if out_dir is not None:
        write_curve(curve, out_dir / f"{run_id}-curve.csv")
    return TrainResult(policy, curve, ckpts, seen, failures)


def _eval_config(cfg: EpisodeConfig) -> EpisodeConfig:
    return EpisodeConfig(cfg.cost, cfg.max_steps, cfg.discount, "eval")


def write_curve(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CURVE_COLUMNS)
        w.writeheader()
        w.writerows(rows)


def read_curve(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def smoothed(values: Sequence[float], window: int = 5) -> np.ndarray:
    """Trailing moving average."""
    v = np.asarray(values, dtype=float)
    c = np.cumsum(np.insert(v, 0, 0.0))
    out = np.empty_like(v)
    for i in range(len(v)):
        lo = max(0, i - window + 1)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out
