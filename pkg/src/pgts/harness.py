"""Per-task method runners and the comparison table they feed."""

from __future__ import annotations

import csv
import math
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from pgts.baselines import (
    MCTSConfig,
    aggregate,
    cot_self_consistency,
    greedy_chain,
    mcts_search,
    pgts_chains,
)
from pgts.mdp import EpisodeConfig, TreeSearchEnv
from pgts.policy import GraphPolicy
from pgts.stepgen import StepGenerator, TaskInstance, answers_match
from pgts.trainer import policy_chooser, run_episode

COMPARE_COLUMNS = ["method", "task_id", "correct", "traj_reward", "proposals", "tokens", "wall_ms"]
SUMMARY_TASK_ID = "*summary*"
NORMALIZER = "greedy"

_METHOD = re.compile(r"^(greedy|cot-sc|mcts-best|mcts-agg|mcts-oracle|pgts|pgts-sc)(\d+)?$")


@dataclass
class MethodContext:
    generator: StepGenerator
    depth_limit: int
    breadth_limit: int
    seed: int = 0
    policy: Optional[GraphPolicy] = None
    episode: EpisodeConfig = EpisodeConfig(terminal_mode="eval")
    mcts: MCTSConfig = MCTSConfig(breadth=2)
    sc_chains: int = 4


def parse_method(name: str) -> tuple[str, Optional[int]]:
    """``pgts-sc8`` -> ("pgts-sc", 8); bare names carry no count."""
    m = _METHOD.match(name)
    if m is None:
        raise ValueError(f"unknown method {name!r}")
    base, count = m.group(1), m.group(2)
    if count is not None and base not in ("cot-sc", "pgts-sc"):
        raise ValueError(f"method {base!r} takes no chain count")
    return base, int(count) if count else None


def needs_policy(name: str) -> bool:
    return parse_method(name)[0].startswith("pgts")


def run_method(name: str, task: TaskInstance, index: int, ctx: MethodContext) -> dict:
    """One comparison row. Each (seed, task index) pair gets its own rng stream."""
    base, count = parse_method(name)
    rng = np.random.default_rng([ctx.seed, index])
    session = ctx.generator.session(task)
    D, B = ctx.depth_limit, ctx.breadth_limit
    t0 = time.perf_counter()
    if base == "greedy":
        chain = greedy_chain(task, ctx.generator, D, session)
        answer, traj = chain.answer, chain.traj_reward
    elif base == "cot-sc":
        answer, chains = cot_self_consistency(task, ctx.generator, count or ctx.sc_chains, rng, D, B, session)
        traj = float(np.mean([c.traj_reward for c in chains]))
    elif base.startswith("mcts"):
        cfg = MCTSConfig(ctx.mcts.iterations, ctx.mcts.uct_c, B, oracle=base == "mcts-oracle")
        chains = mcts_search(task, ctx.generator, cfg, D, session)
        if not chains:
            answer, traj = None, 0.0
        else:
            answer = aggregate(chains, "best" if base == "mcts-best" else "weighted")
            traj = max(c.traj_reward for c in chains)
    elif base == "pgts":
        _require_policy(ctx)
        env = TreeSearchEnv(ctx.generator, D, B, ctx.episode)
        res = run_episode(env, task, policy_chooser(ctx.policy), rng, session=session)
        answer, traj = res.answer, res.traj_reward
    else:
        _require_policy(ctx)
        out = pgts_chains(ctx.policy, task, ctx.generator, count or ctx.sc_chains, rng, D, B,
                          ctx.episode, session)
        answer, traj = out.answer, float(np.mean([c.traj_reward for c in out.chains]))
    wall_ms = (time.perf_counter() - t0) * 1000.0
    proposals, tokens = session.cost.as_tuple()
    return {
        "method": name,
        "task_id": task.task_id,
        "correct": int(answers_match(answer, task.ground_truth)),
        "traj_reward": traj,
        "proposals": proposals,
        "tokens": tokens,
        "wall_ms": round(wall_ms, 3),
    }


def _require_policy(ctx: MethodContext) -> None:
    if ctx.policy is None:
        raise ValueError("PGTS methods need a policy checkpoint")


def run_methods(methods: Sequence[str], tasks: Sequence[TaskInstance], ctx: MethodContext,
                jobs: int = 1, sink: Optional[Callable[[dict], None]] = None) -> list[dict]:
    """Rows ordered by (method, task). ``sink`` sees rows in that same order."""
    for m in methods:
        parse_method(m)
    rows: list[dict] = []
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        for m in methods:
            futures = [pool.submit(run_method, m, t, i, ctx) for i, t in enumerate(tasks)]
            for fut in futures:
                row = fut.result()
                rows.append(row)
                if sink is not None:
                    sink(row)
    return rows


def summarize(rows: Sequence[dict]) -> dict:
    if not rows:
        raise ValueError("no rows to summarize")
    return {
        "success_rate": float(np.mean([float(r["correct"]) for r in rows])),
        "mean_traj_reward": float(np.mean([float(r["traj_reward"]) for r in rows])),
        "mean_proposals": float(np.mean([float(r["proposals"]) for r in rows])),
        "mean_tokens": float(np.mean([float(r["tokens"]) for r in rows])),
        "mean_wall_ms": float(np.mean([float(r["wall_ms"]) for r in rows])),
    }


def summary_row(method: str, rows: Sequence[dict]) -> dict:
    s = summarize(rows)
    return {
        "method": method,
        "task_id": SUMMARY_TASK_ID,
        "correct": s["success_rate"],
        "traj_reward": s["mean_traj_reward"],
        "proposals": s["mean_proposals"],
        "tokens": s["mean_tokens"],
        "wall_ms": s["mean_wall_ms"],
    }


def _ratio(x: float, base: float) -> float:
    if base == 0:
        return 1.0 if x == 0 else math.inf
    return x / base


def cost_ratios(summaries: dict[str, dict], baseline: dict) -> list[dict]:
    """Mean proposals and tokens of each method relative to ``baseline``."""
    return [
        {
            "method": m,
            "success_rate": s["success_rate"],
            "mean_proposals": s["mean_proposals"],
            "mean_tokens": s["mean_tokens"],
            "proposals_ratio": _ratio(s["mean_proposals"], baseline["mean_proposals"]),
            "tokens_ratio": _ratio(s["mean_tokens"], baseline["mean_tokens"]),
        }
        for m, s in summaries.items()
    ]


class CsvSink:
    """Serialized row writer; the header goes out with the first row."""

    def __init__(self, path: Path, columns: Sequence[str] = COMPARE_COLUMNS):
        self._f = open(path, "w", newline="")
        self._w = csv.DictWriter(self._f, fieldnames=list(columns))
        self._w.writeheader()

    def __call__(self, row: dict) -> None:
        self._w.writerow(row)
        self._f.flush()

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_rows(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
