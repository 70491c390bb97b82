"""Command-line entry point: ``pgts train | eval | compare | rollout``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from pgts.config import ConfigError, RunConfig, load_config, save_config
from pgts.harness import (
    NORMALIZER,
    CsvSink,
    MethodContext,
    cost_ratios,
    needs_policy,
    parse_method,
    run_methods,
    summarize,
    summary_row,
)
from pgts.mdp import EpisodeConfig, TrajectoryLog, TreeSearchEnv
from pgts.policy import GraphPolicy, PolicyError, load_checkpoint
from pgts.stepgen import GenerationError
from pgts.trainer import policy_chooser, run_episode, train
from pgts.tree import save_tree

log = logging.getLogger("pgts")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class CommandError(RuntimeError):
    pass


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _eval_episode(cfg: RunConfig) -> EpisodeConfig:
    return replace(cfg.episode, terminal_mode="eval")


def _load_policy(cfg: RunConfig, checkpoint: Optional[str]) -> GraphPolicy:
    if checkpoint is None:
        raise CommandError("a --checkpoint is required for PGTS methods")
    if not Path(checkpoint).exists():
        raise CommandError(f"checkpoint not found: {checkpoint}")
    policy, _ = load_checkpoint(checkpoint)
    want = cfg.policy_config()
    if policy.config.num_actions != want.num_actions or policy.config.input_dim != want.input_dim:
        raise CommandError(f"checkpoint {checkpoint} does not fit depth/feature settings of the config")
    return policy


def _context(cfg: RunConfig, policy: Optional[GraphPolicy]) -> MethodContext:
    return MethodContext(
        generator=cfg.make_generator(),
        depth_limit=cfg.depth_limit,
        breadth_limit=cfg.breadth_limit,
        seed=cfg.seed,
        policy=policy,
        episode=_eval_episode(cfg),
        mcts=cfg.mcts,
        sc_chains=cfg.sc_chains[0],
    )


def cmd_train(cfg: RunConfig, checkpoint: Optional[str] = None) -> int:
    out = _out_dir(cfg)
    start = 0
    if checkpoint:
        policy = _load_policy(cfg, checkpoint)
        _, header = load_checkpoint(checkpoint)
        start = int(header.get("episodes_seen", 0))
        log.info("resuming from %s at %d episodes", checkpoint, start)
    else:
        policy = GraphPolicy(cfg.policy_config(), seed=cfg.seed)
    save_config(cfg, out / "config.json")
    res = train(cfg.train, cfg.train_tasks(), cfg.make_generator(), policy, cfg.episode,
                cfg.depth_limit, cfg.breadth_limit, eval_tasks=cfg.eval_tasks(),
                out_dir=out, run_id=f"train-s{cfg.seed}", start_episodes=start)
    print(json.dumps({
        "episodes_seen": res.episodes_seen,
        "curve": str(out / f"train-s{cfg.seed}-curve.csv"),
        "checkpoints": [str(p) for p in res.checkpoints],
        "failed_episodes": len(res.failures),
    }))
    return EXIT_OK


def cmd_eval(cfg: RunConfig, checkpoint: Optional[str], method: str, jobs: int = 1) -> int:
    policy = _load_policy(cfg, checkpoint) if needs_policy(method) else None
    out = _out_dir(cfg)
    with CsvSink(out / f"eval-{method}.csv") as sink:
        rows = run_methods([method], cfg.eval_tasks(), _context(cfg, policy), jobs, sink)
    s = summarize(rows)
    summary = {"method": method, "success_rate": s["success_rate"],
               "mean_proposals": s["mean_proposals"], "mean_tokens": s["mean_tokens"]}
    (out / f"eval-{method}-summary.json").write_text(json.dumps(summary) + "\n")
    print(json.dumps(summary))
    return EXIT_OK


def cmd_compare(cfg: RunConfig, checkpoint: Optional[str], methods: Sequence[str],
                jobs: int = 1) -> int:
    if len(methods) < 2:
        raise CommandError("compare needs at least two --method values")
    policy = _load_policy(cfg, checkpoint) if any(needs_policy(m) for m in methods) else None
    ctx = _context(cfg, policy)
    tasks = cfg.eval_tasks()
    out = _out_dir(cfg)
    with CsvSink(out / "compare.csv") as sink:
        rows = run_methods(methods, tasks, ctx, jobs, sink)
        summaries = {}
        for m in methods:
            mine = [r for r in rows if r["method"] == m]
            sink(summary_row(m, mine))
            summaries[m] = summarize(mine)
    baseline = summaries.get(NORMALIZER)
    if baseline is None:
        baseline = summarize(run_methods([NORMALIZER], tasks, ctx, jobs))
    ratios = cost_ratios(summaries, baseline)
    with CsvSink(out / "compare-ratios.csv", list(ratios[0])) as rsink:
        for r in ratios:
            rsink(r)
    for r in ratios:
        print(f"{r['method']:>12}  success {r['success_rate']:.3f}  proposals {r['mean_proposals']:.2f} "
              f"(x{r['proposals_ratio']:.2f})  tokens {r['mean_tokens']:.1f} (x{r['tokens_ratio']:.2f})")
    return EXIT_OK


def cmd_rollout(cfg: RunConfig, checkpoint: Optional[str], task_id: str) -> int:
    tasks = {t.task_id: t for t in cfg.eval_tasks() + cfg.train_tasks()}
    if task_id not in tasks:
        raise CommandError(f"unknown task {task_id!r}")
    task = tasks[task_id]
    if checkpoint:
        policy = _load_policy(cfg, checkpoint)
    else:
        log.warning("no checkpoint given; rolling out a freshly initialised policy")
        policy = GraphPolicy(cfg.policy_config(), seed=cfg.seed)
    out = _out_dir(cfg)
    env = TreeSearchEnv(cfg.make_generator(), cfg.depth_limit, cfg.breadth_limit, _eval_episode(cfg))
    stem = out / f"rollout-{task_id}"
    with open(f"{stem}.trajectory.jsonl", "w") as f:
        tlog = TrajectoryLog(f)
        tlog.header(task, cfg.seed, cfg.to_dict())
        res = run_episode(env, task, policy_chooser(policy), np.random.default_rng(cfg.seed), log=tlog)
    print(f"task {task.task_id}: {task.prompt}")
    for t, o in enumerate(res.outcomes, 1):
        node = res.tree.node(o.new_node).content if o.new_node is not None else "-"
        print(f"{t:3d}  {str(o.action):<13} reward {o.reward:+.4f}  node {o.new_node if o.new_node is not None else '-'}  {node}")
    if res.outcomes and res.outcomes[-1].budget_exhausted:
        print(f"step budget of {cfg.episode.max_steps} exhausted")
    print(f"answer {res.answer!r}  correct {res.correct}  return {res.total_reward:.4f}")
    res.tree.validate()
    save_tree(res.tree, f"{stem}.nodes.jsonl", f"{stem}.features.bin")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--jobs", type=int, default=1, help="parallel tasks during evaluation")
    common.add_argument("--out", help="output directory (overrides config out_dir)")
    common.add_argument("--checkpoint", help="policy checkpoint")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pgts", description="Policy-guided tree search over reasoning steps.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a search policy with PPO")
    ev = sub.add_parser("eval", parents=[common], help="evaluate one method on the eval tasks")
    ev.add_argument("--method", default="pgts")
    cmp_ = sub.add_parser("compare", parents=[common], help="compare methods and report cost ratios")
    cmp_.add_argument("--method", action="append", dest="methods", required=True)
    ro = sub.add_parser("rollout", parents=[common], help="print one policy episode")
    ro.add_argument("--task-id", required=True)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        if args.command == "train":
            return cmd_train(cfg, args.checkpoint)
        if args.command == "eval":
            parse_method(args.method)
            return cmd_eval(cfg, args.checkpoint, args.method, args.jobs)
        if args.command == "compare":
            for m in args.methods:
                parse_method(m)
            return cmd_compare(cfg, args.checkpoint, args.methods, args.jobs)
        return cmd_rollout(cfg, args.checkpoint, args.task_id)
    except (ConfigError, ValueError) as exc:
        print(f"pgts: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CommandError, GenerationError, PolicyError, OSError) as exc:
        print(f"pgts: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
