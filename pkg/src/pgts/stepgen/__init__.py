from pgts.stepgen.base import (
    DEFAULT_ANSWER_MARKER,
    GenerationCost,
    GenerationError,
    StepGenerator,
    StepProposal,
    StepSession,
    TaskInstance,
    answers_match,
    detect_final,
    generation_cost,
    load_tasks,
    save_tasks,
    split_steps,
)
from pgts.stepgen.synthetic import (
    SyntheticGenerator,
    SyntheticTaskConfig,
    exhaustive_best_leaf,
    make_task,
    planted_chain,
    synthetic_suite,
)

__all__ = [
    "DEFAULT_ANSWER_MARKER",
    "GenerationCost",
    "GenerationError",
    "StepGenerator",
    "StepProposal",
    "StepSession",
    "SyntheticGenerator",
    "SyntheticTaskConfig",
    "TaskInstance",
    "answers_match",
    "detect_final",
    "exhaustive_best_leaf",
    "generation_cost",
    "load_tasks",
    "make_task",
    "planted_chain",
    "save_tasks",
    "split_steps",
    "synthetic_suite",
]
