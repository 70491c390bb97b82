"""Shared builders and independent oracles for the test suite."""

from __future__ import annotations

import numpy as np

from pgts.stepgen import GenerationCost, GenerationError, StepProposal, detect_final
from pgts.tree import ReasoningTree, TreeError

F = 4


def proposal(reward=0.5, final=False, content="step", f=F, feats=None) -> StepProposal:
    feats = np.zeros(f) if feats is None else np.asarray(feats, dtype=float)
    return StepProposal(content, feats, reward, final)


def make_tree(D=4, B=2, f=F, root_feats=None) -> ReasoningTree:
    return ReasoningTree("prompt", np.zeros(f) if root_feats is None else root_feats, D, B)


def chain(tree: ReasoningTree, rewards, parent=0, final_last=False) -> list[int]:
    ids = []
    for i, r in enumerate(rewards):
        parent = tree.add_child(parent, proposal(r, final=final_last and i == len(rewards) - 1))
        ids.append(parent)
    return ids


def random_tree(rng: np.random.Generator, D=None, B=None, max_nodes=None, f=F) -> ReasoningTree:
    """Random well-formed tree with a random current node; finals sprinkled in."""
    D = D or int(rng.integers(1, 7))
    B = B or int(rng.integers(1, 5))
    tree = ReasoningTree("p", rng.standard_normal(f), D, B)
    target = int(rng.integers(1, max_nodes or 25))
    for _ in range(target * 3):
        if len(tree) >= target:
            break
        parent = int(rng.integers(len(tree)))
        node = tree.node(parent)
        if node.is_final or node.depth >= D or len(node.children) >= B:
            continue
        tree.add_child(parent, StepProposal(f"s{len(tree)}", rng.standard_normal(f),
                                            float(rng.random()), bool(rng.random() < 0.2)))
    tree.current = int(rng.integers(len(tree)))
    return tree


def random_episode(env, task, rng):
    """Uniformly random valid actions until the episode ends."""
    from pgts.mdp import SearchAction
    from pgts.tree import compute_constraints

    tree = env.reset(task)
    outcomes = []
    while not env.done:
        valid = np.flatnonzero(compute_constraints(tree))
        a = SearchAction.from_index(int(rng.choice(valid)), env.depth_limit)
        outcomes.append(env.step(a))
    return tree, outcomes


def brute_force_constraints(tree: ReasoningTree) -> np.ndarray:
    """Validity of each of the D+2 actions, found by attempting it on a clone.

    Expand attaches under the current node, Branch under its parent, and
    Backtrack(k) under the parent of the ancestor k levels up. Terminate is
    allowed at a final node or at full depth. Root has no siblings, so any
    move that would attach beside the root is rejected.
    """
    D = tree.depth_limit
    cur = tree.current_node
    path = tree.path_to_root(cur.id)
    bits = np.zeros(D + 2, dtype=np.int8)

    def attempt(parent) -> bool:
        if parent is None:
            return False
        t = tree.clone()
        try:
            t.add_child(parent, proposal(0.5, f=tree.feature_matrix().shape[1]))
        except TreeError:
            return False
        return True

    bits[0] = attempt(cur.id)
    bits[1] = attempt(cur.parent)
    for k in range(1, D):
        target_depth = cur.depth - k
        if target_depth < 1:
            continue  # the ancestor would be the root (or above it)
        anc = path[target_depth]
        bits[1 + k] = attempt(tree.node(anc).parent)
    bits[D + 1] = cur.is_final or cur.depth == D
    return bits


def dense_rwse(tree: ReasoningTree, k_max: int) -> np.ndarray:
    """Diagonal of powers of Deg^-1 Adj by explicit matrix powers."""
    n = len(tree)
    if n == 1:
        return np.zeros((1, k_max))
    A = np.zeros((n, n))
    for u, v, _ in tree.edges():
        A[u, v] = A[v, u] = 1.0
    M = A / A.sum(axis=1, keepdims=True)
    return np.stack([np.diag(np.linalg.matrix_power(M, j)) for j in range(1, k_max + 1)], axis=1)


class ScriptedSession:
    """Returns queued step rewards; content records the sibling index path."""

    def __init__(self, task, rewards, f=F, final_at_depth=None):
        self.task = task
        self.rewards = list(rewards)
        self.f = f
        self.final_at_depth = final_at_depth
        self.cost = GenerationCost()

    def root_features(self):
        return np.zeros(self.f)

    def propose_step(self, path, sibling_index):
        self.cost.proposals += 1
        r = self.rewards.pop(0)
        final = self.final_at_depth is not None and len(path) == self.final_at_depth
        content = f"{path[-1]}/{sibling_index}"
        if final:
            content += " The answer is 42."
        return StepProposal(content, np.full(self.f, r), r, final)

    def extract_answer(self, content):
        return detect_final(content)


class ScriptedGenerator:
    feature_dim = F

    def __init__(self, rewards, final_at_depth=None):
        self.rewards = rewards
        self.final_at_depth = final_at_depth

    def session(self, task):
        return ScriptedSession(task, self.rewards, final_at_depth=self.final_at_depth)


class FailingGenerator:
    """Synthetic generator whose sessions raise after ``ok`` proposals."""

    def __init__(self, inner, ok):
        self.inner = inner
        self.ok = ok
        self.feature_dim = inner.feature_dim

    def session(self, task):
        sess = self.inner.session(task)
        real = sess.propose_step
        budget = [self.ok]

        def propose(path, idx):
            if budget[0] <= 0:
                raise GenerationError("endpoint down")
            budget[0] -= 1
            return real(path, idx)

        sess.propose_step = propose
        return sess


def random_graph_case(seed: int, D=3, F_in=3, k=2, hidden=4, layers=2, n_graphs=3, **flags):
    """(policy, batches, loss spec) with small random shapes for gradient checks."""
    import torch

    from pgts.policy import GraphPolicy, LossSpec, PolicyConfig, collate, graph_batch

    rng = np.random.default_rng(seed)
    cfg = PolicyConfig(feature_dim=F_in, rwse_steps=k, hidden=hidden, layers=layers, depth_limit=D, **flags)
    policy = GraphPolicy(cfg, seed=seed)
    with torch.no_grad():  # move LayerNorm gains/offsets off their defaults too
        for p in policy.parameters():
            p.add_(0.1 * torch.as_tensor(rng.standard_normal(tuple(p.shape))))
    batches = []
    while len(batches) < n_graphs:
        tree = random_tree(rng, D=D, B=int(rng.integers(1, 4)), max_nodes=8, f=F_in)
        b = graph_batch(tree, k)
        if b.constraints.any():  # arbitrary current nodes can be dead ends
            batches.append(b)
    with torch.no_grad():
        out = policy(collate(batches))
    actions, logp_old = [], []
    for g, b in enumerate(batches):
        valid = np.flatnonzero(b.constraints)
        a = int(rng.choice(valid))
        actions.append(a)
        # keep the ratio inside the clip band so the surrogate is smooth there
        logp_old.append(float(out.log_probs[g, a]) + rng.uniform(-0.1, 0.1))
    spec = LossSpec(
        actions=np.array(actions), log_prob_old=np.array(logp_old),
        advantages=rng.standard_normal(n_graphs), returns=rng.standard_normal(n_graphs),
        clip=0.2, policy_weight=1.0, value_weight=float(rng.uniform(0.5, 2.0)),
        entropy_weight=float(rng.uniform(0.0, 0.1)),
    )
    return policy, batches, spec


def reference_loss(out, spec):
    """PPO loss written out independently of the library's loss code."""
    import torch

    a = torch.as_tensor(spec.actions)
    logp = out.log_probs[torch.arange(len(a)), a]
    ratio = torch.exp(logp - torch.as_tensor(spec.log_prob_old))
    adv = torch.as_tensor(spec.advantages)
    surr = torch.minimum(ratio * adv, torch.clamp(ratio, 1 - spec.clip, 1 + spec.clip) * adv)
    p = out.log_probs.exp()
    ent = -(p * torch.where(out.mask, out.log_probs, torch.zeros_like(out.log_probs))).sum(dim=1)
    vloss = ((out.value - torch.as_tensor(spec.returns)) ** 2).mean()
    policy_loss = -surr.mean() - spec.entropy_weight * ent.mean()
    return spec.policy_weight * policy_loss + spec.value_weight * vloss


def finite_difference_grad(policy, batches, spec, eps=1e-5) -> dict:
    """Central differences of the PPO loss, all coordinates batched with vmap."""
    import torch
    from torch.func import functional_call, vmap

    from pgts.policy import collate

    b = collate(batches)
    names = [n for n, _ in policy.named_parameters()]
    base = {n: p.detach() for n, p in policy.named_parameters()}
    shapes = [base[n].shape for n in names]
    sizes = [base[n].numel() for n in names]
    flat = torch.cat([base[n].reshape(-1) for n in names])

    def loss(vec):
        params = {n: v.reshape(s) for n, v, s in zip(names, torch.split(vec, sizes), shapes)}
        return reference_loss(functional_call(policy, params, (b,)), spec)

    step = torch.eye(flat.numel(), dtype=flat.dtype) * eps
    with torch.no_grad():
        g = ((vmap(loss)(flat + step) - vmap(loss)(flat - step)) / (2 * eps)).numpy()
    return {n: part.reshape(tuple(s)) for n, part, s in zip(names, np.split(g, np.cumsum(sizes)[:-1]), shapes)}


def max_relative_error(analytic: dict, numeric: dict, floor=1e-6) -> float:
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
