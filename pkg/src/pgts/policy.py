"""Graph policy/value network over reasoning trees.

Each hybrid layer adds edge-conditioned neighbour messages and single-head
global self-attention to the node states, then applies a feed-forward block;
both sums are layer-normalised. The current node's embedding, concatenated
with the action constraint bits, feeds a masked action head and a value head.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from pgts.mdp import SearchAction
from pgts.tree import ReasoningTree, compute_constraints, rwse

DTYPE = torch.float64


class PolicyError(RuntimeError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    feature_dim: int = 32
    rwse_steps: int = 8
    hidden: int = 32
    layers: int = 2
    depth_limit: int = 4
    use_edge_features: bool = True
    use_global_attention: bool = True
    use_local_mpnn: bool = True

    @property
    def num_actions(self) -> int:
        return self.depth_limit + 2

    @property
    def input_dim(self) -> int:
        return self.feature_dim + self.rwse_steps


@dataclass
class GraphBatch:
    """One tree as network input: features ∥ RWSE per node, parent→child edges."""

    node_inputs: np.ndarray  # (N, F + k_max)
    edges: np.ndarray  # (E, 2) parent, child
    edge_values: np.ndarray  # (E,) step rewards
    current_index: int
    constraints: np.ndarray  # (D + 2,) of {0, 1}

    @property
    def num_nodes(self) -> int:
        return self.node_inputs.shape[0]


def graph_batch(tree: ReasoningTree, rwse_steps: int) -> GraphBatch:
    feats = tree.feature_matrix()
    enc = rwse(tree, rwse_steps)
    edges = tree.edges()
    return GraphBatch(
        node_inputs=np.concatenate([feats, enc], axis=1),
        edges=np.array([(u, v) for u, v, _ in edges], dtype=np.int64).reshape(-1, 2),
        edge_values=np.array([r for _, _, r in edges], dtype=np.float64),
        current_index=tree.current,
        constraints=compute_constraints(tree).astype(np.int8),
    )


@dataclass
class Collated:
    x: torch.Tensor  # (G, N, Fin)
    node_mask: torch.Tensor  # (G, N) bool
    src: torch.Tensor  # flat node indices, both edge directions
    dst: torch.Tensor
    edge_values: torch.Tensor
    current: torch.Tensor  # (G,) flat indices
    constraints: torch.Tensor  # (G, A) float


def collate(batches: Sequence[GraphBatch]) -> Collated:
    G = len(batches)
    n_max = max(b.num_nodes for b in batches)
    fin = batches[0].node_inputs.shape[1]
    x = np.zeros((G, n_max, fin))
    mask = np.zeros((G, n_max), dtype=bool)
    src, dst, vals, cur = [], [], [], []
    for g, b in enumerate(batches):
        if b.node_inputs.shape[1] != fin:
            raise PolicyError("graphs in one batch disagree on input width")
        if not 0 <= b.current_index < b.num_nodes:
            raise PolicyError(f"current index {b.current_index} outside {b.num_nodes} nodes")
        n = b.num_nodes
        x[g, :n] = b.node_inputs
        mask[g, :n] = True
        off = g * n_max
        if len(b.edges):
            u, v = b.edges[:, 0] + off, b.edges[:, 1] + off
            src += [u, v]
            dst += [v, u]
            vals += [b.edge_values, b.edge_values]
        cur.append(off + b.current_index)
    cat = lambda parts, dt: np.concatenate(parts) if parts else np.zeros(0, dtype=dt)
    return Collated(
        x=torch.as_tensor(x, dtype=DTYPE),
        node_mask=torch.as_tensor(mask),
        src=torch.as_tensor(cat(src, np.int64)),
        dst=torch.as_tensor(cat(dst, np.int64)),
        edge_values=torch.as_tensor(cat(vals, np.float64), dtype=DTYPE),
        current=torch.as_tensor(np.array(cur, dtype=np.int64)),
        constraints=torch.as_tensor(np.stack([b.constraints for b in batches]), dtype=DTYPE),
    )


class HybridLayer(nn.Module):
    def __init__(self, hidden: int):
        super().__init__()
        self.edge_enc = nn.Linear(1, hidden, dtype=DTYPE)
        self.msg_in = nn.Linear(hidden, hidden, dtype=DTYPE)
        self.msg_out = nn.Linear(hidden, hidden, dtype=DTYPE)
        self.query = nn.Linear(hidden, hidden, dtype=DTYPE)
        # a key bias only shifts each score row by a constant, which softmax ignores
        self.key = nn.Linear(hidden, hidden, bias=False, dtype=DTYPE)
        self.value = nn.Linear(hidden, hidden, dtype=DTYPE)
        self.attn_out = nn.Linear(hidden, hidden, dtype=DTYPE)
        self.norm1 = nn.LayerNorm(hidden, dtype=DTYPE)
        self.ffn_in = nn.Linear(hidden, 2 * hidden, dtype=DTYPE)
        self.ffn_out = nn.Linear(2 * hidden, hidden, dtype=DTYPE)
        self.norm2 = nn.LayerNorm(hidden, dtype=DTYPE)

    def forward(self, h: torch.Tensor, b: Collated, cfg: PolicyConfig) -> torch.Tensor:
        G, N, H = h.shape
        update = h
        if cfg.use_local_mpnn and b.src.numel():
            flat = h.reshape(G * N, H)
            e = b.edge_values if cfg.use_edge_features else torch.zeros_like(b.edge_values)
            msg = self.msg_out(nn.functional.silu(self.msg_in(flat[b.src] + self.edge_enc(e[:, None]))))
            agg = torch.zeros_like(flat).index_add(0, b.dst, msg)
            update = update + agg.reshape(G, N, H)
        if cfg.use_global_attention:
            scores = self.query(h) @ self.key(h).transpose(1, 2) / math.sqrt(H)
            scores = scores.masked_fill(~b.node_mask[:, None, :], float("-inf"))
            update = update + self.attn_out(torch.softmax(scores, dim=-1) @ self.value(h))
        h = self.norm1(update)
        return self.norm2(h + self.ffn_out(nn.functional.silu(self.ffn_in(h))))


@dataclass
class PolicyOutput:
    log_probs: torch.Tensor  # (G, A), -inf where masked
    entropy: torch.Tensor  # (G,)
    value: torch.Tensor  # (G,)
    logits: torch.Tensor  # (G, A) unmasked head output
    mask: torch.Tensor  # (G, A) bool


class GraphPolicy(nn.Module):
    def __init__(self, config: PolicyConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = seed
        H, A = config.hidden, config.num_actions
        self.input_proj = nn.Linear(config.input_dim, H, dtype=DTYPE)
        self.layers = nn.ModuleList(HybridLayer(H) for _ in range(config.layers))
        self.action_head = nn.Linear(H + A, A, dtype=DTYPE)
        self.value_head = nn.Linear(H + A, 1, dtype=DTYPE)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for mod in self.modules():
                if isinstance(mod, nn.Linear):
                    bound = math.sqrt(1.0 / mod.in_features)
                    mod.weight.uniform_(-bound, bound, generator=gen)
                    if mod.bias is not None:
                        mod.bias.uniform_(-bound, bound, generator=gen)
                elif isinstance(mod, nn.LayerNorm):
                    mod.weight.fill_(1.0)
                    mod.bias.fill_(0.0)

    def encode(self, b: Collated) -> torch.Tensor:
        h = self.input_proj(b.x)
        for layer in self.layers:
            h = layer(h, b, self.config)
        return h

    def heads(self, emb: torch.Tensor, b: Collated) -> PolicyOutput:
        G, N, H = emb.shape
        z = torch.cat([emb.reshape(G * N, H)[b.current], b.constraints], dim=1)
        logits = self.action_head(z)
        mask = b.constraints > 0.5
        if not bool(mask.any(dim=1).all()):
            raise PolicyError("constraint vector has no valid action")
        log_probs = torch.log_softmax(logits.masked_fill(~mask, float("-inf")), dim=1)
        safe = torch.where(mask, log_probs, torch.zeros_like(log_probs))
        entropy = -(safe.exp() * safe).sum(dim=1)
        return PolicyOutput(log_probs, entropy, self.value_head(z).squeeze(1), logits, mask)

    def forward(self, b: Collated) -> PolicyOutput:
        return self.heads(self.encode(b), b)


# -- single-graph conveniences -------------------------------------------------


@dataclass
class ActionDistribution:
    probs: np.ndarray
    log_probs: np.ndarray
    entropy: float


def masked_distribution(logits: np.ndarray, constraints: np.ndarray) -> ActionDistribution:
    logits = torch.as_tensor(np.asarray(logits, dtype=np.float64))
    mask = torch.as_tensor(np.asarray(constraints) > 0)
    if not bool(mask.any()):
        raise PolicyError("constraint vector has no valid action")
    lp = torch.log_softmax(logits.masked_fill(~mask, float("-inf")), dim=0)
    safe = torch.where(mask, lp, torch.zeros_like(lp))
    ent = float(-(safe.exp() * safe).sum())
    return ActionDistribution(lp.exp().numpy(), lp.numpy(), ent)


def encode(policy: GraphPolicy, batch: GraphBatch) -> np.ndarray:
    with torch.no_grad():
        return policy.encode(collate([batch]))[0, : batch.num_nodes].numpy()


def _head_input(policy: GraphPolicy, embeddings: np.ndarray, current_index: int, constraints) -> torch.Tensor:
    emb = torch.as_tensor(np.asarray(embeddings)[current_index], dtype=DTYPE)
    return torch.cat([emb, torch.as_tensor(np.asarray(constraints), dtype=DTYPE)])


def action_logits(policy: GraphPolicy, embeddings: np.ndarray, current_index: int, constraints) -> np.ndarray:
    """Head logits with masked entries set to -inf."""
    with torch.no_grad():
        logits = policy.action_head(_head_input(policy, embeddings, current_index, constraints))
    mask = np.asarray(constraints) > 0
    if not mask.any():
        raise PolicyError("constraint vector has no valid action")
    return np.where(mask, logits.numpy(), -np.inf)


def value(policy: GraphPolicy, embeddings: np.ndarray, current_index: int, constraints) -> float:
    with torch.no_grad():
        return float(policy.value_head(_head_input(policy, embeddings, current_index, constraints))[0])


def evaluate(policy: GraphPolicy, batch: GraphBatch) -> tuple[ActionDistribution, float]:
    with torch.no_grad():
        out = policy(collate([batch]))
    lp = out.log_probs[0].numpy()
    return ActionDistribution(np.exp(lp), lp, float(out.entropy[0])), float(out.value[0])


def sample_index(dist: ActionDistribution, rng: np.random.Generator) -> int:
    cdf = np.cumsum(dist.probs)
    i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    valid = np.flatnonzero(dist.probs > 0)
    # float round-off at the top of the cdf
    return i if i < len(cdf) and dist.probs[i] > 0 else int(valid[-1])


def sample_action(dist: ActionDistribution, rng: np.random.Generator) -> tuple[SearchAction, float]:
    i = sample_index(dist, rng)
    return SearchAction.from_index(i, len(dist.probs) - 2), float(dist.log_probs[i])


# -- losses and gradients ---------------------------------------------------------


@dataclass
class LossSpec:
    """Per-sample targets plus weights of the PPO loss terms."""

    actions: np.ndarray
    log_prob_old: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    clip: float = 0.2
    policy_weight: float = 1.0
    value_weight: float = 1.0
    entropy_weight: float = 0.0


@dataclass
class LossTerms:
    total: torch.Tensor
    policy: torch.Tensor
    value: torch.Tensor
    entropy: torch.Tensor
    ratio: torch.Tensor


def clipped_surrogate(ratio: torch.Tensor, adv: torch.Tensor, clip: float) -> torch.Tensor:
    return torch.minimum(ratio * adv, torch.clamp(ratio, 1 - clip, 1 + clip) * adv)


def ppo_loss(policy: GraphPolicy, b: Collated, spec: LossSpec) -> LossTerms:
    out = policy(b)
    actions = torch.as_tensor(np.asarray(spec.actions), dtype=torch.int64)
    logp = out.log_probs.gather(1, actions[:, None]).squeeze(1)
    if not bool(torch.isfinite(logp).all()):
        raise PolicyError("a stored action is masked under its own constraints")
    ratio = torch.exp(logp - torch.as_tensor(spec.log_prob_old, dtype=DTYPE))
    adv = torch.as_tensor(spec.advantages, dtype=DTYPE)
    ret = torch.as_tensor(spec.returns, dtype=DTYPE)
    surrogate = -clipped_surrogate(ratio, adv, spec.clip).mean()
    entropy = out.entropy.mean()
    value_loss = ((out.value - ret) ** 2).mean()
    policy_loss = surrogate - spec.entropy_weight * entropy
    total = spec.policy_weight * policy_loss + spec.value_weight * value_loss
    return LossTerms(total, policy_loss, value_loss, entropy, ratio)


def grad(policy: GraphPolicy, batches: Sequence[GraphBatch], spec: LossSpec) -> dict[str, np.ndarray]:
    """Exact gradient of the weighted PPO loss, keyed like ``named_parameters``."""
    policy.zero_grad(set_to_none=True)
    terms = ppo_loss(policy, collate(batches), spec)
    if not bool(torch.isfinite(terms.total)):
        raise PolicyError(f"non-finite loss {float(terms.total.detach())}")
    terms.total.backward()
    out = {}
    for name, p in policy.named_parameters():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not bool(torch.isfinite(g).all()):
            raise PolicyError(f"non-finite gradient in {name}")
        out[name] = g.detach().numpy().copy()
    policy.zero_grad(set_to_none=True)
    return out


# -- parameter (de)serialization ------------------------------------------------------

_MAGIC = b"PGTSCKPT1\n"


def params_to_bytes(policy: GraphPolicy, extra: Optional[dict] = None) -> bytes:
    """JSON header line, then every parameter as little-endian float64 in header order."""
    state = policy.state_dict()
    header = {
        "config": asdict(policy.config),
        "seed": policy.seed,
        "params": [[k, list(v.shape)] for k, v in state.items()],
        **(extra or {}),
    }
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write((json.dumps(header) + "\n").encode())
    for v in state.values():
        buf.write(v.detach().numpy().astype("<f8").tobytes(order="C"))
    return buf.getvalue()


def params_from_bytes(data: bytes) -> tuple[GraphPolicy, dict]:
    if not data.startswith(_MAGIC):
        raise PolicyError("not a policy checkpoint")
    rest = data[len(_MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    payload = memoryview(rest)[nl + 1:]
    policy = GraphPolicy(PolicyConfig(**header["config"]), seed=header["seed"])
    state, off = {}, 0
    for name, shape in header["params"]:
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload[off * 8:(off + n) * 8], dtype="<f8").reshape(shape)
        state[name] = torch.as_tensor(arr.copy(), dtype=DTYPE)
        off += n
    if off * 8 != len(payload):
        raise PolicyError("checkpoint payload size does not match header")
    policy.load_state_dict(state)
    return policy, header


def save_checkpoint(policy: GraphPolicy, path: str | Path, **extra) -> None:
    Path(path).write_bytes(params_to_bytes(policy, extra))


def load_checkpoint(path: str | Path) -> tuple[GraphPolicy, dict]:
    return params_from_bytes(Path(path).read_bytes())
