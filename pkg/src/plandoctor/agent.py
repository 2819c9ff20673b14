"""Planner policy: masked action selection, episode rollout and a PPO-style update."""
from __future__ import annotations

import enum
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
from torch import nn

from plandoctor.actions import num_actions
from plandoctor.nets import DTYPE, StateEncoder, batch_features, load_state_dict_json, state_dict_to_json
from plandoctor.plan import StateFeatures
from plandoctor.reward import StepOutcome

log = logging.getLogger(__name__)

PARAMS_FORMAT = "plandoctor.agent.params"


class Mode(enum.Enum):
    SAMPLE = "sample"
    GREEDY = "greedy"


class UpdateDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LearnerConfig:
    clip_ratio: float = 0.2
    discount: float = 1.0
    gae_lambda: float = 0.95
    epochs_per_update: int = 4
    minibatch_size: int = 256
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    lr: float = 3e-3
    max_grad_norm: float = 1.0
    hidden: int = 64
    width: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.clip_ratio < 1:
            raise ValueError("clip_ratio must lie in (0, 1)")
        if not 0 < self.discount <= 1:
            raise ValueError("discount must lie in (0, 1]")


class PolicyNet(nn.Module):
    def __init__(self, n_schema_tables: int, n_schema_edges: int, cfg: LearnerConfig = LearnerConfig()):
        super().__init__()
        torch.manual_seed(cfg.seed)
        self.cfg = cfg
        self.n_schema_tables = n_schema_tables
        self.n_schema_edges = n_schema_edges
        self.n_actions = num_actions(n_schema_tables)
        self.encoder = StateEncoder(n_schema_tables, n_schema_edges, cfg.hidden, cfg.width)
        self.policy = nn.Sequential(nn.Linear(cfg.width, cfg.hidden), nn.ReLU(),
                                    nn.Linear(cfg.hidden, self.n_actions))
        self.value = nn.Sequential(nn.Linear(cfg.width, cfg.hidden), nn.ReLU(), nn.Linear(cfg.hidden, 1))
        self.to(DTYPE)

    @property
    def max_height(self) -> int:
        return self.encoder.max_height

    def forward(self, fb):
        sv = self.encoder(fb)
        return self.policy(sv), self.value(sv).squeeze(-1)

    def logits(self, feats: Sequence[StateFeatures]) -> np.ndarray:
        with torch.no_grad():
            return self(batch_features(feats, self.max_height))[0].numpy()


def masked_log_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Log-probabilities with masked entries at exactly -inf."""
    return torch.log_softmax(logits.masked_fill(~mask, float("-inf")), dim=-1)


def choose(logits: np.ndarray, mask: np.ndarray, mode: Mode, rng: np.random.Generator | None = None
           ) -> tuple[int, float]:
    """Pick an action id (1-based) from one row of logits; returns (id, log-prob)."""
    if not mask.any():
        raise ValueError("every action is masked")
    z = np.where(mask, logits, -np.inf)
    z = z - z[mask].max()
    p = np.exp(z)
    p /= p.sum()
    if mode is Mode.GREEDY:
        idx = int(np.flatnonzero(z == 0.0)[0])
    else:
        if rng is None:
            raise ValueError("sampling needs an rng")
        idx = int(min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), len(p) - 1))
        while not mask[idx]:  # guards the cumsum edge where trailing masked entries add 0
            idx -= 1
    return idx + 1, float(np.log(p[idx]))


def act(policy: PolicyNet, features: StateFeatures, mask: np.ndarray, mode: Mode = Mode.SAMPLE,
        rng: np.random.Generator | None = None) -> tuple[int, float]:
    return choose(policy.logits([features])[0], mask, mode, rng)


@dataclass
class Experience:
    state: StateFeatures
    action: int
    reward: float
    next_state: StateFeatures
    done: bool
    logp: float
    mask: np.ndarray
    episode: int = 0
    outcome: StepOutcome | None = None


class Env(Protocol):
    """What rollouts need from an environment."""

    def reset(self) -> StateFeatures: ...

    def legal(self) -> np.ndarray: ...

    def step(self, action: int) -> tuple[StateFeatures, StepOutcome]: ...


@dataclass
class Episode:
    experiences: list[Experience] = field(default_factory=list)

    @property
    def total_reward(self) -> float:
        return sum(e.reward for e in self.experiences)


def rollout_batch(envs: Sequence[Env], policy: PolicyNet, maxsteps: int, mode: Mode = Mode.SAMPLE,
                  rng: np.random.Generator | None = None, first_episode: int = 0) -> list[Episode]:
    """Run one episode per env in lockstep, batching the policy forward pass."""
    states = [env.reset() for env in envs]
    episodes = [Episode() for _ in envs]
    for t in range(1, maxsteps + 1):
        masks = [env.legal() for env in envs]
        logits = policy.logits(states)
        for i, env in enumerate(envs):
            a, logp = choose(logits[i], masks[i], mode, rng)
            nxt, outcome = env.step(a)
            episodes[i].experiences.append(Experience(
                states[i], a, outcome.reward, nxt, t == maxsteps, logp, masks[i],
                first_episode + i, outcome))
            states[i] = nxt
    return episodes


def rollout(env: Env, policy: PolicyNet, maxsteps: int, mode: Mode = Mode.SAMPLE,
            rng: np.random.Generator | None = None) -> Episode:
    return rollout_batch([env], policy, maxsteps, mode, rng)[0]


def clipped_surrogate(ratio: torch.Tensor, adv: torch.Tensor, clip: float) -> torch.Tensor:
    return torch.min(ratio * adv, ratio.clamp(1 - clip, 1 + clip) * adv)


def gae(rewards: np.ndarray, values: np.ndarray, next_values: np.ndarray, dones: np.ndarray,
        discount: float, lam: float) -> np.ndarray:
    """Generalised advantage estimates over one contiguous episode."""
    adv = np.zeros_like(rewards)
    running = 0.0
    for t in reversed(range(len(rewards))):
        nonterminal = 0.0 if dones[t] else 1.0
        delta = rewards[t] + discount * next_values[t] * nonterminal - values[t]
        running = delta + discount * lam * nonterminal * running
        adv[t] = running
    return adv


@dataclass(frozen=True)
class UpdateStats:
    n_samples: int
    policy_loss: float
    value_loss: float
    entropy: float
    approx_kl: float


def update(policy: PolicyNet, experiences: Sequence[Experience], cfg: LearnerConfig | None = None,
           seed: int | None = None) -> UpdateStats:
    """Clipped-surrogate policy update with a GAE value baseline, in place."""
    if not experiences:
        raise ValueError("empty experience batch")
    cfg = cfg or policy.cfg
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    n = len(experiences)
    mh = policy.max_height
    fb = batch_features([e.state for e in experiences], mh)
    fb_next = batch_features([e.next_state for e in experiences], mh)
    actions = torch.as_tensor([e.action - 1 for e in experiences])
    masks = torch.as_tensor(np.stack([e.mask for e in experiences]))
    old_logp = torch.as_tensor([e.logp for e in experiences], dtype=DTYPE)
    rewards = np.array([e.reward for e in experiences])
    dones = np.array([e.done for e in experiences])
    with torch.no_grad():
        values = policy(fb)[1].numpy()
        next_values = policy(fb_next)[1].numpy()
    adv = np.zeros(n)
    start = 0
    for i in range(n):
        if dones[i] or i == n - 1 or experiences[i + 1].episode != experiences[i].episode:
            sl = slice(start, i + 1)
            adv[sl] = gae(rewards[sl], values[sl], next_values[sl], dones[sl], cfg.discount, cfg.gae_lambda)
            start = i + 1
    returns = torch.as_tensor(adv + values, dtype=DTYPE)
    adv = adv - adv.mean()
    std = adv.std()
    if std > 1e-8:
        adv = adv / std
    adv_t = torch.as_tensor(adv, dtype=DTYPE)

    opt = torch.optim.Adam(policy.parameters(), lr=cfg.lr)
    pl = vl = ent = kl = 0.0
    for _ in range(cfg.epochs_per_update):
        perm = rng.permutation(n)
        for s in range(0, n, cfg.minibatch_size):
            idx = torch.as_tensor(perm[s:s + cfg.minibatch_size])
            logits, v = policy(fb.index(idx))
            logp_all = masked_log_softmax(logits, masks[idx])
            logp = logp_all.gather(1, actions[idx, None]).squeeze(1)
            ratio = torch.exp(logp - old_logp[idx])
            policy_loss = -clipped_surrogate(ratio, adv_t[idx], cfg.clip_ratio).mean()
            value_loss = ((v - returns[idx]) ** 2).mean()
            # masked entries: p = 0 and log p = -inf; zero the log before multiplying
            entropy = -(logp_all.exp() * logp_all.masked_fill(~masks[idx], 0.0)).sum(1).mean()
            loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy
            if not torch.isfinite(loss):
                raise UpdateDiverged(f"non-finite PPO loss (policy {policy_loss.item()}, "
                                     f"value {value_loss.item()}, entropy {entropy.item()})")
            opt.zero_grad()
            loss.backward()
            if cfg.max_grad_norm > 0:
                nn.utils.clip_grad_norm_(policy.parameters(), cfg.max_grad_norm)
            opt.step()
            pl, vl, ent = policy_loss.item(), value_loss.item(), entropy.item()
            kl = (old_logp[idx] - logp).mean().item()
    return UpdateStats(n, pl, vl, ent, kl)


def save_params(policy: PolicyNet, path: str | Path) -> None:
    doc = {"format": PARAMS_FORMAT, "version": 1, "config": asdict(policy.cfg),
           "n_schema_tables": policy.n_schema_tables, "n_schema_edges": policy.n_schema_edges,
           "state": state_dict_to_json(policy)}
    Path(path).write_text(json.dumps(doc))


def load_params(path: str | Path) -> PolicyNet:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != PARAMS_FORMAT:
        raise ValueError(f"{path} is not an agent parameter file")
    policy = PolicyNet(doc["n_schema_tables"], doc["n_schema_edges"], LearnerConfig(**doc["config"]))
    load_state_dict_json(policy, doc["state"])
    return policy
