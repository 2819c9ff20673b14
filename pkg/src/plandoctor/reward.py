"""Advantage scores, bounties and penalties for planner episodes.

Rewards are assembled from discretized pairwise advantages.  Who produces a
score is abstracted behind a *judge*: ``LatencyJudge`` uses measured latencies
(real environment); the advantage model supplies another judge for the
simulated environment.  Latency-derived quantities that only involve executed
plans (the known-best and perceived-best bounty levels) always use latencies.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

from plandoctor.catalog import JoinGraphQuery
from plandoctor.plan import CompletePlan, IncompletePlan


@dataclass(frozen=True)
class DiscretizationSpec:
    points: tuple[float, ...] = (0.05, 0.75)

    def __post_init__(self):
        p = self.points
        if not p or p[0] < 0 or p[-1] >= 1 or any(a >= b for a, b in zip(p, p[1:])):
            raise ValueError(f"points must be strictly ascending in [0, 1): {p}")

    @property
    def l(self) -> int:
        return len(self.points)

    @property
    def n_scores(self) -> int:
        return self.l + 1

    def midpoint(self, k: int) -> float:
        """Centre of the k-th subinterval (d_{k-1}, d_k], defined for k >= 2."""
        if not 2 <= k <= self.l + 1:
            raise AssertionError(f"midpoint of subinterval {k} is never needed")
        d = (None,) + self.points + (1.0,)
        return (d[k] + d[k - 1]) / 2


@dataclass(frozen=True)
class RewardConfig:
    eta: float = 0.5
    eb_max: float = 12.0
    gamma: float = 2.0
    maxsteps: int = 3

    def __post_init__(self):
        if self.eta <= 0 or self.eb_max <= 0 or self.gamma <= 0 or self.maxsteps < 1:
            raise ValueError("eta, eb_max, gamma must be > 0 and maxsteps >= 1")


def adv_initial(u_left: float, u_right: float) -> float:
    """Relative improvement of the right plan over the left one."""
    if u_left <= 0:
        raise ValueError("left latency must be positive")
    return (u_left - u_right) / u_left


def discretize(x: float, spec: DiscretizationSpec = DiscretizationSpec()) -> int:
    """Index of the right-closed subinterval containing ``x``."""
    if x > 1:
        raise ValueError(f"advantage {x} > 1")
    return sum(1 for d in spec.points if x > d)


def adv_score(u_left: float, u_right: float, spec: DiscretizationSpec = DiscretizationSpec()) -> int:
    return discretize(adv_initial(u_left, u_right), spec)


def step_bounty(score: int, cfg: RewardConfig = RewardConfig()) -> float:
    return score * cfg.eta


def penalty(min_steps: int, t: int, cfg: RewardConfig = RewardConfig()) -> float:
    if not 0 <= min_steps <= t:
        raise ValueError(f"need 0 <= minsteps ({min_steps}) <= t ({t})")
    return cfg.gamma * (min_steps - t)


def episode_bounty_from_scores(adv1: int, adv2: int, adv3: int, eb_qb: float, eb_pb: float,
                               spec: DiscretizationSpec = DiscretizationSpec(),
                               cfg: RewardConfig = RewardConfig()) -> float:
    if adv1 > 0:
        return spec.midpoint(adv1 + 1) * (cfg.eb_max - eb_qb) + eb_qb
    if adv2 > 0:
        return spec.midpoint(adv2 + 1) * (eb_qb - eb_pb) + eb_pb
    return adv3 / spec.l * eb_pb


@dataclass
class PlanRef:
    """A plan visited or executed, with the step that produced it."""

    icp: IncompletePlan
    cp: CompletePlan
    step: int
    latency: float | None = None

    @property
    def key(self):
        return self.icp.key


class Judge(Protocol):
    def score(self, left: PlanRef, right: PlanRef) -> int: ...


@dataclass
class LatencyJudge:
    spec: DiscretizationSpec = DiscretizationSpec()

    def score(self, left: PlanRef, right: PlanRef) -> int:
        if left.latency is None or right.latency is None:
            raise ValueError("latency judge needs executed plans")
        return adv_score(left.latency, right.latency, self.spec)


@dataclass
class EpisodeContext:
    """Per-episode bookkeeping: reference plans, episode best, visited set."""

    query: JoinGraphQuery
    original: PlanRef
    known_best: PlanRef
    perceived_best: PlanRef
    episode_best: PlanRef = None
    history: set = field(default_factory=set)

    def __post_init__(self):
        if self.episode_best is None:
            self.episode_best = self.original
        self.history.add(self.original.key)

    @property
    def u_orig(self) -> float:
        return self.original.latency

    @property
    def u_known_best(self) -> float:
        return self.known_best.latency

    @property
    def u_perceived_best(self) -> float:
        return self.perceived_best.latency

    @property
    def u_episode_best(self) -> float:
        return self.episode_best.latency


def episode_bounty(ctx: EpisodeContext, judge: Judge | None = None,
                   spec: DiscretizationSpec = DiscretizationSpec(),
                   cfg: RewardConfig = RewardConfig()) -> float:
    judge = judge or LatencyJudge(spec)
    eb_pb = adv_initial(ctx.u_orig, ctx.u_perceived_best) * cfg.eb_max
    eb_qb = adv_initial(ctx.u_orig, ctx.u_known_best) * cfg.eb_max
    adv1 = judge.score(ctx.known_best, ctx.episode_best)
    adv2 = judge.score(ctx.perceived_best, ctx.episode_best)
    adv3 = judge.score(ctx.original, ctx.episode_best)
    return episode_bounty_from_scores(adv1, adv2, adv3, eb_qb, eb_pb, spec, cfg)


@dataclass(frozen=True)
class StepOutcome:
    reward: float
    penalty: float
    step_bounty: float
    episode_bounty: float
    is_new: bool
    score: int


def step_reward(ctx: EpisodeContext, plan: PlanRef, t: int, min_steps: int,
                judge: Judge | None = None, spec: DiscretizationSpec = DiscretizationSpec(),
                cfg: RewardConfig = RewardConfig()) -> StepOutcome:
    """Reward for reaching ``plan`` at step ``t``; updates ``ctx`` in place.

    The step bounty is scored against the episode best *before* this step;
    the episode bounty at the last step sees the best *after* it, so a final
    improvement counts.  Bounties only apply to plans not yet visited.
    """
    judge = judge or LatencyJudge(spec)
    pen = penalty(min_steps, t, cfg)
    score = judge.score(ctx.episode_best, plan)
    if score > 0:
        ctx.episode_best = plan
    is_new = plan.key not in ctx.history
    cb = eb = 0.0
    if is_new:
        ctx.history.add(plan.key)
        cb = step_bounty(score, cfg)
        if t // cfg.maxsteps >= 1:
            eb = episode_bounty(ctx, judge, spec, cfg)
    return StepOutcome(pen + cb + eb, pen, cb, eb, is_new, score)
