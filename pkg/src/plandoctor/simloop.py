"""Real and simulated planner environments and the exploration/training/validation loop."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from plandoctor import aam as aam_mod
from plandoctor import agent as agent_mod
from plandoctor.aam import AamConfig, AamJudge, AdvantageModel
from plandoctor.actions import Action, action_table, apply_unchecked, legal_mask, minsteps
from plandoctor.agent import LearnerConfig, Mode, PolicyNet
from plandoctor.catalog import JoinGraphQuery, Workload
from plandoctor.executor import ExecutionBuffer, Source, dynamic_timeout, execute
from plandoctor.expert import CostModel
from plandoctor.metrics import gmrl, wrl
from plandoctor.plan import IncompletePlan, StateFeatures, extract_icp
from plandoctor.planbook import PlanBook
from plandoctor.reward import (DiscretizationSpec, EpisodeContext, Judge, LatencyJudge, PlanRef,
                               RewardConfig, StepOutcome, adv_score, step_reward)

log = logging.getLogger(__name__)

REPORT_FORMAT = "plandoctor.train_report"


class ForbiddenAction(RuntimeError):
    pass


@dataclass(frozen=True)
class LoopConfig:
    exploration_batch: int = 10
    episodes_per_update: int = 900
    training_rounds: int = 3
    validation_top_k: int = 2
    iterations: int = 5
    exploration_episodes: int = 1
    seed: int = 0

    def __post_init__(self):
        if min(self.exploration_batch, self.episodes_per_update, self.validation_top_k,
               self.iterations, self.exploration_episodes) < 1 or self.training_rounds < 0:
            raise ValueError("loop sizes must be positive")


class ExecutorJudge:
    """Executor-backed scores: plans without a latency are executed under the episode timeout."""

    def __init__(self, query: JoinGraphQuery, book: PlanBook, timeout: float,
                 spec: DiscretizationSpec = DiscretizationSpec()):
        self.query, self.book, self.timeout, self.spec = query, book, timeout, spec

    def latency(self, ref: PlanRef) -> float:
        if ref.latency is not None:
            return ref.latency
        return execute(self.query, ref.cp, self.timeout, self.book.model).latency

    def score(self, left: PlanRef, right: PlanRef) -> int:
        return adv_score(self.latency(left), self.latency(right), self.spec)


class PlannerEnv:
    """One query's episode environment.

    Transitions always go through the expert's hint-guided completion.  With
    ``buffer`` set the env is *real*: every new plan is executed under the
    dynamic timeout, recorded, and scored by latency.  Without it the env is
    *simulated* and ``judge`` (normally the advantage model) scores plans.
    """

    def __init__(self, query: JoinGraphQuery, book: PlanBook, original: PlanRef,
                 known_best: PlanRef, perceived_best: PlanRef, judge: Judge | None = None,
                 buffer: ExecutionBuffer | None = None,
                 reward_cfg: RewardConfig = RewardConfig(),
                 spec: DiscretizationSpec = DiscretizationSpec()):
        if buffer is None and judge is None:
            raise ValueError("a simulated env needs a judge")
        self.query = query
        self.book = book
        self.original = original
        self.known_best = known_best
        self.perceived_best = perceived_best
        self.buffer = buffer
        self.judge = judge if buffer is None else LatencyJudge(spec)
        self.cfg = reward_cfg
        self.spec = spec
        self.timeout = dynamic_timeout(original.latency)
        self.ctx: EpisodeContext | None = None
        self.icp: IncompletePlan = original.icp
        self.prev: Action | None = None
        self.t = 0
        self._mask_cache: dict = {}

    @property
    def real(self) -> bool:
        return self.buffer is not None

    def reset(self) -> StateFeatures:
        self.ctx = EpisodeContext(self.query, self.original, self.known_best, self.perceived_best)
        self.icp = self.original.icp
        self.prev = None
        self.t = 0
        return self.book.features(self.query, self.icp, 0)

    def legal(self) -> np.ndarray:
        k = (self.icp.key, self.prev)
        m = self._mask_cache.get(k)
        if m is None:
            m = self._mask_cache[k] = legal_mask(self.icp, self.query, self.prev)
        return m

    def step(self, action: int) -> tuple[StateFeatures, StepOutcome]:
        if not self.legal()[action - 1]:
            raise ForbiddenAction(f"action {action} is masked in {self.icp.render()}")
        act = action_table(self.query.n_schema_tables)[action - 1]
        self.t += 1
        self.icp = apply_unchecked(self.icp, act)
        self.prev = act
        ref = self._visit(self.icp, self.t)
        ms = minsteps(self.original.icp, self.icp, self.query, self.cfg.maxsteps)
        outcome = step_reward(self.ctx, ref, self.t, ms, self.judge, self.spec, self.cfg)
        return self.book.features(self.query, self.icp, self.t), outcome

    def _visit(self, icp: IncompletePlan, t: int) -> PlanRef:
        cp = self.book.complete(self.query, icp)
        if not self.real:
            return PlanRef(icp, cp, t)
        rec = execute(self.query, cp, self.timeout, self.book.model, Source.EXPLORATION, t)
        self.buffer.append(rec)
        return PlanRef(icp, cp, t, rec.latency)


def real_step(env: PlannerEnv, action: int) -> tuple[StateFeatures, StepOutcome]:
    if not env.real:
        raise ValueError("env is simulated")
    return env.step(action)


def simulated_step(env: PlannerEnv, action: int) -> tuple[StateFeatures, StepOutcome]:
    if env.real:
        raise ValueError("env is real")
    return env.step(action)


@dataclass
class QueryState:
    original: PlanRef
    known_best: PlanRef
    perceived_best: PlanRef


@dataclass
class IterationReport:
    iteration: int
    train_wrl: float
    train_gmrl: float
    test_wrl: float
    test_gmrl: float
    known_best_wrl: float
    buffer_size: int
    aam_accuracy: float
    mean_sim_reward: float
    validated: int
    seconds: float


@dataclass
class Selection:
    query_id: str
    icp: IncompletePlan
    step: int
    latency: float
    expert_latency: float


class Learner:
    """Owns the buffer, the advantage model, the policy and per-query trackers."""

    def __init__(self, workload: Workload, cost_model: CostModel = CostModel(),
                 spec: DiscretizationSpec = DiscretizationSpec(), reward_cfg: RewardConfig = RewardConfig(),
                 aam_cfg: AamConfig = AamConfig(), learner_cfg: LearnerConfig = LearnerConfig(),
                 loop_cfg: LoopConfig = LoopConfig(), buffer: ExecutionBuffer | None = None,
                 out_dir: str | Path | None = None):
        self.workload = workload
        self.queries = workload.by_id()
        self.spec = spec
        self.reward_cfg = reward_cfg
        self.aam_cfg = aam_cfg
        self.learner_cfg = learner_cfg
        self.loop_cfg = loop_cfg
        self.book = PlanBook(cost_model, reward_cfg.maxsteps)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if buffer is None:
            path = self.out_dir / "executions.jsonl" if self.out_dir is not None else None
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text("")
            buffer = ExecutionBuffer(path)
        self.buffer = buffer
        n_t, n_e = workload.schema.n_tables, len(workload.schema.edges)
        self.aam = AdvantageModel(n_t, n_e, aam_cfg)
        self.policy = PolicyNet(n_t, n_e, learner_cfg)
        self.rng = np.random.default_rng([loop_cfg.seed, 1])
        self.states: dict[str, QueryState] = {}
        self.history: list[str] = []
        self.aam_accuracy = float("nan")
        self.updates = 0
        self.reports: list[IterationReport] = []
        self._train_ids = set(workload.train_ids)
        self._train_cursor = 0
        self._train_order = [str(x) for x in self.rng.permutation(workload.train_ids)]

    # -- bookkeeping -----------------------------------------------------
    def state(self, query: JoinGraphQuery) -> QueryState:
        st = self.states.get(query.query_id)
        if st is None:
            cp = self.book.original(query)
            rec = execute(query, cp, None, self.book.model, Source.ORIGINAL, 0)
            if query.query_id in self._train_ids:
                self.buffer.append(rec)
            ref = PlanRef(extract_icp(cp), cp, 0, rec.latency)
            st = self.states[query.query_id] = QueryState(ref, ref, ref)
        return st

    def _absorb(self, query: JoinGraphQuery, from_validation: bool, records) -> None:
        st = self.state(query)
        for rec in records:
            if rec.censored:
                continue
            ref = PlanRef(rec.icp, self.book.complete(query, rec.icp), rec.step_index, rec.latency)
            if rec.latency < st.known_best.latency:
                st.known_best = ref
            if from_validation and rec.latency < st.perceived_best.latency:
                st.perceived_best = ref

    def absorb_buffer(self) -> None:
        """Rebuild known-best trackers from whatever the buffer already holds."""
        for qid in self.buffer.query_ids():
            if qid in self.queries:
                self._absorb(self.queries[qid], False, self.buffer.for_query(qid))

    def env(self, query: JoinGraphQuery, real: bool, judge: Judge | None = None) -> PlannerEnv:
        st = self.state(query)
        return PlannerEnv(query, self.book, st.original, st.known_best, st.perceived_best,
                          judge=judge, buffer=self.buffer if real else None,
                          reward_cfg=self.reward_cfg, spec=self.spec)

    def judge(self, query: JoinGraphQuery) -> AamJudge:
        return AamJudge(self.aam, query, self.book)

    def retrain_aam(self) -> None:
        pairs = []
        rng = np.random.default_rng([self.loop_cfg.seed, 2, len(self.buffer)])
        for qid in self.buffer.query_ids():
            pairs += aam_mod.make_pairs(self.queries[qid], self.buffer.for_query(qid), self.book, rng,
                                        self.spec, self.aam_cfg.pairs_per_record)
        if pairs:
            self.aam_accuracy = aam_mod.train(self.aam, pairs, self.aam_cfg).accuracy

    # -- phases ----------------------------------------------------------
    def next_exploration_batch(self) -> list[JoinGraphQuery]:
        ids = []
        while len(ids) < min(self.loop_cfg.exploration_batch, len(self._train_order)):
            if self._train_cursor >= len(self._train_order):
                self._train_cursor = 0
                self._train_order = [str(x) for x in self.rng.permutation(self.workload.train_ids)]
            qid = self._train_order[self._train_cursor]
            self._train_cursor += 1
            if qid not in ids:
                ids.append(qid)
        return [self.queries[i] for i in ids]

    def exploration_phase(self, queries: Sequence[JoinGraphQuery]) -> list[agent_mod.Episode]:
        start = len(self.buffer)
        envs = [self.env(q, real=True) for q in queries for _ in range(self.loop_cfg.exploration_episodes)]
        episodes = agent_mod.rollout_batch(envs, self.policy, self.reward_cfg.maxsteps, Mode.SAMPLE, self.rng)
        for q in queries:
            if q.query_id not in self.history:
                self.history.append(q.query_id)
        new = self.buffer.records[start:]
        for q in queries:
            self._absorb(q, False, [r for r in new if r.query_id == q.query_id])
        self.retrain_aam()
        return episodes

    def training_phase(self) -> tuple[list[agent_mod.Episode], dict[str, list[PlanRef]]]:
        if not self.history:
            raise RuntimeError("training phase before any exploration")
        n = self.loop_cfg.episodes_per_update
        picks = self.rng.choice(len(self.history), size=n, replace=True)
        judges = {qid: self.judge(self.queries[qid]) for qid in self.history}
        envs = [self.env(self.queries[self.history[i]], real=False, judge=judges[self.history[i]])
                for i in picks]
        episodes = agent_mod.rollout_batch(envs, self.policy, self.reward_cfg.maxsteps, Mode.SAMPLE, self.rng)
        exps = [e for ep in episodes for e in ep.experiences]
        agent_mod.update(self.policy, exps, self.learner_cfg, seed=self.learner_cfg.seed + self.updates)
        self.updates += 1

        executed = {(r.query_id, r.icp.key) for r in self.buffer.records}
        found: dict[str, dict] = {}
        for env in envs:
            qid = env.query.query_id
            best = env.ctx.episode_best
            if (qid, best.key) in executed:
                continue
            judge = judges[qid]
            st = self.states[qid]
            if judge.score(st.perceived_best, best) > 0:
                conf = 1.0 - float(judge.probs(st.perceived_best, best)[0])
                prev = found.setdefault(qid, {}).get(best.key)
                if prev is None or conf > prev[0]:
                    found[qid][best.key] = (conf, best)
        collected = {}
        for qid, cands in found.items():
            ranked = sorted(cands.values(), key=lambda cb: (-cb[0], cb[1].key))
            collected[qid] = [ref for _, ref in ranked[:self.loop_cfg.validation_top_k]]
        return episodes, collected

    def validation_phase(self, collected: dict[str, list[PlanRef]]) -> int:
        n = 0
        for qid, refs in collected.items():
            q = self.queries[qid]
            st = self.state(q)
            recs = []
            for ref in refs:
                rec = execute(q, ref.cp, dynamic_timeout(st.original.latency), self.book.model,
                              Source.VALIDATION, ref.step)
                self.buffer.append(rec)
                recs.append(rec)
                n += 1
            self._absorb(q, True, recs)
        if n:
            self.retrain_aam()
        return n

    # -- inference and metrics --------------------------------------------
    def select(self, query: JoinGraphQuery) -> Selection:
        """Greedy planner candidates, then the advantage-model tournament."""
        judge = self.judge(query)
        st = self.state(query)
        env = self.env(query, real=False, judge=judge)
        env.reset()
        cands = [st.original]
        feats = env.book.features(query, env.icp, 0)
        for _ in range(self.reward_cfg.maxsteps):
            a, _ = agent_mod.act(self.policy, feats, env.legal(), Mode.GREEDY)
            feats, _ = env.step(a)
            cands.append(PlanRef(env.icp, self.book.complete(query, env.icp), env.t))
        best = cands[0]
        for c in cands[1:]:
            if judge.score(best, c) > 0:
                best = c
        return Selection(query.query_id, best.icp, best.step, self.book.latency(query, best.icp),
                         st.original.latency)

    def evaluate(self, queries: Sequence[JoinGraphQuery]) -> tuple[float, float, list[Selection]]:
        sels = [self.select(q) for q in queries]
        if not sels:
            return float("nan"), float("nan"), sels
        learned = [s.latency for s in sels]
        expert = [s.expert_latency for s in sels]
        return wrl(learned, expert), gmrl(learned, expert), sels

    def known_best_table(self, queries: Sequence[JoinGraphQuery]) -> list[dict]:
        rows = []
        for q in queries:
            st = self.state(q)
            rows.append({"query_id": q.query_id, "expert_latency": st.original.latency,
                         "known_best_latency": st.known_best.latency, "step": st.known_best.step,
                         "icp": st.known_best.icp.to_dict()})
        return rows

    # -- global loop -----------------------------------------------------
    def run_iteration(self, it: int) -> IterationReport:
        t0 = time.time()
        self.exploration_phase(self.next_exploration_batch())
        validated = 0
        rewards = []
        for _ in range(self.loop_cfg.training_rounds):
            episodes, collected = self.training_phase()
            rewards += [ep.total_reward for ep in episodes]
            validated += self.validation_phase(collected)
        train = self.workload.train
        test = self.workload.test
        tr_w, tr_g, _ = self.evaluate(train)
        te_w, te_g, _ = self.evaluate(test)
        kb = self.known_best_table(train)
        kb_wrl = wrl([r["known_best_latency"] for r in kb], [r["expert_latency"] for r in kb])
        rep = IterationReport(it, tr_w, tr_g, te_w, te_g, kb_wrl, len(self.buffer), self.aam_accuracy,
                              float(np.mean(rewards)) if rewards else 0.0, validated, time.time() - t0)
        self.reports.append(rep)
        log.info("iteration %d: train WRL %.3f GMRL %.3f | test WRL %.3f GMRL %.3f | known-best WRL %.3f "
                 "| buffer %d | aam acc %.3f | %.1fs", it, tr_w, tr_g, te_w, te_g, kb_wrl, len(self.buffer),
                 self.aam_accuracy, rep.seconds)
        if self.out_dir is not None:
            self._checkpoint(it)
        return rep

    def run(self) -> list[IterationReport]:
        for q in self.workload.queries:
            self.state(q)
        for it in range(1, self.loop_cfg.iterations + 1):
            self.run_iteration(it)
        if self.out_dir is not None:
            self.write_report()
        return self.reports

    def _checkpoint(self, it: int) -> None:
        d = self.out_dir / "checkpoints" / f"iter_{it:03d}"
        d.mkdir(parents=True, exist_ok=True)
        agent_mod.save_params(self.policy, d / "agent.params.json")
        aam_mod.save_params(self.aam, d / "aam.params.json")
        agent_mod.save_params(self.policy, self.out_dir / "agent.params.json")
        aam_mod.save_params(self.aam, self.out_dir / "aam.params.json")
        rep = self.reports[-1]
        with (self.out_dir / "train_log.jsonl").open("a") as fh:
            fh.write(json.dumps({"iteration": it, "updates": self.updates,
                                 "mean_reward": rep.mean_sim_reward, "wrl_so_far": rep.train_wrl}) + "\n")

    def write_report(self) -> None:
        doc = {"format": REPORT_FORMAT, "version": 1,
               "config": {"loop": asdict(self.loop_cfg), "reward": asdict(self.reward_cfg),
                          "aam": asdict(self.aam_cfg), "learner": asdict(self.learner_cfg),
                          "discretization": list(self.spec.points)},
               "iterations": [asdict(r) for r in self.reports],
               "known_best": self.known_best_table(self.workload.train)}
        (self.out_dir / "train_report.json").write_text(json.dumps(doc, indent=1))


def global_loop(workload: Workload, **kwargs) -> Learner:
    learner = Learner(workload, **kwargs)
    learner.run()
    return learner
