"""Run configuration and its flat ``key = value`` file format.

Grammar, one entry per line::

    # comment
    key = value

Blank lines and ``#`` comments are ignored.  Keys are the field names of
``RunConfig``; an unknown or repeated key is an error.  Booleans accept
true/false, tuples are comma-separated.  ``schema_seed`` and
``workload_seed`` of -1 inherit ``seed``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import get_type_hints

from plandoctor.aam import AamConfig
from plandoctor.agent import LearnerConfig
from plandoctor.expert import CostModel
from plandoctor.reward import DiscretizationSpec, RewardConfig
from plandoctor.simloop import LoopConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    schema_seed: int = -1
    workload_seed: int = -1
    out_dir: str = "run"

    # schema and workload
    n_tables: int = 8
    row_min: int = 1_000
    row_max: int = 1_000_000
    n_queries: int = 25
    tables_min: int = 3
    tables_max: int = 6
    sigma_est: float = 1.0
    heldout_fraction: float = 0.2

    # cost model
    c_hash: float = 1.0
    c_merge: float = 1.2
    c_nl: float = 0.05
    c_scan: float = 1.0

    # reward
    disc_points: tuple[float, ...] = (0.05, 0.75)
    eta: float = 0.5
    eb_max: float = 12.0
    gamma: float = 2.0
    maxsteps: int = 3

    # advantage model
    aam_epsilon: float = 0.1
    aam_gamma_pos: float = 1.0
    aam_gamma_neg: float = 4.0
    aam_lr: float = 2e-3
    aam_epochs: int = 30
    aam_batch_size: int = 128
    aam_pairs_per_record: int = 4

    # planner
    ppo_clip_ratio: float = 0.2
    ppo_discount: float = 1.0
    ppo_gae_lambda: float = 0.95
    ppo_epochs: int = 4
    ppo_minibatch_size: int = 256
    ppo_entropy_coef: float = 0.01
    ppo_value_coef: float = 0.5
    ppo_lr: float = 3e-3

    # loop
    exploration_batch: int = 10
    episodes_per_update: int = 900
    training_rounds: int = 3
    validation_top_k: int = 2
    iterations: int = 5
    exploration_episodes: int = 1

    oracle_max_states: int = 200_000

    @property
    def schema_seed_(self) -> int:
        return self.seed if self.schema_seed < 0 else self.schema_seed

    @property
    def workload_seed_(self) -> int:
        return self.seed if self.workload_seed < 0 else self.workload_seed

    def cost_model(self) -> CostModel:
        return CostModel(self.c_hash, self.c_merge, self.c_nl, self.c_scan)

    def discretization(self) -> DiscretizationSpec:
        return DiscretizationSpec(tuple(self.disc_points))

    def reward(self) -> RewardConfig:
        return RewardConfig(self.eta, self.eb_max, self.gamma, self.maxsteps)

    def aam(self) -> AamConfig:
        return AamConfig(n_scores=len(self.disc_points) + 1, epsilon=self.aam_epsilon,
                         gamma_pos=self.aam_gamma_pos, gamma_neg=self.aam_gamma_neg, lr=self.aam_lr,
                         epochs=self.aam_epochs, batch_size=self.aam_batch_size,
                         pairs_per_record=self.aam_pairs_per_record, seed=self.seed)

    def learner(self) -> LearnerConfig:
        return LearnerConfig(clip_ratio=self.ppo_clip_ratio, discount=self.ppo_discount,
                             gae_lambda=self.ppo_gae_lambda, epochs_per_update=self.ppo_epochs,
                             minibatch_size=self.ppo_minibatch_size, entropy_coef=self.ppo_entropy_coef,
                             value_coef=self.ppo_value_coef, lr=self.ppo_lr, seed=self.seed)

    def loop(self) -> LoopConfig:
        return LoopConfig(exploration_batch=self.exploration_batch, episodes_per_update=self.episodes_per_update,
                          training_rounds=self.training_rounds, validation_top_k=self.validation_top_k,
                          iterations=self.iterations, exploration_episodes=self.exploration_episodes,
                          seed=self.seed)

    def validate(self) -> "RunConfig":
        """Build every sub-config once so bad values fail early."""
        try:
            self.cost_model(), self.discretization(), self.reward(), self.aam(), self.learner(), self.loop()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not 2 <= self.tables_min <= self.tables_max <= self.n_tables:
            raise ConfigError("need 2 <= tables_min <= tables_max <= n_tables")
        if not 0 <= self.heldout_fraction < 1:
            raise ConfigError("heldout_fraction must lie in [0, 1)")
        return self

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _convert(name: str, raw: str, typ):
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        # tuple[float, ...]
        return tuple(float(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    hints = get_type_hints(RunConfig)
    known = {f.name for f in fields(RunConfig)}
    seen: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen[key] = _convert(key, raw, hints[key])
    return dataclasses.replace(base or RunConfig(), **seen)


def load_config(path: str | Path | None, **overrides) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        cfg = parse_config(text, cfg)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return dataclasses.replace(cfg, **overrides).validate()
