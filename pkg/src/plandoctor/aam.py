"""Asymmetric advantage model: pairwise plan scorer, loss, training and selection."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from plandoctor.catalog import JoinGraphQuery
from plandoctor.executor import ExecutionRecord, Source
from plandoctor.nets import (DTYPE, FeatureBatch, StateEncoder, batch_features,
                             load_state_dict_json, state_dict_to_json)
from plandoctor.plan import StateFeatures
from plandoctor.planbook import PlanBook
from plandoctor.reward import DiscretizationSpec, PlanRef, adv_score

log = logging.getLogger(__name__)

PARAMS_FORMAT = "plandoctor.aam.params"
CLAMP = 1e-12


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class AamConfig:
    n_scores: int = 3
    epsilon: float = 0.1
    gamma_pos: float = 1.0
    gamma_neg: float = 4.0
    lr: float = 2e-3
    epochs: int = 30
    batch_size: int = 128
    pairs_per_record: int = 4
    hidden: int = 64
    width: int = 64
    pos_dim: int = 8
    seed: int = 0

    def __post_init__(self):
        if not self.gamma_pos < self.gamma_neg:
            raise ValueError("gamma_pos must be smaller than gamma_neg")
        if not 0 <= self.epsilon < 1:
            raise ValueError("epsilon must lie in [0, 1)")
        if self.n_scores < 2:
            raise ValueError("need at least two scores")


class AdvantageModel(nn.Module):
    """logits = FC2(FC1(v_l ⊕ pos_left) - FC1(v_r ⊕ pos_right))."""

    def __init__(self, n_schema_tables: int, n_schema_edges: int, cfg: AamConfig = AamConfig()):
        super().__init__()
        torch.manual_seed(cfg.seed)
        self.cfg = cfg
        self.n_schema_tables = n_schema_tables
        self.n_schema_edges = n_schema_edges
        self.encoder = StateEncoder(n_schema_tables, n_schema_edges, cfg.hidden, cfg.width)
        self.pos_left = nn.Parameter(torch.randn(cfg.pos_dim) * 0.5)
        self.pos_right = nn.Parameter(torch.randn(cfg.pos_dim) * 0.5)
        self.fc1 = nn.Sequential(nn.Linear(cfg.width + cfg.pos_dim, cfg.hidden), nn.ReLU())
        self.fc2 = nn.Sequential(nn.Linear(cfg.hidden, cfg.hidden), nn.ReLU(),
                                 nn.Linear(cfg.hidden, cfg.n_scores))
        self.to(DTYPE)

    @property
    def max_height(self) -> int:
        return self.encoder.max_height

    def head(self, sv_left: torch.Tensor, sv_right: torch.Tensor) -> torch.Tensor:
        b = sv_left.shape[0]
        left = self.fc1(torch.cat([sv_left, self.pos_left.expand(b, -1)], dim=1))
        right = self.fc1(torch.cat([sv_right, self.pos_right.expand(b, -1)], dim=1))
        return self.fc2(left - right)

    def forward(self, left: FeatureBatch, right: FeatureBatch) -> torch.Tensor:
        return self.head(self.encoder(left), self.encoder(right))


def encode_state(model: AdvantageModel, features: StateFeatures) -> np.ndarray:
    with torch.no_grad():
        return model.encoder(batch_features([features], model.max_height))[0].numpy()


def score_pair(model: AdvantageModel, left: StateFeatures, right: StateFeatures) -> np.ndarray:
    """Probabilities over advantage scores that ``right`` improves on ``left``."""
    with torch.no_grad():
        fl = batch_features([left], model.max_height)
        fr = batch_features([right], model.max_height)
        return torch.softmax(model(fl, fr), dim=1)[0].numpy()


def asymmetric_loss(probs: torch.Tensor, labels: torch.Tensor, cfg: AamConfig = AamConfig(),
                    weights: torch.Tensor | None = None) -> torch.Tensor:
    """Summed asymmetric loss with label smoothing over a (B, K) probability batch."""
    k = probs.shape[1]
    onehot = torch.nn.functional.one_hot(labels, k).to(probs.dtype)
    smooth = onehot * (1 - cfg.epsilon) + (1 - onehot) * (cfg.epsilon / (k - 1))
    p_hat = torch.where(onehot > 0, probs, 1 - probs).clamp(min=CLAMP)
    gamma = onehot * cfg.gamma_pos + (1 - onehot) * cfg.gamma_neg
    per = -(smooth * (1 - p_hat) ** gamma * torch.log(p_hat)).sum(dim=1)
    if weights is not None:
        per = per * weights
    return per.sum()


def asymmetric_loss_grad(logits: np.ndarray, label: int, cfg: AamConfig = AamConfig()) -> np.ndarray:
    """Closed-form gradient of the single-sample loss with respect to the logits."""
    z = logits - logits.max()
    p = np.exp(z) / np.exp(z).sum()
    k = len(p)
    g = np.zeros(k)
    for j in range(k):
        pos = j == label
        h = 1 - cfg.epsilon if pos else cfg.epsilon / (k - 1)
        q = p[j] if pos else 1 - p[j]
        gam = cfg.gamma_pos if pos else cfg.gamma_neg
        dl_dq = -(1 - q) ** gam / q
        if gam != 0:
            dl_dq += gam * (1 - q) ** (gam - 1) * np.log(q)
        g[j] = h * dl_dq * (1 if pos else -1)
    # g holds dL/dp; chain through the softmax Jacobian
    return p * (g - np.dot(p, g))


@dataclass(frozen=True)
class TrainingPair:
    left: StateFeatures
    right: StateFeatures
    label: int
    weight: float = 1.0
    ident: tuple = ()


def make_pairs(query: JoinGraphQuery, records: Sequence[ExecutionRecord], book: PlanBook,
               rng: np.random.Generator, spec: DiscretizationSpec = DiscretizationSpec(),
               pairs_per_record: int = 4) -> list[TrainingPair]:
    """Oriented training pairs from one query's execution records.

    Every record is paired, in both orientations, with the original plan,
    with the fastest record, and with up to ``pairs_per_record`` random
    partners.  Pairs whose sides both timed out are dropped; censored sides
    enter the label at their threshold latency.
    """
    recs = list(records)
    if len(recs) < 2:
        return []
    original = next((r for r in recs if r.source is Source.ORIGINAL), recs[0])
    uncensored = [r for r in recs if not r.censored]
    best = min(uncensored, key=lambda r: r.latency) if uncensored else original
    seen = set()
    pairs = []

    def add(a: ExecutionRecord, b: ExecutionRecord):
        ident = (a.icp.key, a.step_index, b.icp.key, b.step_index)
        if a is b or ident in seen or (a.censored and b.censored):
            return
        if a.icp.key == b.icp.key and a.step_index == b.step_index:
            return
        seen.add(ident)
        pairs.append(TrainingPair(
            book.features(query, a.icp, a.step_index), book.features(query, b.icp, b.step_index),
            adv_score(a.latency, b.latency, spec), 1.0, ident))

    for x in recs:
        partners = [original, best]
        if pairs_per_record > 0 and len(recs) > 1:
            picks = rng.choice(len(recs), size=min(pairs_per_record, len(recs)), replace=False)
            partners += [recs[j] for j in picks]
        for y in partners:
            add(y, x)
            add(x, y)
    return pairs


@dataclass(frozen=True)
class TrainResult:
    accuracy: float
    loss: float
    epochs: int
    n_pairs: int


def _stack(pairs: Sequence[TrainingPair], max_height: int):
    fl = batch_features([p.left for p in pairs], max_height)
    fr = batch_features([p.right for p in pairs], max_height)
    y = torch.as_tensor([p.label for p in pairs], dtype=torch.long)
    w = torch.as_tensor([p.weight for p in pairs], dtype=DTYPE)
    return fl, fr, y, w


def accuracy(model: AdvantageModel, pairs: Sequence[TrainingPair]) -> float:
    fl, fr, y, _ = _stack(pairs, model.max_height)
    with torch.no_grad():
        pred = model(fl, fr).argmax(dim=1)
    return float((pred == y).double().mean())


def train(model: AdvantageModel, pairs: Sequence[TrainingPair], cfg: AamConfig | None = None,
          epochs: int | None = None, target_accuracy: float | None = None) -> TrainResult:
    """Mini-batch Adam on the asymmetric loss, warm-starting from ``model``'s weights."""
    if not pairs:
        raise ValueError("no training pairs")
    cfg = cfg or model.cfg
    epochs = cfg.epochs if epochs is None else epochs
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    fl, fr, y, w = _stack(pairs, model.max_height)
    n = len(pairs)
    loss_val = float("nan")
    acc = 0.0
    ep = 0
    for ep in range(1, epochs + 1):
        perm = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = torch.as_tensor(perm[s:s + cfg.batch_size])
            probs = torch.softmax(model(fl.index(idx), fr.index(idx)), dim=1)
            loss = asymmetric_loss(probs, y[idx], cfg, w[idx]) / len(idx)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite AAM loss at epoch {ep} (lr={cfg.lr}, pairs={n})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        loss_val = total / n
        if target_accuracy is not None:
            with torch.no_grad():
                acc = float((model(fl, fr).argmax(dim=1) == y).double().mean())
            if acc >= target_accuracy:
                break
    with torch.no_grad():
        acc = float((model(fl, fr).argmax(dim=1) == y).double().mean())
    log.debug("aam trained: %d pairs, %d epochs, loss %.4f, acc %.3f", n, ep, loss_val, acc)
    return TrainResult(acc, loss_val, ep, n)


def select_best(model, candidates: Sequence[StateFeatures]) -> int:
    """Index of the tournament winner over temporally ordered candidates.

    ``model`` is an AdvantageModel or any callable (left, right) -> score.
    """
    if not candidates:
        raise ValueError("no candidates")
    best = 0
    for i in range(1, len(candidates)):
        if _argmax_score(model, candidates[best], candidates[i]) > 0:
            best = i
    return best


def _argmax_score(model, left, right) -> int:
    if isinstance(model, AdvantageModel):
        return int(np.argmax(score_pair(model, left, right)))
    return int(model(left, right))


class AamJudge:
    """Scores plan pairs with the model's argmax class, caching plan encodings.

    Build a fresh judge whenever the model is retrained.
    """

    def __init__(self, model: AdvantageModel, query: JoinGraphQuery, book: PlanBook):
        self.model = model
        self.query = query
        self.book = book
        self._vec: dict = {}
        self._scores: dict = {}

    def vec(self, ref: PlanRef) -> torch.Tensor:
        k = (ref.key, ref.step)
        v = self._vec.get(k)
        if v is None:
            f = self.book.features(self.query, ref.icp, ref.step)
            with torch.no_grad():
                v = self.model.encoder(batch_features([f], self.model.max_height))
            self._vec[k] = v
        return v

    def probs(self, left: PlanRef, right: PlanRef) -> np.ndarray:
        k = (left.key, left.step, right.key, right.step)
        p = self._scores.get(k)
        if p is None:
            with torch.no_grad():
                p = torch.softmax(self.model.head(self.vec(left), self.vec(right)), dim=1)[0].numpy()
            self._scores[k] = p
        return p

    def score(self, left: PlanRef, right: PlanRef) -> int:
        return int(np.argmax(self.probs(left, right)))


def save_params(model: AdvantageModel, path: str | Path) -> None:
    doc = {"format": PARAMS_FORMAT, "version": 1, "config": asdict(model.cfg),
           "n_schema_tables": model.n_schema_tables, "n_schema_edges": model.n_schema_edges,
           "state": state_dict_to_json(model)}
    Path(path).write_text(json.dumps(doc))


def load_params(path: str | Path) -> AdvantageModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != PARAMS_FORMAT:
        raise ValueError(f"{path} is not an AAM parameter file")
    model = AdvantageModel(doc["n_schema_tables"], doc["n_schema_edges"], AamConfig(**doc["config"]))
    load_state_dict_json(model, doc["state"])
    return model
