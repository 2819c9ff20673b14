"""Simulated execution: true-cardinality cost as latency, timeouts, and the buffer."""
from __future__ import annotations

import enum
import json
import threading
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from plandoctor.catalog import CardinalityMode, JoinGraphQuery
from plandoctor.expert import CostModel, annotate
from plandoctor.plan import CompletePlan, IncompletePlan, extract_icp

TIMEOUT_FACTOR = 1.5


class Source(str, enum.Enum):
    EXPLORATION = "exploration"
    VALIDATION = "validation"
    ORIGINAL = "original"


class BufferIOError(OSError):
    """Persistence failure, kept distinct from logic errors."""


@dataclass(frozen=True)
class ExecutionRecord:
    query_id: str
    icp: IncompletePlan
    latency: float
    censored: bool
    source: Source
    step_index: int

    def __post_init__(self):
        if not self.latency > 0:
            raise ValueError("latency must be positive")

    def to_dict(self) -> dict:
        return {"query_id": self.query_id, "icp": self.icp.to_dict(), "latency": self.latency,
                "censored": self.censored, "source": self.source.value,
                "step_index": self.step_index}

    @classmethod
    def from_dict(cls, d: dict) -> "ExecutionRecord":
        return cls(d["query_id"], IncompletePlan.from_dict(d["icp"]), float(d["latency"]),
                   bool(d["censored"]), Source(d["source"]), int(d["step_index"]))


def true_latency(query: JoinGraphQuery, icp: IncompletePlan | CompletePlan,
                 model: CostModel = CostModel()) -> float:
    return annotate(query, icp.order, icp.methods, model, CardinalityMode.TRUE)[2]


def execute(query: JoinGraphQuery, cp: CompletePlan, timeout: float | None = None,
            model: CostModel = CostModel(), source: Source = Source.EXPLORATION,
            step_index: int = 0, noise_sigma: float = 0.0,
            rng: np.random.Generator | None = None) -> ExecutionRecord:
    """Run ``cp``: latency is its cost under TRUE cardinalities.

    With ``noise_sigma`` > 0 the latency is multiplied by exp(N(0, sigma))
    drawn from ``rng``.  Latencies above ``timeout`` are censored at it.
    """
    latency = true_latency(query, cp, model)
    if noise_sigma > 0:
        if rng is None:
            raise ValueError("noise requires an explicit rng")
        latency *= float(np.exp(rng.normal(0.0, noise_sigma)))
    censored = timeout is not None and latency > timeout
    if censored:
        latency = timeout
    return ExecutionRecord(query.query_id, extract_icp(cp), latency, censored, source, step_index)


def dynamic_timeout(original_latency: float) -> float:
    return TIMEOUT_FACTOR * original_latency


class ExecutionBuffer:
    """Append-only record store, partitioned by query, optionally mirrored to JSON lines."""

    def __init__(self, path: str | Path | None = None):
        self.records: list[ExecutionRecord] = []
        self._by_query: dict[str, list[ExecutionRecord]] = defaultdict(list)
        self._lock = threading.Lock()
        self.path = Path(path) if path is not None else None

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: ExecutionRecord) -> None:
        with self._lock:
            if self.path is not None:
                try:
                    with self.path.open("a") as fh:
                        fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
                except OSError as exc:
                    raise BufferIOError(f"cannot append to {self.path}: {exc}") from exc
            self.records.append(record)
            self._by_query[record.query_id].append(record)

    def for_query(self, query_id: str) -> list[ExecutionRecord]:
        return list(self._by_query.get(query_id, ()))

    def query_ids(self) -> list[str]:
        return list(self._by_query)

    def best(self, query_id: str, sources: set[Source] | None = None) -> ExecutionRecord | None:
        """Fastest uncensored record; earliest wins ties."""
        best = None
        for r in self._by_query.get(query_id, ()):
            if r.censored or (sources is not None and r.source not in sources):
                continue
            if best is None or r.latency < best.latency:
                best = r
        return best

    @classmethod
    def replay(cls, path: str | Path, attach: bool = False) -> "ExecutionBuffer":
        buf = cls()
        try:
            lines = Path(path).read_text().splitlines()
        except OSError as exc:
            raise BufferIOError(f"cannot read {path}: {exc}") from exc
        for line in lines:
            if line.strip():
                buf.append(ExecutionRecord.from_dict(json.loads(line)))
        if attach:
            buf.path = Path(path)
        return buf


# convenience aliases matching the operation names
def buffer_append(buffer: ExecutionBuffer, record: ExecutionRecord) -> None:
    buffer.append(record)


def buffer_for_query(buffer: ExecutionBuffer, query_id: str) -> list[ExecutionRecord]:
    return buffer.for_query(query_id)
