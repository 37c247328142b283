"""Deterministic simulators for chunked-prefill pipelines and decode engines.

Nothing here runs concurrently; the simulators compute event times for a
modelled pipeline with a total event order of (start time, stage, item).
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass

import numpy as np

from longattn.errors import ConfigurationError


@dataclass(frozen=True)
class CostModel:
    """Prefill cost of a chunk of ``n`` tokens after ``h`` history tokens.

    ``attn * n * h + self_attn * n**2 / 2 + linear * n + fixed``
    """

    attn: float = 1.0
    self_attn: float = 1.0
    linear: float = 0.0
    fixed: float = 0.0

    def __post_init__(self):
        for name in ("attn", "self_attn", "linear", "fixed"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative", field=name)


def chunk_cost(model: CostModel, n: int, h: int) -> float:
    return model.attn * n * h + model.self_attn * n * n / 2 + model.linear * n + model.fixed


@dataclass(frozen=True)
class ChunkSchedule:
    """Chunk sizes covering ``[0, L)`` in order."""

    sizes: tuple[int, ...]

    def __post_init__(self):
        if not self.sizes or any(s < 1 for s in self.sizes):
            raise ConfigurationError("every chunk must hold at least one token", field="sizes")

    @property
    def total(self) -> int:
        return sum(self.sizes)

    @property
    def boundaries(self) -> tuple[int, ...]:
        return tuple(int(x) for x in np.cumsum(self.sizes))

    @property
    def starts(self) -> tuple[int, ...]:
        return (0,) + self.boundaries[:-1]

    def costs(self, model: CostModel) -> list[float]:
        return [chunk_cost(model, n, h) for n, h in zip(self.sizes, self.starts)]


def _check_split(length: int, k: int):
    if length < 1:
        raise ConfigurationError("sequence length must be positive", field="L")
    if k < 1 or k > length:
        raise ConfigurationError(f"chunk count {k} must lie in [1, {length}]", field="k")


def fixed_schedule(length: int, k: int) -> ChunkSchedule:
    """Near-equal token counts, the remainder spread over the leading chunks."""
    _check_split(length, k)
    base, extra = divmod(length, k)
    return ChunkSchedule(tuple(base + (1 if i < extra else 0) for i in range(k)))


def _largest_fit(model: CostModel, start: int, hi: int, cap: float) -> int:
    """Largest ``n`` in ``[1, hi]`` with ``chunk_cost(n, start) <= cap``; 0 if none."""
    if chunk_cost(model, 1, start) > cap:
        return 0
    lo = 1
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if chunk_cost(model, mid, start) <= cap:
            lo = mid
        else:
            hi = mid - 1
    return lo


def _greedy(length: int, k: int, model: CostModel, cap: float) -> list[int] | None:
    sizes, start = [], 0
    for m in range(k - 1):
        room = length - start - (k - 1 - m)
        n = _largest_fit(model, start, room, cap)
        if n == 0:
            return None
        sizes.append(n)
        start += n
    last = length - start
    if chunk_cost(model, last, start) > cap:
        return None
    return sizes + [last]


def dcpp_schedule(length: int, k: int, model: CostModel) -> ChunkSchedule:
    """Chunk sizes that equalise chunk cost as the history grows.

    Bisects on the smallest per-chunk cost cap for which a greedy prefix walk
    (each chunk takes as many tokens as fit under the cap) covers the
    sequence in exactly ``k`` chunks.
    """
    _check_split(length, k)
    if k == 1:
        return ChunkSchedule((length,))
    # no chunk can cost more than this
    hi = (model.attn + model.self_attn) * length * length + model.linear * length + model.fixed
    lo = 0.0
    best = _greedy(length, k, model, hi)
    for _ in range(200):
        mid = (lo + hi) / 2
        trial = _greedy(length, k, model, mid)
        if trial is None:
            lo = mid
        else:
            hi, best = mid, trial
        if hi - lo <= 1e-12 * max(hi, 1.0):
            break
    return ChunkSchedule(tuple(best))


def discretization_bound(model: CostModel, schedule: ChunkSchedule) -> float:
    """Cost of moving one token between chunks at the final history length."""
    return model.attn * schedule.total + model.self_attn * max(schedule.sizes) + model.linear


@dataclass(frozen=True)
class Event:
    stage: int
    item: int
    start: float
    end: float


@dataclass
class EventTrace:
    events: list[Event]
    stages: int

    @property
    def makespan(self) -> float:
        return max(e.end for e in self.events)

    @property
    def first_start(self) -> float:
        return min(e.start for e in self.events)

    @property
    def busy_time(self) -> float:
        return sum(e.end - e.start for e in self.events)

    @property
    def bubble_ratio(self) -> float:
        """Idle stage-time over total stage-time between first start and makespan."""
        window = self.stages * (self.makespan - self.first_start)
        if window <= 0:
            return 0.0
        return (window - self.busy_time) / window

    def stage_events(self, stage: int) -> list[Event]:
        return [e for e in self.events if e.stage == stage]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "chunk", "start", "end"])
        for e in self.events:
            w.writerow([e.stage, e.item, repr(float(e.start)), repr(float(e.end))])
        return buf.getvalue()


def _sorted(events: list[Event]) -> list[Event]:
    return sorted(events, key=lambda e: (e.start, e.stage, e.item))


def pipeline_simulate(
    schedule: ChunkSchedule,
    stages: int,
    model: CostModel,
    stage_weights=None,
) -> EventTrace:
    """Run every chunk through ``stages`` pipeline stages in order.

    A chunk's cost is split across stages by ``stage_weights`` (uniform by
    default). Stage ``s`` starts chunk ``m`` once it finished chunk ``m - 1``
    and stage ``s - 1`` finished chunk ``m``.
    """
    if stages < 1:
        raise ConfigurationError("stages must be at least 1", field="stages")
    if stage_weights is None:
        weights = np.full(stages, 1.0 / stages)
    else:
        weights = np.asarray(stage_weights, dtype=np.float64)
        if weights.shape != (stages,) or np.any(weights < 0) or not np.isclose(weights.sum(), 1):
            raise ConfigurationError("stage weights must be non-negative and sum to 1")
    costs = schedule.costs(model)
    stage_free = [0.0] * stages
    events = []
    for m, cost in enumerate(costs):
        ready = 0.0
        for s in range(stages):
            start = max(stage_free[s], ready)
            end = start + cost * weights[s]
            events.append(Event(s, m, start, end))
            stage_free[s] = ready = end
    return EventTrace(_sorted(events), stages)


@dataclass(frozen=True)
class EngineTiming:
    scheduler: float
    model_runner: float
    decoder: float
    steps: int = 1000
    hop_latency: float = 0.0

    def __post_init__(self):
        for name in ("scheduler", "model_runner", "decoder"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} time must be positive", field=name)
        if self.steps < 1:
            raise ConfigurationError("steps must be at least 1", field="steps")
        if self.hop_latency < 0:
            raise ConfigurationError("hop latency must be non-negative", field="hopLatency")

    @property
    def stage_times(self) -> tuple[float, float, float]:
        return (self.scheduler, self.model_runner, self.decoder)


class EngineMode(str, enum.Enum):
    SERIAL = "serial"
    ASYNC = "async"


@dataclass
class EngineRun:
    trace: EventTrace
    completions: np.ndarray
    per_step_latency: float
    throughput: float
    steady_period: float


def tag_simulate(timing: EngineTiming, mode: EngineMode | str) -> EngineRun:
    """Scheduler -> model runner -> decoder, serially or as a free-running pipeline.

    In async mode the three stages are single servers joined by unbounded
    queues, so the scheduler never waits for the model runner.
    """
    mode = EngineMode(mode)
    times = timing.stage_times
    hop = timing.hop_latency
    free = [0.0, 0.0, 0.0]
    events, completions, latencies = [], [], []
    step_ready = 0.0
    for t in range(timing.steps):
        ready = step_ready
        first_start = None
        for s, dur in enumerate(times):
            start = max(free[s], ready)
            if first_start is None:
                first_start = start
            end = start + dur
            events.append(Event(s, t, start, end))
            free[s] = end
            ready = end + hop
        completions.append(end)
        latencies.append(end - first_start)
        if mode is EngineMode.SERIAL:
            step_ready = end
    completions = np.asarray(completions)
    trace = EventTrace(_sorted(events), 3)
    period = float(completions[-1] - completions[-2]) if len(completions) > 1 else float(end)
    return EngineRun(
        trace=trace,
        completions=completions,
        per_step_latency=float(np.mean(latencies)),
        throughput=timing.steps / float(completions[-1]),
        steady_period=period,
    )
