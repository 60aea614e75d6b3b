"""Deterministic task execution with stage barriers and wall-time records.

The pipeline is organized as stages of independent pure tasks.  A stage
submits all its tasks, waits for every result (the barrier), and only then
may the next stage start.  Results are always collected in submission order
and every task derives its randomness from a seed embedded in its payload,
so the numerical output is identical for any worker count.

Worker processes are forked, which keeps task functions restricted to
module-level callables with picklable payloads.
"""

import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass


@dataclass(frozen=True)
class StageTiming:
    """Wall-clock record of one barrier-synchronized stage."""

    stage: str
    wall_time_s: float
    n_tasks: int
    n_workers: int
    started_at: float
    finished_at: float

    def to_json_dict(self) -> dict:
        return {"stage": self.stage, "wall_time_s": self.wall_time_s,
                "n_tasks": self.n_tasks, "n_workers": self.n_workers}


class TimingLog:
    """Ordered stage timings of one pipeline run."""

    def __init__(self):
        self.stages = []

    def record(self, timing: StageTiming) -> None:
        self.stages.append(timing)

    def barrier_ordering_holds(self) -> bool:
        """No stage started before the previous stage finished."""
        return all(b.started_at >= a.finished_at - 1e-9
                   for a, b in zip(self.stages, self.stages[1:]))

    def to_json_dict(self) -> dict:
        return {"stages": [s.to_json_dict() for s in self.stages],
                "total_wall_time_s": sum(s.wall_time_s for s in self.stages)}


class TaskExecutor:
    """Runs stages of independent tasks; one barrier after each stage.

    A worker count of 1 executes inline.  Higher counts fan tasks out to a
    forked process pool; results keep submission order either way.
    """

    def __init__(self, n_workers: int = 1):
        if n_workers < 1:
            raise ValueError("n_workers must be >= 1")
        self.n_workers = n_workers
        self.timing = TimingLog()

    def map(self, fn, payloads) -> list:
        """Order-preserving map over payloads, without timing a stage."""
        payloads = list(payloads)
        if self.n_workers == 1 or len(payloads) <= 1:
            return [fn(p) for p in payloads]
        workers = min(self.n_workers, len(payloads))
        ctx = multiprocessing.get_context("fork")
        chunk = max(1, len(payloads) // (4 * workers))
        with ProcessPoolExecutor(max_workers=workers,
                                 mp_context=ctx) as pool:
            return list(pool.map(fn, payloads, chunksize=chunk))

    def run_stage(self, stage: str, fn, payloads) -> list:
        """Run one stage to completion and record its timing.

        Args:
            stage: stage name for the timing record.
            fn: module-level callable applied to each payload.
            payloads: picklable task inputs; also defines result order.

        Returns:
            list of results aligned with ``payloads``.
        """
        started = time.monotonic()
        payloads = list(payloads)
        results = self.map(fn, payloads)
        finished = time.monotonic()
        self.timing.record(StageTiming(
            stage=stage, wall_time_s=finished - started,
            n_tasks=len(payloads),
            n_workers=min(self.n_workers, max(1, len(payloads))),
            started_at=started, finished_at=finished))
        return results
