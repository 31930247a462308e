"""Dependency-ordered execution of a patch plan.

Two pieces live here: a unit-cost simulator (:func:`wavefront_schedule`)
used to reason about parallelism, and :func:`run_dag`, which executes real
work on a thread pool.  Workers only compute; the calling thread applies
results in a fixed order so writes never race.
"""

from __future__ import annotations

import heapq
import threading
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass
from typing import Callable

from .geometry import PatchPlan


class ScheduleError(RuntimeError):
    pass


@dataclass(frozen=True)
class TraceEntry:
    task: tuple[int, int]
    start: int  # tick (simulation) or event-clock position (execution)
    worker: int
    finish: int


def _parents(pos, n):
    i, j = pos
    return [(a, b) for a, b in ((i - 1, j), (i, j - 1), (i - 1, j - 1)) if a >= 0 and b >= 0]


def _children(pos, n):
    i, j = pos
    return [(a, b) for a, b in ((i + 1, j), (i, j + 1), (i + 1, j + 1)) if a < n and b < n]


def wavefront_schedule(plan: PatchPlan | int, workers: int | None = None) -> list[TraceEntry]:
    """Greedy list schedule with unit task cost.

    At every tick the ready tasks are started in (i+j, i) order, at most
    ``workers`` of them (``None`` means unlimited).  With unlimited workers
    each tick runs exactly one anti-diagonal.
    """
    n = plan if isinstance(plan, int) else plan.grid_n
    if workers is not None and workers < 1:
        raise ValueError("workers must be >= 1")
    pending = {(i, j): len(_parents((i, j), n)) for i in range(n) for j in range(n)}
    ready = [(0, 0, 0)] if n else []
    trace: list[TraceEntry] = []
    tick = 0
    while ready:
        batch = []
        while ready and (workers is None or len(batch) < workers):
            _, i, j = heapq.heappop(ready)
            batch.append((i, j))
        for w, pos in enumerate(batch):
            trace.append(TraceEntry(pos, tick, w, tick + 1))
        for pos in batch:
            for c in _children(pos, n):
                pending[c] -= 1
                if pending[c] == 0:
                    heapq.heappush(ready, (c[0] + c[1], c[0], c[1]))
        tick += 1
    if len(trace) != n * n:
        raise ScheduleError("dependency cycle: not every task became ready")
    return trace


def makespan(trace: list[TraceEntry]) -> int:
    return max((t.finish for t in trace), default=0)


def check_trace(n: int, trace: list[TraceEntry], check_workers: bool = True) -> None:
    """Raise unless every task runs once, after all its parents finished.

    With ``check_workers`` a worker may also hold only one task per tick.
    """
    finish = {}
    for t in trace:
        if t.task in finish:
            raise ScheduleError(f"task {t.task} scheduled twice")
        finish[t.task] = t.finish
    if len(finish) != n * n:
        raise ScheduleError(f"{n * n - len(finish)} tasks never ran")
    for t in trace:
        for p in _parents(t.task, n):
            if finish[p] > t.start:
                raise ScheduleError(f"task {t.task} started at {t.start} before parent {p} finished")
    if not check_workers:
        return
    busy: dict[tuple[int, int], tuple[int, int]] = {}
    for t in trace:
        for tick in range(t.start, t.finish):
            key = (t.worker, tick)
            if key in busy:
                raise ScheduleError(f"worker {t.worker} runs {busy[key]} and {t.task} at tick {tick}")
            busy[key] = t.task


def run_dag(
    plan: PatchPlan,
    compute: Callable,
    commit: Callable,
    threads: int = 1,
) -> list[TraceEntry]:
    """Run ``compute(task)`` for every task once its parents have been committed.

    ``compute`` runs on up to ``threads`` pool workers; ``commit(task, result,
    info)`` runs on the calling thread, and a task's children are released
    only after its commit returns.  ``info`` holds ``millis`` and ``worker``.
    Trace times are positions on one event clock counting submissions and
    commits, so parent-before-child can be checked with :func:`check_trace`.
    Any exception cancels outstanding work and is re-raised with the task's
    grid position attached.
    """
    n = plan.grid_n
    pending = {(i, j): len(_parents((i, j), n)) for i in range(n) for j in range(n)}
    ready = [(0, 0, 0)] if n else []
    trace: list[TraceEntry] = []
    clock = 0
    worker_ids: dict[int, int] = {}
    lock = threading.Lock()

    def job(pos):
        with lock:
            wid = worker_ids.setdefault(threading.get_ident(), len(worker_ids))
        t0 = time.perf_counter()
        try:
            out = compute(plan.task(*pos))
        except Exception as exc:
            raise ScheduleError(f"level {plan.level} task {pos} failed: {exc}") from exc
        return out, {"millis": (time.perf_counter() - t0) * 1e3, "worker": wid}

    def tick():
        nonlocal clock
        clock += 1
        return clock - 1

    def finish(pos, start, out, info):
        commit(plan.task(*pos), out, info)
        trace.append(TraceEntry(pos, start, info["worker"], tick()))
        for c in _children(pos, n):
            pending[c] -= 1
            if pending[c] == 0:
                heapq.heappush(ready, (c[0] + c[1], c[0], c[1]))

    if threads <= 1:
        while ready:
            _, i, j = heapq.heappop(ready)
            start = tick()
            out, info = job((i, j))
            finish((i, j), start, out, info)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            running = {}
            try:
                while ready or running:
                    while ready and len(running) < threads:
                        _, i, j = heapq.heappop(ready)
                        running[pool.submit(job, (i, j))] = ((i, j), tick())
                    done, _ = wait(running, return_when=FIRST_COMPLETED)
                    # commit in grid order so logs are stable for a given completion set
                    for fut in sorted(done, key=lambda f: running[f][0]):
                        pos, start = running.pop(fut)
                        out, info = fut.result()
                        finish(pos, start, out, info)
            except BaseException:
                for fut in running:
                    fut.cancel()
                raise
    if len(trace) != n * n:
        raise ScheduleError("dependency cycle: not every task became ready")
    return trace
