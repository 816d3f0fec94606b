"""Master, solver and worker roles exchanging messages over in-process queues.

The master context owns the decomposition state.  A dedicated solver thread
re-solves the master problem on request and workers evaluate one contingency
at a time.  All traffic passes through queues; the master polls its inbox with
a short timeout so it never waits on a particular worker.

Two scheduling modes are provided.  ``synchronous`` replays the sequential
block loop through the message layer (master solve, one block, apply, repeat).
``asynchronous`` schedules rounds: every contingency selected for a round is
dispatched exactly once, replies are applied as they arrive (possibly against
an older snapshot), and the solver restarts after enough high-penalty replies.
"""

from __future__ import annotations

import itertools
import json
import logging
import queue
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Any, Callable

logger = logging.getLogger(__name__)

EVALUATE = "EvaluateContingency"
REPLY = "RecourseReply"
SOLVE_START = "SolveStart"
SOLVE_COMPLETE = "SolveComplete"
INIT = "Init"
FINALIZE = "Finalize"
KINDS = (EVALUATE, REPLY, SOLVE_START, SOLVE_COMPLETE, INIT, FINALIZE)

SYNCHRONOUS = "synchronous"
ASYNCHRONOUS = "asynchronous"

# reply statuses; the first four close a task for its round
OK = "ok"
ERROR = "error"
STALE = "stale"
FAILED = "failed"
TIMEOUT = "timeout"  # attempt abandoned, task reassigned
DISCARDED = "discarded"  # late reply of an abandoned attempt
TERMINAL = (OK, ERROR, STALE, FAILED)

MASTER = "master"
SOLVER = "solver"


@dataclass(frozen=True)
class Message:
    kind: str
    sender: str
    recipient: str
    snapshot: int | None = None
    contingency: str | None = None
    payload: Any = None
    attempt: int = 0
    round: int = 0


@dataclass
class EngineConfig:
    workers: int = 1
    mode: str = ASYNCHRONOUS
    stall_timeout: float = 300.0  # seconds per task attempt
    max_pending_master_updates: int = 4  # high-penalty replies before a master re-solve
    max_staleness: int | None = None  # reject replies older than this many snapshots
    max_attempts: int = 2  # one reassignment after a stall
    poll_interval: float = 0.005
    time_budget: float | None = None
    fault: Callable[[str, int, str], float] | None = None  # (cid, attempt, worker) -> stall seconds

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.mode not in (SYNCHRONOUS, ASYNCHRONOUS):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.stall_timeout <= 0 or self.poll_interval <= 0:
            raise ValueError("timeouts must be > 0")
        if self.max_pending_master_updates < 1 or self.max_attempts < 1:
            raise ValueError("max_pending_master_updates and max_attempts must be >= 1")
        if self.time_budget is not None and self.time_budget <= 0:
            raise ValueError("time_budget must be > 0")


@dataclass
class _Task:
    cid: str
    round: int
    attempt: int = 1
    worker: str | None = None
    snapshot: int | None = None
    started: float = 0.0


@dataclass
class Outcome:
    contingency: str
    round: int
    status: str
    evaluation: Any = None
    worker: str | None = None


@dataclass
class EngineStats:
    evaluations: int = 0
    failures: int = 0
    discarded: int = 0
    reassigned: int = 0
    master_solves: int = 0
    rounds: int = 0
    wall_seconds: float = 0.0
    budget_exhausted: bool = False

    @property
    def evaluations_per_second(self) -> float:
        return self.evaluations / self.wall_seconds if self.wall_seconds > 0 else 0.0

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["evaluations_per_second"] = self.evaluations_per_second
        return d


# ----------------------------------------------------------------------------
# roles


def _worker_loop(name, driver, inbox, outbox, fault):
    while True:
        msg = inbox.get()
        if msg.kind == FINALIZE:
            return
        if msg.kind != EVALUATE:
            continue
        stall = fault(msg.contingency, msg.attempt, name) if fault else 0.0
        if stall:
            time.sleep(stall)
        try:
            ev = driver.evaluate(msg.contingency, msg.snapshot, msg.payload)
            status = OK
        except Exception as exc:  # a failed evaluation must still be answered
            logger.exception("worker %s: %s failed", name, msg.contingency)
            ev, status = repr(exc), ERROR
        outbox.put(Message(REPLY, name, MASTER, msg.snapshot, msg.contingency,
                           (status, ev), msg.attempt, msg.round))


def _solver_loop(driver, inbox, outbox):
    while True:
        msg = inbox.get()
        if msg.kind == FINALIZE:
            return
        if msg.kind != SOLVE_START:
            continue
        try:
            res = driver.master_solve(msg.payload)
        except Exception as exc:
            logger.exception("master solve raised")
            res = exc
        outbox.put(Message(SOLVE_COMPLETE, SOLVER, MASTER, msg.snapshot, payload=res))


class Engine:
    """Runs a decomposition driver under the master/solver/worker protocol.

    The driver must provide ``master_solve(table)``, ``publish(result)``,
    ``snapshots``, ``state`` (with ``surrogates`` and ``iteration``),
    ``select_block(size)``, ``pass_schedule()``, ``evaluate(cid, snapshot, base)``,
    ``apply(evaluation)`` and ``finished()``, plus ``params.passes``.
    """

    def __init__(self, config: EngineConfig, driver):
        self.config = config
        self.driver = driver
        self.trace: list[dict] = []
        self.stats = EngineStats()
        self._seq = itertools.count()
        self._t0 = 0.0
        self._inbox: queue.Queue = queue.Queue()
        self._solver_q: queue.Queue = queue.Queue()
        self._worker_q: dict[str, queue.Queue] = {}
        self._threads: list[threading.Thread] = []
        self._idle: deque[str] = deque()
        self._busy: dict[str, _Task | None] = {}  # worker -> live task (None once abandoned)
        self._solving = False
        self._deadline = None

    # -- trace

    def _log(self, kind, sender, recipient, snapshot, contingency=None, **extra):
        rec = {"seq": next(self._seq), "time": round(time.perf_counter() - self._t0, 6),
               "from": sender, "to": recipient, "kind": kind, "snapshot": snapshot}
        if contingency is not None:
            rec["contingency"] = contingency
        rec.update(extra)
        self.trace.append(rec)

    def message_log(self) -> list[dict]:
        return list(self.trace)

    def write_trace(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.trace:
                fh.write(json.dumps(rec) + "\n")

    # -- lifecycle

    def _start(self):
        cfg = self.config
        self._t0 = time.perf_counter()
        if cfg.time_budget is not None:
            self._deadline = self._t0 + cfg.time_budget
        t = threading.Thread(target=_solver_loop, args=(self.driver, self._solver_q, self._inbox),
                             name=SOLVER, daemon=True)
        self._threads.append(t)
        self._log(INIT, MASTER, SOLVER, None)
        for i in range(cfg.workers):
            name = f"worker-{i}"
            q = queue.Queue()
            self._worker_q[name] = q
            self._idle.append(name)
            w = threading.Thread(target=_worker_loop, args=(name, self.driver, q, self._inbox, cfg.fault),
                                 name=name, daemon=True)
            self._threads.append(w)
            self._log(INIT, MASTER, name, None)
        for t in self._threads:
            t.start()

    def _stop(self):
        self._log(FINALIZE, MASTER, SOLVER, self.driver.state.snapshot)
        self._solver_q.put(Message(FINALIZE, MASTER, SOLVER))
        for name, q in self._worker_q.items():
            self._log(FINALIZE, MASTER, name, self.driver.state.snapshot)
            q.put(Message(FINALIZE, MASTER, name))
        for t in self._threads:
            # stalled workers are daemons; they are not waited for
            t.join(timeout=0.0 if self._busy.get(t.name) is not None else 1.0)
        self.stats.wall_seconds = time.perf_counter() - self._t0

    def _expired(self) -> bool:
        if self._deadline is not None and time.perf_counter() > self._deadline:
            if not self.stats.budget_exhausted:
                logger.warning("time budget exhausted")
            self.stats.budget_exhausted = True
            return True
        return False

    # -- solver requests

    def _request_solve(self):
        table = dict(self.driver.state.surrogates)
        snap = self.driver.state.snapshot
        self._log(SOLVE_START, MASTER, SOLVER, snap)
        self._solver_q.put(Message(SOLVE_START, MASTER, SOLVER, snap, payload=table))
        self._solving = True

    def _on_solve_complete(self, msg):
        res = msg.payload
        self._solving = False
        if isinstance(res, Exception):
            self._log(SOLVE_COMPLETE, SOLVER, MASTER, self.driver.state.snapshot, status=ERROR)
            return None
        snap = self.driver.publish(res)
        self.stats.master_solves += 1
        self._log(SOLVE_COMPLETE, SOLVER, MASTER, snap, status=res.status)
        return snap

    def _wait_solve(self):
        """Block on the solver only (used when no evaluation work can proceed)."""
        while self._solving:
            self._pump(block=True)

    # -- task pool

    def _dispatch(self, task: _Task):
        name = self._idle.popleft()
        snap = self.driver.state.snapshot
        task.worker, task.snapshot, task.started = name, snap, time.perf_counter()
        self._busy[name] = task
        self._log(EVALUATE, MASTER, name, snap, task.cid, attempt=task.attempt, round=task.round)
        self._worker_q[name].put(Message(EVALUATE, MASTER, name, snap, task.cid,
                                         self.driver.snapshots[snap], task.attempt, task.round))

    def _pump(self, block: bool) -> list:
        """Receive pending messages; returns outcomes of replies that close or stall tasks."""
        out = []
        try:
            msgs = [self._inbox.get(timeout=self.config.poll_interval) if block else self._inbox.get_nowait()]
        except queue.Empty:
            msgs = []
        while True:
            try:
                msgs.append(self._inbox.get_nowait())
            except queue.Empty:
                break
        for msg in msgs:
            if msg.kind == SOLVE_COMPLETE:
                self._on_solve_complete(msg)
            elif msg.kind == REPLY:
                out.extend(self._on_reply(msg))
        return out

    def _on_reply(self, msg) -> list:
        name = msg.sender
        task = self._busy.pop(name, None)
        self._idle.append(name)
        status, ev = msg.payload
        if task is None or task.cid != msg.contingency or task.attempt != msg.attempt:
            self.stats.discarded += 1
            self._log(REPLY, name, MASTER, msg.snapshot, msg.contingency, attempt=msg.attempt,
                      round=msg.round, status=DISCARDED)
            return []
        lag = self.driver.state.snapshot - msg.snapshot
        if status == OK and self.config.max_staleness is not None and lag > self.config.max_staleness:
            status = STALE
        self._log(REPLY, name, MASTER, msg.snapshot, msg.contingency, attempt=msg.attempt,
                  round=msg.round, status=status, lag=lag)
        if status != OK:
            self.stats.failures += 1
        return [Outcome(msg.contingency, msg.round, status, ev if status == OK else None, name)]

    def _check_stalls(self, pending: deque) -> list:
        now = time.perf_counter()
        out = []
        for name, task in list(self._busy.items()):
            if task is None or now - task.started <= self.config.stall_timeout:
                continue
            self._busy[name] = None  # worker stays occupied until it answers
            if task.attempt < self.config.max_attempts:
                self.stats.reassigned += 1
                self._log(REPLY, name, MASTER, task.snapshot, task.cid, attempt=task.attempt,
                          round=task.round, status=TIMEOUT)
                pending.appendleft(_Task(task.cid, task.round, task.attempt + 1))
            else:
                self.stats.failures += 1
                self._log(REPLY, name, MASTER, task.snapshot, task.cid, attempt=task.attempt,
                          round=task.round, status=FAILED)
                out.append(Outcome(task.cid, task.round, FAILED, None, name))
        return out

    def _live(self) -> int:
        return sum(t is not None for t in self._busy.values())

    # -- modes

    def run(self):
        self._start()
        try:
            if self.config.mode == SYNCHRONOUS:
                self._run_sync()
            else:
                self._run_async()
        finally:
            self._stop()
        return self.driver.state

    def _first_solve(self):
        self._request_solve()
        self._wait_solve()
        if self.driver.state.snapshot < 0:
            raise RuntimeError("initial master solve failed")

    def _run_block(self, block: list[str], round_no: int) -> dict[str, Outcome]:
        """Dispatch a block and collect one closing outcome per contingency."""
        pending = deque(_Task(cid, round_no) for cid in block)
        done: dict[str, Outcome] = {}
        while len(done) < len(block):
            while pending and self._idle:
                self._dispatch(pending.popleft())
            for o in self._pump(block=True) + self._check_stalls(pending):
                done[o.contingency] = o
            if self._expired():
                break
        return done

    def _run_sync(self):
        d, cfg = self.driver, self.config
        for t in range(1, d.params.passes + 1):
            d.state.iteration = t
            self.stats.rounds = t
            if t == 1:
                self._first_solve()
            else:
                self._request_solve()
                self._wait_solve()
            block = d.select_block(cfg.workers)
            done = self._run_block(block, t)
            for cid in block:  # fixed order keeps the run deterministic
                o = done.get(cid)
                if o is not None and o.status == OK:
                    self.stats.evaluations += 1
                    d.apply(o.evaluation)
            if d.finished() or self._expired():
                break

    def _run_async(self):
        d, cfg = self.driver, self.config
        self._first_solve()
        high = 0  # high-penalty replies since the last solve request
        applied = 0  # replies applied since the last solve request
        for rnd in range(1, d.params.passes + 1):
            d.state.iteration = rnd
            self.stats.rounds = rnd
            schedule = d.pass_schedule()
            pending = deque(_Task(cid, rnd) for cid in schedule)
            closed = set()
            while len(closed) < len(schedule):
                while pending and self._idle:
                    self._dispatch(pending.popleft())
                for o in self._pump(block=True) + self._check_stalls(pending):
                    closed.add(o.contingency)
                    if o.status == OK:
                        self.stats.evaluations += 1
                        applied += 1
                        high += d.apply(o.evaluation)
                if not self._solving and high >= cfg.max_pending_master_updates:
                    self._request_solve()
                    high = applied = 0
                if self._expired():
                    break
            if self._expired() or d.finished():
                break
            if applied and not self._solving:
                self._request_solve()
                high = applied = 0
            # the next round starts from the freshest base available
            self._wait_solve()
        if not self.stats.budget_exhausted:
            self._wait_solve()


def run(config: EngineConfig, driver):
    """Run ``driver`` under ``config``; returns the final decomposition state."""
    return Engine(config, driver).run()


# ----------------------------------------------------------------------------
# trace queries


def audit_trace(trace: list[dict]) -> dict:
    """Bookkeeping checks over a message log.

    Returns ``{"unanswered": [...], "multiply_answered": [...], "rounds": {r: {cid: closes}},
    "duplicate_dispatch": [...]}``; a clean log has empty lists and one close per
    scheduled contingency in every round.
    """
    answers: dict[tuple, int] = {}
    dispatched: dict[tuple, int] = {}
    first: dict[tuple, int] = {}
    rounds: dict[int, dict[str, int]] = {}
    for rec in trace:
        if rec["kind"] == EVALUATE:
            key = (rec["round"], rec["contingency"], rec["attempt"])
            dispatched[key] = dispatched.get(key, 0) + 1
            answers.setdefault(key, 0)
            if rec["attempt"] == 1:
                k = (rec["round"], rec["contingency"])
                first[k] = first.get(k, 0) + 1
            rounds.setdefault(rec["round"], {}).setdefault(rec["contingency"], 0)
        elif rec["kind"] == REPLY and rec.get("status") != DISCARDED:
            key = (rec["round"], rec["contingency"], rec["attempt"])
            answers[key] = answers.get(key, 0) + 1
            if rec["status"] in TERMINAL:
                rounds.setdefault(rec["round"], {}).setdefault(rec["contingency"], 0)
                rounds[rec["round"]][rec["contingency"]] += 1
    return {
        "unanswered": sorted(k for k, n in answers.items() if n == 0),
        "multiply_answered": sorted(k for k, n in answers.items() if n > 1),
        "duplicate_dispatch": sorted(k for k, n in list(dispatched.items()) + list(first.items()) if n > 1),
        "rounds": rounds,
    }


def solve_windows(trace: list[dict]) -> list[tuple[int, int]]:
    """(start seq, complete seq) of every master solve in the log."""
    out, start = [], None
    for rec in trace:
        if rec["kind"] == SOLVE_START:
            start = rec["seq"]
        elif rec["kind"] == SOLVE_COMPLETE and start is not None:
            out.append((start, rec["seq"]))
            start = None
    return out


def overlapping_evaluations(trace: list[dict]) -> int:
    """Number of evaluation replies received while a master solve was in flight."""
    windows = solve_windows(trace)
    return sum(1 for rec in trace if rec["kind"] == REPLY and rec.get("status") == OK
               and any(a < rec["seq"] < b for a, b in windows))
