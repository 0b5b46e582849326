"""Deterministic discrete-event simulation of n replicas under partial synchrony.

Simulated time is integer microseconds.  Events are ordered by
``(time, sequence)``; the only source of randomness is a ``random.Random``
seeded from the run seed, so a ``(config, seed)`` pair always replays the
same event sequence.
"""

from __future__ import annotations

import enum
import gc
import hashlib
import heapq
import logging
import random
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

from swle import metrics
from swle.auth import SimAuthenticator
from swle.config import DEFAULT_GROUP_LATENCY_MS, Config
from swle.core import Params
from swle.engine import Block, Proposal, Replica, SafetyViolation

log = logging.getLogger(__name__)

DELIVER, TIMER = 0, 1


class Strategy(enum.Enum):
    SILENT_LEADER = "silent_leader"
    REPUTATION_BUILDER = "reputation_builder"
    MUTE = "mute"


class InvariantViolation(Exception):
    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


@dataclass
class SimEvent:
    time: int
    seq: int
    kind: str
    replica: int
    detail: str

    def __str__(self):
        return f"{self.time:>12}us #{self.seq} {self.kind} r{self.replica} {self.detail}"


def _describe(event: tuple) -> SimEvent:
    t, seq, kind, rid, payload = event
    if kind == TIMER:
        return SimEvent(t, seq, "timer", rid, f"v{payload}")
    return SimEvent(t, seq, "deliver", rid, f"{type(payload).__name__} v{getattr(payload, 'view', '?')}")


# --------------------------------------------------------------------------
# network


class NetworkModel:
    """Per-link delays with a GST switch.

    Before GST delays follow ``pre_gst`` (uniform up to ``max_ms``, or extra
    delay on messages sent by ``victims``); from GST on every message between
    correct replicas arrives within ``delta`` of ``max(send, GST)``.
    """

    def __init__(self, cfg: Config, rng: random.Random):
        n = cfg.n
        self.n = n
        self.rng = rng
        self.gst = int(cfg.gst_ms * 1000)
        self.delta = int(cfg.delta_ms * 1000)
        self.jitter = int(cfg.jitter_ms * 1000)
        if cfg.latency_matrix is not None:
            base = [[int(x * 1000) for x in row] for row in cfg.latency_matrix]
            self.group_of = [0] * n
        else:
            groups = cfg.latency_groups or {"delays_ms": DEFAULT_GROUP_LATENCY_MS}
            d = groups["delays_ms"]
            members = groups.get("members")
            if members is None:
                members = place_faulty_fastest(n, cfg.faulty, d)
            self.group_of = [0] * n
            for g, ids in enumerate(members):
                for i in ids:
                    self.group_of[i] = g
            base = [[int(d[self.group_of[i]][self.group_of[j]] * 1000) for j in range(n)] for i in range(n)]
        for i in range(n):
            base[i][i] = 0
        self.base = base
        pre = cfg.pre_gst or {"policy": "random", "max_ms": 0}
        self.policy = pre["policy"]
        self.pre_max = int(pre.get("max_ms", 0) * 1000)
        self.victims = frozenset(pre.get("victims", ()))
        self.victim_delay = int(pre.get("delay_ms", 0) * 1000)
        self.proposal_tx = int(cfg.batch_size * cfg.payload_bytes * 8 / (cfg.bandwidth_gbps * 1e3))

    def delay(self, src: int, dst: int, send: int) -> int:
        if src == dst:
            return 0
        d = self.base[src][dst]
        if self.jitter:
            d += int(self.rng.random() * self.jitter)
        if send < self.gst:
            if self.policy == "random":
                if self.pre_max > d:
                    d = d + int(self.rng.random() * (self.pre_max - d))
            elif src in self.victims:
                d += self.victim_delay
        bound = max(send, self.gst) + self.delta - send
        return d if d <= bound else bound

    def fanout(self, src: int, send: int) -> list[int]:
        """Delays from ``src`` to every replica, in replica order (same draws as ``delay``)."""
        if send < self.gst or not self.jitter:
            return [self.delay(src, j, send) for j in range(self.n)]
        rnd = self.rng.random
        jit = self.jitter
        bound = self.delta
        out = []
        for j, d in enumerate(self.base[src]):
            if j == src:
                out.append(0)
                continue
            d += int(rnd() * jit)
            out.append(d if d <= bound else bound)
        return out


def place_faulty_fastest(n: int, faulty, delays_ms) -> list[list[int]]:
    """Group membership with faulty replicas in the lowest-average-delay group."""
    g = len(delays_ms)
    order = sorted(range(g), key=lambda k: (sum(delays_ms[k]) / g, k))
    members: list[list[int]] = [[] for _ in range(g)]
    cap = [n // g + (1 if k < n % g else 0) for k in range(g)]
    queue = sorted(faulty) + [i for i in range(n) if i not in faulty]
    slot = 0
    for i in queue:
        while len(members[order[slot]]) >= cap[order[slot]]:
            slot += 1
        members[order[slot]].append(i)
    return [sorted(m) for m in members]


# --------------------------------------------------------------------------
# adversary


def byzantine_step(strategy: Strategy, outbox: list) -> list:
    """Filter what a faulty replica sends.

    Faulty replicas run the correct state machine so that their votes and
    view changes stay valid; the strategy decides what leaves the node.
    Both leader strategies withhold proposals: a silent leader to stall its
    views, a reputation builder to keep voting promptly while never paying
    for a view it would have to lead.
    """
    if strategy is Strategy.MUTE:
        return []
    return [(d, m) for d, m in outbox if type(m) is not Proposal]


# --------------------------------------------------------------------------


@dataclass
class SimulationReport:
    config: Config
    seed: int
    records: list[metrics.ViewRecord]
    summary: dict

    def csv(self) -> str:
        return metrics.to_csv(self.records)

    def json(self) -> str:
        return metrics.summary_json(self.summary)

    def series(self, window_ms: Optional[float] = None) -> metrics.Series:
        return metrics.instantaneous_series(self.records, window_ms, self.config.window_views)

    def digest(self) -> str:
        return hashlib.sha256((self.csv() + self.json()).encode()).hexdigest()


class Simulation:
    def __init__(self, cfg: Config, seed: Optional[int] = None):
        self.cfg = cfg
        self.seed = cfg.seed if seed is None else seed
        self.params = Params(cfg.n, t_f=cfg.t_f, theta=cfg.theta_override)
        self.rng = random.Random(self.seed)
        self.net = NetworkModel(cfg, self.rng)
        self.auth = SimAuthenticator(cfg.n, self.seed)
        self.now = 0
        self._seq = 0
        self._heap: list = []
        self.trace: deque = deque(maxlen=400)
        self.faulty = cfg.faulty
        self.correct = [i for i in range(cfg.n) if i not in self.faulty]
        n = cfg.n
        self.strategy: list[Optional[Strategy]] = [None] * n
        self.crash_from: list[Optional[int]] = [None] * n
        for ft in cfg.faults:
            if ft.kind == "crash":
                self.crash_from[ft.replica] = ft.from_view
            else:
                self.strategy[ft.replica] = Strategy(ft.strategy)
        self.active = [True] * n
        for i in range(n):
            if self.strategy[i] is Strategy.MUTE or (self.crash_from[i] is not None and self.crash_from[i] <= 1):
                self.active[i] = False
        self.proc = [0 if self.strategy[i] is Strategy.REPUTATION_BUILDER else cfg.processing_us for i in range(n)]
        blocks: dict = {}
        verdicts: dict = {}
        self.replicas = [
            Replica(i, self.params, self.auth, cfg.mechanism, int(cfg.timeout_ms * 1000), self, blocks, verdicts)
            for i in range(n)
        ]
        for r in self.replicas:
            r.op_bytes = cfg.payload_bytes
        self.horizon = cfg.views
        self._order = range(n)
        self._is_correct = [i not in self.faulty for i in range(n)]
        self._past_horizon = 0
        self._max_view = 0
        self._injections: list[Callable[["Simulation"], None]] = []
        # bookkeeping for records and checkers
        self.entries: dict[int, dict[int, tuple[int, bool, int]]] = {}
        self.determined: dict[int, dict[int, int]] = {}
        self.claims: dict[int, dict[int, int]] = {}
        self.prepare_quorums: dict[int, set[int]] = {}
        self.final_digest: dict[int, bytes] = {}
        self.final_count: dict[bytes, int] = {}
        self.final_block: dict[int, Block] = {}
        self.decide_time: dict[int, int] = {}
        self.ops_latency: dict[int, int] = {}
        # closed-loop clients
        outstanding = cfg.outstanding_ops or 3 * cfg.batch_size
        self.pending_ops: deque = deque([0] * outstanding)
        self.open_batches: dict[int, tuple[int, list[int]]] = {}
        self._batch_seq = 0

    # ------------------------------------------------------------- observer

    def entered(self, rid: int, view: int, leader: int, known: bool, now: int) -> None:
        if not self._is_correct[rid]:
            crash = self.crash_from[rid]
            if crash is not None and view >= crash:
                self.active[rid] = False
            return
        self.entries.setdefault(view, {})[rid] = (leader, known, now)
        self.determined.setdefault(view, {})[rid] = leader
        if view > self.horizon:
            self._past_horizon += 1
        if view > self._max_view:
            self._max_view = view
            self.global_checkers(view)

    def redetermined(self, rid: int, view: int, leader: int) -> None:
        if self._is_correct[rid]:
            self.determined.setdefault(view, {})[rid] = leader

    def claim_accepted(self, rid: int, view: int, proposer: int, cert) -> None:
        if not self._is_correct[rid]:
            return
        seen = self.claims.setdefault(view, {})
        seen[rid] = proposer
        if len(set(seen.values())) > 1:
            self._violation(f"view {view}: correct replicas accepted leadership claims from {sorted(set(seen.values()))}")

    def quorum_formed(self, rid: int, qc) -> None:
        if qc.phase == 1:
            leaders = self.prepare_quorums.setdefault(qc.view, set())
            leaders.add(qc.block.proposer)
            if len(leaders) > 1:
                self._violation(f"view {qc.view}: PREPARE quorums for proposers {sorted(leaders)}")

    def timed_out(self, rid: int, view: int, now: int) -> None:
        pass

    def finalized(self, rid: int, block: Block, now: int) -> None:
        if not self._is_correct[rid]:
            return
        v = block.view
        prior = self.final_digest.get(v)
        if prior is None:
            self.final_digest[v] = block.digest
            self.final_block[v] = block
            self._first_final(block)
        elif prior != block.digest:
            self._violation(f"view {v}: conflicting finalizations")
        c = self.final_count.get(block.digest, 0) + 1
        self.final_count[block.digest] = c
        if c == self.params.quorum:
            self.decide_time[v] = now
            batch = self.open_batches.pop(block.batch_id, None)
            if batch is not None:
                times = batch[1]
                self.ops_latency[v] = now * len(times) - sum(times)
                self.pending_ops.extend([now] * len(times))

    def _first_final(self, block: Block) -> None:
        # batches of lower views that did not make it onto the chain go back to the clients
        for bid, (v, times) in list(self.open_batches.items()):
            if v < block.view and self.final_digest.get(v) is None:
                del self.open_batches[bid]
                self.pending_ops.extendleft(reversed(times))

    def take_batch(self, proposer: int, view: int) -> tuple[int, int]:
        k = min(self.cfg.batch_size, len(self.pending_ops))
        times = [self.pending_ops.popleft() for _ in range(k)]
        self._batch_seq += 1
        self.open_batches[self._batch_seq] = (view, times)
        return self._batch_seq, k

    # ------------------------------------------------------------- checkers

    def _violation(self, message: str) -> None:
        raise InvariantViolation(message, [str(_describe(e)) for e in self.trace])

    def global_checkers(self, view: int) -> None:
        for inject in self._injections:
            inject(self)
        for i in self.correct:
            r = self.replicas[i]
            leaders = getattr(r.election, "leaders", None)
            if leaders is not None and not leaders.is_prefix_filled():
                self._violation(f"replica {i}: leader list not prefix-filled at view {view}")

    def inject(self, fn: Callable[["Simulation"], None]) -> None:
        """Run ``fn(sim)`` at every view boundary (fault-injection tests)."""
        self._injections.append(fn)

    # ---------------------------------------------------------------- loop

    def _push(self, t: int, kind: int, rid: int, payload) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, kind, rid, payload))

    def _flush(self, rid: int, out: list, timers: list) -> None:
        heap = self._heap
        push = heapq.heappush
        seq = self._seq
        for view, deadline in timers:
            seq += 1
            push(heap, (deadline, seq, TIMER, rid, view))
        if out:
            t0 = self.now + self.proc[rid]
            active = self.active
            net = self.net
            for dst, msg in out:
                extra = net.proposal_tx if type(msg) is Proposal else 0
                if dst is None:
                    for j, d in enumerate(net.fanout(rid, t0)):
                        if active[j]:
                            seq += 1
                            push(heap, (t0 + d + (extra if j != rid else 0), seq, DELIVER, j, msg))
                elif active[dst]:
                    seq += 1
                    push(heap, (t0 + net.delay(rid, dst, t0) + extra, seq, DELIVER, dst, msg))
        self._seq = seq

    def _step(self, rid: int, call, arg=None) -> None:
        r = self.replicas[rid]
        r.now = self.now
        try:
            call() if arg is None else call(arg)
        except SafetyViolation as exc:
            self._violation(str(exc))
        out, timers = r.outbox, r.timers
        r.outbox, r.timers = [], []
        strategy = self.strategy[rid]
        if strategy is not None:
            out = byzantine_step(strategy, out)
        if self.active[rid]:
            self._flush(rid, out, timers)

    def run(self) -> SimulationReport:
        # the event loop allocates millions of short-lived acyclic objects;
        # generational collection only burns time on it
        enabled = gc.isenabled()
        gc.disable()
        try:
            return self._run()
        finally:
            if enabled:
                gc.enable()

    def _run(self) -> SimulationReport:
        for i in range(self.cfg.n):
            if self.active[i]:
                self._step(i, self.replicas[i].start)
        heap = self._heap
        pop = heapq.heappop
        replicas = self.replicas
        active = self.active
        record = self.trace.append
        step = self._step
        need = len([i for i in self.correct if self.crash_from[i] is None])
        limit_us = int((self.horizon + 10) * (self.cfg.timeout_ms * 1000 + 1)) * 4 + self.net.gst
        while heap:
            event = pop(heap)
            t, _, kind, rid, payload = event
            if t > limit_us:
                log.warning("simulation stopped at time limit before reaching view %d", self.horizon)
                break
            self.now = t
            if not active[rid]:
                continue
            r = replicas[rid]
            if kind == DELIVER:
                record(event)
                step(rid, r.on_message, payload)
            elif payload == r.state.view:
                record(event)
                step(rid, r.on_timer, payload)
            if self._past_horizon >= need:
                break
        return self._report()

    # --------------------------------------------------------------- report

    def gst_view(self) -> int:
        gst = self.net.gst
        for v in sorted(self.entries):
            if min(e[2] for e in self.entries[v].values()) >= gst:
                return v
        return self.horizon + 1

    def records(self) -> list[metrics.ViewRecord]:
        out = []
        for v in range(1, self.horizon + 1):
            entries = self.entries.get(v, {})
            leaders = self.determined.get(v, {})
            block = self.final_block.get(v)
            finalized = block is not None
            out.append(metrics.make_record(
                v, leaders, self.faulty, finalized,
                min((e[2] for e in entries.values()), default=None),
                self.decide_time.get(v),
                block.n_ops if finalized and v in self.decide_time else 0,
                self.ops_latency.get(v, 0),
                all(e[1] for e in entries.values()),
            ))
        return out

    def _report(self) -> SimulationReport:
        recs = self.records()
        p = self.params
        cfg = self.cfg
        gst_view = self.gst_view()
        v_c = metrics.measure_v_c(recs, gst_view)
        thr, lat = metrics.averages(recs)
        try:
            gamma = metrics.gamma_windows(recs, p.n, p.f, p.theta, p.t_z, v_c).to_dict()
        except metrics.InsufficientHorizon:
            gamma = None
        summary = {
            "name": cfg.name,
            "mechanism": cfg.mechanism,
            "seed": self.seed,
            "n": p.n,
            "f": p.f,
            "views": self.horizon,
            "t_z": p.t_z,
            "theta": p.theta,
            "faulty": sorted(self.faulty),
            "throughput_avg": thr,
            "latency_avg": lat,
            "faulty_leader_pct": metrics.faulty_leader_rate(recs, self.faulty),
            "timeout_pct": metrics.timeout_rate(recs),
            "unified_pct": 100.0 * sum(r.unified for r in recs) / len(recs),
            "gamma_report": gamma,
            "gst_view": gst_view,
            "v_c": v_c,
            "sim_time_us": max((r.decide_us or r.entry_us or 0) for r in recs),
            "invariants": {"safety": "ok", "leader_uniqueness": "ok", "prefix_filled": "ok"},
        }
        return SimulationReport(cfg, self.seed, recs, summary)


def run(cfg: Config, seed: Optional[int] = None) -> SimulationReport:
    return Simulation(cfg, seed).run()
