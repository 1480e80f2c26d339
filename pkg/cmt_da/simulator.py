"""
Discrete-event simulation of one multipath association.

Every path is a drop-tail fluid bottleneck with Gilbert losses on both
directions; the source emits one GoP per distribution interval, the scheme's
scheduler fills the send queues and one pacer per path sends at the
interleaving spacing while its window allows.
"""

import itertools
import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import simpy

from .channel import GilbertChannel, PathState
from .metrics import EventTrace, MetricsReport, TraceKind, build_report
from .scenario import BackgroundSpec, PathSpec, Scenario
from .schedulers import Scheduler, SchedulerScheme
from .transport import Chunk, ReceiverState, SackEvent, SenderState, heartbeat_check, select_ack_path

logger = logging.getLogger(__name__)

ECN_BACKLOG_FACTOR = 0.5
UNBOUNDED_DEADLINE_DRAIN = 10000.0
STREAMS_PER_PATH = 3


class BackgroundTraffic:
    """
    Fraction of a bottleneck eaten by cross traffic, piecewise constant and
    redrawn uniformly from [min, max] every period. Draws happen lazily in
    period order, so the sequence only depends on the generator.
    """

    def __init__(self, spec: BackgroundSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        self._fractions: List[float] = []

    def fraction(self, t: float) -> float:
        k = max(0, int(t // self.spec.period))
        while len(self._fractions) <= k:
            self._fractions.append(float(self.rng.uniform(self.spec.min, self.spec.max)))
        return self._fractions[k]


def apply_background_traffic(capacity: float, traffic: BackgroundTraffic, t: float) -> float:
    return capacity * (1.0 - traffic.fraction(t))


@dataclass(frozen=True)
class LinkOutcome:
    kind: TraceKind
    arrival: Optional[float] = None
    marked: bool = False


class Link:
    def __init__(
        self,
        spec: PathSpec,
        scenario: Scenario,
        down: GilbertChannel,
        up: GilbertChannel,
        background: BackgroundTraffic,
    ):
        self.spec = spec
        self.speed = scenario.speed
        self.queue_limit = scenario.queue_limit
        self.down = down
        self.up = up
        self.background = background
        self.busy_until = 0.0

    def capacity(self, t: float) -> float:
        if not self.spec.available(t):
            return 0.0
        capacity = self.spec.capacity_at(t)
        if self.spec.fluctuation is not None:
            capacity *= self.spec.fluctuation.factor(t, self.speed)
        return apply_background_traffic(capacity, self.background, t)

    def backlog(self, now: float) -> float:
        return max(0.0, self.busy_until - now)

    def transmit(self, nbytes: int, now: float) -> LinkOutcome:
        capacity = self.capacity(now)
        backlog = self.backlog(now)
        if capacity <= 0 or backlog > self.queue_limit:
            return LinkOutcome(TraceKind.DROP)
        marked = backlog > ECN_BACKLOG_FACTOR * self.spec.base_rtt
        lost = self.down.is_lost(now)
        self.busy_until = max(now, self.busy_until) + nbytes * 8.0 / capacity
        if lost:
            return LinkOutcome(TraceKind.LOSE)
        return LinkOutcome(TraceKind.ARRIVE, arrival=self.busy_until + self.spec.base_rtt / 2.0, marked=marked)

    def ack_delay(self, now: float) -> Optional[float]:
        """One-way delay of a SACK on this path's uplink, None if it is lost."""
        if not self.spec.available(now) or self.up.is_lost(now):
            return None
        return self.spec.base_rtt / 2.0

    def heartbeat(self, now: float) -> Optional[float]:
        """Heartbeat round trip, None if the heartbeat or its ack is lost."""
        if self.capacity(now) <= 0 or self.down.is_lost(now) or self.up.is_lost(now):
            return None
        return self.backlog(now) + self.spec.base_rtt


class Simulation:
    def __init__(self, scenario: Scenario, scheme: SchedulerScheme):
        self.scenario = scenario
        self.scheme = scheme
        self.env = simpy.Environment()
        self.sender = SenderState(
            {p.id: p.base_rtt for p in scenario.paths},
            policy=scheme.policy,
            mtu=scenario.mtu,
            receiver_buffer=scenario.receiver_buffer,
        )
        self.receiver = ReceiverState(scenario.receiver_buffer)
        self.scheduler = Scheduler(scheme, scenario, self.sender)
        self.trace = EventTrace()

        streams = np.random.SeedSequence(scenario.seed).spawn(STREAMS_PER_PATH * len(scenario.paths))
        self.links: Dict[int, Link] = {}
        for k, spec in enumerate(sorted(scenario.paths, key=lambda p: p.id)):
            down, up, bg = (np.random.default_rng(s) for s in streams[STREAMS_PER_PATH * k:STREAMS_PER_PATH * (k + 1)])
            self.links[spec.id] = Link(
                spec,
                scenario,
                GilbertChannel(spec.gilbert, down),
                GilbertChannel(spec.gilbert, up),
                BackgroundTraffic(scenario.background, bg),
            )

        self.chunks: Dict[int, Chunk] = {}
        self.encoding_rates: Dict[int, float] = {}
        self.wakeup = {pid: self.env.event() for pid in self.links}
        self.timers: Dict[int, Optional[Tuple[float, simpy.Process]]] = {pid: None for pid in self.links}
        self.heartbeats: Dict[int, Optional[simpy.Process]] = {pid: None for pid in self.links}
        self.in_flight = 0
        self.timeouts = 0
        self.sacks_lost = 0
        self.last_delivered = -1
        self._skip_at: Optional[float] = None

    @property
    def horizon(self) -> float:
        drain = self.scenario.deadline if math.isfinite(self.scenario.deadline) else UNBOUNDED_DEADLINE_DRAIN
        return self.scenario.duration + drain + self.scenario.queue_limit + max(p.base_rtt for p in self.scenario.paths)

    def _record(self, kind: TraceKind, chunk: Chunk, path_id: Optional[int] = None):
        self.trace.append(self.env.now, kind, chunk.tsn, path_id, chunk.bytes, chunk.gop_id)

    def _kick(self, path_id: int):
        self.wakeup[path_id].succeed()
        self.wakeup[path_id] = self.env.event()

    def _kick_all(self):
        for pid in self.links:
            self._kick(pid)

    def _flush_abandoned(self):
        for chunk in self.scheduler.drain_abandoned():
            self._record(TraceKind.ABANDON, chunk, chunk.path_id)

    def _deliver(self, delivered: List[Chunk]):
        for chunk in delivered:
            assert chunk.tsn > self.last_delivered, f"tsn {chunk.tsn} delivered out of order"
            self.last_delivered = chunk.tsn
            self._record(TraceKind.DELIVER, chunk, chunk.path_id)

    def source(self):
        scenario = self.scenario
        tsn = itertools.count()
        for gop in itertools.count():
            now = self.env.now
            if now >= scenario.duration:
                return
            rate = scenario.video.rate_at(gop)
            self.encoding_rates[gop] = rate
            total = int(round(rate * scenario.interval / 8.0))
            sizes = [scenario.mtu] * (total // scenario.mtu) + ([total % scenario.mtu] if total % scenario.mtu else [])
            chunks = [
                Chunk(tsn=next(tsn), bytes=size, gop_id=gop, emitted_at=now, send_deadline=now + scenario.deadline)
                for size in sizes
            ]
            for chunk in chunks:
                self.chunks[chunk.tsn] = chunk
            self.scheduler.assign(chunks, rate, now)
            for chunk in chunks:
                self._record(TraceKind.EMIT, chunk, chunk.path_id)
            self._flush_abandoned()
            self._kick_all()
            yield self.env.timeout(scenario.interval)

    def pacer(self, path_id: int):
        while True:
            item = self.scheduler.next_chunk(path_id, self.env.now)
            self._flush_abandoned()
            if item is None:
                yield self.wakeup[path_id]
                continue
            chunk, retransmit = item
            self._transmit(path_id, chunk, retransmit)
            yield self.env.timeout(self.scenario.omega)

    def _transmit(self, path_id: int, chunk: Chunk, retransmit: bool):
        now = self.env.now
        sent = self.sender.on_send(chunk, path_id, now, retransmit)
        assert sent, f"path {path_id}: window refused tsn {chunk.tsn} after the scheduler released it"
        self._record(TraceKind.RETRANSMIT if retransmit else TraceKind.SEND, chunk, path_id)
        self._sync_timer(path_id)

        outcome = self.links[path_id].transmit(chunk.bytes, now)
        if outcome.kind is not TraceKind.ARRIVE:
            self._record(outcome.kind, chunk, path_id)
            return
        self.in_flight += chunk.bytes
        self.env.process(self._arrive(replace(chunk, ecn=outcome.marked), path_id, outcome.arrival))

    def _arrive(self, chunk: Chunk, path_id: int, at: float):
        yield self.env.timeout(at - self.env.now)
        now = self.env.now
        self.in_flight -= chunk.bytes
        self._record(TraceKind.ARRIVE, chunk, path_id)

        ack_path = path_id
        if self.scheme.ack_on_best_path:
            try:
                ack_path = select_ack_path(self.sender.stats.values())
            except ValueError:
                pass
        delivered, sack, _ = self.receiver.on_packet(chunk, now, ack_path)
        self._deliver(delivered)
        self._arm_skip()

        delay = self.links[ack_path].ack_delay(now)
        if delay is None:
            self.sacks_lost += 1
            return
        self.env.process(self._on_sack(sack, delay))

    def _on_sack(self, sack: SackEvent, delay: float):
        yield self.env.timeout(delay)
        now = self.env.now
        if self.scheme.timed_reliability:
            for chunk in self.sender.expire(now):
                self._record(TraceKind.ABANDON, chunk, chunk.path_id)
        self.trace.append(now, TraceKind.SACK, sack.cumulative_tsn, sack.uplink_path)
        losses, _ = self.sender.process_sack(sack, now)
        self.scheduler.on_losses(losses, now)
        self._flush_abandoned()
        for pid in self.links:
            self._sync_timer(pid)
        self.sender.check_invariants()
        self._kick_all()

    def _sync_timer(self, path_id: int):
        deadline = self.sender.controllers[path_id].timer_deadline
        armed = self.timers[path_id]
        if armed is not None and armed[0] == deadline:
            return
        if armed is not None and armed[1].is_alive:
            armed[1].interrupt()
        self.timers[path_id] = None if deadline is None else (deadline, self.env.process(self._timer(path_id, deadline)))

    def _timer(self, path_id: int, deadline: float):
        try:
            yield self.env.timeout(max(0.0, deadline - self.env.now))
        except simpy.Interrupt:
            return
        self.timers[path_id] = None
        now = self.env.now
        before = self.sender.controllers[path_id]
        lost = self.sender.on_timer_expired(path_id, now)
        if self.sender.controllers[path_id] is before:
            # stale
            return
        self.timeouts += 1
        self.trace.append(now, TraceKind.TIMEOUT, -1, path_id)
        self.scheduler.on_losses(lost, now)
        self.scheduler.on_path_failed(path_id)
        self._flush_abandoned()
        if self.heartbeats[path_id] is None:
            self.heartbeats[path_id] = self.env.process(self._heartbeat(path_id))
        self.sender.check_invariants()
        self._kick_all()

    def _heartbeat(self, path_id: int):
        link = self.links[path_id]
        restart = self.scheme.restart_cwnd(self.scenario.mtu)
        self.sender.set_controller(heartbeat_check(self.sender.controllers[path_id], self.env.now))
        while self.sender.controllers[path_id].state is not PathState.ACTIVE:
            cc = self.sender.controllers[path_id]
            yield self.env.timeout(max(0.0, cc.next_heartbeat - self.env.now))
            cc = self.sender.controllers[path_id]
            if cc.state is PathState.ACTIVE:
                break
            rtt = link.heartbeat(self.env.now)
            ack = self.env.event() if rtt is None else self.env.timeout(rtt)
            result = yield ack | self.env.timeout(cc.rto)
            cc = heartbeat_check(self.sender.controllers[path_id], self.env.now, acked=ack in result, restart_cwnd=restart)
            self.sender.set_controller(cc)
            if cc.state is PathState.INACTIVE:
                logger.debug("path %s inactive after %d lost heartbeats", path_id, cc.heartbeat_failures)
        self.heartbeats[path_id] = None
        self._kick(path_id)

    def _arm_skip(self):
        if not self.scheme.timed_reliability:
            return
        at = self.receiver.next_deadline()
        if at is None or (self._skip_at is not None and self._skip_at <= at):
            return
        self._skip_at = at
        self.env.process(self._skip(at))

    def _skip(self, at: float):
        yield self.env.timeout(max(0.0, at - self.env.now))
        if self._skip_at == at:
            self._skip_at = None
        already = len(self.receiver.skipped)
        delivered = self.receiver.skip_expired(self.env.now)
        for tsn in self.receiver.skipped[already:]:
            self._record(TraceKind.SKIP, self.chunks[tsn])
        self._deliver(delivered)
        self._arm_skip()

    def run(self, keep_trace: bool = False) -> MetricsReport:
        self.env.process(self.source())
        for pid in self.links:
            self.env.process(self.pacer(pid))
        self.env.run(until=self.horizon)

        sender_stats = self.sender.stats.values()
        counters = {
            "timeouts": self.timeouts,
            "sacks_lost": self.sacks_lost,
            "ignored_sacks": self.sender.ignored_sacks,
            "unknown_feedback": sum(s.unknown_feedback for s in sender_stats),
            "receiver_duplicates": self.receiver.duplicates,
            "receiver_late": self.receiver.late,
            "receiver_blocked": self.receiver.blocked,
            "infeasible_intervals": self.scheduler.infeasible_intervals,
            "shortfall_intervals": self.scheduler.shortfall_intervals,
            "loss_exceeded_intervals": self.scheduler.loss_exceeded_intervals,
        }
        report = build_report(
            self.trace,
            scheme=self.scheme.value,
            seed=self.scenario.seed,
            scenario=self.scenario.name,
            params=self.scenario.video.distortion,
            encoding_rates=self.encoding_rates,
            interval=self.scenario.interval,
            deadline=self.scenario.deadline,
            duration=self.scenario.duration,
            rate_shares=self.scheduler.rate_log,
            in_flight_bytes=self.in_flight,
            counters=counters,
            keep_trace=keep_trace,
        )
        logger.debug(
            "%s seed %d: psnr %.2f dB, goodput %.1f Kbps, effective loss %.4f",
            report.scheme, report.seed, report.psnr.mean, report.goodput, report.effective_loss,
        )
        return report


def run(scenario: Scenario, scheme: Union[SchedulerScheme, str], keep_trace: bool = False) -> MetricsReport:
    """Simulates `scenario` under one scheme; identical inputs give identical reports."""
    if isinstance(scheme, str):
        scheme = SchedulerScheme.parse(scheme)
    return Simulation(scenario, scheme).run(keep_trace=keep_trace)
