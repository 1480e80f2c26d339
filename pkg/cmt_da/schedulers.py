"""
Data distribution schemes: the distortion-aware scheduler and the three
reference schemes it is compared against.

Each scheme has a pure `schedule_*` function mapping a snapshot of the
sender to a per-path assignment of the interval's chunks, and shares the
`Scheduler` runtime that keeps the send queues the path pacers pull from.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Deque, Dict, List, Mapping, Optional, Sequence, Tuple

from .allocator import Allocation, PathEstimate, allocate, initial_allocation, largest_remainder
from .channel import PathState, PathStats
from .distortion import expected_delay
from .scenario import Scenario
from .transport import (
    MTU,
    Chunk,
    CongestionPolicy,
    PathCongestionController,
    PathOption,
    SenderState,
    retransmission_decision,
)

logger = logging.getLogger(__name__)


class SchedulerScheme(Enum):
    CMT_DA = "cmt-da"
    CMT_QA = "cmt-qa"
    CMT_PF = "cmt-pf"
    CMT = "cmt"

    @property
    def policy(self) -> CongestionPolicy:
        return {
            SchedulerScheme.CMT_DA: CongestionPolicy.ECN_GUARDED,
            SchedulerScheme.CMT_QA: CongestionPolicy.CONSECUTIVE_LOSS,
            SchedulerScheme.CMT_PF: CongestionPolicy.LOSS_DRIVEN,
            SchedulerScheme.CMT: CongestionPolicy.LOSS_DRIVEN,
        }[self]

    @property
    def timed_reliability(self) -> bool:
        """Abandon at the sender and skip at the receiver once a chunk's deadline passes."""
        return self is SchedulerScheme.CMT_DA

    @property
    def ack_on_best_path(self) -> bool:
        return self is SchedulerScheme.CMT_DA

    @property
    def uses_failed_paths(self) -> bool:
        return self is SchedulerScheme.CMT

    def restart_cwnd(self, mtu: int = MTU) -> int:
        return 2 * mtu if self is SchedulerScheme.CMT_PF else mtu

    @classmethod
    def parse(cls, name: str) -> "SchedulerScheme":
        try:
            return cls(name.lower().replace("_", "-"))
        except ValueError:
            raise ValueError(f"unknown scheme {name!r}, expected one of {[s.value for s in cls]}") from None


@dataclass
class SchedulingState:
    """Snapshot of the sender handed to the schedule_* functions."""

    payloads: Sequence[int]
    target_rate: float
    stats: Mapping[int, PathStats]
    controllers: Mapping[int, PathCongestionController]
    flight: Mapping[int, int]
    last_rates: Mapping[int, float] = field(default_factory=dict)
    rr_start: int = 0
    now: float = 0.0
    mtu: int = MTU


@dataclass
class Assignment:
    per_path: Dict[int, List[int]]
    unassigned: List[int]
    rates: Dict[int, float]
    allocation: Optional[Allocation] = None

    def path_of(self, index: int) -> Optional[int]:
        for pid, indices in self.per_path.items():
            if index in indices:
                return pid
        return None


def _active(state: SchedulingState) -> List[int]:
    return [
        pid for pid in sorted(state.controllers)
        if state.controllers[pid].state is PathState.ACTIVE and state.stats[pid].mu > 0
    ]


def _arrival_order(state: SchedulingState, counts: Mapping[int, int]) -> Dict[int, List[int]]:
    """
    Hands out chunk indices (TSN order) by expected arrival: slot k on path p
    lands after the path's one-way delay plus the serialization of what is in
    flight and k + 1 more packets at the estimated bandwidth.
    """
    slots = []
    for pid, n in counts.items():
        s = state.stats[pid]
        for k in range(n):
            arrival = s.rtt / 2.0 + (state.flight.get(pid, 0) + (k + 1) * state.mtu) * 8.0 / s.mu
            slots.append((arrival, pid, k))
    slots.sort()
    per_path: Dict[int, List[int]] = {pid: [] for pid in counts}
    for index, (_, pid, _) in enumerate(slots):
        per_path[pid].append(index)
    return per_path


def _by_rates(state: SchedulingState, paths: List[int], rates: Sequence[float]) -> Dict[int, List[int]]:
    counts = dict(zip(paths, largest_remainder(len(state.payloads), rates)))
    return _arrival_order(state, counts)


def schedule_cmt_da(state: SchedulingState, scenario: Scenario) -> Assignment:
    """
    Distortion-aware allocation over the active paths, refreshed from the
    latest estimates; the residual bandwidth last observed is what the
    previous interval left of the path's estimate.
    """
    active = _active(state)
    if not active or not state.payloads:
        return Assignment(per_path={}, unassigned=list(range(len(state.payloads))), rates={})
    estimates = [
        PathEstimate(
            path_id=pid,
            mu=state.stats[pid].mu,
            rtt=state.stats[pid].rtt,
            loss_rate=state.stats[pid].loss_rate,
            nu_obs=max(0.0, state.stats[pid].mu - state.last_rates.get(pid, 0.0)),
        )
        for pid in active
    ]
    alloc = allocate(
        estimates,
        state.target_rate,
        scenario.deadline,
        scenario.loss_req,
        scenario.video.distortion,
        scenario.allocator_config(),
    )
    rates = [alloc.rates[pid] for pid in active]
    return Assignment(per_path=_by_rates(state, active, rates), unassigned=[], rates=dict(alloc.rates), allocation=alloc)


def quality_weights(state: SchedulingState, paths: Sequence[int]) -> Dict[int, float]:
    """
    Delivery rate a chunk can expect on each path: acceptance ratio over the
    time to get through what is already buffered for the path plus the chunk.
    """
    weights = {}
    for pid in paths:
        s = state.stats[pid]
        delivery = s.rtt / 2.0 + (state.flight.get(pid, 0) + state.mtu) * 8.0 / s.mu
        weights[pid] = (1.0 - s.loss_rate) / delivery
    return weights


def schedule_cmt_qa(state: SchedulingState) -> Assignment:
    active = _active(state)
    if not active or not state.payloads:
        return Assignment(per_path={}, unassigned=list(range(len(state.payloads))), rates={})
    weights = quality_weights(state, active)
    caps = [state.stats[pid].mu for pid in active]
    total_weight = sum(weights.values())
    if total_weight <= 0:
        weights, total_weight = dict(zip(active, caps)), sum(caps)
    # weights first, clipped at each path's bandwidth estimate
    shares = [state.target_rate * weights[pid] / total_weight for pid in active]
    rates = initial_allocation(min(state.target_rate, sum(caps)), caps) if any(
        s > c for s, c in zip(shares, caps)
    ) else shares
    return Assignment(per_path=_by_rates(state, active, rates), unassigned=[], rates=dict(zip(active, rates)))


def _round_robin(state: SchedulingState, eligible: List[int]) -> Assignment:
    """
    Chunks go round-robin to the eligible paths while their windows have room;
    the rest waits in the shared queue for the next window opening.
    """
    per_path: Dict[int, List[int]] = {pid: [] for pid in eligible}
    unassigned: List[int] = []
    if not eligible:
        return Assignment(per_path={}, unassigned=list(range(len(state.payloads))), rates={})
    room = {pid: state.controllers[pid].cwnd - state.flight.get(pid, 0) for pid in eligible}
    turn = state.rr_start % len(eligible)
    for index, size in enumerate(state.payloads):
        for k in range(len(eligible)):
            pid = eligible[(turn + k) % len(eligible)]
            if room[pid] >= size:
                per_path[pid].append(index)
                room[pid] -= size
                turn = (turn + k + 1) % len(eligible)
                break
        else:
            unassigned.append(index)
    total = sum(state.payloads) or 1
    rates = {pid: state.target_rate * sum(state.payloads[i] for i in idx) / total for pid, idx in per_path.items()}
    return Assignment(per_path=per_path, unassigned=unassigned, rates=rates)


def schedule_cmt(state: SchedulingState) -> Assignment:
    eligible = [pid for pid in sorted(state.controllers) if state.controllers[pid].state is not PathState.INACTIVE]
    return _round_robin(state, eligible)


def schedule_cmt_pf(state: SchedulingState) -> Assignment:
    eligible = [pid for pid in sorted(state.controllers) if state.controllers[pid].state is PathState.ACTIVE]
    return _round_robin(state, eligible)


class Scheduler:
    """
    Send queues of one association. Per interval the scheme's assignment fills
    the per-path queues; a path pacer takes retransmissions first, then its
    own queue, then the shared queue.
    """

    def __init__(self, scheme: SchedulerScheme, scenario: Scenario, sender: SenderState):
        self.scheme = scheme
        self.scenario = scenario
        self.sender = sender
        self.own: Dict[int, Deque[Chunk]] = {pid: deque() for pid in sender.path_ids}
        self.retx: Dict[int, Deque[Chunk]] = {pid: deque() for pid in sender.path_ids}
        self.shared: Deque[Chunk] = deque()
        self.last_rates: Dict[int, float] = {pid: 0.0 for pid in sender.path_ids}
        self.rr_start = 0
        self.abandoned: List[Chunk] = []
        self.rate_log: List[Tuple[float, int, Dict[int, float]]] = []
        self.infeasible_intervals = 0
        self.shortfall_intervals = 0
        self.loss_exceeded_intervals = 0

    def snapshot(self, payloads: Sequence[int], target_rate: float, now: float) -> SchedulingState:
        return SchedulingState(
            payloads=payloads,
            target_rate=target_rate,
            stats=dict(self.sender.stats),
            controllers=dict(self.sender.controllers),
            flight={pid: self.sender.flight(pid) for pid in self.sender.path_ids},
            last_rates=dict(self.last_rates),
            rr_start=self.rr_start,
            now=now,
            mtu=self.sender.mtu,
        )

    def assign(self, chunks: Sequence[Chunk], target_rate: float, now: float) -> Assignment:
        state = self.snapshot([c.bytes for c in chunks], target_rate, now)
        if self.scheme is SchedulerScheme.CMT_DA:
            assignment = schedule_cmt_da(state, self.scenario)
            if assignment.allocation is not None:
                self.infeasible_intervals += assignment.allocation.infeasible
                self.shortfall_intervals += assignment.allocation.shortfall
                self.loss_exceeded_intervals += assignment.allocation.loss_exceeded
        elif self.scheme is SchedulerScheme.CMT_QA:
            assignment = schedule_cmt_qa(state)
        elif self.scheme is SchedulerScheme.CMT_PF:
            assignment = schedule_cmt_pf(state)
        else:
            assignment = schedule_cmt(state)
        self.rr_start += 1

        for pid, indices in assignment.per_path.items():
            for i in indices:
                chunks[i].path_id = pid
                self.own[pid].append(chunks[i])
        for i in assignment.unassigned:
            chunks[i].path_id = None
            if self.scheme.timed_reliability:
                self.abandoned.append(chunks[i])
            else:
                self.shared.append(chunks[i])
        if assignment.rates:
            self.last_rates = {pid: assignment.rates.get(pid, 0.0) for pid in self.sender.path_ids}
        self.rate_log.append((now, chunks[0].gop_id if chunks else -1, dict(self.last_rates)))
        return assignment

    def eligible(self, path_id: int) -> bool:
        state = self.sender.controllers[path_id].state
        if state is PathState.ACTIVE:
            return True
        return self.scheme.uses_failed_paths and state is PathState.POTENTIALLY_FAILED

    def next_chunk(self, path_id: int, now: float) -> Optional[Tuple[Chunk, bool]]:
        if not self.eligible(path_id):
            return None
        for queue, retransmit in ((self.retx[path_id], True), (self.own[path_id], False), (self.shared, False)):
            while queue:
                chunk = queue[0]
                if self.scheme.timed_reliability and chunk.send_deadline <= now:
                    queue.popleft()
                    self.abandoned.append(chunk)
                    continue
                if not self.sender.can_send(path_id, chunk.bytes):
                    return None
                queue.popleft()
                return chunk, retransmit or chunk.first_path_id is not None
        return None

    def has_pending(self, path_id: int) -> bool:
        return bool(self.retx[path_id] or self.own[path_id] or self.shared)

    def path_options(self) -> Dict[int, PathOption]:
        options = {}
        for pid, s in self.sender.stats.items():
            rate = min(self.last_rates.get(pid, 0.0), s.mu)
            delay = expected_delay(rate, s.mu, max(0.0, s.mu - rate), s.rtt, unit=self.scenario.interval)
            options[pid] = PathOption(expected_delay=delay, state=self.sender.controllers[pid].state)
        return options

    def _reliable_target(self) -> Optional[int]:
        candidates = [pid for pid in self.sender.path_ids if self.eligible(pid)]
        if not candidates:
            return None
        if self.scheme is SchedulerScheme.CMT_QA:
            active = [pid for pid in candidates if self.sender.stats[pid].mu > 0]
            if active:
                weights = quality_weights(self.snapshot([], 0.0, 0.0), active)
                return max(active, key=lambda pid: (weights[pid], -pid))
        return min(candidates, key=lambda pid: (self.sender.stats[pid].loss_rate, pid))

    def on_losses(self, lost: Sequence[Chunk], now: float) -> None:
        if not lost:
            return
        if self.scheme.timed_reliability:
            plan = retransmission_decision(
                lost,
                self.path_options(),
                self.scenario.deadline,
                self.scenario.loss_req,
                self.sender.recorded_loss(),
                now,
            )
            ordered = set()
            for chunk, pid in plan.orders:
                self.retx[pid].append(chunk)
                ordered.add(chunk.tsn)
            self.abandoned.extend(c for c in lost if c.tsn not in ordered)
            return
        for chunk in lost:
            pid = self._reliable_target()
            if pid is None:
                self.shared.appendleft(chunk)
            else:
                self.retx[pid].append(chunk)

    def on_path_failed(self, path_id: int) -> None:
        """Queued data of a path that just timed out moves to the shared queue."""
        if self.scheme.uses_failed_paths:
            return
        moved = list(self.retx[path_id]) + list(self.own[path_id])
        self.retx[path_id].clear()
        self.own[path_id].clear()
        self.shared.extend(moved)
        if moved:
            logger.debug("path %s failed, %d queued chunks redistributed", path_id, len(moved))

    def drain_abandoned(self) -> List[Chunk]:
        out, self.abandoned = self.abandoned, []
        return out
