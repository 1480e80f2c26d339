"""
SCTP-like multipath sender / receiver state machines.

Congestion control is per path, acknowledgement is per association: every
SACK is filtered into per-path feedback by the TSN -> path dispatch record.
Chunks carry an arrival deadline; the sender abandons and the receiver skips
what can no longer make it.
"""

import logging
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Deque, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .channel import (
    LOSS_WINDOW,
    RTO_MAX,
    AckEvent,
    PathState,
    PathStats,
    note_dispatch,
    update_path_stats,
)

logger = logging.getLogger(__name__)

MTU = 1500
RTO_INITIAL = 1000.0
INITIAL_CWND_SEGMENTS = 4
MIN_SSTHRESH_SEGMENTS = 3
MISSING_THRESHOLD = 4
DUP_SACK_THRESHOLD = 3
MAX_HEARTBEAT_FAILURES = 5
QUEUE_RTT_FACTOR = 1.25
DEFAULT_RECEIVER_BUFFER = 65536
DEADLINE_TOL = 1e-6
BANDWIDTH_WINDOW = 1000.0
SPACING_TOL = 1e-6


class CongestionMode(Enum):
    SLOW_START = "slow_start"
    CONGESTION_AVOIDANCE = "congestion_avoidance"


class CongestionPolicy(Enum):
    """How a path reacts to detected losses."""

    # window cut only on ECN-flagged dup-SACKs or timeouts, growth scaled by 1 - loss
    ECN_GUARDED = "ecn_guarded"
    # conventional: every loss detection halves, once per recovery period
    LOSS_DRIVEN = "loss_driven"
    # halve only on consecutive losses or when RTT inflation signals a queue
    CONSECUTIVE_LOSS = "consecutive_loss"


@dataclass
class Chunk:
    tsn: int
    bytes: int
    gop_id: int
    emitted_at: float
    send_deadline: float
    path_id: Optional[int] = None
    first_path_id: Optional[int] = None
    sent_at: Optional[float] = None
    retransmit_count: int = 0
    missing_reports: int = 0
    ecn: bool = False


@dataclass(frozen=True)
class SackEvent:
    cumulative_tsn: int
    gap_blocks: Tuple[Tuple[int, int], ...]
    ecn_echo: bool
    uplink_path: Optional[int]
    timestamp: float
    trigger_tsn: Optional[int] = None

    def covers(self, tsn: int) -> bool:
        if tsn <= self.cumulative_tsn:
            return True
        return any(lo <= tsn <= hi for lo, hi in self.gap_blocks)

    @property
    def highest_tsn(self) -> int:
        return self.gap_blocks[-1][1] if self.gap_blocks else self.cumulative_tsn


@dataclass(frozen=True)
class PathCongestionController:
    path_id: int
    cwnd: float
    ssthresh: float
    rto: float = RTO_INITIAL
    mtu: int = MTU
    timer_deadline: Optional[float] = None
    dup_sack_count: int = 0
    mode: CongestionMode = CongestionMode.SLOW_START
    ecn_seen: bool = False
    state: PathState = PathState.ACTIVE
    partial_acked: float = 0.0
    consecutive_losses: int = 0
    recovery_until: float = float("-inf")
    heartbeat_failures: int = 0
    next_heartbeat: Optional[float] = None

    @classmethod
    def initial(cls, path_id: int, mtu: int = MTU, ssthresh: float = DEFAULT_RECEIVER_BUFFER) -> "PathCongestionController":
        return cls(path_id=path_id, cwnd=INITIAL_CWND_SEGMENTS * mtu, ssthresh=ssthresh, mtu=mtu)


def _reduced_ssthresh(cc: PathCongestionController) -> float:
    return max(cc.cwnd / 2.0, MIN_SSTHRESH_SEGMENTS * cc.mtu)


def on_timeout(cc: PathCongestionController) -> PathCongestionController:
    return replace(
        cc,
        ssthresh=_reduced_ssthresh(cc),
        cwnd=cc.mtu,
        mode=CongestionMode.SLOW_START,
        rto=min(RTO_MAX, 2.0 * cc.rto),
        state=PathState.POTENTIALLY_FAILED,
        timer_deadline=None,
        dup_sack_count=0,
        partial_acked=0.0,
        ecn_seen=False,
    )


def on_dup_sacks(cc: PathCongestionController) -> PathCongestionController:
    """
    Window cut on the third duplicate SACK, only when the path has seen an
    ECN echo. Without it the loss is taken for a wireless error.
    """
    if not cc.ecn_seen:
        return cc
    ssthresh = _reduced_ssthresh(cc)
    return replace(
        cc,
        ssthresh=ssthresh,
        cwnd=ssthresh,
        mode=CongestionMode.CONGESTION_AVOIDANCE,
        ecn_seen=False,
        dup_sack_count=0,
        partial_acked=0.0,
    )


def fast_recovery(cc: PathCongestionController, now: float, srtt: float) -> PathCongestionController:
    if now < cc.recovery_until:
        return cc
    ssthresh = _reduced_ssthresh(cc)
    return replace(
        cc,
        ssthresh=ssthresh,
        cwnd=ssthresh,
        mode=CongestionMode.CONGESTION_AVOIDANCE,
        partial_acked=0.0,
        recovery_until=now + srtt,
    )


def grow_cwnd(cc: PathCongestionController, acked_bytes: float, loss_rate: float = 0.0) -> PathCongestionController:
    """
    Slow start adds the acked bytes, congestion avoidance one MTU per window of
    acked data; both scaled by the acceptance ratio 1 - loss_rate.
    """
    scale = 1.0 - loss_rate
    cwnd, partial = cc.cwnd, cc.partial_acked
    if cwnd < cc.ssthresh:
        cwnd += acked_bytes * scale
    else:
        partial += acked_bytes
        if partial >= cwnd:
            partial -= cwnd
            cwnd += cc.mtu * scale
    mode = CongestionMode.SLOW_START if cwnd < cc.ssthresh else CongestionMode.CONGESTION_AVOIDANCE
    return replace(cc, cwnd=max(cwnd, cc.mtu), partial_acked=partial, mode=mode)


def heartbeat_check(
    cc: PathCongestionController,
    now: float,
    acked: Optional[bool] = None,
    restart_cwnd: Optional[float] = None,
) -> PathCongestionController:
    """
    acked=None schedules the first heartbeat immediately, False records a lost
    heartbeat and backs the next one off to rto * 2**failures, True restores the
    path with the restart window.
    """
    if cc.state is PathState.ACTIVE:
        return cc
    if acked is None:
        if cc.next_heartbeat is None:
            return replace(cc, next_heartbeat=now)
        return cc
    if acked:
        return replace(
            cc,
            state=PathState.ACTIVE,
            cwnd=restart_cwnd if restart_cwnd is not None else cc.mtu,
            mode=CongestionMode.SLOW_START,
            heartbeat_failures=0,
            next_heartbeat=None,
            partial_acked=0.0,
        )
    failures = cc.heartbeat_failures + 1
    state = PathState.INACTIVE if failures >= MAX_HEARTBEAT_FAILURES else cc.state
    return replace(
        cc,
        heartbeat_failures=failures,
        next_heartbeat=now + min(RTO_MAX, cc.rto * 2**failures),
        state=state,
    )


@dataclass(frozen=True)
class PathOption:
    expected_delay: float
    state: PathState = PathState.ACTIVE


@dataclass
class RetransmissionPlan:
    orders: List[Tuple[Chunk, int]] = field(default_factory=list)
    abandoned: List[Chunk] = field(default_factory=list)


def retransmission_decision(
    lost: Sequence[Chunk],
    paths: Mapping[int, PathOption],
    deadline: float,
    loss_req: float,
    recorded_loss: float,
    now: float,
) -> RetransmissionPlan:
    """
    Retransmit only while the measured loss exceeds the requirement, each
    chunk on the active path with the lowest expected delay, and only if that
    delay still fits before the chunk's deadline.
    """
    plan = RetransmissionPlan()
    if recorded_loss <= loss_req:
        return plan
    active = sorted((pid, opt) for pid, opt in paths.items() if opt.state is PathState.ACTIVE)
    for chunk in lost:
        if not active:
            plan.abandoned.append(chunk)
            continue
        pid, opt = min(active, key=lambda item: (item[1].expected_delay, item[0]))
        remaining = chunk.emitted_at + deadline - now
        if opt.expected_delay < remaining:
            plan.orders.append((chunk, pid))
        else:
            plan.abandoned.append(chunk)
    return plan


def select_ack_path(paths: Iterable[PathStats]) -> int:
    active = [s for s in paths if s.state is PathState.ACTIVE]
    if not active:
        raise ValueError("no active path to carry the SACK")
    return min(active, key=lambda s: (s.loss_rate, s.rtt, s.path_id)).path_id


class DeliveryRateEstimator:
    """
    Bottleneck bandwidth of one path from the receive spacing of its chunks.

    Two timed arrivals spaced wider than their sends queued behind each other,
    so the bytes delivered between them over the arrival gap is the rate the
    bottleneck drained at. A gap no wider than the send gap is limited by the
    sender and only counts when it beats the current estimate. The estimate
    is the max over the last `window` ms of samples; an idle path keeps its
    newest one.
    """

    def __init__(self, window: float = BANDWIDTH_WINDOW):
        self.window = window
        self.delivered = 0
        self.samples: Deque[Tuple[float, float]] = deque()
        self._last: Optional[Tuple[float, float, int]] = None

    def estimate(self) -> Optional[float]:
        if not self.samples:
            return None
        return max(rate for _, rate in self.samples)

    def on_delivered(
        self,
        nbytes: int,
        now: float,
        arrived_at: Optional[float] = None,
        sent_at: Optional[float] = None,
    ) -> Optional[float]:
        """
        Counts `nbytes` newly acknowledged. With the receive and send times of
        the chunk that triggered the SACK, returns the accepted rate sample
        (Kbps) or None.
        """
        self.delivered += nbytes
        if arrived_at is None or sent_at is None:
            return None
        if self._last is not None and arrived_at <= self._last[0]:
            return None
        last, self._last = self._last, (arrived_at, sent_at, self.delivered)
        if last is None:
            return None
        ack_gap = arrived_at - last[0]
        rate = (self.delivered - last[2]) * 8.0 / ack_gap
        current = self.estimate()
        if ack_gap <= sent_at - last[1] + SPACING_TOL and current is not None and rate <= current:
            return None
        while self.samples and self.samples[0][0] < now - self.window:
            self.samples.popleft()
        self.samples.append((now, rate))
        return rate


class SenderState:
    """
    Per-association sender: congestion controllers, live path estimates and
    the outstanding TSN maps of every path.
    """

    def __init__(
        self,
        path_rtts: Mapping[int, float],
        policy: CongestionPolicy = CongestionPolicy.ECN_GUARDED,
        mtu: int = MTU,
        receiver_buffer: int = DEFAULT_RECEIVER_BUFFER,
    ):
        self.policy = policy
        self.mtu = mtu
        self.receiver_buffer = receiver_buffer
        self.controllers: Dict[int, PathCongestionController] = {
            pid: PathCongestionController.initial(pid, mtu, ssthresh=receiver_buffer) for pid in sorted(path_rtts)
        }
        self.stats: Dict[int, PathStats] = {
            pid: PathStats.initial(pid, rtt, self.controllers[pid].cwnd, RTO_INITIAL) for pid, rtt in path_rtts.items()
        }
        self.outstanding: Dict[int, Dict[int, Chunk]] = {pid: {} for pid in self.controllers}
        self.delivery: Dict[int, DeliveryRateEstimator] = {pid: DeliveryRateEstimator() for pid in self.controllers}
        self.tsn_path: Dict[int, int] = {}
        self.highest_sent_tsn = -1
        self.ignored_sacks = 0
        self._outcomes: Deque[bool] = deque(maxlen=LOSS_WINDOW)

    @property
    def path_ids(self) -> List[int]:
        return list(self.controllers)

    def flight(self, path_id: int) -> int:
        return sum(c.bytes for c in self.outstanding[path_id].values())

    def total_flight(self) -> int:
        return sum(self.flight(pid) for pid in self.controllers)

    def can_send(self, path_id: int, nbytes: int) -> bool:
        cc = self.controllers[path_id]
        if self.flight(path_id) + nbytes > cc.cwnd:
            return False
        return self.total_flight() + nbytes <= self.receiver_buffer

    def recorded_loss(self) -> float:
        if not self._outcomes:
            return 0.0
        return sum(self._outcomes) / len(self._outcomes)

    def on_send(self, chunk: Chunk, path_id: int, now: float, retransmit: bool = False) -> bool:
        """
        Returns False, leaving everything untouched, when the path's window
        has no room for the chunk.
        """
        if not self.can_send(path_id, chunk.bytes):
            return False
        if retransmit:
            chunk.retransmit_count += 1
        else:
            chunk.first_path_id = path_id
        chunk.path_id = path_id
        chunk.sent_at = now
        chunk.missing_reports = 0

        self.outstanding[path_id][chunk.tsn] = chunk
        self.tsn_path[chunk.tsn] = path_id
        self.highest_sent_tsn = max(self.highest_sent_tsn, chunk.tsn)
        self.stats[path_id] = note_dispatch(self.stats[path_id], chunk.tsn)

        cc = self.controllers[path_id]
        if cc.timer_deadline is None or retransmit:
            cc = replace(cc, timer_deadline=now + cc.rto)
        self.controllers[path_id] = cc
        assert self.flight(path_id) <= cc.cwnd
        return True

    def _feedback(self, path_id: int, event: AckEvent) -> None:
        self.stats[path_id] = update_path_stats(self.stats[path_id], event)
        self._outcomes.append(event.lost)

    def _restart_timer(self, path_id: int, now: float) -> None:
        cc = self.controllers[path_id]
        if self.outstanding[path_id]:
            cc = replace(cc, timer_deadline=now + cc.rto)
        else:
            cc = replace(cc, timer_deadline=None)
        self.controllers[path_id] = cc

    def _refresh_stats(self, path_id: int) -> None:
        # window rate, capped by what the path has been measured to drain
        cc = self.controllers[path_id]
        stats = self.stats[path_id]
        mu = cc.cwnd * 8.0 / stats.rtt
        measured = self.delivery[path_id].estimate()
        if measured is not None:
            mu = min(mu, measured)
        self.stats[path_id] = replace(stats, state=cc.state, rto=cc.rto, cwnd=cc.cwnd, mu=mu)

    def _on_loss(self, path_id: int, now: float) -> None:
        cc = self.controllers[path_id]
        stats = self.stats[path_id]
        if self.policy is CongestionPolicy.LOSS_DRIVEN:
            cc = fast_recovery(cc, now, stats.rtt)
        elif self.policy is CongestionPolicy.CONSECUTIVE_LOSS:
            cc = replace(cc, consecutive_losses=cc.consecutive_losses + 1)
            queued = stats.min_rtt is not None and stats.rtt > QUEUE_RTT_FACTOR * stats.min_rtt
            if cc.consecutive_losses >= 2 or queued:
                cc = replace(fast_recovery(cc, now, stats.rtt), consecutive_losses=0)
        self.controllers[path_id] = cc

    def process_sack(self, sack: SackEvent, now: float) -> Tuple[List[Chunk], List[Chunk]]:
        """
        Returns (loss notifications, newly acknowledged chunks).
        """
        if sack.highest_tsn > self.highest_sent_tsn:
            self.ignored_sacks += 1
            logger.debug("sack above highest sent tsn %s ignored", self.highest_sent_tsn)
            return [], []

        if sack.ecn_echo and sack.trigger_tsn in self.tsn_path:
            pid = self.tsn_path[sack.trigger_tsn]
            self.controllers[pid] = replace(self.controllers[pid], ecn_seen=True)

        losses: List[Chunk] = []
        acked: List[Chunk] = []
        for pid in self.controllers:
            out = self.outstanding[pid]
            if not out:
                continue
            newly = [c for tsn, c in out.items() if sack.covers(tsn)]
            if not newly:
                continue
            flight_before = self.flight(pid)
            sampled = False
            for c in newly:
                del out[c.tsn]
                sample = now - c.sent_at if c.retransmit_count == 0 else None
                sampled = sampled or sample is not None
                self._feedback(pid, AckEvent(pid, c.tsn, lost=False, rtt_sample=sample))
            acked.extend(newly)
            # a retransmission may be acked by its earlier copy on another path
            first = [c for c in newly if c.retransmit_count == 0]
            trigger = next((c for c in first if c.tsn == sack.trigger_tsn), None)
            self.delivery[pid].on_delivered(
                sum(c.bytes for c in first),
                now,
                arrived_at=sack.timestamp if trigger is not None else None,
                sent_at=trigger.sent_at if trigger is not None else None,
            )

            cc = replace(self.controllers[pid], consecutive_losses=0)
            if sampled:
                cc = replace(cc, rto=self.stats[pid].rto)
            if cc.state is PathState.POTENTIALLY_FAILED:
                cc = replace(cc, state=PathState.ACTIVE, heartbeat_failures=0, next_heartbeat=None)
            if 2 * flight_before >= cc.cwnd:
                scale_loss = self.stats[pid].loss_rate if self.policy is CongestionPolicy.ECN_GUARDED else 0.0
                cc = grow_cwnd(cc, sum(c.bytes for c in newly), scale_loss)
            self.controllers[pid] = cc

            # split fast retransmit: only later TSNs acked on the same path count
            highest = max(c.tsn for c in newly)
            reported = False
            for tsn in sorted(out):
                if tsn >= highest:
                    break
                chunk = out[tsn]
                chunk.missing_reports += 1
                reported = True
                if chunk.missing_reports >= MISSING_THRESHOLD:
                    del out[tsn]
                    self._feedback(pid, AckEvent(pid, tsn, lost=True))
                    losses.append(chunk)
                    self._on_loss(pid, now)

            cc = self.controllers[pid]
            if reported:
                cc = replace(cc, dup_sack_count=cc.dup_sack_count + 1)
                if cc.dup_sack_count >= DUP_SACK_THRESHOLD:
                    if self.policy is CongestionPolicy.ECN_GUARDED:
                        cc = on_dup_sacks(cc)
                    cc = replace(cc, dup_sack_count=0)
            else:
                cc = replace(cc, dup_sack_count=0)
            self.controllers[pid] = cc
            self._refresh_stats(pid)
            self._restart_timer(pid, now)
        return losses, acked

    def on_timer_expired(self, path_id: int, now: float) -> List[Chunk]:
        """
        Stale expiries (timer re-armed or cancelled since) are ignored. A real
        expiry marks everything outstanding on the path as lost.
        """
        cc = self.controllers[path_id]
        if cc.timer_deadline is None or now + DEADLINE_TOL < cc.timer_deadline:
            return []
        lost = list(self.outstanding[path_id].values())
        self.outstanding[path_id] = {}
        for c in lost:
            self._feedback(path_id, AckEvent(path_id, c.tsn, lost=True))
        self.controllers[path_id] = on_timeout(cc)
        self._refresh_stats(path_id)
        logger.debug("path %s: timeout at %.1f ms, %d chunks lost", path_id, now, len(lost))
        return lost

    def set_controller(self, cc: PathCongestionController) -> None:
        self.controllers[cc.path_id] = cc
        self._refresh_stats(cc.path_id)

    def expire(self, now: float) -> List[Chunk]:
        """Drops outstanding chunks whose deadline has passed."""
        expired = []
        for pid, out in self.outstanding.items():
            late = [c for c in out.values() if c.send_deadline <= now + DEADLINE_TOL]
            if not late:
                continue
            for c in late:
                del out[c.tsn]
            stats = self.stats[pid]
            self.stats[pid] = replace(stats, dispatched=stats.dispatched - {c.tsn for c in late})
            expired.extend(late)
            if not out:
                self.controllers[pid] = replace(self.controllers[pid], timer_deadline=None)
        return expired

    def check_invariants(self) -> None:
        for pid, cc in self.controllers.items():
            assert cc.cwnd >= cc.mtu, f"path {pid}: cwnd {cc.cwnd} below one MTU"
            assert (cc.timer_deadline is not None) == bool(self.outstanding[pid]), f"path {pid}: timer discipline broken"


class ReceiverState:
    def __init__(self, buffer_capacity: int = DEFAULT_RECEIVER_BUFFER):
        self.buffer_capacity = buffer_capacity
        self.cumulative_tsn = -1
        self.reorder_buffer: Dict[int, Tuple[Chunk, float]] = {}
        self.buffered_bytes = 0
        self.delivered_log: List[Tuple[int, float, float]] = []
        self.skipped: List[int] = []
        self.late = 0
        self._skipped_set = set()
        self.last_tsn: Optional[int] = None
        self.blocked = 0
        self.duplicates = 0

    def gap_blocks(self) -> Tuple[Tuple[int, int], ...]:
        blocks = []
        for tsn in sorted(self.reorder_buffer):
            if blocks and blocks[-1][1] == tsn - 1:
                blocks[-1][1] = tsn
            else:
                blocks.append([tsn, tsn])
        return tuple((lo, hi) for lo, hi in blocks)

    def sack(self, now: float, uplink_path: Optional[int], ecn: bool = False, trigger: Optional[int] = None) -> SackEvent:
        return SackEvent(
            cumulative_tsn=self.cumulative_tsn,
            gap_blocks=self.gap_blocks(),
            ecn_echo=ecn,
            uplink_path=uplink_path,
            timestamp=now,
            trigger_tsn=trigger,
        )

    def _drain(self, now: float) -> List[Chunk]:
        delivered = []
        while self.cumulative_tsn + 1 in self.reorder_buffer:
            chunk, arrived = self.reorder_buffer.pop(self.cumulative_tsn + 1)
            self.buffered_bytes -= chunk.bytes
            self.cumulative_tsn = chunk.tsn
            self.delivered_log.append((chunk.tsn, arrived, now))
            delivered.append(chunk)
        return delivered

    def on_packet(
        self, chunk: Chunk, now: float, uplink_path: Optional[int] = None
    ) -> Tuple[List[Chunk], SackEvent, Optional[int]]:
        """
        Returns (chunks delivered in order, the SACK to send back, TSN offset to
        the previously received chunk). The offset is None for duplicates,
        drops and the very first arrival.
        """
        tsn = chunk.tsn
        if tsn <= self.cumulative_tsn or tsn in self.reorder_buffer:
            if tsn in self._skipped_set:
                self.late += 1
            else:
                self.duplicates += 1
            return [], self.sack(now, uplink_path, chunk.ecn, tsn), None

        if tsn != self.cumulative_tsn + 1 and self.buffered_bytes + chunk.bytes > self.buffer_capacity:
            self.blocked += 1
            logger.debug("receiver buffer full, tsn %s dropped", tsn)
            return [], self.sack(now, uplink_path, chunk.ecn, tsn), None

        offset = None if self.last_tsn is None else tsn - self.last_tsn
        self.last_tsn = tsn
        self.reorder_buffer[tsn] = (chunk, now)
        self.buffered_bytes += chunk.bytes
        delivered = self._drain(now)
        assert self.buffered_bytes <= self.buffer_capacity
        return delivered, self.sack(now, uplink_path, chunk.ecn, tsn), offset

    def next_deadline(self) -> Optional[float]:
        if not self.reorder_buffer:
            return None
        first = min(self.reorder_buffer)
        return self.reorder_buffer[first][0].send_deadline

    def skip_expired(self, now: float) -> List[Chunk]:
        """
        Once the first buffered chunk reaches its deadline every missing TSN
        before it is overdue too: skip them and deliver the buffered run.
        """
        delivered = []
        while self.reorder_buffer:
            first = min(self.reorder_buffer)
            if self.reorder_buffer[first][0].send_deadline > now + DEADLINE_TOL:
                break
            missing = range(self.cumulative_tsn + 1, first)
            self.skipped.extend(missing)
            self._skipped_set.update(missing)
            self.cumulative_tsn = first - 1
            delivered.extend(self._drain(now))
        return delivered
