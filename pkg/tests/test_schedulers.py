import os
from dataclasses import replace
from unittest import TestCase

from cmt_da.channel import PathState
from cmt_da.scenario import load_scenario_file
from cmt_da.schedulers import (
    Scheduler,
    SchedulerScheme,
    SchedulingState,
    quality_weights,
    schedule_cmt,
    schedule_cmt_da,
    schedule_cmt_pf,
    schedule_cmt_qa,
)
from cmt_da.transport import MTU, Chunk, CongestionPolicy, SenderState

TABLE2 = os.path.join(os.path.dirname(__file__), "..", "scenario_conf", "table2.yaml")
RTTS = {0: 150.0, 1: 80.0, 2: 50.0}


def make_chunks(n: int, emitted_at: float = 0.0, deadline: float = 250.0, nbytes: int = MTU):
    return [Chunk(tsn=t, bytes=nbytes, gop_id=0, emitted_at=emitted_at, send_deadline=emitted_at + deadline) for t in range(n)]


def snapshot(sender: SenderState, payloads, target_rate: float = 1400.0, rr_start: int = 0) -> SchedulingState:
    return SchedulingState(
        payloads=payloads,
        target_rate=target_rate,
        stats=dict(sender.stats),
        controllers=dict(sender.controllers),
        flight={pid: sender.flight(pid) for pid in sender.path_ids},
        rr_start=rr_start,
    )


def fail_path(sender: SenderState, pid: int, state: PathState = PathState.POTENTIALLY_FAILED) -> None:
    sender.set_controller(replace(sender.controllers[pid], state=state))


class SchedulerSchemeTest(TestCase):
    def test_parse(self) -> None:
        self.assertIs(SchedulerScheme.parse("CMT_DA"), SchedulerScheme.CMT_DA)
        self.assertIs(SchedulerScheme.parse("cmt"), SchedulerScheme.CMT)
        with self.assertRaises(ValueError):
            SchedulerScheme.parse("sctp")

    def test_behaviour_flags(self) -> None:
        self.assertIs(SchedulerScheme.CMT_DA.policy, CongestionPolicy.ECN_GUARDED)
        self.assertIs(SchedulerScheme.CMT_QA.policy, CongestionPolicy.CONSECUTIVE_LOSS)
        self.assertTrue(SchedulerScheme.CMT_DA.timed_reliability)
        self.assertFalse(any(s.timed_reliability for s in SchedulerScheme if s is not SchedulerScheme.CMT_DA))
        self.assertTrue(SchedulerScheme.CMT.uses_failed_paths)
        self.assertFalse(SchedulerScheme.CMT_PF.uses_failed_paths)
        self.assertEqual(SchedulerScheme.CMT_PF.restart_cwnd(), 2 * MTU)
        self.assertEqual(SchedulerScheme.CMT.restart_cwnd(), MTU)


class ScheduleFunctionsTest(TestCase):
    def setUp(self) -> None:
        self.scenario = load_scenario_file(TABLE2)
        self.sender = SenderState(RTTS)

    def assert_partition(self, assignment, n: int) -> None:
        seen = sorted(i for idx in assignment.per_path.values() for i in idx) + assignment.unassigned
        self.assertEqual(sorted(seen), list(range(n)))
        for idx in assignment.per_path.values():
            self.assertEqual(idx, sorted(idx))

    def test_cmt_da(self) -> None:
        payloads = [MTU] * 29 + [250]
        assignment = schedule_cmt_da(snapshot(self.sender, payloads), self.scenario)
        self.assert_partition(assignment, 30)
        self.assertEqual(assignment.unassigned, [])
        self.assertIsNotNone(assignment.allocation)
        self.assertAlmostEqual(sum(assignment.rates.values()), 1400.0, places=6)
        for pid, rate in assignment.rates.items():
            self.assertLessEqual(rate, self.sender.stats[pid].mu + 1e-9)

    def test_cmt_da_without_active_path(self) -> None:
        for pid in RTTS:
            fail_path(self.sender, pid)
        assignment = schedule_cmt_da(snapshot(self.sender, [MTU] * 4), self.scenario)
        self.assertEqual(assignment.unassigned, [0, 1, 2, 3])
        self.assertEqual(assignment.per_path, {})

    def test_quality_weights(self) -> None:
        sender = SenderState({0: 100.0})
        weights = quality_weights(snapshot(sender, []), [0])
        # 50 ms one way plus 1500 bytes at 480 Kbps
        self.assertAlmostEqual(weights[0], 1.0 / 75.0)

    def test_cmt_qa_prefers_fast_paths(self) -> None:
        payloads = [MTU] * 20
        assignment = schedule_cmt_qa(snapshot(self.sender, payloads, target_rate=500.0))
        self.assert_partition(assignment, 20)
        self.assertGreater(assignment.rates[2], assignment.rates[0])
        self.assertAlmostEqual(sum(assignment.rates.values()), 500.0)

    def test_cmt_qa_clips_at_bandwidth(self) -> None:
        assignment = schedule_cmt_qa(snapshot(self.sender, [MTU] * 20, target_rate=1800.0))
        for pid, rate in assignment.rates.items():
            self.assertLessEqual(rate, self.sender.stats[pid].mu + 1e-9)
        self.assertAlmostEqual(sum(assignment.rates.values()), 1800.0)

    def test_round_robin(self) -> None:
        sender = SenderState({0: 100.0, 1: 100.0})
        assignment = schedule_cmt(snapshot(sender, [MTU] * 4))
        self.assertEqual(assignment.per_path, {0: [0, 2], 1: [1, 3]})

        assignment = schedule_cmt(snapshot(sender, [MTU] * 4, rr_start=1))
        self.assertEqual(assignment.per_path, {0: [1, 3], 1: [0, 2]})

    def test_round_robin_respects_windows(self) -> None:
        sender = SenderState({0: 100.0, 1: 100.0})
        assignment = schedule_cmt(snapshot(sender, [MTU] * 10))
        self.assertEqual(assignment.unassigned, [8, 9])
        self.assert_partition(assignment, 10)

    def test_failed_path_eligibility(self) -> None:
        sender = SenderState({0: 100.0, 1: 100.0})
        fail_path(sender, 1)
        self.assertEqual(schedule_cmt(snapshot(sender, [MTU] * 2)).per_path, {0: [0], 1: [1]})
        self.assertEqual(schedule_cmt_pf(snapshot(sender, [MTU] * 2)).per_path, {0: [0, 1]})

        fail_path(sender, 1, PathState.INACTIVE)
        self.assertEqual(schedule_cmt(snapshot(sender, [MTU] * 2)).per_path, {0: [0, 1]})


class SchedulerTest(TestCase):
    def setUp(self) -> None:
        self.scenario = load_scenario_file(TABLE2)
        self.sender = SenderState(RTTS)

    def scheduler(self, scheme: SchedulerScheme) -> Scheduler:
        return Scheduler(scheme, self.scenario, self.sender)

    def test_assign_fills_own_queues(self) -> None:
        scheduler = self.scheduler(SchedulerScheme.CMT_DA)
        chunks = make_chunks(30)
        scheduler.assign(chunks, 1400.0, 0.0)
        self.assertTrue(all(c.path_id is not None for c in chunks))
        self.assertEqual(sum(len(q) for q in scheduler.own.values()), 30)
        self.assertEqual(len(scheduler.rate_log), 1)
        self.assertAlmostEqual(sum(scheduler.last_rates.values()), 1400.0, places=6)

    def test_unassigned_chunks(self) -> None:
        for pid in RTTS:
            fail_path(self.sender, pid)
        scheduler = self.scheduler(SchedulerScheme.CMT_DA)
        chunks = make_chunks(3)
        scheduler.assign(chunks, 1400.0, 0.0)
        self.assertEqual(scheduler.drain_abandoned(), chunks)
        self.assertEqual(scheduler.drain_abandoned(), [])

        scheduler = self.scheduler(SchedulerScheme.CMT_PF)
        scheduler.assign(chunks, 1400.0, 0.0)
        self.assertEqual(list(scheduler.shared), chunks)

    def test_next_chunk_order(self) -> None:
        scheduler = self.scheduler(SchedulerScheme.CMT)
        a, b, c = make_chunks(3)
        scheduler.shared.append(c)
        scheduler.own[0].append(b)
        a.first_path_id = 1
        scheduler.retx[0].append(a)
        self.assertEqual(scheduler.next_chunk(0, 0.0), (a, True))
        self.assertEqual(scheduler.next_chunk(0, 0.0), (b, False))
        self.assertEqual(scheduler.next_chunk(0, 0.0), (c, False))
        self.assertIsNone(scheduler.next_chunk(0, 0.0))
        self.assertFalse(scheduler.has_pending(0))

    def test_next_chunk_window_full(self) -> None:
        scheduler = self.scheduler(SchedulerScheme.CMT)
        big = make_chunks(1, nbytes=7000)[0]
        scheduler.own[0].append(big)
        self.assertIsNone(scheduler.next_chunk(0, 0.0))
        self.assertTrue(scheduler.has_pending(0))

    def test_expired_chunks_abandoned(self) -> None:
        scheduler = self.scheduler(SchedulerScheme.CMT_DA)
        late, fresh = make_chunks(2)
        fresh.send_deadline = 1000.0
        scheduler.own[0].extend([late, fresh])
        self.assertEqual(scheduler.next_chunk(0, 300.0), (fresh, False))
        self.assertEqual(scheduler.drain_abandoned(), [late])

        reliable = self.scheduler(SchedulerScheme.CMT_PF)
        late = make_chunks(1)[0]
        reliable.own[0].append(late)
        self.assertEqual(reliable.next_chunk(0, 300.0), (late, False))

    def test_failed_path_sends_nothing(self) -> None:
        fail_path(self.sender, 0)
        scheduler = self.scheduler(SchedulerScheme.CMT_PF)
        scheduler.shared.extend(make_chunks(1))
        self.assertFalse(scheduler.eligible(0))
        self.assertIsNone(scheduler.next_chunk(0, 0.0))
        self.assertTrue(self.scheduler(SchedulerScheme.CMT).eligible(0))

    def test_da_retransmits_on_fastest_path(self) -> None:
        scheduler = self.scheduler(SchedulerScheme.CMT_DA)
        small = make_chunks(1, nbytes=100)[0]
        self.sender.on_send(small, 2, 0.0)
        self.sender.on_timer_expired(2, 1000.0)
        self.assertEqual(self.sender.recorded_loss(), 1.0)

        # path 2 is potentially failed; path 1 has the shortest idle delay (40 ms)
        options = scheduler.path_options()
        self.assertAlmostEqual(options[1].expected_delay, 40.0)
        self.assertIs(options[2].state, PathState.POTENTIALLY_FAILED)

        in_time, too_late = make_chunks(2, emitted_at=800.0)
        too_late.emitted_at = 700.0
        scheduler.on_losses([in_time, too_late], 1000.0)
        self.assertEqual(list(scheduler.retx[1]), [in_time])
        self.assertEqual(scheduler.drain_abandoned(), [too_late])

    def test_da_no_retransmission_within_requirement(self) -> None:
        scheduler = self.scheduler(SchedulerScheme.CMT_DA)
        lost = make_chunks(2)
        scheduler.on_losses(lost, 10.0)
        self.assertEqual(scheduler.drain_abandoned(), lost)
        self.assertTrue(all(not q for q in scheduler.retx.values()))

    def test_reliable_retransmission(self) -> None:
        scheduler = self.scheduler(SchedulerScheme.CMT_PF)
        lost = make_chunks(2)
        scheduler.on_losses(lost, 10.0)
        self.assertEqual(list(scheduler.retx[0]), lost)
        self.assertEqual(scheduler.drain_abandoned(), [])

        for pid in RTTS:
            fail_path(self.sender, pid)
        scheduler.on_losses(lost[:1], 20.0)
        self.assertEqual(list(scheduler.shared), lost[:1])

    def test_qa_retransmits_on_best_quality_path(self) -> None:
        scheduler = self.scheduler(SchedulerScheme.CMT_QA)
        lost = make_chunks(1)
        scheduler.on_losses(lost, 10.0)
        self.assertEqual(list(scheduler.retx[2]), lost)

    def test_on_path_failed(self) -> None:
        scheduler = self.scheduler(SchedulerScheme.CMT_PF)
        a, b = make_chunks(2)
        scheduler.own[1].append(a)
        scheduler.retx[1].append(b)
        scheduler.on_path_failed(1)
        self.assertEqual(list(scheduler.shared), [b, a])
        self.assertFalse(scheduler.own[1] or scheduler.retx[1])

        scheduler = self.scheduler(SchedulerScheme.CMT)
        scheduler.own[1].append(a)
        scheduler.on_path_failed(1)
        self.assertEqual(list(scheduler.own[1]), [a])
