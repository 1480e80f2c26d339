import math
from unittest import TestCase

import numpy as np

from cmt_da.distortion import DistortionParams, psnr_from_mse
from cmt_da.metrics import (
    EventTrace,
    TraceKind,
    build_report,
    chunk_table,
    confidence_interval,
    effective_loss,
    goodput,
    goodput_series,
    inter_packet_delays,
    out_of_order_offsets,
    path_effective_losses,
    psnr_series,
)

PARAMS = DistortionParams(d0=1.0, alpha=1000.0, r0=100.0, beta=50.0)


def sample_trace() -> EventTrace:
    """
    Three chunks of GoP 0: tsn 0 arrives in time, tsn 1 is lost on path 1 and
    retransmitted on path 0, tsn 2 waits behind it in the reorder buffer.
    """
    t = EventTrace()
    t.append(0.0, TraceKind.EMIT, 0, 0, 1500, 0)
    t.append(0.0, TraceKind.EMIT, 1, 1, 1500, 0)
    t.append(0.0, TraceKind.EMIT, 2, 0, 1000, 0)
    t.append(1.0, TraceKind.SEND, 0, 0, 1500, 0)
    t.append(1.0, TraceKind.SEND, 1, 1, 1500, 0)
    t.append(1.0, TraceKind.SEND, 2, 0, 1000, 0)
    t.append(5.0, TraceKind.LOSE, 1, 1, 1500, 0)
    t.append(20.0, TraceKind.ARRIVE, 0, 0, 1500, 0)
    t.append(20.0, TraceKind.DELIVER, 0, 0, 1500, 0)
    t.append(30.0, TraceKind.ARRIVE, 2, 0, 1000, 0)
    t.append(100.0, TraceKind.RETRANSMIT, 1, 0, 1500, 0)
    t.append(150.0, TraceKind.ARRIVE, 1, 0, 1500, 0)
    t.append(150.0, TraceKind.DELIVER, 1, 0, 1500, 0)
    t.append(150.0, TraceKind.DELIVER, 2, 0, 1000, 0)
    return t


class EventTraceTest(TestCase):
    def test_append_and_filter(self) -> None:
        trace = sample_trace()
        self.assertEqual(len(trace), 14)
        self.assertEqual([r.tsn for r in trace.of(TraceKind.DELIVER)], [0, 1, 2])
        self.assertEqual(trace.duration, 150.0)
        trace.validate()

    def test_time_goes_forward(self) -> None:
        trace = sample_trace()
        with self.assertRaises(AssertionError):
            trace.append(10.0, TraceKind.SACK)

    def test_no_path(self) -> None:
        trace = EventTrace()
        trace.append(0.0, TraceKind.EMIT, 0, None, 10, 0)
        self.assertEqual(trace.records[0].path_id, -1)

    def test_validate_rejects_phantom_delivery(self) -> None:
        trace = EventTrace()
        trace.append(0.0, TraceKind.DELIVER, 0, 0, 10, 0)
        with self.assertRaises(AssertionError):
            trace.validate()

    def test_frame_round_trip(self) -> None:
        trace = sample_trace()
        frame = trace.to_frame()
        self.assertEqual(list(frame.columns), ["time", "kind", "tsn", "path_id", "bytes", "gop_id"])
        self.assertEqual(EventTrace.from_frame(frame).records, trace.records)


class ChunkTableTest(TestCase):
    def test_columns(self) -> None:
        table = chunk_table(sample_trace(), deadline=100.0)
        self.assertEqual(table.sends.tolist(), [1, 2, 1])
        self.assertEqual(table.first_path.tolist(), [0, 1, 0])
        self.assertEqual(table.in_deadline.tolist(), [True, False, False])
        self.assertEqual(table.delivered_at.tolist(), [20.0, 150.0, 150.0])

    def test_unsent_chunk_keeps_planned_path(self) -> None:
        trace = EventTrace()
        trace.append(0.0, TraceKind.EMIT, 0, 2, 100, 0)
        table = chunk_table(trace)
        self.assertEqual(table.first_path.tolist(), [-1])
        self.assertEqual(table.path.tolist(), [2])
        self.assertFalse(table.in_deadline.iloc[0])

    def test_empty(self) -> None:
        self.assertTrue(chunk_table(EventTrace()).empty)
        self.assertEqual(effective_loss(EventTrace(), 100.0), 0.0)
        self.assertEqual(goodput(EventTrace(), 100.0), 0.0)


class ScalarMetricsTest(TestCase):
    def test_goodput(self) -> None:
        self.assertAlmostEqual(goodput(sample_trace(), 100.0, duration=1000.0), 1500 * 8 / 1000.0)
        self.assertAlmostEqual(goodput(sample_trace(), math.inf, duration=1000.0), 4000 * 8 / 1000.0)

    def test_effective_loss(self) -> None:
        self.assertAlmostEqual(effective_loss(sample_trace(), 100.0), 1.0 - 1500 / 4000)
        self.assertEqual(effective_loss(sample_trace(), math.inf), 0.0)

    def test_path_effective_losses(self) -> None:
        losses = path_effective_losses(chunk_table(sample_trace(), 100.0))
        self.assertAlmostEqual(losses[0], 0.4)
        self.assertAlmostEqual(losses[1], 1.0)


class InterPacketDelayTest(TestCase):
    def test_all_deliveries(self) -> None:
        ipd = inter_packet_delays(sample_trace())
        np.testing.assert_allclose(ipd.samples, [130.0, 0.0])
        self.assertAlmostEqual(ipd.mean, 65.0)
        self.assertAlmostEqual(ipd.at(0.0), 0.5)
        self.assertAlmostEqual(ipd.at(130.0), 1.0)
        self.assertEqual(ipd.grid[0], 0.0)
        self.assertEqual(ipd.cdf[-1], 1.0)
        self.assertTrue(np.all(np.diff(ipd.cdf) >= 0))

    def test_cdf_shape(self) -> None:
        rng = np.random.default_rng(3)
        for n in (2, 5, 50, 400):
            trace = EventTrace()
            times = np.cumsum(rng.exponential(12.0, n))
            for tsn, t in enumerate(times):
                trace.append(float(t), TraceKind.DELIVER, tsn, 0, 1000, 0)
            for step in (1.0, 0.5):
                ipd = inter_packet_delays(trace, step=step)
                self.assertEqual(ipd.samples.size, n - 1)
                self.assertTrue(np.all(np.diff(ipd.cdf) >= 0))
                self.assertEqual(ipd.cdf[-1], 1.0)
                self.assertGreaterEqual(ipd.grid[-1], ipd.samples.max())
                for x, p in zip(ipd.grid[:: max(1, len(ipd.grid) // 20)], ipd.cdf[:: max(1, len(ipd.grid) // 20)]):
                    self.assertAlmostEqual(ipd.at(float(x)), p)

    def test_in_deadline_only(self) -> None:
        ipd = inter_packet_delays(sample_trace(), deadline=100.0)
        self.assertEqual(ipd.samples.size, 0)
        self.assertEqual(ipd.mean, 0.0)
        self.assertTrue(np.all(ipd.cdf == 1.0))


class OffsetTest(TestCase):
    def test_offsets(self) -> None:
        offsets = out_of_order_offsets(sample_trace())
        self.assertEqual(offsets.offsets, [2, -1])
        self.assertEqual(offsets.histogram, {-1: 1, 2: 1})
        self.assertEqual(offsets.max, 2)
        self.assertEqual(offsets.out_of_order_fraction, 1.0)

    def test_in_order(self) -> None:
        trace = EventTrace()
        for tsn in range(4):
            trace.append(float(tsn), TraceKind.ARRIVE, tsn, 0, 10, 0)
        offsets = out_of_order_offsets(trace)
        self.assertEqual(offsets.max, 1)
        self.assertEqual(offsets.out_of_order_fraction, 0.0)


class ConfidenceIntervalTest(TestCase):
    def test_values(self) -> None:
        mean, ci = confidence_interval([1.0, 2.0, 3.0])
        self.assertAlmostEqual(mean, 2.0)
        self.assertAlmostEqual(ci, 1.96 / math.sqrt(3.0))
        self.assertEqual(confidence_interval([5.0]), (5.0, 0.0))
        mean, ci = confidence_interval([])
        self.assertTrue(math.isnan(mean))
        self.assertEqual(ci, 0.0)


class PsnrSeriesTest(TestCase):
    def test_model_psnr(self) -> None:
        series = psnr_series([[0.01, 0.05], []], PARAMS, [1100.0, 1100.0], [[600.0, 400.0], []])
        self.assertAlmostEqual(series.values[0], psnr_from_mse(3.3))
        self.assertAlmostEqual(series.values[1], psnr_from_mse(1.0 + 1.0 + 50.0))
        self.assertAlmostEqual(series.mean, float(np.mean(series.values)))


class GoodputSeriesTest(TestCase):
    def test_bins_and_moving_average(self) -> None:
        series = goodput_series(chunk_table(sample_trace(), 100.0), duration=1000.0)
        self.assertEqual(len(series), 10)
        self.assertAlmostEqual(series.goodput.iloc[0], 1500 * 8 / 100.0)
        self.assertTrue((series.goodput.iloc[1:] == 0.0).all())
        self.assertAlmostEqual(series.moving_average.iloc[1], 60.0)


class BuildReportTest(TestCase):
    def setUp(self) -> None:
        self.report = build_report(
            sample_trace(),
            scheme="cmt-da",
            seed=3,
            scenario="unit",
            params=PARAMS,
            encoding_rates={0: 1100.0},
            interval=250.0,
            deadline=100.0,
            duration=1000.0,
            rate_shares=[(0.0, 0, {0: 800.0, 1: 300.0})],
            counters={"timeouts": 0},
        )

    def test_ledgers(self) -> None:
        self.assertTrue(self.report.transmission_ledger.balanced)
        self.assertEqual(self.report.transmission_ledger.total, 5500)
        self.assertTrue(self.report.payload_ledger.balanced)
        self.assertEqual(self.report.payload_ledger.to_dict(), {"total": 4000, "delivered": 4000, "skipped": 0, "pending": 0})

    def test_scalars(self) -> None:
        r = self.report
        self.assertAlmostEqual(r.goodput, 12.0)
        self.assertAlmostEqual(r.offered_rate, 32.0)
        self.assertAlmostEqual(r.effective_loss, 0.625)
        self.assertAlmostEqual(r.overdue_ratio, 0.625)
        self.assertEqual((r.retransmissions, r.effective_retransmissions), (1, 0))
        self.assertIsNone(r.trace)

    def test_gop_psnr(self) -> None:
        # path 0 carried 2500 bytes (80 Kbps) at 40% loss, path 1 1500 bytes (48 Kbps) all lost
        expected = psnr_from_mse(1.0 + 1.0 + 50.0 * (80.0 * 0.4 + 48.0 * 1.0) / 128.0)
        self.assertAlmostEqual(self.report.gops.psnr.iloc[0], expected)
        self.assertAlmostEqual(self.report.psnr.mean, expected)
        self.assertAlmostEqual(self.report.gops.effective_loss.iloc[0], 0.625)

    def test_summary(self) -> None:
        summary = self.report.summary()
        self.assertEqual(summary["scheme"], "cmt-da")
        self.assertAlmostEqual(summary["path0_loss"], 0.4)
        self.assertAlmostEqual(summary["path1_loss"], 1.0)
        self.assertEqual(summary["timeouts"], 0)
        self.assertEqual(summary["max_offset"], 2)

    def test_per_gop_frame(self) -> None:
        frame = self.report.per_gop_frame()
        self.assertEqual(frame.rate_path0.tolist(), [800.0])
        self.assertEqual(frame.rate_path1.tolist(), [300.0])
        self.assertEqual(frame.gop_id.tolist(), [0])
