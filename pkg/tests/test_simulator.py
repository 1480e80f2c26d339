import math
import os
import unittest
from unittest import TestCase

import numpy as np

from cmt_da.channel import GilbertChannel
from cmt_da.distortion import PathLossInputs, path_effective_loss
from cmt_da.metrics import Z_95, TraceKind, confidence_interval
from cmt_da.scenario import BackgroundSpec, PathSpec, load_scenario, load_scenario_file
from cmt_da.schedulers import SchedulerScheme
from cmt_da.simulator import BackgroundTraffic, Link, Simulation, apply_background_traffic, run

CONF_DIR = os.path.join(os.path.dirname(__file__), "..", "scenario_conf")
SLOW = os.environ.get("CMTDA_SLOW_TESTS") == "1"


def scenario_text(paths, **top) -> str:
    lines = [f"{k}: {v}" for k, v in top.items()]
    lines += ["background:", "  min: 0.0", "  max: 0.0", "paths:"]
    for p in paths:
        lines.append(f"  - id: {p['id']}")
        lines += [f"    {k}: {v}" for k, v in p.items() if k != "id"]
    return "\n".join(lines) + "\n"


def ample(n_paths: int = 1, **top):
    paths = [{"id": k, "capacity": 50000, "rtt": 40 + 20 * k} for k in range(n_paths)]
    top = {"duration": 5000, "receiver_buffer": 1048576, "video": "{rate: 600}", **top}
    return load_scenario(scenario_text(paths, **top))


class BackgroundTrafficTest(TestCase):
    def test_zero_range_is_identity(self) -> None:
        traffic = BackgroundTraffic(BackgroundSpec(min=0.0, max=0.0), np.random.default_rng(0))
        for t in (0.0, 123.0, 9999.0):
            self.assertEqual(apply_background_traffic(800.0, traffic, t), 800.0)

    def test_bounds_and_periods(self) -> None:
        spec = BackgroundSpec(min=0.05, max=0.10, period=500.0)
        traffic = BackgroundTraffic(spec, np.random.default_rng(1))
        for t in np.arange(0.0, 20000.0, 97.0):
            c = apply_background_traffic(1000.0, traffic, float(t))
            self.assertTrue(900.0 <= c <= 950.0)
        self.assertEqual(traffic.fraction(10.0), traffic.fraction(499.0))

    def test_same_generator_same_sequence(self) -> None:
        spec = BackgroundSpec(min=0.0, max=0.5, period=100.0)
        a = BackgroundTraffic(spec, np.random.default_rng(7))
        b = BackgroundTraffic(spec, np.random.default_rng(7))
        # query order does not matter
        late = b.fraction(950.0)
        self.assertEqual([a.fraction(t) for t in range(0, 1000, 100)][-1], late)


class LinkTest(TestCase):
    def make_link(self, availability=((0.0, math.inf),), queue_limit: float = 400.0) -> Link:
        spec = PathSpec(id=0, capacity_trace=((0.0, 1000.0),), base_rtt=40.0, availability=availability)
        scenario = ample().with_overrides(queue_limit=queue_limit)
        rng = np.random.default_rng(0)
        return Link(
            spec,
            scenario,
            GilbertChannel(None, rng),
            GilbertChannel(None, rng),
            BackgroundTraffic(BackgroundSpec(min=0.0, max=0.0), rng),
        )

    def test_serialization_and_marking(self) -> None:
        link = self.make_link()
        first = link.transmit(1500, 0.0)
        self.assertIs(first.kind, TraceKind.ARRIVE)
        # 12 ms on the wire at 1000 Kbps plus half the round trip
        self.assertAlmostEqual(first.arrival, 32.0)
        self.assertFalse(first.marked)
        second = link.transmit(1500, 0.0)
        self.assertAlmostEqual(second.arrival, 44.0)
        self.assertFalse(second.marked)
        third = link.transmit(1500, 0.0)
        self.assertTrue(third.marked)
        self.assertAlmostEqual(link.backlog(0.0), 36.0)

    def test_queue_limit(self) -> None:
        link = self.make_link(queue_limit=30.0)
        kinds = [link.transmit(1500, 0.0).kind for _ in range(4)]
        self.assertEqual(kinds, [TraceKind.ARRIVE] * 3 + [TraceKind.DROP])

    def test_unavailable(self) -> None:
        link = self.make_link(availability=((0.0, 100.0),))
        self.assertEqual(link.capacity(50.0), 1000.0)
        self.assertEqual(link.capacity(150.0), 0.0)
        self.assertIs(link.transmit(1500, 150.0).kind, TraceKind.DROP)
        self.assertIsNone(link.ack_delay(150.0))
        self.assertIsNone(link.heartbeat(150.0))
        self.assertEqual(link.ack_delay(50.0), 20.0)


class SimulationTest(TestCase):
    def test_lossless_single_path(self) -> None:
        report = run(ample(), "cmt-da", keep_trace=True)
        self.assertEqual(report.effective_loss, 0.0)
        self.assertAlmostEqual(report.goodput, report.offered_rate)
        self.assertEqual(report.retransmissions, 0)
        self.assertEqual(report.counters["timeouts"], 0)
        self.assertEqual(report.offsets.out_of_order_fraction, 0.0)
        report.trace.validate()

    def test_zero_capacity(self) -> None:
        scenario = load_scenario(scenario_text([{"id": 0, "capacity": 0, "rtt": 50}], duration=2000))
        for scheme in SchedulerScheme:
            report = run(scenario, scheme)
            self.assertEqual(report.goodput, 0.0)
            self.assertEqual(report.effective_loss, 1.0)
            self.assertTrue(report.transmission_ledger.balanced)

    def test_schemes_agree_without_loss(self) -> None:
        scenario = ample(3, deadline=".inf")
        for scheme in SchedulerScheme:
            report = run(scenario, scheme)
            self.assertEqual(report.effective_loss, 0.0, scheme)
            self.assertAlmostEqual(report.goodput, report.offered_rate, msg=scheme)
            self.assertAlmostEqual(report.offered_rate, 600.0, delta=1.0)

    def test_deterministic(self) -> None:
        scenario = load_scenario_file(os.path.join(CONF_DIR, "table2.yaml")).with_overrides(duration=3000.0, seed=5)
        for scheme in (SchedulerScheme.CMT_DA, SchedulerScheme.CMT):
            self.assertEqual(run(scenario, scheme).summary(), run(scenario, scheme).summary())

    def test_different_seeds_differ(self) -> None:
        scenario = load_scenario_file(os.path.join(CONF_DIR, "table2.yaml")).with_overrides(duration=3000.0)
        a = Simulation(scenario.with_overrides(seed=1), SchedulerScheme.CMT_DA).run(keep_trace=True)
        b = Simulation(scenario.with_overrides(seed=2), SchedulerScheme.CMT_DA).run(keep_trace=True)
        self.assertNotEqual(a.trace.records, b.trace.records)

    def test_ledgers_and_trace(self) -> None:
        scenario = load_scenario_file(os.path.join(CONF_DIR, "table2.yaml")).with_overrides(duration=4000.0)
        for scheme in SchedulerScheme:
            report = run(scenario, scheme, keep_trace=True)
            report.trace.validate()
            self.assertTrue(report.transmission_ledger.balanced, scheme)
            self.assertTrue(report.payload_ledger.balanced, scheme)
            self.assertEqual(len(report.gops), 16)
            self.assertTrue(0.0 <= report.effective_loss <= 1.0)
            delivered = [r.tsn for r in report.trace.of(TraceKind.DELIVER)]
            self.assertEqual(delivered, sorted(delivered))
            if not scheme.timed_reliability:
                self.assertEqual(report.trace.of(TraceKind.SKIP), [])
                self.assertEqual(report.payload_ledger.to_dict()["skipped"], 0)

    def test_measured_loss_tracks_model(self) -> None:
        scenario = load_scenario_file(os.path.join(CONF_DIR, "static.yaml"))
        measured = {p.id: [] for p in scenario.paths}
        predicted = {p.id: [] for p in scenario.paths}
        for seed in range(20):
            report = run(scenario.with_overrides(seed=seed), SchedulerScheme.CMT_DA)
            for p in scenario.paths:
                if p.id not in report.path_loss:
                    continue
                rates = [r[p.id] for _, _, r in report.rate_shares if r.get(p.id, 0.0) > 0]
                if not rates:
                    continue
                inputs = PathLossInputs(
                    gilbert=p.gilbert,
                    omega=scenario.omega,
                    chunk_size=scenario.mtu,
                    mtu=scenario.mtu,
                    rate=min(float(np.mean(rates)), p.mean_capacity),
                    mu=p.mean_capacity,
                    nu_obs=0.0,
                    rtt=p.base_rtt,
                    deadline=scenario.deadline,
                )
                measured[p.id].append(report.path_loss[p.id])
                predicted[p.id].append(path_effective_loss(inputs))
        checked = 0
        for p in scenario.paths:
            if len(measured[p.id]) < 10:
                continue
            mean, ci = confidence_interval(measured[p.id])
            self.assertLess(abs(mean - float(np.mean(predicted[p.id]))), 3 * ci / Z_95, p.name)
            checked += 1
        self.assertGreaterEqual(checked, 1)

    def test_rates_within_capacity(self) -> None:
        scenario = load_scenario_file(os.path.join(CONF_DIR, "table2.yaml")).with_overrides(duration=10000.0)
        sim = Simulation(scenario, SchedulerScheme.CMT_DA)
        report = sim.run()
        for p in scenario.paths:
            rates = [r.get(p.id, 0.0) for _, _, r in report.rate_shares]
            self.assertLessEqual(float(np.mean(rates)), p.mean_capacity, p.name)
            measured = sim.sender.delivery[p.id].estimate()
            if measured is not None:
                self.assertLessEqual(measured, p.mean_capacity + 1e-6, p.name)


class SchemeOrderingTest(TestCase):
    def test_distortion_aware_beats_plain(self) -> None:
        scenario = load_scenario_file(os.path.join(CONF_DIR, "table2.yaml")).with_overrides(duration=6000.0)
        da = [run(scenario.with_overrides(seed=s), SchedulerScheme.CMT_DA).summary() for s in range(4)]
        cmt = [run(scenario.with_overrides(seed=s), SchedulerScheme.CMT).summary() for s in range(4)]
        self.assertGreater(np.mean([r["psnr_mean"] for r in da]), np.mean([r["psnr_mean"] for r in cmt]))
        self.assertLess(np.mean([r["effective_loss"] for r in da]), np.mean([r["effective_loss"] for r in cmt]))


def gap_scenario(rng: np.random.Generator, seed: int):
    paths = []
    for k in range(int(rng.integers(2, 4))):
        down = float(rng.uniform(1000.0, 3000.0))
        up = down + float(rng.uniform(500.0, 2000.0))
        paths.append(
            {
                "id": k,
                "capacity": round(float(rng.uniform(200.0, 2000.0)), 1),
                "loss_rate": round(float(rng.uniform(0.005, 0.08)), 3),
                "burst": round(float(rng.uniform(2.0, 20.0)), 1),
                "rtt": round(float(rng.uniform(20.0, 200.0)), 1),
                "availability": f"[[0, {down:.1f}], [{up:.1f}, .inf]]",
            }
        )
    rate = round(float(rng.uniform(300.0, 1500.0)), 1)
    return load_scenario(scenario_text(paths, duration=6000, seed=seed, video=f"{{rate: {rate}}}"))


class TransportStressTest(TestCase):
    def check(self, report, scheme) -> None:
        report.trace.validate()
        self.assertTrue(report.transmission_ledger.balanced, scheme)
        self.assertTrue(report.payload_ledger.balanced, scheme)
        self.assertTrue(0.0 <= report.effective_loss <= 1.0)
        delivered = [r.tsn for r in report.trace.of(TraceKind.DELIVER)]
        self.assertEqual(delivered, sorted(delivered), scheme)
        self.assertEqual(len(delivered), len(set(delivered)), scheme)

    def test_availability_gaps(self) -> None:
        rng = np.random.default_rng(2024)
        timeouts = 0
        for seed in range(6):
            scenario = gap_scenario(rng, seed)
            for scheme in SchedulerScheme:
                # the simulator checks sender invariants after every sack and timer
                report = Simulation(scenario, scheme).run(keep_trace=True)
                self.check(report, scheme)
                timeouts += report.counters["timeouts"]
        self.assertGreater(timeouts, 0)

    def test_trajectories(self) -> None:
        for k in range(1, 5):
            scenario = load_scenario_file(os.path.join(CONF_DIR, f"trajectory_{k}.yaml"))
            for scheme in SchedulerScheme:
                with self.subTest(trajectory=k, scheme=scheme.value):
                    self.check(Simulation(scenario, scheme).run(keep_trace=True), scheme)


@unittest.skipUnless(SLOW, "set CMTDA_SLOW_TESTS=1 to run the scheme comparison")
class SchemeComparisonTest(TestCase):
    seeds = range(20)

    def sweep(self, scheme: SchedulerScheme):
        scenario = load_scenario_file(os.path.join(CONF_DIR, "table2.yaml")).with_overrides(duration=10000.0)
        return [run(scenario.with_overrides(seed=s), scheme).summary() for s in self.seeds]

    def test_distortion_aware_wins(self) -> None:
        da = self.sweep(SchedulerScheme.CMT_DA)
        qa = self.sweep(SchedulerScheme.CMT_QA)
        cmt = self.sweep(SchedulerScheme.CMT)

        def stat(rows, key):
            return confidence_interval([r[key] for r in rows])

        da_psnr, da_ci = stat(da, "psnr_mean")
        qa_psnr = stat(qa, "psnr_mean")[0]
        cmt_psnr, cmt_ci = stat(cmt, "psnr_mean")
        self.assertGreater(da_psnr, qa_psnr)
        self.assertGreater(qa_psnr, cmt_psnr)
        self.assertGreater(da_psnr - da_ci, cmt_psnr + cmt_ci)
        self.assertLess(stat(da, "effective_loss")[0], stat(cmt, "effective_loss")[0])
        self.assertLess(stat(da, "ipd_mean")[0], stat(cmt, "ipd_mean")[0])
