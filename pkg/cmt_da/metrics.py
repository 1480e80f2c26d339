"""
Evaluation metrics computed from the transport event trace: goodput,
inter-packet delay, effective loss, out-of-order offsets and the model PSNR,
plus the per-run report the CLI writes out.
"""

import logging
import math
from collections import Counter
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .distortion import DistortionParams, psnr_from_mse, total_distortion
from .transport import DEADLINE_TOL

logger = logging.getLogger(__name__)

NO_PATH = -1
Z_95 = 1.96
GOODPUT_BIN = 100.0
MOVING_AVERAGE_WINDOW = 1000.0


class TraceKind(Enum):
    EMIT = "emit"
    SEND = "send"
    RETRANSMIT = "retransmit"
    ARRIVE = "arrive"
    DELIVER = "deliver"
    LOSE = "lose"
    DROP = "drop"
    ABANDON = "abandon"
    SACK = "sack"
    SKIP = "skip"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class TraceRecord:
    time: float
    kind: TraceKind
    tsn: int = -1
    path_id: int = NO_PATH
    bytes: int = 0
    gop_id: int = -1


TRACE_COLUMNS = [f.name for f in fields(TraceRecord)]
TRACE_DTYPES = {"time": float, "kind": object, "tsn": int, "path_id": int, "bytes": int, "gop_id": int}


class EventTrace:
    """
    Append-only record of what happened to every chunk. `emit` carries the
    planned path (NO_PATH when the chunk went to the shared queue).
    """

    def __init__(self, records: Optional[Sequence[TraceRecord]] = None):
        self.records: List[TraceRecord] = list(records or [])

    def append(self, time: float, kind: TraceKind, tsn: int = -1, path_id: Optional[int] = None, nbytes: int = 0, gop_id: int = -1):
        assert not self.records or time >= self.records[-1].time, "trace timestamps must be nondecreasing"
        self.records.append(TraceRecord(time, kind, tsn, NO_PATH if path_id is None else path_id, nbytes, gop_id))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[TraceRecord]:
        return iter(self.records)

    def of(self, kind: TraceKind) -> List[TraceRecord]:
        return [r for r in self.records if r.kind is kind]

    @property
    def duration(self) -> float:
        return self.records[-1].time if self.records else 0.0

    def to_frame(self) -> pd.DataFrame:
        rows = [(r.time, r.kind.value, r.tsn, r.path_id, r.bytes, r.gop_id) for r in self.records]
        return pd.DataFrame(rows, columns=TRACE_COLUMNS).astype(TRACE_DTYPES)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "EventTrace":
        return cls([
            TraceRecord(float(row.time), TraceKind(row.kind), int(row.tsn), int(row.path_id), int(row.bytes), int(row.gop_id))
            for row in frame.itertuples(index=False)
        ])

    def validate(self) -> None:
        arrived = set()
        delivered = set()
        last = -math.inf
        for r in self.records:
            assert r.time >= last, f"timestamp went back at tsn {r.tsn}"
            last = r.time
            if r.kind is TraceKind.ARRIVE:
                arrived.add(r.tsn)
            elif r.kind is TraceKind.DELIVER:
                assert r.tsn in arrived, f"tsn {r.tsn} delivered without an arrival"
                assert r.tsn not in delivered, f"tsn {r.tsn} delivered twice"
                delivered.add(r.tsn)


def chunk_table(trace: EventTrace, deadline: float = math.inf) -> pd.DataFrame:
    """
    One row per emitted chunk: emission, planned and first-transmission path,
    number of transmissions and delivery time.
    """
    frame = trace.to_frame()
    emit = frame[frame.kind == TraceKind.EMIT.value].set_index("tsn")
    table = pd.DataFrame({
        "gop_id": emit.gop_id,
        "bytes": emit.bytes,
        "emitted_at": emit.time,
        "planned_path": emit.path_id,
    })
    sends = frame[frame.kind.isin([TraceKind.SEND.value, TraceKind.RETRANSMIT.value])]
    table["first_path"] = sends.groupby("tsn").path_id.first().reindex(table.index).fillna(NO_PATH).astype(int)
    table["sends"] = sends.groupby("tsn").size().reindex(table.index).fillna(0).astype(int)
    delivered = frame[frame.kind == TraceKind.DELIVER.value].groupby("tsn").time.first()
    table["delivered_at"] = delivered.reindex(table.index)
    table["in_deadline"] = (table.delivered_at - table.emitted_at <= deadline + DEADLINE_TOL).fillna(False).astype(bool)
    table["path"] = table.first_path.where(table.first_path != NO_PATH, table.planned_path)
    return table


def goodput(trace: EventTrace, deadline: float, duration: Optional[float] = None) -> float:
    """In-deadline delivered payload, in Kbps over the run duration."""
    duration = trace.duration if duration is None else duration
    if duration <= 0 or not trace.records:
        return 0.0
    table = chunk_table(trace, deadline)
    return float(table.bytes[table.in_deadline].sum()) * 8.0 / duration


@dataclass
class DelayDistribution:
    samples: np.ndarray
    grid: np.ndarray
    cdf: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.samples.mean()) if self.samples.size else 0.0

    def at(self, x: float) -> float:
        if not self.samples.size:
            return 1.0
        return float(np.count_nonzero(self.samples <= x)) / self.samples.size


def inter_packet_delays(trace: EventTrace, step: float = 1.0, deadline: Optional[float] = None) -> DelayDistribution:
    """
    Gaps between consecutive deliveries to the application, with their CDF on
    a grid of `step` ms. With a deadline only the in-deadline deliveries count.
    """
    if deadline is None:
        times = np.array([r.time for r in trace.of(TraceKind.DELIVER)])
    else:
        table = chunk_table(trace, deadline)
        times = np.sort(table.delivered_at[table.in_deadline].to_numpy())
    samples = np.diff(times) if times.size > 1 else np.zeros(0)
    top = samples.max() if samples.size else 0.0
    grid = np.arange(0.0, math.ceil(top / step) * step + step, step)
    cdf = np.searchsorted(np.sort(samples), grid, side="right") / max(samples.size, 1)
    if not samples.size:
        cdf = np.ones_like(grid)
    return DelayDistribution(samples=samples, grid=grid, cdf=cdf)


def effective_loss(trace: EventTrace, deadline: float) -> float:
    table = chunk_table(trace, deadline)
    offered = float(table.bytes.sum())
    if offered <= 0:
        return 0.0
    return 1.0 - float(table.bytes[table.in_deadline].sum()) / offered


@dataclass
class OffsetHistogram:
    offsets: List[int]
    histogram: Dict[int, int]

    @property
    def max(self) -> int:
        return max((abs(o) for o in self.offsets), default=0)

    @property
    def out_of_order_fraction(self) -> float:
        if not self.offsets:
            return 0.0
        return sum(1 for o in self.offsets if o != 1) / len(self.offsets)


def out_of_order_offsets(trace: EventTrace) -> OffsetHistogram:
    """Signed TSN offset between each arrival and the one before it."""
    tsns = [r.tsn for r in trace.of(TraceKind.ARRIVE)]
    offsets = [b - a for a, b in zip(tsns, tsns[1:])]
    return OffsetHistogram(offsets=offsets, histogram=dict(sorted(Counter(offsets).items())))


def confidence_interval(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and 95% half-width under the normal approximation."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return math.nan, 0.0
    if values.size < 2:
        return float(values.mean()), 0.0
    return float(values.mean()), float(Z_95 * values.std(ddof=1) / math.sqrt(values.size))


@dataclass
class PsnrSeries:
    values: List[float]
    mean: float
    ci: float


def psnr_series(
    losses: Sequence[Sequence[float]],
    params: DistortionParams,
    encoding_rates: Sequence[float],
    path_rates: Sequence[Sequence[float]],
) -> PsnrSeries:
    """
    Model PSNR of every GoP from its measured per-path effective losses and
    the rates the paths carried. A GoP nothing was assigned for is all loss.
    """
    values = []
    for loss, rate, shares in zip(losses, encoding_rates, path_rates):
        if sum(shares) <= 0:
            shares, loss = [1.0], [1.0]
        values.append(psnr_from_mse(total_distortion(params, rate, shares, loss)))
    mean, ci = confidence_interval(values)
    return PsnrSeries(values=values, mean=mean, ci=ci)


def gop_losses(table: pd.DataFrame, interval: float) -> pd.DataFrame:
    """
    Per GoP and per attributed path: carried rate (Kbps) and measured
    effective loss of the chunks it carried.
    """
    if table.empty:
        return pd.DataFrame(columns=["gop_id", "path", "rate", "loss"])
    grouped = table.groupby(["gop_id", "path"])
    out = pd.DataFrame({
        "bytes": grouped.bytes.sum(),
        "good": table.bytes.where(table.in_deadline, 0).groupby([table.gop_id, table.path]).sum(),
    }).reset_index()
    out["rate"] = out.bytes * 8.0 / interval
    out["loss"] = 1.0 - out.good / out.bytes
    return out[["gop_id", "path", "rate", "loss"]]


def path_effective_losses(table: pd.DataFrame) -> Dict[int, float]:
    """Effective loss of the chunks each path carried first, sent chunks only."""
    sent = table[table.first_path != NO_PATH]
    out = {}
    for pid, group in sent.groupby("first_path"):
        out[int(pid)] = 1.0 - float(group.bytes[group.in_deadline].sum()) / float(group.bytes.sum())
    return out


def goodput_series(
    table: pd.DataFrame,
    duration: float,
    bin_ms: float = GOODPUT_BIN,
    window_ms: float = MOVING_AVERAGE_WINDOW,
) -> pd.DataFrame:
    """Instantaneous in-deadline goodput per bin and its moving average."""
    edges = np.arange(0.0, duration + bin_ms, bin_ms)
    times = table.delivered_at[table.in_deadline].to_numpy()
    sizes = table.bytes[table.in_deadline].to_numpy()
    counts, _ = np.histogram(times, bins=edges, weights=sizes) if edges.size > 1 else (np.zeros(0), None)
    series = pd.DataFrame({"time": edges[:-1], "goodput": counts * 8.0 / bin_ms})
    window = max(1, int(round(window_ms / bin_ms)))
    series["moving_average"] = series.goodput.rolling(window, min_periods=1).mean()
    return series


@dataclass(frozen=True)
class Ledger:
    """total = sum of parts, in bytes."""

    total: int
    parts: Tuple[Tuple[str, int], ...]

    @property
    def balanced(self) -> bool:
        return self.total == sum(v for _, v in self.parts)

    def to_dict(self) -> dict:
        return {"total": self.total, **dict(self.parts)}


@dataclass
class MetricsReport:
    scheme: str
    seed: int
    scenario: str
    duration: float
    deadline: float
    psnr: PsnrSeries
    goodput: float
    offered_rate: float
    ipd: DelayDistribution
    effective_loss: float
    overdue_ratio: float
    offsets: OffsetHistogram
    retransmissions: int
    effective_retransmissions: int
    path_loss: Dict[int, float]
    gops: pd.DataFrame
    goodput_series: pd.DataFrame
    rate_shares: List[Tuple[float, int, Dict[int, float]]]
    transmission_ledger: Ledger
    payload_ledger: Ledger
    counters: Dict[str, int] = field(default_factory=dict)
    trace: Optional[EventTrace] = None

    def summary(self) -> dict:
        out = {
            "scheme": self.scheme,
            "seed": self.seed,
            "scenario": self.scenario,
            "psnr_mean": self.psnr.mean,
            "psnr_ci": self.psnr.ci,
            "goodput": self.goodput,
            "offered_rate": self.offered_rate,
            "effective_loss": self.effective_loss,
            "overdue_ratio": self.overdue_ratio,
            "ipd_mean": self.ipd.mean,
            "max_offset": self.offsets.max,
            "out_of_order_fraction": self.offsets.out_of_order_fraction,
            "retransmissions": self.retransmissions,
            "effective_retransmissions": self.effective_retransmissions,
        }
        out.update({f"path{pid}_loss": v for pid, v in sorted(self.path_loss.items())})
        out.update(self.counters)
        return out

    def per_gop_frame(self) -> pd.DataFrame:
        """Time series written to the per-run CSV, one row per GoP."""
        frame = self.gops.copy()
        for pid in sorted({p for _, _, rates in self.rate_shares for p in rates}):
            by_gop = {gop: rates.get(pid, 0.0) for _, gop, rates in self.rate_shares}
            frame[f"rate_path{pid}"] = frame.gop_id.map(by_gop).fillna(0.0)
        return frame


def build_report(
    trace: EventTrace,
    *,
    scheme: str,
    seed: int,
    scenario: str,
    params: DistortionParams,
    encoding_rates: Mapping[int, float],
    interval: float,
    deadline: float,
    duration: float,
    rate_shares: Sequence[Tuple[float, int, Dict[int, float]]] = (),
    in_flight_bytes: int = 0,
    counters: Optional[Dict[str, int]] = None,
    keep_trace: bool = False,
) -> MetricsReport:
    table = chunk_table(trace, deadline)
    offered = int(table.bytes.sum())
    good = int(table.bytes[table.in_deadline].sum())
    delivered = table[table.delivered_at.notna()]

    per_gop = gop_losses(table, interval)
    gop_ids = sorted(encoding_rates)
    losses, shares = [], []
    for gop in gop_ids:
        rows = per_gop[per_gop.gop_id == gop]
        losses.append(rows.loss.tolist())
        shares.append(rows.rate.tolist())
    psnr = psnr_series(losses, params, [encoding_rates[g] for g in gop_ids], shares)
    good_by_gop = table.bytes.where(table.in_deadline, 0).groupby(table.gop_id).sum()
    gop_loss = 1.0 - good_by_gop / table.groupby("gop_id").bytes.sum()
    gops = pd.DataFrame({
        "gop_id": gop_ids,
        "time": [g * interval for g in gop_ids],
        "encoding_rate": [encoding_rates[g] for g in gop_ids],
        "effective_loss": [float(gop_loss.get(g, 1.0)) for g in gop_ids],
        "psnr": psnr.values,
    })

    frame = trace.to_frame()
    kinds = frame.kind
    sent = int(frame.bytes[kinds.isin([TraceKind.SEND.value, TraceKind.RETRANSMIT.value])].sum())
    transmission = Ledger(sent, (
        ("arrived", int(frame.bytes[kinds == TraceKind.ARRIVE.value].sum())),
        ("dropped", int(frame.bytes[kinds.isin([TraceKind.DROP.value, TraceKind.LOSE.value])].sum())),
        ("in_flight", int(in_flight_bytes)),
    ))
    delivered_bytes = int(delivered.bytes.sum())
    skipped = int(frame.bytes[kinds == TraceKind.SKIP.value].sum())
    payload = Ledger(offered, (
        ("delivered", delivered_bytes),
        ("skipped", skipped),
        ("pending", offered - delivered_bytes - skipped),
    ))
    assert offered - delivered_bytes - skipped >= 0, "more payload left the receiver than was offered"
    if not transmission.balanced:
        logger.warning("transmission ledger off: %s", transmission.to_dict())

    return MetricsReport(
        scheme=scheme,
        seed=seed,
        scenario=scenario,
        duration=duration,
        deadline=deadline,
        psnr=psnr,
        goodput=good * 8.0 / duration if duration > 0 else 0.0,
        offered_rate=offered * 8.0 / duration if duration > 0 else 0.0,
        ipd=inter_packet_delays(trace, deadline=deadline),
        effective_loss=1.0 - good / offered if offered else 0.0,
        overdue_ratio=1.0 - good / delivered_bytes if delivered_bytes else 0.0,
        offsets=out_of_order_offsets(trace),
        retransmissions=int((kinds == TraceKind.RETRANSMIT.value).sum()),
        effective_retransmissions=int(((table.sends > 1) & table.in_deadline).sum()),
        path_loss=path_effective_losses(table),
        gops=gops,
        goodput_series=goodput_series(table, duration),
        rate_shares=list(rate_shares),
        transmission_ledger=transmission,
        payload_ledger=payload,
        counters=dict(counters or {}),
        trace=trace if keep_trace else None,
    )
