"""
Gilbert-Elliott burst loss model and live path-status estimation.

Times are in milliseconds, bandwidths in Kbps (1 Kbps == 1 bit/ms), window
sizes in bytes.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

LOSS_WINDOW = 200
RTT_ALPHA = 1.0 / 8.0
RTT_BETA = 1.0 / 4.0
RTO_MIN = 200.0
RTO_MAX = 60000.0


class ChannelState(Enum):
    GOOD = "G"
    BAD = "B"


class PathState(Enum):
    ACTIVE = "active"
    POTENTIALLY_FAILED = "potentially_failed"
    INACTIVE = "inactive"


@dataclass(frozen=True)
class GilbertParams:
    """
    xi_g: Bad -> Good transition rate, per ms
    xi_b: Good -> Bad transition rate, per ms
    """

    xi_g: float
    xi_b: float

    def __post_init__(self):
        if not (self.xi_g > 0 and self.xi_b > 0):
            raise ValueError(f"transition rates must be positive, got xi_g={self.xi_g}, xi_b={self.xi_b}")


def gilbert_from_stats(loss_rate: float, mean_burst: float) -> GilbertParams:
    """
    Inverts (stationary loss rate, mean bad-burst length in ms) into the chain's
    transition rates. Lossless and dead paths are not Gilbert chains.
    """
    if not 0.0 < loss_rate < 1.0:
        raise ValueError(f"loss_rate must be strictly inside (0, 1), got {loss_rate}")
    if mean_burst <= 0:
        raise ValueError(f"mean_burst must be positive, got {mean_burst}")
    xi_b = 1.0 / mean_burst
    xi_g = xi_b * (1.0 - loss_rate) / loss_rate
    return GilbertParams(xi_g=xi_g, xi_b=xi_b)


def stationary_probs(g: GilbertParams) -> Tuple[float, float]:
    pi_b = g.xi_b / (g.xi_b + g.xi_g)
    return 1.0 - pi_b, pi_b


def transition_matrix(g: GilbertParams, omega: float) -> np.ndarray:
    """
    Transient transition probabilities after `omega` ms, rows/cols ordered (G, B).
    """
    if omega < 0:
        raise ValueError(f"omega must be non-negative, got {omega}")
    pi_g, pi_b = stationary_probs(g)
    kappa = math.exp(-(g.xi_b + g.xi_g) * omega)
    return np.array(
        [
            [pi_g + pi_b * kappa, pi_b - pi_b * kappa],
            [pi_g - pi_g * kappa, pi_b + pi_g * kappa],
        ]
    )


def sample_loss_sequence(g: GilbertParams, omega: float, n: int, rng_seed) -> List[ChannelState]:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(rng_seed)
    _, pi_b = stationary_probs(g)
    f = transition_matrix(g, omega)
    # P(next is Bad | current)
    p_bad = (f[0, 1], f[1, 1])

    draws = rng.random(n)
    bad = draws[0] < pi_b
    states = [ChannelState.BAD if bad else ChannelState.GOOD]
    for u in draws[1:]:
        bad = u < p_bad[bad]
        states.append(ChannelState.BAD if bad else ChannelState.GOOD)
    return states


class GilbertChannel:
    """
    Stateful realization of the chain for the simulator. The state is only
    observed at packet-send instants; between two observations the exact
    transient matrix is applied, so the result does not depend on any tick.
    """

    def __init__(self, gilbert: Optional[GilbertParams], rng: np.random.Generator):
        self.gilbert = gilbert
        self.rng = rng
        self._bad: Optional[bool] = None
        self._last_t = 0.0

    def is_lost(self, t: float) -> bool:
        if self.gilbert is None:
            return False
        if self._bad is None:
            _, pi_b = stationary_probs(self.gilbert)
            self._bad = bool(self.rng.random() < pi_b)
        else:
            f = transition_matrix(self.gilbert, max(0.0, t - self._last_t))
            self._bad = bool(self.rng.random() < f[int(self._bad), 1])
        self._last_t = t
        return self._bad


@dataclass(frozen=True)
class AckEvent:
    """
    Per-path feedback for one dispatched TSN, filtered out of the aggregate SACK.
    rtt_sample is only set for chunks that were transmitted once.
    """

    path_id: int
    tsn: int
    lost: bool = False
    rtt_sample: Optional[float] = None
    cwnd: Optional[float] = None


@dataclass(frozen=True)
class PathStats:
    path_id: int
    mu: float
    rtt: float
    loss_rate: float = 0.0
    cwnd: float = 0.0
    rto: float = 1000.0
    state: PathState = PathState.ACTIVE
    rttvar: Optional[float] = None
    min_rtt: Optional[float] = None
    outcomes: Tuple[bool, ...] = ()
    dispatched: frozenset = field(default_factory=frozenset)
    unknown_feedback: int = 0

    @classmethod
    def initial(cls, path_id: int, rtt: float, cwnd: float, rto: float = 1000.0) -> "PathStats":
        return cls(path_id=path_id, mu=cwnd * 8.0 / rtt, rtt=rtt, cwnd=cwnd, rto=rto)


def note_dispatch(stats: PathStats, tsn: int) -> PathStats:
    return replace(stats, dispatched=stats.dispatched | {tsn})


def update_path_stats(stats: PathStats, feedback: AckEvent) -> PathStats:
    if feedback.path_id != stats.path_id or feedback.tsn not in stats.dispatched:
        logger.debug("path %s: feedback for unknown tsn %s ignored", stats.path_id, feedback.tsn)
        return replace(stats, unknown_feedback=stats.unknown_feedback + 1)

    outcomes = (stats.outcomes + (feedback.lost,))[-LOSS_WINDOW:]
    loss_rate = sum(outcomes) / len(outcomes)

    rtt, rttvar, rto, min_rtt = stats.rtt, stats.rttvar, stats.rto, stats.min_rtt
    sample = feedback.rtt_sample
    if sample is not None and not feedback.lost and sample > 0:
        if rttvar is None:
            rtt, rttvar = sample, sample / 2.0
        else:
            rttvar = (1.0 - RTT_BETA) * rttvar + RTT_BETA * abs(rtt - sample)
            rtt = (1.0 - RTT_ALPHA) * rtt + RTT_ALPHA * sample
        rto = min(RTO_MAX, max(RTO_MIN, rtt + 4.0 * rttvar))
        min_rtt = sample if min_rtt is None else min(min_rtt, sample)

    cwnd = stats.cwnd if feedback.cwnd is None else feedback.cwnd
    return replace(
        stats,
        loss_rate=loss_rate,
        outcomes=outcomes,
        dispatched=stats.dispatched - {feedback.tsn},
        rtt=rtt,
        rttvar=rttvar,
        rto=rto,
        min_rtt=min_rtt,
        cwnd=cwnd,
        mu=cwnd * 8.0 / rtt,
    )
