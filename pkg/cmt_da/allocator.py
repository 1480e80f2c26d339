"""
Distortion-aware flow rate allocation.

The per-path share of the channel distortion is approximated piecewise
linearly, and rate is moved between paths one step at a time, always taking
the transfer with the best predicted distortion reduction per unit rate.
"""

import functools
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .channel import gilbert_from_stats
from .distortion import (
    DistortionParams,
    PathLossInputs,
    effective_loss_rate,
    expected_delay,
    overdue_probability,
    packets_per_chunk,
    total_distortion,
    transmission_loss_rate,
)

logger = logging.getLogger(__name__)

BISECT_STEPS = 60
RATE_TOL = 1e-9


@dataclass(frozen=True)
class AllocatorConfig:
    """
    delta_r: rate step in Kbps, None means target_rate / 100
    tlv: load-imbalance threshold; above it the best recipient is served only after every other transfer
    max_iterations: hard cap on accepted and rejected iterations
    epsilon: minimum distortion decrease (MSE) for a move to be accepted
    breakpoint_count: number of chords per path in the piecewise-linear model
    refine: run one more pass at delta_r / 10 after convergence
    jitter_weight: MSE per ms of predicted delay spread added to the objective
    interval: data distribution interval (ms), also the delay unit
    mtu: bytes per packet
    omega: packet interleaving on a path (ms)
    """

    delta_r: Optional[float] = None
    tlv: float = 1.2
    max_iterations: int = 1000
    epsilon: float = 1e-9
    breakpoint_count: int = 32
    refine: bool = True
    jitter_weight: float = 0.0
    interval: float = 250.0
    mtu: int = 1500
    omega: float = 5.0

    def __post_init__(self):
        if self.delta_r is not None and self.delta_r <= 0:
            raise ValueError(f"delta_r must be positive, got {self.delta_r}")
        if self.tlv <= 1:
            raise ValueError(f"tlv must exceed 1, got {self.tlv}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.breakpoint_count < 2:
            raise ValueError(f"breakpoint_count must be >= 2, got {self.breakpoint_count}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.jitter_weight < 0:
            raise ValueError(f"jitter_weight must be non-negative, got {self.jitter_weight}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AllocatorConfig":
        return cls(**d)


@dataclass(frozen=True)
class PathEstimate:
    """
    What the sender currently believes about a path. nu_obs defaults to mu
    (nothing of ours observed on it yet).
    """

    path_id: int
    mu: float
    rtt: float
    loss_rate: float
    nu_obs: Optional[float] = None
    mean_burst: Optional[float] = None

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError(f"path {self.path_id}: mu must be non-negative, got {self.mu}")
        if self.rtt <= 0:
            raise ValueError(f"path {self.path_id}: rtt must be positive, got {self.rtt}")
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ValueError(f"path {self.path_id}: loss_rate must lie in [0, 1], got {self.loss_rate}")

    @property
    def residual(self) -> float:
        return self.mu if self.nu_obs is None else max(0.0, self.nu_obs)


@dataclass
class Allocation:
    rates: Dict[int, float]
    chunk_sizes: Dict[int, int]
    objective: float
    iterations: int = 0
    jitter_spread: float = 0.0
    shortfall: bool = False
    infeasible: bool = False
    history: List[float] = field(default_factory=list)
    # rate-weighted effective loss of the split, and whether it misses loss_req
    predicted_loss: float = 0.0
    loss_exceeded: bool = False

    @property
    def total_rate(self) -> float:
        return sum(self.rates.values())


@dataclass(frozen=True)
class PwlApprox:
    breakpoints: np.ndarray
    slopes: np.ndarray
    intercepts: np.ndarray
    turning_points: Tuple[int, ...]

    @property
    def domain(self) -> Tuple[float, float]:
        return float(self.breakpoints[0]), float(self.breakpoints[-1])

    def _segment(self, x: float) -> int:
        k = int(np.searchsorted(self.breakpoints, x, side="right")) - 1
        return min(max(k, 0), len(self.slopes) - 1)

    def __call__(self, x: float) -> float:
        k = self._segment(x)
        return float(self.slopes[k] * x + self.intercepts[k])

    def regions(self) -> List[Tuple[int, int]]:
        """
        Inclusive slope-index ranges between turning points; slopes increase
        inside each range.
        """
        starts = [0] + [t + 1 for t in self.turning_points]
        ends = [t for t in self.turning_points] + [len(self.slopes) - 1]
        return list(zip(starts, ends))

    def max_of_lines(self, x: float) -> float:
        k = self._segment(x)
        for lo, hi in self.regions():
            if lo <= k <= hi:
                return float(np.max(self.slopes[lo : hi + 1] * x + self.intercepts[lo : hi + 1]))
        raise AssertionError(f"segment {k} outside every region")


def initial_allocation(target_rate: float, mus: Sequence[float]) -> List[float]:
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    mus = np.asarray(mus, dtype=float)
    if np.any(mus < 0):
        raise ValueError(f"bandwidths must be non-negative, got {mus.tolist()}")
    if mus.sum() <= 0:
        raise ValueError("at least one path needs positive bandwidth")

    rates = np.zeros_like(mus)
    open_ = mus > 0
    remaining = float(target_rate)
    while remaining > RATE_TOL and open_.any():
        share = remaining * mus * open_ / mus[open_].sum()
        room = mus - rates
        capped = open_ & (share >= room)
        if not capped.any():
            rates += share
            break
        rates[capped] = mus[capped]
        remaining -= float(room[capped].sum())
        open_ &= ~capped
    return rates.tolist()


def load_imbalance(
    rates: Sequence[float], mus: Sequence[float], loss_rates: Sequence[float]
) -> Optional[np.ndarray]:
    """
    Headroom of each path's loss-free bandwidth relative to the mean headroom.
    Returns None when the system has no loss-free headroom left.
    """
    rates = np.asarray(rates, dtype=float)
    free = np.asarray(mus, dtype=float) * (1.0 - np.asarray(loss_rates, dtype=float))
    denom = (free.sum() - rates.sum()) / len(rates)
    if denom <= 0:
        return None
    return (free - rates) / denom


def build_pwl(objective: Callable[[float], float], interval: Tuple[float, float], m: int) -> PwlApprox:
    lo, hi = float(interval[0]), float(interval[1])
    if not lo < hi:
        raise ValueError(f"empty interval [{lo}, {hi}]")
    if m < 2:
        raise ValueError(f"m must be >= 2, got {m}")
    if not math.isfinite(objective(lo)):
        raise ValueError(f"objective is not finite at the interval start {lo}")

    if not math.isfinite(objective(hi)):
        # truncate below the pole
        good, bad = lo, hi
        for _ in range(BISECT_STEPS):
            mid = 0.5 * (good + bad)
            if math.isfinite(objective(mid)):
                good = mid
            else:
                bad = mid
        hi = good
        if hi <= lo:
            raise ValueError(f"objective has no finite region above {lo}")

    xs = np.linspace(lo, hi, m + 1)
    ys = np.array([objective(x) for x in xs])
    slopes = np.diff(ys) / np.diff(xs)
    intercepts = ys[:-1] - slopes * xs[:-1]
    tol = 1e-12 * max(1.0, float(np.max(np.abs(slopes))))
    turning = tuple(int(k) for k in range(len(slopes) - 1) if slopes[k] > slopes[k + 1] + tol)
    return PwlApprox(breakpoints=xs, slopes=slopes, intercepts=intercepts, turning_points=turning)


def transition_utility(pwl: PwlApprox, r: float, delta_r: float) -> float:
    """
    Change of the approximated distortion per Kbps when moving from r to
    r + delta_r. Lower is better for a recipient.
    """
    lo, hi = pwl.domain
    if delta_r <= 0:
        raise ValueError(f"delta_r must be positive, got {delta_r}")
    if r < lo - RATE_TOL or r + delta_r > hi + RATE_TOL:
        raise ValueError(f"[{r}, {r + delta_r}] is outside the approximation domain [{lo}, {hi}]")
    return (pwl(r + delta_r) - pwl(r)) / delta_r


@functools.lru_cache(maxsize=4096)
def _chunk_loss(loss_rate: float, mean_burst: Optional[float], omega: float, n_p: int) -> float:
    if loss_rate <= 0.0 or loss_rate >= 1.0 or mean_burst is None or n_p < 1:
        return loss_rate
    return transmission_loss_rate(gilbert_from_stats(loss_rate, mean_burst), omega, n_p)


class PathModel:
    """
    Predicted effective loss and delay of one path as a function of the rate
    assigned to it, for a fixed encoding rate and deadline.
    """

    def __init__(self, est: PathEstimate, target_rate: float, deadline: float, cfg: AllocatorConfig):
        self.est = est
        self.target_rate = target_rate
        self.deadline = deadline
        self.cfg = cfg

    def n_packets(self, rate: float) -> int:
        return packets_per_chunk(int(round(rate * self.cfg.interval / 8.0)), self.cfg.mtu)

    def effective_loss(self, rate: float) -> float:
        est = self.est
        if rate >= est.mu:
            return 1.0
        pi_star = _chunk_loss(est.loss_rate, est.mean_burst, self.cfg.omega, self.n_packets(rate))
        inputs = PathLossInputs(
            gilbert=None,
            omega=self.cfg.omega,
            chunk_size=int(round(rate * self.cfg.interval / 8.0)),
            mtu=self.cfg.mtu,
            rate=rate,
            mu=est.mu,
            nu_obs=est.residual,
            rtt=est.rtt,
            deadline=self.deadline,
        )
        return effective_loss_rate(pi_star, overdue_probability(inputs))

    def delay(self, rate: float) -> float:
        return expected_delay(rate, self.est.mu, self.est.residual, self.est.rtt, unit=self.cfg.interval)

    def duration(self, rate: float) -> float:
        return self.delay(rate) + max(0, self.n_packets(rate) - 1) * self.cfg.omega

    def violation(self, rate: float) -> float:
        if rate <= RATE_TOL:
            return 0.0
        return max(0.0, self.duration(rate) - self.deadline)

    def objective(self, rate: float, beta: float) -> float:
        """Share of the channel distortion term carried by this path."""
        return beta * rate * self.effective_loss(rate) / self.target_rate


def _spread(models: Sequence[PathModel], rates: Sequence[float]) -> float:
    delays = [m.delay(r) for m, r in zip(models, rates) if r > RATE_TOL]
    if len(delays) < 2:
        return 0.0
    return max(delays) - min(delays)


def predicted_distortion(
    models: Sequence[PathModel],
    rates: Sequence[float],
    params: DistortionParams,
    jitter_weight: float = 0.0,
) -> float:
    target_rate = models[0].target_rate
    losses = [m.effective_loss(r) for m, r in zip(models, rates)]
    d = total_distortion(params, target_rate, rates, losses)
    if jitter_weight > 0:
        d += jitter_weight * _spread(models, rates)
    return d


def largest_remainder(total: int, weights: Sequence[float]) -> List[int]:
    """
    Integer split of total in proportion to weights, summing to total exactly;
    ties in the remainders go to the lower index.
    """
    weights = np.asarray(weights, dtype=float)
    if weights.sum() <= 0:
        raise ValueError("sum of weights must be positive")
    total = int(total)
    quotas = total * weights / weights.sum()
    sizes = np.floor(quotas + RATE_TOL).astype(int)
    fractions = np.round(quotas - sizes, 9)
    short = total - int(sizes.sum())
    order = sorted(range(len(weights)), key=lambda k: (-fractions[k], k))
    for k in order[:short]:
        sizes[k] += 1
    return [int(s) for s in sizes]


def chunk_sizes(alloc: Allocation, total_bytes: int) -> Dict[int, int]:
    ids = sorted(alloc.rates)
    if sum(alloc.rates.values()) <= 0:
        raise ValueError("sum of rates must be positive")
    return dict(zip(ids, largest_remainder(total_bytes, [alloc.rates[i] for i in ids])))


def _finish(
    ids: List[int],
    rates: Sequence[float],
    models: Sequence[PathModel],
    params: DistortionParams,
    cfg: AllocatorConfig,
    target_rate: float,
    objective: float,
    loss_req: float,
    **kwargs,
) -> Allocation:
    total_rate = float(sum(rates))
    if total_rate > 0:
        predicted = sum(r * m.effective_loss(r) for m, r in zip(models, rates) if r > 0) / total_rate
    else:
        predicted = 1.0
    alloc = Allocation(
        rates={i: float(r) for i, r in zip(ids, rates)},
        chunk_sizes={},
        objective=objective,
        jitter_spread=_spread(models, rates) if models else 0.0,
        predicted_loss=predicted,
        loss_exceeded=predicted > loss_req + RATE_TOL,
        **kwargs,
    )
    if alloc.loss_exceeded:
        logger.debug("predicted loss %.4f above the %.4f requirement", predicted, loss_req)
    if alloc.total_rate > 0:
        alloc.chunk_sizes = chunk_sizes(alloc, int(round(target_rate * cfg.interval / 8.0)))
    else:
        alloc.chunk_sizes = {i: 0 for i in ids}
    return alloc


def allocate(
    paths: Sequence[PathEstimate],
    target_rate: float,
    deadline: float,
    loss_req: float,
    params: DistortionParams,
    cfg: Optional[AllocatorConfig] = None,
) -> Allocation:
    """
    Greedy utility-maximizing split of target_rate over the usable paths.

    Every iteration picks the recipient with the best transition utility. If
    its load imbalance is within TLV, the best donor for it is searched;
    otherwise the best transfer between the other paths. The ranking uses the
    piecewise-linear model, acceptance the exact predicted distortion, so the
    objective never increases. A move must not increase the total violation
    of the per-path duration bound.
    """
    cfg = cfg or AllocatorConfig()
    if not 0.0 <= loss_req <= 1.0:
        raise ValueError(f"loss_req must lie in [0, 1], got {loss_req}")
    paths = sorted(paths, key=lambda p: p.path_id)
    all_ids = [p.path_id for p in paths]
    usable = [p for p in paths if p.mu > 0]
    if not usable:
        raise ValueError("no path with positive bandwidth to allocate on")

    ids = [p.path_id for p in usable]
    models = [PathModel(p, target_rate, deadline, cfg) for p in usable]
    all_models = [PathModel(p, target_rate, deadline, cfg) for p in paths]
    mus = [p.mu for p in usable]
    idle = {i: 0.0 for i in all_ids if i not in ids}

    def pack(rates):
        full = {**idle, **dict(zip(ids, rates))}
        return [full[i] for i in all_ids]

    if target_rate >= sum(mus) - RATE_TOL:
        rates = list(mus)
        losses = [m.effective_loss(r) for m, r in zip(models, rates)]
        objective = total_distortion(params, target_rate, rates, losses)
        shortfall = target_rate > sum(mus) + RATE_TOL
        if shortfall:
            logger.debug("capacity shortfall: target %.1f Kbps > %.1f Kbps available", target_rate, sum(mus))
        return _finish(
            all_ids, pack(rates), all_models,
            params, cfg, target_rate, objective, loss_req,
            shortfall=shortfall, infeasible=any(m.violation(r) > 0 for m, r in zip(models, rates)),
            history=[objective],
        )

    rates = initial_allocation(target_rate, mus)
    beta = params.beta
    pwls = [
        build_pwl(functools.partial(m.objective, beta=beta), (0.0, m.est.mu), cfg.breakpoint_count)
        for m in models
    ]
    losses = [p.loss_rate for p in usable]

    def total(rs):
        return predicted_distortion(models, rs, params, cfg.jitter_weight)

    def violation(rs):
        return sum(m.violation(r) for m, r in zip(models, rs))

    step = cfg.delta_r or target_rate / 100.0
    refined = not cfg.refine
    current = total(rates)
    current_violation = violation(rates)
    history = [current]
    iterations = 0
    n = len(models)

    while iterations < cfg.max_iterations:
        iterations += 1
        up = {}
        down = {}
        for k in range(n):
            hi = pwls[k].domain[1]
            if rates[k] + step <= min(hi, mus[k]) + RATE_TOL:
                up[k] = transition_utility(pwls[k], rates[k], step)
            if rates[k] - step >= -RATE_TOL:
                down[k] = transition_utility(pwls[k], max(0.0, rates[k] - step), step)

        moves = []
        if up and len(models) > 1:
            recipient = min(up, key=lambda k: (up[k], k))
            imbalance = load_imbalance(rates, mus, losses)
            within = imbalance is None or imbalance[recipient] <= cfg.tlv

            def ranked(pairs):
                return sorted(pairs, key=lambda dr: (up[dr[1]] - down[dr[0]], dr))

            into = [(d, recipient) for d in down if d != recipient]
            others = [(d, r) for r in up if r != recipient for d in down if d != r]
            if imbalance is None:
                moves = ranked(into)
            elif within:
                moves = ranked(into) + ranked(others)
            else:
                moves = ranked(others) + ranked(into)

        accepted = False
        for d, r in moves:
            trial = list(rates)
            trial[d] = max(0.0, trial[d] - step)
            moved = rates[d] - trial[d]
            trial[r] = min(mus[r], trial[r] + moved)
            trial[d] += moved - (trial[r] - rates[r])
            trial_violation = violation(trial)
            if trial_violation > current_violation + RATE_TOL:
                continue
            value = total(trial)
            if value < current - cfg.epsilon:
                rates, current, current_violation = trial, value, trial_violation
                history.append(current)
                accepted = True
                break

        if not accepted:
            if refined:
                break
            step /= 10.0
            refined = True

    infeasible = current_violation > 0
    if infeasible:
        logger.debug("duration bound violated by %.1f ms in total at target %.1f Kbps", current_violation, target_rate)
    return _finish(
        all_ids, pack(rates), all_models,
        params, cfg, target_rate, current, loss_req,
        iterations=iterations, infeasible=infeasible, history=history,
    )
