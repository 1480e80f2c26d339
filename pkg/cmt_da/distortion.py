"""
Analytical loss / delay / distortion formulas used by the rate allocator and by
the model-PSNR metric.
"""

import itertools
import json
import math
import os
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .channel import ChannelState, GilbertParams, stationary_probs, transition_matrix

SEQUENCES_PATH = os.path.join(os.path.dirname(__file__), "conf", "sequences.json")
MAX_BRUTE_FORCE_PACKETS = 16
PEAK = 255.0
PSNR_CAP = 60.0
SATURATED_DELAY = math.inf


@dataclass(frozen=True)
class DistortionParams:
    """
    d0: floor distortion (MSE)
    alpha: rate-decay constant (MSE * Kbps)
    r0: rate offset (Kbps)
    beta: channel-distortion slope (MSE per unit loss fraction)
    """

    d0: float
    alpha: float
    r0: float
    beta: float

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError(f"alpha and beta must be positive, got alpha={self.alpha}, beta={self.beta}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DistortionParams":
        return cls(**{k: float(v) for k, v in d.items()})

    @classmethod
    def from_pretrained(cls, name_or_path: str = "foreman", **overrides) -> "DistortionParams":
        """
        Loads a sequence preset by name from the packaged presets, or a single
        parameter set from a json file path. Keyword overrides replace fields.
        """
        if os.path.isfile(name_or_path):
            with open(name_or_path) as f:
                d = json.load(f)
        else:
            with open(SEQUENCES_PATH) as f:
                presets = json.load(f)
            if name_or_path not in presets:
                raise ValueError(f"unknown sequence {name_or_path!r}, expected one of {sorted(presets)}")
            d = presets[name_or_path]
        d = {**d, **{k: v for k, v in overrides.items() if v is not None}}
        return cls.from_dict(d)


def sequence_names() -> list:
    with open(SEQUENCES_PATH) as f:
        return sorted(json.load(f))


@dataclass(frozen=True)
class PathLossInputs:
    gilbert: Optional[GilbertParams]
    omega: float
    chunk_size: int
    mtu: int
    rate: float
    mu: float
    nu_obs: float
    rtt: float
    deadline: float

    def __post_init__(self):
        if self.mtu <= 0:
            raise ValueError(f"mtu must be positive, got {self.mtu}")
        if self.chunk_size < 0:
            raise ValueError(f"chunk_size must be non-negative, got {self.chunk_size}")
        if not 0 <= self.rate <= self.mu:
            raise ValueError(f"rate must lie in [0, mu], got rate={self.rate}, mu={self.mu}")


def packets_per_chunk(chunk_size: int, mtu: int) -> int:
    if mtu <= 0:
        raise ValueError(f"mtu must be positive, got {mtu}")
    return -(-int(chunk_size) // int(mtu))


def transmission_loss_rate(g: GilbertParams, omega: float, n_p: int) -> float:
    """
    Expected fraction of the n_p evenly spaced packets that hit the Bad state,
    summing the per-packet marginals propagated from the stationary start.
    """
    if n_p < 1:
        raise ValueError(f"n_p must be >= 1, got {n_p}")
    f = transition_matrix(g, omega)
    dist = np.array(stationary_probs(g))
    expected_lost = 0.0
    for _ in range(n_p):
        expected_lost += dist[1]
        dist = dist @ f
    return expected_lost / n_p


def brute_force_transmission_loss_rate(g: GilbertParams, omega: float, n_p: int) -> float:
    """
    Literal enumeration over every Good/Bad configuration of the n_p packets.
    """
    if n_p < 1:
        raise ValueError(f"n_p must be >= 1, got {n_p}")
    if n_p > MAX_BRUTE_FORCE_PACKETS:
        raise ValueError(f"n_p={n_p} exceeds {MAX_BRUTE_FORCE_PACKETS}, enumeration would blow up")
    f = transition_matrix(g, omega)
    pi = stationary_probs(g)
    order = (ChannelState.GOOD, ChannelState.BAD)

    total = 0.0
    for config in itertools.product(range(2), repeat=n_p):
        p = pi[config[0]]
        for a, b in zip(config, config[1:]):
            p *= f[a, b]
        lost = sum(1 for c in config if order[c] is ChannelState.BAD)
        total += lost * p
    return total / n_p


def expected_delay(rate: float, mu: float, nu_obs: float, rtt: float, unit: float = 250.0) -> float:
    """
    Mean packet delay (ms) of a sub-flow of `rate` Kbps on a path with available
    bandwidth `mu`. The utilization term is scaled by `unit` ms (the data
    distribution interval), the residual term rho/nu is already in ms.
    """
    if mu <= 0 or rate >= mu:
        return SATURATED_DELAY
    rho = nu_obs * rtt / 2.0
    return rate / mu * unit + rho / (mu - rate)


def overdue_probability(inputs: PathLossInputs) -> float:
    deadline = inputs.deadline
    if deadline < 0:
        raise ValueError(f"deadline must be non-negative, got {deadline}")
    if math.isinf(deadline):
        return 0.0
    nu = inputs.mu - inputs.rate
    if nu <= 0:
        return 1.0
    denom = inputs.nu_obs * inputs.rtt * inputs.mu + 2.0 * nu * inputs.rate
    if denom <= 0:
        # zero modeled delay
        return 1.0 if deadline == 0 else 0.0
    return math.exp(-2.0 * deadline * nu * inputs.mu / denom)


def effective_loss_rate(pi_star: float, p_overdue: float) -> float:
    if not (0.0 <= pi_star <= 1.0 and 0.0 <= p_overdue <= 1.0):
        raise ValueError(f"probabilities must lie in [0, 1], got {pi_star}, {p_overdue}")
    return min(1.0, pi_star + (1.0 - pi_star) * p_overdue)


def path_effective_loss(inputs: PathLossInputs, loss_rate: Optional[float] = None) -> float:
    """
    Transmission loss of the chunk's packets combined with the overdue tail.
    `loss_rate` is used directly when the path has no Gilbert parameters.
    """
    n_p = packets_per_chunk(inputs.chunk_size, inputs.mtu)
    if inputs.gilbert is not None and n_p >= 1:
        pi_star = transmission_loss_rate(inputs.gilbert, inputs.omega, n_p)
    else:
        pi_star = loss_rate or 0.0
    return effective_loss_rate(pi_star, overdue_probability(inputs))


def total_distortion(
    params: DistortionParams,
    encoding_rate: float,
    rates: Sequence[float],
    losses: Sequence[float],
) -> float:
    if encoding_rate <= params.r0:
        raise ValueError(f"encoding_rate {encoding_rate} Kbps is outside the model domain (r0={params.r0})")
    rates = np.asarray(rates, dtype=float)
    losses = np.asarray(losses, dtype=float)
    if rates.shape != losses.shape:
        raise ValueError(f"rates and losses differ in length: {rates.shape} != {losses.shape}")
    total_rate = rates.sum()
    if total_rate <= 0:
        raise ValueError("sum of path rates must be positive")
    source = params.alpha / (encoding_rate - params.r0)
    channel = params.beta * float(np.dot(rates, losses)) / total_rate
    return params.d0 + source + channel


def psnr_from_mse(mse: float, cap: float = PSNR_CAP) -> float:
    if mse <= 0:
        return cap
    return 10.0 * math.log10(PEAK**2 / mse)
