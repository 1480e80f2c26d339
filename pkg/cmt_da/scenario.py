"""
Scenario description: paths, video source and run parameters, with a strict
YAML loader (unknown keys are errors, problems are reported with the field
path and line) and the matching serializer.
"""

import bisect
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, Optional, Tuple

import yaml

from .allocator import AllocatorConfig
from .channel import GilbertParams, gilbert_from_stats
from .distortion import DistortionParams, sequence_names

logger = logging.getLogger(__name__)

INF = float("inf")


class ScenarioError(ValueError):
    def __init__(self, field_path: str, message: str, line: Optional[int] = None):
        self.field_path = field_path
        self.line = line
        where = f"{field_path} (line {line})" if line is not None else field_path
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class Fluctuation:
    period: float
    depth: float

    def factor(self, t: float, speed: float = 1.0) -> float:
        """Multiplier in [1 - depth, 1], starting at 1 for t = 0."""
        return 1.0 - self.depth * 0.5 * (1.0 - math.cos(2.0 * math.pi * speed * t / self.period))


@dataclass(frozen=True)
class BackgroundSpec:
    min: float = 0.0
    max: float = 0.10
    period: float = 500.0


@dataclass(frozen=True)
class PathSpec:
    id: int
    capacity_trace: Tuple[Tuple[float, float], ...]
    base_rtt: float
    loss_rate: float = 0.0
    mean_burst: float = 10.0
    availability: Tuple[Tuple[float, float], ...] = ((0.0, INF),)
    name: str = ""
    fluctuation: Optional[Fluctuation] = None

    @property
    def gilbert(self) -> Optional[GilbertParams]:
        if self.loss_rate <= 0:
            return None
        return gilbert_from_stats(self.loss_rate, self.mean_burst)

    def capacity_at(self, t: float) -> float:
        times = [p[0] for p in self.capacity_trace]
        k = bisect.bisect_right(times, t) - 1
        return self.capacity_trace[max(k, 0)][1]

    def available(self, t: float) -> bool:
        return any(start <= t < end for start, end in self.availability)

    @property
    def mean_capacity(self) -> float:
        return sum(v for _, v in self.capacity_trace) / len(self.capacity_trace)


@dataclass(frozen=True)
class VideoSpec:
    sequence: str = "foreman"
    rates: Tuple[float, ...] = (1400.0,)
    distortion: DistortionParams = field(default_factory=DistortionParams.from_pretrained)

    def rate_at(self, gop_id: int) -> float:
        return self.rates[gop_id % len(self.rates)]


@dataclass(frozen=True)
class Scenario:
    paths: Tuple[PathSpec, ...]
    video: VideoSpec = field(default_factory=VideoSpec)
    name: str = "scenario"
    duration: float = 20000.0
    seed: int = 0
    deadline: float = 250.0
    loss_req: float = 0.01
    interval: float = 250.0
    omega: float = 5.0
    tlv: float = 1.2
    mtu: int = 1500
    receiver_buffer: int = 65536
    speed: float = 1.0
    queue_limit: float = 400.0
    background: BackgroundSpec = field(default_factory=BackgroundSpec)
    allocator: Dict[str, Any] = field(default_factory=dict)

    def allocator_config(self) -> AllocatorConfig:
        return AllocatorConfig(tlv=self.tlv, interval=self.interval, mtu=self.mtu, omega=self.omega, **self.allocator)

    def path(self, path_id: int) -> PathSpec:
        for p in self.paths:
            if p.id == path_id:
                return p
        raise KeyError(path_id)

    def with_overrides(self, **kwargs) -> "Scenario":
        return replace(self, **{k: v for k, v in kwargs.items() if v is not None})


TOP_KEYS = {f.name for f in fields(Scenario)}
PATH_KEYS = {"id", "name", "capacity", "loss_rate", "burst", "rtt", "availability", "fluctuation"}
VIDEO_KEYS = {"sequence", "rate", "distortion"}
BACKGROUND_KEYS = {"min", "max", "period"}
FLUCTUATION_KEYS = {"period", "depth"}
DISTORTION_KEYS = {"d0", "alpha", "r0", "beta"}
ALLOCATOR_KEYS = {f.name for f in fields(AllocatorConfig)} - {"tlv", "interval", "mtu", "omega"}


class _Checker:
    """Typed field access that reports failures against the YAML source lines."""

    def __init__(self, lines: Dict[str, int]):
        self.lines = lines

    def fail(self, path: str, message: str):
        raise ScenarioError(path, message, self.lines.get(path))

    def mapping(self, value, path: str, allowed) -> dict:
        if value is None:
            value = {}
        if not isinstance(value, dict):
            self.fail(path, f"expected a mapping, got {type(value).__name__}")
        for key in value:
            if key not in allowed:
                self.fail(f"{path}.{key}" if path else str(key), f"unknown field, expected one of {sorted(allowed)}")
        return value

    def number(self, d: dict, key: str, path: str, default=None, lo=None, hi=None, lo_open=False, hi_open=False) -> float:
        full = f"{path}.{key}" if path else key
        if key not in d:
            if default is None:
                self.fail(full, "missing required field")
            return default
        return self.value(d[key], full, lo, hi, lo_open, hi_open)

    def value(self, v, full: str, lo=None, hi=None, lo_open=False, hi_open=False) -> float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(full, f"expected a number, got {v!r}")
        v = float(v)
        if math.isnan(v):
            self.fail(full, "NaN is not allowed")
        if lo is not None and (v < lo or (lo_open and v == lo)):
            self.fail(full, f"must be {'>' if lo_open else '>='} {lo}, got {v}")
        if hi is not None and (v > hi or (hi_open and v == hi)):
            self.fail(full, f"must be {'<' if hi_open else '<='} {hi}, got {v}")
        return v

    def integer(self, d: dict, key: str, path: str, default: int, lo: int = 0) -> int:
        full = f"{path}.{key}" if path else key
        v = d.get(key, default)
        if isinstance(v, bool) or not isinstance(v, int):
            self.fail(full, f"expected an integer, got {v!r}")
        if v < lo:
            self.fail(full, f"must be >= {lo}, got {v}")
        return v


def _line_index(node, prefix: str = "", out: Optional[Dict[str, int]] = None) -> Dict[str, int]:
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = f"{prefix}.{key_node.value}" if prefix else str(key_node.value)
            out[path] = key_node.start_mark.line + 1
            _line_index(value_node, path, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, value_node in enumerate(node.value):
            path = f"{prefix}[{i}]"
            out[path] = value_node.start_mark.line + 1
            _line_index(value_node, path, out)
    return out


def _capacity(ck: _Checker, v, path: str) -> Tuple[Tuple[float, float], ...]:
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return ((0.0, ck.value(v, path, lo=0)),)
    if not isinstance(v, list) or not v:
        ck.fail(path, "expected a number or a non-empty list of [time_ms, kbps] points")
    points = []
    for i, point in enumerate(v):
        p = f"{path}[{i}]"
        if not isinstance(point, list) or len(point) != 2:
            ck.fail(p, "expected [time_ms, kbps]")
        t = ck.value(point[0], p, lo=0)
        kbps = ck.value(point[1], p, lo=0)
        if points and t <= points[-1][0]:
            ck.fail(p, "trace times must be strictly increasing")
        points.append((t, kbps))
    if points[0][0] != 0.0:
        ck.fail(f"{path}[0]", "trace must start at time 0")
    return tuple(points)


def _availability(ck: _Checker, v, path: str) -> Tuple[Tuple[float, float], ...]:
    if not isinstance(v, list) or not v:
        ck.fail(path, "expected a non-empty list of [start_ms, end_ms] intervals")
    windows = []
    for i, w in enumerate(v):
        p = f"{path}[{i}]"
        if not isinstance(w, list) or len(w) != 2:
            ck.fail(p, "expected [start_ms, end_ms]")
        start, end = ck.value(w[0], p, lo=0), ck.value(w[1], p, lo=0)
        if end <= start:
            ck.fail(p, f"empty interval [{start}, {end})")
        if windows and start < windows[-1][1]:
            ck.fail(p, "intervals must be sorted and disjoint")
        windows.append((start, end))
    return tuple(windows)


def _path(ck: _Checker, raw, path: str) -> PathSpec:
    d = ck.mapping(raw, path, PATH_KEYS)
    if "id" not in d:
        ck.fail(f"{path}.id", "missing required field")
    if "capacity" not in d:
        ck.fail(f"{path}.capacity", "missing required field")
    fluct = None
    if d.get("fluctuation") is not None:
        fd = ck.mapping(d["fluctuation"], f"{path}.fluctuation", FLUCTUATION_KEYS)
        fluct = Fluctuation(
            period=ck.number(fd, "period", f"{path}.fluctuation", lo=0, lo_open=True),
            depth=ck.number(fd, "depth", f"{path}.fluctuation", lo=0, hi=1, hi_open=True),
        )
    return PathSpec(
        id=ck.integer(d, "id", path, 0),
        name=str(d.get("name", "")),
        capacity_trace=_capacity(ck, d["capacity"], f"{path}.capacity"),
        base_rtt=ck.number(d, "rtt", path, lo=0, lo_open=True),
        loss_rate=ck.number(d, "loss_rate", path, default=0.0, lo=0, hi=1, hi_open=True),
        mean_burst=ck.number(d, "burst", path, default=10.0, lo=0, lo_open=True),
        availability=_availability(ck, d["availability"], f"{path}.availability") if "availability" in d else ((0.0, INF),),
        fluctuation=fluct,
    )


def _video(ck: _Checker, raw) -> VideoSpec:
    d = ck.mapping(raw, "video", VIDEO_KEYS)
    sequence = d.get("sequence", "foreman")
    if sequence not in sequence_names():
        ck.fail("video.sequence", f"unknown sequence {sequence!r}, expected one of {sequence_names()}")
    overrides = ck.mapping(d.get("distortion"), "video.distortion", DISTORTION_KEYS)
    for key, v in overrides.items():
        ck.value(v, f"video.distortion.{key}")
    try:
        params = DistortionParams.from_pretrained(sequence, **overrides)
    except ValueError as e:
        ck.fail("video.distortion", str(e))

    raw_rate = d.get("rate", 1400.0)
    if isinstance(raw_rate, list):
        if not raw_rate:
            ck.fail("video.rate", "rate list must not be empty")
        rates = tuple(ck.value(v, f"video.rate[{i}]", lo=params.r0, lo_open=True) for i, v in enumerate(raw_rate))
    else:
        rates = (ck.value(raw_rate, "video.rate", lo=params.r0, lo_open=True),)
    return VideoSpec(sequence=sequence, rates=rates, distortion=params)


def load_scenario(text: str) -> Scenario:
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ScenarioError("<document>", f"malformed YAML: {e}", mark.line + 1 if mark else None) from e
    ck = _Checker(_line_index(node) if node is not None else {})
    d = ck.mapping(data, "", TOP_KEYS)

    raw_paths = d.get("paths")
    if not isinstance(raw_paths, list) or not raw_paths:
        ck.fail("paths", "expected a non-empty list of paths")
    paths = tuple(_path(ck, p, f"paths[{i}]") for i, p in enumerate(raw_paths))
    seen = set()
    for i, p in enumerate(paths):
        if p.id in seen:
            ck.fail(f"paths[{i}].id", f"duplicate path id {p.id}")
        seen.add(p.id)

    bg = ck.mapping(d.get("background"), "background", BACKGROUND_KEYS)
    background = BackgroundSpec(
        min=ck.number(bg, "min", "background", default=0.0, lo=0, hi=1, hi_open=True),
        max=ck.number(bg, "max", "background", default=0.10, lo=0, hi=1, hi_open=True),
        period=ck.number(bg, "period", "background", default=500.0, lo=0, lo_open=True),
    )
    if background.min > background.max:
        ck.fail("background.min", f"min {background.min} exceeds max {background.max}")

    allocator = dict(ck.mapping(d.get("allocator"), "allocator", ALLOCATOR_KEYS))

    scenario = Scenario(
        paths=paths,
        video=_video(ck, d.get("video")),
        name=str(d.get("name", "scenario")),
        duration=ck.number(d, "duration", "", default=20000.0, lo=0, lo_open=True),
        seed=ck.integer(d, "seed", "", 0),
        deadline=ck.number(d, "deadline", "", default=250.0, lo=0, lo_open=True),
        loss_req=ck.number(d, "loss_req", "", default=0.01, lo=0, hi=1),
        interval=ck.number(d, "interval", "", default=250.0, lo=0, lo_open=True),
        omega=ck.number(d, "omega", "", default=5.0, lo=0, lo_open=True),
        tlv=ck.number(d, "tlv", "", default=1.2, lo=1, lo_open=True),
        mtu=ck.integer(d, "mtu", "", 1500, lo=1),
        receiver_buffer=ck.integer(d, "receiver_buffer", "", 65536, lo=1),
        speed=ck.number(d, "speed", "", default=1.0, lo=0, lo_open=True),
        queue_limit=ck.number(d, "queue_limit", "", default=400.0, lo=0, lo_open=True),
        background=background,
        allocator=allocator,
    )
    if scenario.receiver_buffer < scenario.mtu:
        ck.fail("receiver_buffer", f"must hold at least one MTU ({scenario.mtu} bytes)")
    try:
        scenario.allocator_config()
    except (TypeError, ValueError) as e:
        ck.fail("allocator", str(e))
    if scenario.deadline < scenario.interval:
        logger.warning("deadline %.0f ms is shorter than the distribution interval %.0f ms", scenario.deadline, scenario.interval)
    return scenario


def load_scenario_file(path: str) -> Scenario:
    if not os.path.isfile(path):
        raise ScenarioError(path, "no such scenario file")
    with open(path) as f:
        return load_scenario(f.read())


def scenario_to_dict(s: Scenario) -> dict:
    def path_dict(p: PathSpec) -> dict:
        d = {
            "id": p.id,
            "name": p.name,
            "capacity": [list(pt) for pt in p.capacity_trace],
            "rtt": p.base_rtt,
            "loss_rate": p.loss_rate,
            "burst": p.mean_burst,
            "availability": [list(w) for w in p.availability],
        }
        if p.fluctuation is not None:
            d["fluctuation"] = asdict(p.fluctuation)
        return d

    return {
        "name": s.name,
        "duration": s.duration,
        "seed": s.seed,
        "deadline": s.deadline,
        "loss_req": s.loss_req,
        "interval": s.interval,
        "omega": s.omega,
        "tlv": s.tlv,
        "mtu": s.mtu,
        "receiver_buffer": s.receiver_buffer,
        "speed": s.speed,
        "queue_limit": s.queue_limit,
        "background": asdict(s.background),
        "allocator": dict(s.allocator),
        "video": {
            "sequence": s.video.sequence,
            "rate": list(s.video.rates),
            "distortion": s.video.distortion.to_dict(),
        },
        "paths": [path_dict(p) for p in s.paths],
    }


def serialize_scenario(s: Scenario) -> str:
    return yaml.safe_dump(scenario_to_dict(s), sort_keys=False)
