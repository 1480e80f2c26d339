"""
Command line: `run` a scenario over schemes and seeds, `compare` the summaries
of an output directory, `validate` a scenario file.

Exit codes: 0 success, 1 at least one run failed (finished runs are kept),
2 configuration error.
"""

import glob
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml
from tqdm import tqdm

from . import simulator
from .metrics import MetricsReport, confidence_interval
from .scenario import Scenario, ScenarioError, load_scenario_file, serialize_scenario
from .schedulers import SchedulerScheme

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUN_FAILED = 1
EXIT_CONFIG_ERROR = 2
WORKERS_ENV = "CMTDA_WORKERS"
SUMMARY_METRICS = (
    "psnr_mean",
    "goodput",
    "effective_loss",
    "overdue_ratio",
    "ipd_mean",
    "max_offset",
    "retransmissions",
    "effective_retransmissions",
)


def setup_logging(verbose: bool = False):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s |%(levelname)s: %(message)s',
    )


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        logger.warning("%s=%r is not an integer, running serially", WORKERS_ENV, os.environ[WORKERS_ENV])
        return 1


@dataclass
class RunConfig:
    scenario_path: str
    schemes: Tuple[str, ...] = tuple(s.value for s in SchedulerScheme)
    seeds: Tuple[int, ...] = tuple(range(20))
    out_dir: str = "results"
    workers: int = 1
    emit_trace: bool = False
    emit_csv: bool = True
    emit_summary: bool = True
    overrides: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if not self.schemes:
            raise ValueError("at least one scheme is required")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        self.schemes = tuple(SchedulerScheme.parse(s).value for s in self.schemes)


def run_name(scheme: str, seed: int) -> str:
    return f"{scheme}_seed{seed:03d}"


def emit_plotdata(report: MetricsReport, prefix: str, window_ms: float = 1000.0) -> List[str]:
    """
    Two-column text series: inter-packet delay CDF, instantaneous goodput,
    its moving average, and the per-GoP effective loss.
    """
    series = report.goodput_series
    bin_ms = float(series.time.iloc[1] - series.time.iloc[0]) if len(series) > 1 else 100.0
    window = max(1, int(round(window_ms / bin_ms)))
    moving = series.goodput.rolling(window, min_periods=1).mean()
    families = {
        "ipd_cdf": ("delay_ms cdf", report.ipd.grid, report.ipd.cdf),
        "goodput": ("time_ms goodput_kbps", series.time.to_numpy(), series.goodput.to_numpy()),
        "goodput_ma": ("time_ms moving_average_kbps", series.time.to_numpy(), moving.to_numpy()),
        "loss": ("time_ms effective_loss", report.gops.time.to_numpy(), report.gops.effective_loss.to_numpy()),
    }
    paths = []
    for name, (header, x, y) in families.items():
        path = f"{prefix}_{name}.dat"
        data = np.column_stack([np.asarray(x, dtype=float), np.asarray(y, dtype=float)]).reshape(-1, 2)
        np.savetxt(path, data, fmt="%.6f", header=header)
        paths.append(path)
    return paths


def run_one(scenario: Scenario, scheme: str, seed: int, out_dir: str, emit_trace: bool = False, emit_csv: bool = True) -> dict:
    report = simulator.run(scenario.with_overrides(seed=seed), scheme, keep_trace=emit_trace)
    prefix = os.path.join(out_dir, run_name(report.scheme, seed))
    if emit_csv:
        report.per_gop_frame().to_csv(prefix + ".csv", index=False, float_format="%.6f")
        emit_plotdata(report, prefix)
    if emit_trace:
        report.trace.to_frame().to_csv(prefix + "_trace.csv", index=False, float_format="%.6f")
    return report.summary()


def summarize(rows: Sequence[dict]) -> dict:
    """Mean and 95% half-width across seeds of every summary metric."""
    frame = pd.DataFrame(list(rows)).sort_values("seed")
    out = {"scheme": str(frame.scheme.iloc[0]), "runs": int(len(frame)), "seeds": [int(s) for s in frame.seed]}
    metrics = {}
    for key in SUMMARY_METRICS:
        mean, ci = confidence_interval(frame[key].to_numpy(dtype=float))
        metrics[key] = {"mean": round(mean, 9), "ci": round(ci, 9)}
    out["metrics"] = metrics
    return out


def comparison_table(summaries: Sequence[dict]) -> pd.DataFrame:
    order = {s.value: k for k, s in enumerate(SchedulerScheme)}
    rows = []
    for s in sorted(summaries, key=lambda s: order.get(s["scheme"], len(order))):
        row = {"scheme": s["scheme"], "runs": s["runs"]}
        for key, v in s["metrics"].items():
            row[key] = v["mean"]
            row[f"{key}_ci"] = v["ci"]
        rows.append(row)
    return pd.DataFrame(rows)


def write_summary(summary: dict, out_dir: str) -> str:
    path = os.path.join(out_dir, f"{summary['scheme']}_summary.yaml")
    with open(path, "w") as f:
        yaml.safe_dump(summary, f, sort_keys=False)
    return path


def run_batch(config: RunConfig) -> int:
    try:
        scenario = load_scenario_file(config.scenario_path).with_overrides(**config.overrides)
    except (ScenarioError, ValueError, OSError) as e:
        logger.error("cannot load %s: %s", config.scenario_path, e)
        return EXIT_CONFIG_ERROR
    os.makedirs(config.out_dir, exist_ok=True)

    jobs = [(scheme, seed) for scheme in config.schemes for seed in config.seeds]
    results: Dict[Tuple[str, int], dict] = {}
    failed = []

    def collect(job, future_or_fn):
        try:
            results[job] = future_or_fn()
        except Exception:
            logger.exception("run %s failed", run_name(*job))
            failed.append(job)

    args = (config.out_dir, config.emit_trace, config.emit_csv)
    if config.workers == 1:
        for job in tqdm(jobs, desc=scenario.name):
            collect(job, lambda: run_one(scenario, job[0], job[1], *args))
    else:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = {pool.submit(run_one, scenario, scheme, seed, *args): (scheme, seed) for scheme, seed in jobs}
            for future in tqdm(as_completed(futures), total=len(futures), desc=scenario.name):
                collect(futures[future], future.result)

    summaries = []
    for scheme in config.schemes:
        rows = [results[(scheme, seed)] for seed in config.seeds if (scheme, seed) in results]
        if not rows:
            continue
        summary = summarize(rows)
        summaries.append(summary)
        if config.emit_summary:
            write_summary(summary, config.out_dir)
    if summaries:
        comparison_table(summaries).to_csv(os.path.join(config.out_dir, "comparison.csv"), index=False, float_format="%.6f")

    if failed:
        logger.error("%d of %d runs failed", len(failed), len(jobs))
        return EXIT_RUN_FAILED
    return EXIT_OK


def run(
    scenario: str,
    scheme: Optional[List[str]] = None,
    seeds: int = 20,
    first_seed: int = 0,
    out: str = "results",
    workers: Optional[int] = None,
    trace: bool = False,
    receiver_buffer: Optional[int] = None,
    duration: Optional[float] = None,
    verbose: bool = False,
) -> int:
    """
    Runs the scheme x seed matrix of a scenario file.

    Args:
        scenario: path to the scenario YAML
        scheme: schemes to run (cmt-da, cmt-qa, cmt-pf, cmt), all when omitted
        seeds: number of seeds, starting at first_seed
        out: output directory
        workers: parallel runs, defaults to $CMTDA_WORKERS or 1
        trace: also write the full event trace of every run
        receiver_buffer: override of the scenario's receiver buffer (bytes)
        duration: override of the scenario's duration (ms)
    """
    setup_logging(verbose)
    try:
        config = RunConfig(
            scenario_path=scenario,
            schemes=tuple(scheme) if scheme else tuple(s.value for s in SchedulerScheme),
            seeds=tuple(range(first_seed, first_seed + seeds)),
            out_dir=out,
            workers=workers if workers is not None else default_workers(),
            emit_trace=trace,
            overrides={"receiver_buffer": receiver_buffer, "duration": duration},
        )
    except ValueError as e:
        logger.error("%s", e)
        return EXIT_CONFIG_ERROR
    return run_batch(config)


def compare(out_dir: str, verbose: bool = False) -> int:
    """Rebuilds comparison.csv from the per-scheme summaries in `out_dir`."""
    setup_logging(verbose)
    summaries = []
    for path in sorted(glob.glob(os.path.join(out_dir, "*_summary.yaml"))):
        with open(path) as f:
            summaries.append(yaml.safe_load(f))
    if not summaries:
        logger.error("no summaries in %s", out_dir)
        return EXIT_CONFIG_ERROR
    table = comparison_table(summaries)
    table.to_csv(os.path.join(out_dir, "comparison.csv"), index=False, float_format="%.6f")
    logger.info("\n%s", table.to_string(index=False))
    return EXIT_OK


def validate(scenario: str, verbose: bool = False) -> int:
    """Loads a scenario file and prints it back in normalized form."""
    setup_logging(verbose)
    try:
        parsed = load_scenario_file(scenario)
    except (ScenarioError, OSError) as e:
        logger.error("%s", e)
        return EXIT_CONFIG_ERROR
    print(serialize_scenario(parsed), end="")
    return EXIT_OK


def main(args: Optional[List[str]] = None) -> int:
    import jsonargparse
    return jsonargparse.CLI([run, compare, validate], args=args)


if __name__ == "__main__":
    sys.exit(main())
