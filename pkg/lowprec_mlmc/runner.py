import asyncio
import csv
import json
import sys
import time
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

from .config import ExperimentConfig
from .mlmc import (LevelStats, estimate_level_stats_async, estimate_path_discrepancy_async, per_level_speedup,
                   run_nested_estimator_async)
from .randvar import approx_inv_cdf, density_histogram, derive_seed, exact_inv_cdf
from .sde import step_error_probe
from .softfloat import PRESETS, PrecisionSpec

# Optional: jsonschema validation
try:
    import jsonschema
    _HAS_JSONSCHEMA = True
except Exception:
    _HAS_JSONSCHEMA = False


DENSITY_GRID_POINTS = 1024
SINGLE = PRESETS["fp32"]

TABLE_FIELDS: Dict[str, List[str]] = {
    "density": ["kind", "u", "value"],
    "two-way": ["level", "n_steps", "precision", "kahan", "variance", "stderr", "paths"],
    "four-way": ["level", "series", "variance", "stderr", "paths"],
    "level-stats": ["variant", "level", "precision", "kahan", "approx", "paths", "mean_hat", "mean_bar", "mean_four",
                    "v_hat", "v_bar", "V_bar", "se_v_hat", "se_v_bar", "se_V_bar", "c_hat", "c_bar", "C_bar"],
    "speedup": ["level", "variant", "speedup", "degenerate"],
    "step-errors": ["level", "precision", "samples", "mean_eta", "mean_abs_eta", "mean_eta_prime",
                    "mean_abs_eta_prime"],
    "estimate": ["level", "m_bar", "M_bar", "mean_bar", "mean_four", "contribution", "v_bar", "V_bar",
                 "c_bar", "C_bar", "theta_hat", "T_hat", "T_bar", "eps"],
}


class ProgressTracker:
    """Tracks completed work units (one level of one variant) for progress reporting"""

    def __init__(self, total_units: int):
        self.total_units = total_units
        self.start_time = time.time()
        self.completed = 0
        self.paths_simulated = 0
        self.last_variance: Dict[str, float] = {}

    def record(self, label: str, paths: int, variance: Optional[float] = None):
        self.completed += 1
        self.paths_simulated += paths
        if variance is not None:
            self.last_variance[label] = variance

    def get_elapsed_time(self) -> float:
        """Get elapsed time in seconds"""
        return time.time() - self.start_time

    def get_rate(self) -> float:
        """Get units per second"""
        elapsed = self.get_elapsed_time()
        return self.completed / elapsed if elapsed > 0 else 0.0

    def get_eta(self) -> float:
        rate = self.get_rate()
        if rate > 0:
            return max(0, self.total_units - self.completed) / rate
        return 0.0

    def get_percentage(self) -> float:
        return (self.completed / self.total_units * 100) if self.total_units > 0 else 0.0

    def format_time(self, seconds: float) -> str:
        """Format seconds as H:MM:SS"""
        hours = int(seconds // 3600)
        minutes = int((seconds % 3600) // 60)
        secs = int(seconds % 60)
        if hours > 0:
            return f"{hours}:{minutes:02d}:{secs:02d}"
        return f"{minutes}:{secs:02d}"

    def get_compact_status(self) -> str:
        return (f"Progress: {self.completed}/{self.total_units} ({self.get_percentage():.1f}%) | "
                f"Paths: {self.paths_simulated} | Rate: {self.get_rate():.2f} unit/s | "
                f"Elapsed: {self.format_time(self.get_elapsed_time())} | ETA: {self.format_time(self.get_eta())}")

    def get_detailed_status(self) -> str:
        lines = [self.get_compact_status()]
        if self.last_variance:
            lines.append(" | ".join(f"{label}: {value:.3e}" for label, value in self.last_variance.items()))
        return "\n".join(lines)

    def get_json_status(self) -> str:
        data = {
            "progress": {
                "completed": self.completed,
                "total": self.total_units,
                "percentage": round(self.get_percentage(), 2),
                "paths": self.paths_simulated,
            },
            "performance": {
                "rate_units_per_sec": round(self.get_rate(), 4),
                "elapsed_seconds": round(self.get_elapsed_time(), 2),
                "eta_seconds": round(self.get_eta(), 2),
            },
            "variance": self.last_variance,
        }
        return json.dumps(data)

    def status(self, style: str) -> str:
        if style == "json":
            return self.get_json_status()
        if style == "detailed":
            return self.get_detailed_status()
        return self.get_compact_status()


def format_value(value: Any) -> str:
    """CSV cell: floats in shortest round-trip form, booleans as true/false, None as empty."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def flatten_row(row: Mapping[str, Any], fieldnames: List[str]) -> Dict[str, str]:
    return {name: format_value(row.get(name)) for name in fieldnames}


_ROW_SCHEMA: Optional[dict] = None


def validate_row(table: str, row: Mapping[str, Any]) -> None:
    """Check a row against its table in the packaged row schema (no-op without jsonschema)."""
    global _ROW_SCHEMA
    if not _HAS_JSONSCHEMA:
        return
    if _ROW_SCHEMA is None:
        import importlib.resources as pkg_resources
        from . import schemas as _schemas_pkg
        _ROW_SCHEMA = json.loads(pkg_resources.files(_schemas_pkg).joinpath("result_rows.schema.json").read_text())
    schema = dict(_ROW_SCHEMA, **{"$ref": f"#/$defs/{table}"})
    jsonschema.validate(instance={k: v for k, v in row.items() if k in TABLE_FIELDS[table]}, schema=schema)


async def csv_writer_worker(queue: asyncio.Queue, output_file: Optional[str], fieldnames: List[str]):
    """CSV writer coroutine; the header is written before the first row, a None item stops it."""
    if output_file:
        try:
            f = open(output_file, "w", encoding="utf-8", newline='')
        except OSError as e:
            raise RuntimeError(f"Cannot open output file {output_file}: {e}") from e
        writer = csv.DictWriter(f, fieldnames=fieldnames)
    else:
        f = None
        writer = csv.DictWriter(sys.stdout, fieldnames=fieldnames)
    writer.writeheader()

    try:
        while True:
            item = await queue.get()

            # Poison pill signals shutdown
            if item is None:
                break

            await asyncio.to_thread(writer.writerow, flatten_row(item, fieldnames))
            if f:
                await asyncio.to_thread(f.flush)

            queue.task_done()
    finally:
        if f:
            f.close()
        else:
            sys.stdout.flush()


class TableSink:
    """One output table: a queue feeding a csv_writer_worker task."""

    def __init__(self, table: str, output_file: Optional[str], validate: bool = False):
        self.table = table
        self.validate = validate
        self.queue: asyncio.Queue = asyncio.Queue(maxsize=64)
        self.task = asyncio.create_task(csv_writer_worker(self.queue, output_file, TABLE_FIELDS[table]))

    def check_writer_health(self):
        """Raise if the writer task has failed."""
        if self.task.done() and not self.task.cancelled():
            exc = self.task.exception()
            if exc:
                raise RuntimeError(f"{self.table} writer task failed: {exc}") from exc

    async def start(self):
        """Let the writer open its file; an unwritable path fails here, before any rows are queued."""
        await asyncio.sleep(0)
        self.check_writer_health()

    async def put(self, row: Mapping[str, Any]):
        if self.validate:
            validate_row(self.table, row)
        self.check_writer_health()
        await self.queue.put(row)

    async def close(self):
        self.check_writer_health()
        await self.queue.put(None)
        await self.task

    def abort(self):
        if not self.task.done():
            self.task.cancel()


class Reporter:
    """Progress output on stderr."""

    def __init__(self, total_units: int, style: str = "compact", quiet: bool = False):
        self.tracker = ProgressTracker(total_units)
        self.style = style
        self.quiet = quiet

    def unit_done(self, label: str, paths: int, variance: Optional[float] = None):
        self.tracker.record(label, paths, variance)
        if not self.quiet:
            print(self.tracker.status(self.style), file=sys.stderr)

    def summary(self):
        if self.quiet:
            return
        t = self.tracker
        print(f"\nCompleted: {t.completed} units | Paths simulated: {t.paths_simulated} | "
              f"Total Time: {t.format_time(t.get_elapsed_time())}", file=sys.stderr)


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def _variants(config: ExperimentConfig) -> List[Tuple[PrecisionSpec, bool]]:
    """Single precision, then the configured low precision without and with Kahan."""
    variants: List[Tuple[PrecisionSpec, bool]] = []
    for candidate in ((SINGLE, False), (config.precision, False), (config.precision, True)):
        if candidate not in variants:
            variants.append(candidate)
    return variants


def _label(spec: PrecisionSpec, kahan: bool) -> str:
    return f"{spec.name}+kahan" if kahan else spec.name


def units_for(config: ExperimentConfig) -> int:
    if config.subcommand == "density":
        return 2
    if config.subcommand in ("two-way", "step-errors"):
        return len(config.levels) * len(config.precisions)
    if config.subcommand == "estimate":
        return 2 * (max(config.levels) + 1)
    if config.subcommand == "speedup" and config.stats:
        return 1
    return len(config.levels) * len(_variants(config))


async def run_density_experiment(config: ExperimentConfig, sink: TableSink, reporter: Reporter):
    """Inverse CDF curve on a midpoint grid, then the sampled density histogram."""
    u = (np.arange(DENSITY_GRID_POINTS) + 0.5) / DENSITY_GRID_POINTS
    values = exact_inv_cdf(u) if config.approx is None else approx_inv_cdf(config.approx, u)
    for ui, vi in zip(u, values):
        await sink.put({"kind": "curve", "u": float(ui), "value": float(vi)})
    reporter.unit_done("curve", 0)

    centres, density = await asyncio.to_thread(density_histogram, config.approx, config.bins,
                                               config.samples, derive_seed(config.seed, 0))
    for c, d in zip(centres, density):
        await sink.put({"kind": "histogram", "u": float(c), "value": float(d)})
    reporter.unit_done("histogram", config.samples)


async def run_two_way_experiment(config: ExperimentConfig, sink: TableSink, reporter: Reporter,
                                 semaphore: asyncio.Semaphore):
    """Var[X^_N - X-_N] per level and precision; all precisions share the uniforms of a level."""
    model = config.model
    for level in config.levels:
        n_paths = config.paths_for_level(level)
        for spec in config.precisions:
            moments = await estimate_path_discrepancy_async(model, level, spec, config.approx, config.kahan,
                                                            n_paths, config.seed, config.batch_size, semaphore)
            await sink.put({
                "level": level, "n_steps": 1 << level, "precision": spec.name, "kahan": config.kahan,
                "variance": moments.variance, "stderr": moments.variance_stderr, "paths": moments.count,
            })
            reporter.unit_done(_label(spec, config.kahan), moments.count, moments.variance)


async def _variant_stats(config: ExperimentConfig, level: int, reporter: Reporter,
                         semaphore: asyncio.Semaphore) -> List[LevelStats]:
    stats = []
    for spec, kahan in _variants(config):
        s = await estimate_level_stats_async(config.model, level, spec, config.approx, kahan,
                                             config.paths_for_level(level), config.seed, config.cost_model,
                                             config.batch_size, semaphore=semaphore)
        stats.append(s)
        reporter.unit_done(s.variant, s.m_hat, s.V_bar)
    return stats


def four_way_rows(level: int, low: PrecisionSpec, stats: List[LevelStats]) -> List[Dict[str, Any]]:
    """Exact two-way, low-precision two-way variants, then every four-way variant."""
    first = stats[0]
    rows = [{"level": level, "series": "exact two-way", "variance": first.v_hat, "stderr": first.se_v_hat,
             "paths": first.m_hat}]
    for s in stats:
        if s.precision == low.name:
            rows.append({"level": level, "series": f"{s.variant} two-way", "variance": s.v_bar,
                         "stderr": s.se_v_bar, "paths": s.m_bar})
    for s in stats:
        rows.append({"level": level, "series": f"{s.variant} four-way", "variance": s.V_bar,
                     "stderr": s.se_V_bar, "paths": s.M_bar})
    return rows


async def run_four_way_experiment(config: ExperimentConfig, sink: TableSink, reporter: Reporter,
                                  semaphore: asyncio.Semaphore, stats_sink: Optional[TableSink] = None):
    for level in config.levels:
        stats = await _variant_stats(config, level, reporter, semaphore)
        for row in four_way_rows(level, config.precision, stats):
            await sink.put(row)
        if stats_sink:
            for s in stats:
                await stats_sink.put(s.as_row())


def read_level_stats(path: str) -> List[LevelStats]:
    try:
        with open(path, "r", encoding="utf-8", newline='') as f:
            rows = list(csv.DictReader(f))
    except OSError as e:
        raise RuntimeError(f"Cannot read stats file {path}: {e}") from e
    try:
        return [LevelStats.from_row(row) for row in rows]
    except (KeyError, TypeError, ValueError) as e:
        raise RuntimeError(f"Malformed stats file {path}: {e}") from e


async def run_speedup_report(config: ExperimentConfig, sink: TableSink, reporter: Reporter,
                             semaphore: asyncio.Semaphore):
    """
    Per-level speedups from a level-stats file (`--stats`) or from live estimation.

    Costs are recomputed with the configured cost model from each row's own
    precision and approximation; `--approx` only applies to live estimation.
    """
    if config.stats:
        stats = await asyncio.to_thread(read_level_stats, config.stats)
        if not stats:
            raise RuntimeError(f"No level statistics in {config.stats}")
        reporter.unit_done("stats", 0)
    else:
        stats = []
        for level in config.levels:
            stats.extend(await _variant_stats(config, level, reporter, semaphore))
    for s in stats:
        s = s.with_costs(config.cost_model)
        try:
            speedup, degenerate = per_level_speedup(s)
        except ValueError as e:
            raise RuntimeError(f"Cannot compute speedup for {s.variant}: {e}") from e
        await sink.put({"level": s.level, "variant": s.variant, "speedup": speedup, "degenerate": degenerate})


async def run_step_error_experiment(config: ExperimentConfig, sink: TableSink, reporter: Reporter):
    model = config.model
    for level in config.levels:
        for spec in config.precisions:
            probe = await asyncio.to_thread(step_error_probe, model, level, spec, config.approx, config.samples,
                                            derive_seed(config.seed, level))
            await sink.put({"level": level, "precision": spec.name, "samples": config.samples, **probe._asdict()})
            reporter.unit_done(spec.name, config.samples, probe.mean_abs_eta)


async def run_estimate_experiment(config: ExperimentConfig, sink: TableSink, reporter: Reporter,
                                  semaphore: asyncio.Semaphore):
    """Nested estimator up to the top configured level; one row per level and a total row."""
    def on_level(stage: str, stats: LevelStats):
        reporter.unit_done(f"{stage} {stats.level}", stats.m_hat, stats.V_bar)

    result = await run_nested_estimator_async(
        config.model, max(config.levels), config.precision, config.approx, config.kahan, config.eps,
        config.seed, config.cost_model, config.pilot_paths, config.batch_size, semaphore, on_level)
    for s in result.level_stats:
        await sink.put({
            "level": s.level, "m_bar": s.m_bar, "M_bar": s.M_bar, "mean_bar": s.mean_bar,
            "mean_four": s.mean_four, "contribution": s.contribution, "v_bar": s.v_bar, "V_bar": s.V_bar,
            "c_bar": s.c_bar, "C_bar": s.C_bar,
        })
    await sink.put({
        "level": "total", "m_bar": sum(s.m_bar for s in result.level_stats),
        "M_bar": sum(s.M_bar for s in result.level_stats), "contribution": result.value,
        "theta_hat": result.standard_value, "T_hat": result.T_hat, "T_bar": result.T_bar, "eps": result.eps,
    })


async def run(config: ExperimentConfig):
    sink = TableSink(config.subcommand, config.out, config.validate)
    stats_sink = None
    if config.subcommand == "four-way" and config.stats_out:
        stats_sink = TableSink("level-stats", config.stats_out, config.validate)
    reporter = Reporter(units_for(config), config.progress_style, config.quiet)
    semaphore = asyncio.Semaphore(config.concurrency)

    sinks = [s for s in (sink, stats_sink) if s]
    try:
        for s in sinks:
            await s.start()
        if config.subcommand == "density":
            await run_density_experiment(config, sink, reporter)
        elif config.subcommand == "two-way":
            await run_two_way_experiment(config, sink, reporter, semaphore)
        elif config.subcommand == "four-way":
            await run_four_way_experiment(config, sink, reporter, semaphore, stats_sink)
        elif config.subcommand == "speedup":
            await run_speedup_report(config, sink, reporter, semaphore)
        elif config.subcommand == "step-errors":
            await run_step_error_experiment(config, sink, reporter)
        elif config.subcommand == "estimate":
            await run_estimate_experiment(config, sink, reporter, semaphore)
        else:
            raise ValueError(f"unknown subcommand '{config.subcommand}'")
        for s in sinks:
            await s.close()
    finally:
        for s in sinks:
            s.abort()

    reporter.summary()
