from __future__ import annotations

import argparse
import asyncio
from dataclasses import replace
import logging
from pathlib import Path
import sys
import time
from typing import Sequence

from .config import Settings, load_settings
from .errors import OnticError
from .report import RunReport, write_report
from .scenario import Scenario, list_scenarios, resolve_scenario
from .store import RunStore
from .tasks import RunContext, run_task

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_GATES_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="onticqm",
        description="Run ensemble-mechanics scenarios and write JSON reports with CSV series.",
    )
    parser.add_argument("--config", help="Scenario JSON file or the name of a bundled scenario.")
    parser.add_argument("--seed", type=int, help="Override the scenario seed.")
    parser.add_argument("--samples", type=int, help="Override the scenario Monte Carlo sample count.")
    parser.add_argument("--out", help="Output directory (default: ONTIC_OUTPUT_DIR/<scenario>).")
    parser.add_argument("--list", action="store_true", help="List bundled scenarios and exit.")
    parser.add_argument("--filter", default="", help="Only list scenarios matching this text.")
    parser.add_argument("--workers", type=int, help="Threads per Monte Carlo task (default: ONTIC_WORKERS).")
    parser.add_argument("--history", type=int, metavar="N", help="Print the last N recorded runs and exit.")
    parser.add_argument("--no-store", action="store_true", help="Do not record the run in the history database.")
    parser.add_argument(
        "--log-level",
        choices=("DEBUG", "INFO", "WARNING", "ERROR"),
        help="Logging level (default: ONTIC_LOG_LEVEL).",
    )
    return parser.parse_args(argv)


def run_scenario(
    scenario: Scenario,
    *,
    seed: int | None = None,
    samples: int | None = None,
    workers: int = 1,
    chunk_size: int = 65536,
) -> RunReport:
    """Execute every task in declared order; nothing is written to disk here."""
    seed = scenario.seed if seed is None else seed
    samples = scenario.samples if samples is None else samples
    ctx = RunContext(scenario=scenario, seed=seed, samples=samples, workers=workers, chunk_size=chunk_size)
    report = RunReport(scenario=scenario.echo(seed, samples), seed=seed, samples=samples)
    for task in scenario.tasks:
        report.results.append(run_task(ctx, task))
    return report


async def _record(
    settings: Settings,
    *,
    scenario: str,
    seed: int,
    samples: int,
    started_at: int,
    exit_code: int,
    report: RunReport | None,
    report_path: Path | None,
    diagnostic: str | None,
) -> None:
    store = RunStore(settings.results_db)
    await store.connect()
    try:
        await store.init_schema()
        run_id = await store.record_run(
            scenario=scenario,
            seed=seed,
            samples=samples,
            started_at=started_at,
            exit_code=exit_code,
            report=report,
            report_path=str(report_path) if report_path else None,
            diagnostic=diagnostic,
        )
        logger.info("Run recorded as #%d in %s", run_id, settings.results_db)
    finally:
        await store.close()


async def _print_history(settings: Settings, limit: int) -> None:
    store = RunStore(settings.results_db)
    await store.connect()
    try:
        await store.init_schema()
        rows = await store.recent_runs(limit)
    finally:
        await store.close()
    if not rows:
        print("No recorded runs.")
        return
    for row in rows:
        finished = time.strftime("%Y-%m-%d %H:%M:%S", time.localtime(row["finished_at"]))
        failed = row["tasks_failed"] or 0
        print(
            f"#{row['id']} {finished} {row['scenario']} seed={row['seed']} "
            f"exit={row['exit_code']} tasks={row['tasks_total']} failed={failed}"
        )


def main(argv: Sequence[str] | None = None) -> int:
    args = parse_args(argv)
    try:
        settings = load_settings()
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.workers is not None:
        if args.workers < 1:
            print("config error: --workers must be >= 1", file=sys.stderr)
            return EXIT_CONFIG
        settings = replace(settings, workers=args.workers)

    logging.basicConfig(
        level=getattr(logging, args.log_level or settings.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    if args.list:
        for name, description in list_scenarios(args.filter):
            print(f"{name:32s} {description}")
        return EXIT_OK
    if args.history is not None:
        if not settings.results_db:
            print("config error: run history is disabled (ONTIC_RESULTS_DB is empty)", file=sys.stderr)
            return EXIT_CONFIG
        asyncio.run(_print_history(settings, max(args.history, 1)))
        return EXIT_OK
    if not args.config:
        print("config error: --config is required (or use --list)", file=sys.stderr)
        return EXIT_CONFIG
    if args.samples is not None and args.samples < 2:
        print("config error: --samples must be >= 2", file=sys.stderr)
        return EXIT_CONFIG

    started_at = int(time.time())
    report: RunReport | None = None
    report_path: Path | None = None
    diagnostic: str | None = None
    scenario_name = args.config
    seed = args.seed
    samples = args.samples
    try:
        scenario = resolve_scenario(args.config)
        scenario_name = scenario.name
        seed = scenario.seed if seed is None else seed
        samples = scenario.samples if samples is None else samples
        logger.info("Scenario %s: %d tasks, seed=%d, samples=%d", scenario.name, len(scenario.tasks), seed, samples)
        report = run_scenario(
            scenario,
            seed=seed,
            samples=samples,
            workers=settings.workers,
            chunk_size=settings.chunk_size,
        )
        out_dir = Path(args.out) if args.out else Path(settings.output_dir) / scenario.name
        report_path = write_report(out_dir, report, scenario.formats)
        exit_code = EXIT_OK if report.passed else EXIT_GATES_FAILED
    except OnticError as exc:
        logger.exception("Numerical abort in %s", exc.where or "unknown operation")
        diagnostic = str(exc)
        print(f"numerical abort: {diagnostic}", file=sys.stderr)
        report = None
        exit_code = EXIT_NUMERICAL
    except ValueError as exc:
        diagnostic = str(exc)
        print(f"config error: {diagnostic}", file=sys.stderr)
        report = None
        exit_code = EXIT_CONFIG

    if exit_code == EXIT_GATES_FAILED:
        logger.warning("Scenario %s finished with failed gates; see %s", scenario_name, report_path)

    if settings.results_db and not args.no_store and exit_code != EXIT_CONFIG:
        asyncio.run(
            _record(
                settings,
                scenario=scenario_name,
                seed=seed if seed is not None else 0,
                samples=samples if samples is not None else 0,
                started_at=started_at,
                exit_code=exit_code,
                report=report,
                report_path=report_path,
                diagnostic=diagnostic,
            )
        )
    return exit_code
