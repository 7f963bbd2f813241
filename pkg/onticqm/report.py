from __future__ import annotations

from dataclasses import dataclass, field
import json
import logging
import math
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__

logger = logging.getLogger(__name__)

REPORT_SCHEMA = "onticqm.report/1"


@dataclass(frozen=True)
class Gate:
    """One declared pass/fail check: |value - target| <= tolerance, or a boolean condition."""

    name: str
    value: float | bool
    target: float | None = None
    tolerance: float | None = None

    @property
    def passed(self) -> bool:
        if isinstance(self.value, (bool, np.bool_)):
            return bool(self.value)
        if self.target is None or self.tolerance is None:
            raise ValueError(f"gate {self.name!r} needs a target and a tolerance")
        return bool(abs(float(self.value) - self.target) <= self.tolerance)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "value": _plain(self.value),
            "target": self.target,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


@dataclass(frozen=True)
class Series:
    """A plot-ready table written as one CSV file."""

    columns: tuple[str, ...]
    rows: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        rows = np.atleast_2d(np.asarray(self.rows, dtype=float))
        if rows.shape[1] != len(self.columns):
            raise ValueError(f"series has {rows.shape[1]} columns, header names {len(self.columns)}")
        object.__setattr__(self, "rows", rows)

    @classmethod
    def from_columns(cls, **columns: Sequence[float] | np.ndarray) -> Series:
        names = tuple(columns)
        return cls(names, np.column_stack([np.asarray(columns[n], dtype=float) for n in names]))


@dataclass
class TaskResult:
    name: str
    kind: str
    values: dict[str, Any] = field(default_factory=dict)
    gates: list[Gate] = field(default_factory=list)
    series: dict[str, Series] = field(default_factory=dict, repr=False)

    @property
    def status(self) -> str:
        if not self.gates:
            return "done"
        return "passed" if all(g.passed for g in self.gates) else "failed"

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "kind": self.kind,
            "status": self.status,
            "values": _plain(self.values),
            "gates": [g.to_dict() for g in self.gates],
            "series": sorted(self.series),
        }


@dataclass
class RunReport:
    scenario: dict[str, Any]
    seed: int
    samples: int
    results: list[TaskResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.status != "failed" for r in self.results)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema": REPORT_SCHEMA,
            "scenario": self.scenario,
            "provenance": {
                "version": __version__,
                "seed": self.seed,
                "samples": self.samples,
                "grid": self.scenario.get("grid"),
            },
            "passed": self.passed,
            "tasks": [r.to_dict() for r in self.results],
        }


def _plain(value: Any) -> Any:
    """JSON-safe copy: numpy scalars and arrays become Python values, non-finite floats become strings."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        number = float(value)
        return number if math.isfinite(number) else str(number)
    if isinstance(value, complex):
        return {"re": _plain(value.real), "im": _plain(value.imag)}
    return value


def write_series(path: Path, series: Series) -> Path:
    np.savetxt(path, series.rows, delimiter=",", header=",".join(series.columns), comments="", fmt="%.17g")
    return path


def write_report(directory: str | Path, report: RunReport, formats: Sequence[str] = ("json", "csv")) -> Path:
    """Write ``report.json`` and one ``<task>__<series>.csv`` per series; returns the JSON path."""
    target = Path(directory)
    target.mkdir(parents=True, exist_ok=True)
    report_path = target / "report.json"
    if "json" in formats:
        report_path.write_text(json.dumps(report.to_dict(), ensure_ascii=False, indent=2), encoding="utf-8")
    if "csv" in formats:
        for result in report.results:
            for name, series in result.series.items():
                write_series(target / f"{result.name}__{name}.csv", series)
    logger.info("Report written to %s", target)
    return report_path
