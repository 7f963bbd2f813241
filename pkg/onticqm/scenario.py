from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
import json
import math
from pathlib import Path
from typing import Any

from .epistemic import XI_LAWS
from .errors import ConfigError

TASK_KINDS = (
    "uncertainty",
    "uncertainty_sweep",
    "expectation",
    "expectation_sweep",
    "evolve",
    "madelung_check",
    "classical_limit",
    "born",
    "angular_momentum",
    "correlation",
    "mu_invariance",
)
OUTPUT_FORMATS = ("json", "csv")
BUNDLED_PACKAGE = "onticqm.scenarios"


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    name: str
    params: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Scenario:
    name: str
    description: str
    hbar: float
    seed: int
    samples: int
    xi_law: str
    grid: dict[str, Any] | None
    state: dict[str, Any] | None
    observables: tuple[Any, ...]
    tasks: tuple[TaskSpec, ...]
    formats: tuple[str, ...]
    runtime_budget: float | None
    raw: dict[str, Any] = field(repr=False, compare=False)

    def echo(self, seed: int, samples: int) -> dict[str, Any]:
        """Scenario as it ran, with command-line overrides applied."""
        echoed = json.loads(json.dumps(self.raw))
        echoed["seed"] = seed
        echoed["samples"] = samples
        return echoed


def _number(raw: dict[str, Any], key: str, default: float, *, positive: bool = False) -> float:
    value = raw.get(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigError(f"Scenario field '{key}' must be a finite number")
    if positive and value <= 0:
        raise ConfigError(f"Scenario field '{key}' must be positive")
    return float(value)


def _integer(raw: dict[str, Any], key: str, default: int, minimum: int = 0) -> int:
    value = raw.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ConfigError(f"Scenario field '{key}' must be an integer >= {minimum}")
    return value


def _block(raw: dict[str, Any], key: str, owner: str) -> dict[str, Any] | None:
    value = raw.get(key)
    if value is not None and not isinstance(value, dict):
        raise ConfigError(f"{owner} field '{key}' must be an object")
    return value


def _check_grid(grid: dict[str, Any], owner: str) -> None:
    for key in ("lower", "upper", "points"):
        if key not in grid:
            raise ConfigError(f"{owner} grid has no '{key}'")
    points = grid["points"]
    for count in points if isinstance(points, list) else [points]:
        if isinstance(count, bool) or not isinstance(count, int) or count < 4:
            raise ConfigError(f"{owner} grid has invalid 'points'")


def parse_scenario(raw: Any, source: str = "<memory>") -> Scenario:
    """Validate a decoded scenario document; every problem is a ConfigError."""
    if not isinstance(raw, dict):
        raise ConfigError(f"Scenario {source} must contain a JSON object")

    name = raw.get("name")
    if not isinstance(name, str) or not name.strip():
        raise ConfigError(f"Scenario {source} has invalid 'name'")
    description = raw.get("description", "")
    if not isinstance(description, str):
        raise ConfigError(f"Scenario {name} has invalid 'description'")

    xi = _block(raw, "xi", "Scenario") or {}
    law = xi.get("law", "two_point")
    if law not in XI_LAWS:
        raise ConfigError(f"Scenario {name} has unknown xi law {law!r}")

    grid = _block(raw, "grid", "Scenario")
    if grid is not None:
        _check_grid(grid, "Scenario")
    state = _block(raw, "state", "Scenario")
    if state is not None and not isinstance(state.get("family"), str):
        raise ConfigError(f"Scenario {name} state has no 'family'")

    observables = raw.get("observables", [])
    if not isinstance(observables, list):
        raise ConfigError(f"Scenario {name} field 'observables' must be an array")
    for idx, obs in enumerate(observables, start=1):
        if not isinstance(obs, (str, dict)):
            raise ConfigError(f"Observable #{idx} must be a name or an object")

    raw_tasks = raw.get("tasks")
    if not isinstance(raw_tasks, list) or not raw_tasks:
        raise ConfigError(f"Scenario {name} must declare a non-empty 'tasks' array")
    tasks: list[TaskSpec] = []
    seen: set[str] = set()
    for idx, item in enumerate(raw_tasks, start=1):
        if not isinstance(item, dict):
            raise ConfigError(f"Task #{idx} must be object")
        kind = item.get("kind")
        if kind not in TASK_KINDS:
            raise ConfigError(f"Task #{idx} has invalid 'kind' {kind!r}")
        task_name = item.get("name", f"{kind}-{idx}")
        if not isinstance(task_name, str) or not task_name.strip():
            raise ConfigError(f"Task #{idx} has invalid 'name'")
        if task_name in seen:
            raise ConfigError(f"Duplicate task name in scenario: {task_name}")
        task_grid = _block(item, "grid", f"Task #{idx}")
        if task_grid is not None:
            _check_grid(task_grid, f"Task #{idx}")
        seen.add(task_name)
        params = {k: v for k, v in item.items() if k not in ("kind", "name")}
        tasks.append(TaskSpec(kind=kind, name=task_name, params=params))

    output = _block(raw, "output", "Scenario") or {}
    formats = output.get("formats", list(OUTPUT_FORMATS))
    if not isinstance(formats, list) or any(f not in OUTPUT_FORMATS for f in formats):
        raise ConfigError(f"Scenario {name} has invalid output formats {formats!r}")

    budget = raw.get("runtime_budget")
    if budget is not None:
        budget = _number(raw, "runtime_budget", 0.0, positive=True)

    return Scenario(
        name=name.strip(),
        description=description,
        hbar=_number(raw, "hbar", 1.0, positive=True),
        seed=_integer(raw, "seed", 0),
        samples=_integer(raw, "samples", 100_000, minimum=2),
        xi_law=law,
        grid=grid,
        state=state,
        observables=tuple(observables),
        tasks=tuple(tasks),
        formats=tuple(formats),
        runtime_budget=budget,
        raw=raw,
    )


def load_scenario(path: str | Path) -> Scenario:
    scenario_path = Path(path)
    try:
        text = scenario_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {scenario_path}: {exc.strerror or exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Scenario {scenario_path} is not valid JSON: {exc.msg} (line {exc.lineno})") from exc
    return parse_scenario(raw, str(scenario_path))


def bundled_scenarios() -> dict[str, Scenario]:
    """Scenarios shipped inside the package, keyed by name."""
    catalog: dict[str, Scenario] = {}
    for entry in sorted(resources.files(BUNDLED_PACKAGE).iterdir(), key=lambda e: e.name):
        if entry.name.endswith(".json"):
            scenario = parse_scenario(json.loads(entry.read_text(encoding="utf-8")), entry.name)
            catalog[scenario.name] = scenario
    return catalog


def list_scenarios(pattern: str = "") -> list[tuple[str, str]]:
    """(name, description) pairs whose name or description contains ``pattern``."""
    needle = pattern.lower()
    return [
        (name, scenario.description)
        for name, scenario in bundled_scenarios().items()
        if needle in name.lower() or needle in scenario.description.lower()
    ]


def resolve_scenario(reference: str) -> Scenario:
    """A path to a JSON file or the name of a bundled scenario."""
    path = Path(reference)
    if path.suffix == ".json" or path.exists():
        return load_scenario(path)
    catalog = bundled_scenarios()
    if reference not in catalog:
        raise ConfigError(f"no scenario file or bundled scenario named {reference!r}")
    return catalog[reference]
