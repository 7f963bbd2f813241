from __future__ import annotations

from dataclasses import dataclass
import os

from dotenv import load_dotenv


@dataclass(frozen=True)
class Settings:
    output_dir: str
    results_db: str
    workers: int
    chunk_size: int
    log_level: str


def _int_env(name: str, default: int, minimum: int = 1) -> int:
    raw = os.getenv(name, "").strip()
    if not raw:
        return default
    try:
        value = int(raw)
    except ValueError as exc:
        raise ValueError(f"{name} must be an integer, got {raw!r}") from exc
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return value


def load_settings() -> Settings:
    load_dotenv()

    log_level = os.getenv("ONTIC_LOG_LEVEL", "INFO").strip().upper() or "INFO"
    if log_level not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
        raise ValueError(f"ONTIC_LOG_LEVEL has unknown level {log_level!r}")

    return Settings(
        output_dir=os.getenv("ONTIC_OUTPUT_DIR", "runs").strip() or "runs",
        results_db=os.getenv("ONTIC_RESULTS_DB", "data/runs.db").strip(),
        workers=_int_env("ONTIC_WORKERS", 1),
        chunk_size=_int_env("ONTIC_CHUNK_SIZE", 65536, minimum=16),
        log_level=log_level,
    )
