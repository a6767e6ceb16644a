"""Shared, module-level helpers used across skyway modules.

Lives outside the domain modules so every layer (worldmap up to bench) can
emit structured events and plain-text tables without importing each other.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Iterable, Sequence

LOGGER = logging.getLogger("skyway.events")


def log_event(event: str, run_id: str | None = None, **fields: Any) -> None:
    payload: dict[str, Any] = {"event": event, **fields}
    if run_id:
        payload["run_id"] = run_id
    LOGGER.info(json.dumps(payload, default=str))


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    if value is None:
        return "-"
    return str(value)


def format_table(columns: Sequence[str], rows: Iterable[Sequence[Any]], header: Sequence[str] = ()) -> str:
    """Whitespace-aligned table with optional `# key value` header lines."""
    body = [[_cell(v) for v in row] for row in rows]
    widths = [len(c) for c in columns]
    for row in body:
        if len(row) != len(columns):
            raise ValueError(f"row has {len(row)} values, table has {len(columns)} columns")
        widths = [max(w, len(v)) for w, v in zip(widths, row)]
    lines = [f"# {line}" for line in header]
    lines.append("  ".join(c.rjust(w) for c, w in zip(columns, widths)))
    lines.extend("  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in body)
    return "\n".join(lines) + "\n"


def write_table(path: str | Path, columns: Sequence[str], rows: Iterable[Sequence[Any]], header: Sequence[str] = ()) -> Path:
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(format_table(columns, rows, header), encoding="utf-8")
    except OSError as error:
        raise OSError(f"could not write table {target}: {error}") from error
    return target


def read_table(path: str | Path) -> tuple[list[str], list[list[str]], list[str]]:
    """Inverse of write_table: (columns, rows as strings, header lines)."""
    source = Path(path)
    try:
        lines = source.read_text(encoding="utf-8").splitlines()
    except OSError as error:
        raise OSError(f"could not read table {source}: {error}") from error
    header = [line[2:] for line in lines if line.startswith("# ")]
    data = [line.split() for line in lines if line.strip() and not line.startswith("#")]
    if not data:
        return [], [], header
    return data[0], data[1:], header
