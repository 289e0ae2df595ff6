"""Deterministic report writers: sorted-key JSON and aligned-column CSV.

Both embed the config hash and master seed. CSV files start with one
``#`` comment line carrying them; read with ``comment="#"`` and
``skipinitialspace=True`` (pandas) or strip fields by hand.
"""
from __future__ import annotations

import json
import math
from pathlib import Path


def _clean(obj):
    """JSON-safe copy: non-finite floats become strings, tuples become lists."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(dumps_json(obj))
    return p


def _cell(v) -> str:
    v = _clean(v)
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def aligned_csv(columns, rows, header: dict | None = None) -> str:
    table = [list(columns)] + [[_cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(columns))]
    lines = []
    if header:
        lines.append("# " + " ".join(f"{k}={_cell(v)}" for k, v in header.items()))
    for row in table:
        lines.append(",".join(cell.rjust(w) for cell, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


def write_csv(path, columns, rows, header: dict | None = None) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(aligned_csv(columns, rows, header))
    return p


def read_csv(path) -> list[dict]:
    """Inverse of :func:`write_csv` (values stay strings)."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    cols = [c.strip() for c in lines[0].split(",")]
    return [dict(zip(cols, (c.strip() for c in ln.split(",")))) for ln in lines[1:]]
