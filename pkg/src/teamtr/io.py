"""Versioned CSV / JSON artifacts.

Every JSON file carries a top-level ``schema`` key and every CSV file starts
with a ``# schema: <name>`` line. Readers refuse files whose schema differs
from the one they expect.
"""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from .errors import ValidationError

SCHEMAS = {
    "updates": "teamtr.updates/1",
    "stages": "teamtr.stages/1",
    "calibration": "teamtr.calibration/1",
    "summary": "teamtr.summary/1",
    "certificates": "teamtr.certificates/1",
    "compare": "teamtr.compare/1",
    "scale": "teamtr.scale/1",
    "swap": "teamtr.swap/1",
    "report": "teamtr.report/1",
    "states": "teamtr.states/1",
}


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None, tuples to lists."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def dumps_json(kind: str, payload: dict) -> str:
    body = {"schema": SCHEMAS[kind], **_clean(payload)}
    return json.dumps(body, sort_keys=True, indent=2) + "\n"


def write_json(path, kind: str, payload: dict) -> Path:
    path = Path(path)
    path.write_text(dumps_json(kind, payload))
    return path


def read_json(path, kind: str) -> dict:
    data = json.loads(Path(path).read_text())
    got = data.get("schema") if isinstance(data, dict) else None
    if got != SCHEMAS[kind]:
        raise ValidationError(f"{path}: schema {got!r}, expected {SCHEMAS[kind]!r}")
    return data


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def dumps_csv(kind: str, rows, columns=None) -> str:
    rows = list(rows)
    if columns is None:
        columns = list(rows[0]) if rows else []
    buf = io.StringIO()
    buf.write(f"# schema: {SCHEMAS[kind]}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r[c]) for c in columns])
    return buf.getvalue()


def write_csv(path, kind: str, rows, columns=None) -> Path:
    path = Path(path)
    path.write_text(dumps_csv(kind, rows, columns))
    return path


def read_csv(path, kind: str) -> list[dict]:
    text = Path(path).read_text()
    first, _, rest = text.partition("\n")
    expected = f"# schema: {SCHEMAS[kind]}"
    if first.strip() != expected:
        raise ValidationError(f"{path}: header {first.strip()!r}, expected {expected!r}")
    return list(csv.DictReader(io.StringIO(rest)))


def state_table_rows(space) -> list[dict]:
    return [{"index": i, "tokens": " ".join(map(str, st.tokens)), "turn": st.turn,
             "terminal": st.terminal, "active": int(space.active[i])} for i, st in enumerate(space.states)]


def export_states(space, path) -> Path:
    """Enumerated state table for debugging: index, token string, turn, terminal flag, active agent."""
    return write_csv(path, "states", state_table_rows(space), ["index", "tokens", "turn", "terminal", "active"])
