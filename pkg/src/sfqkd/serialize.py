"""Deterministic JSON and CSV output.

Floats are written with 12 significant digits. JSON has no literal for
non-finite numbers, so those become the strings ``"inf"``, ``"-inf"`` and
``"nan"``.
"""
from __future__ import annotations

import enum
import json
import math

import numpy as np

SIG_DIGITS = 12


def round_sig(x: float) -> float:
    return float(f"{x:.{SIG_DIGITS}g}")


def to_plain(obj):
    """Recursively convert numpy scalars/arrays, enums and tuples for JSON."""
    if isinstance(obj, dict):
        return {str(k): to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_plain(obj.tolist())
    if isinstance(obj, enum.Enum):
        return to_plain(obj.value)
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj) + 0.0  # drop negative zero
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return round_sig(x)
    return obj


def dumps(obj) -> str:
    return json.dumps(to_plain(obj), indent=2, allow_nan=False) + "\n"


def format_cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.{SIG_DIGITS}g}"
    return str(value)


def csv_text(header, rows, comments=()) -> str:
    """CSV with optional leading ``#`` comment lines."""
    lines = [f"# {c}" for c in comments]
    lines.append(",".join(header))
    lines.extend(",".join(format_cell(v) for v in row) for row in rows)
    return "\n".join(lines) + "\n"
