"""CSV and JSON emitters with stable, bit-reproducible float formatting."""

from __future__ import annotations

import csv
import math
import platform
from pathlib import Path

import numpy as np

from .errors import ValidationError


def format_float(x):
    """17 significant digits; non-finite values as ``inf``, ``-inf``, ``nan``."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format_float(v)
    if v is None:
        return ""
    if isinstance(v, (list, tuple, np.ndarray)):
        return ";".join(_cell(x) for x in v)
    return str(v)


def write_csv(path, header, rows):
    """Comma-separated file with a header row and LF line endings."""
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                if len(row) != len(header):
                    raise ValidationError(f"{path.name}: row length {len(row)} != {len(header)}")
                w.writerow([_cell(v) for v in row])
    except OSError as exc:
        raise ValidationError(f"cannot write {path}: {exc}") from exc
    return path


def _plain(obj):
    """Convert numpy scalars/arrays, tuples and dataclass-free containers to JSON types."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if obj is None or isinstance(obj, str):
        return obj
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _dump(obj, indent, level):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{_string(k)}: {_dump(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, list):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list)) for v in obj):
            return "[" + ", ".join(_dump(v, indent, level + 1) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + _dump(v, indent, level + 1) for v in obj) + "\n" + end + "]"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if obj is None:
        return "null"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        s = format_float(obj)
        # JSON has no literal for non-finite numbers
        return s if math.isfinite(obj) else _string(s)
    return _string(obj)


def _string(s):
    out = ['"']
    for ch in str(s):
        if ch in '"\\':
            out.append("\\" + ch)
        elif ord(ch) < 0x20:
            out.append(f"\\u{ord(ch):04x}")
        else:
            out.append(ch)
    out.append('"')
    return "".join(out)


def dumps(obj, indent=2):
    """JSON text with every float written to 17 significant digits."""
    return _dump(_plain(obj), indent, 0) + "\n"


def write_json(path, obj):
    path = Path(path)
    try:
        path.write_text(dumps(obj), encoding="utf-8", newline="\n")
    except OSError as exc:
        raise ValidationError(f"cannot write {path}: {exc}") from exc
    return path


def versions():
    import scipy

    from . import __version__
    return {"tbdefect": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def fit_dict(fit):
    if fit is None:
        return None
    return {"rate": fit.rate, "prefactor": fit.prefactor, "r2": fit.r2, "n_points": fit.n_points}


def emit_report(out_dir, summary, tables):
    """Write ``summary.json`` plus one CSV per ``name -> (header, rows)`` entry.

    Raises
    ------
    ValidationError
        If the output directory cannot be created or written.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"cannot create output directory {out}: {exc}") from exc
    files = []
    for name, (header, rows) in tables.items():
        files.append(write_csv(out / name, header, rows).name)
    summary = dict(summary)
    summary["files"] = sorted(files)
    write_json(out / "summary.json", summary)
    return out / "summary.json"
