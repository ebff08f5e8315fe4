"""Field files, plot data and flat configuration files."""

from __future__ import annotations

import configparser
import csv
import json
import math
from pathlib import Path

import numpy as np

from .grid import GridError, SpaceTimeField, make_grid


class FieldFormatError(ValueError):
    """Malformed field file."""


# -- field files ------------------------------------------------------------------

def write_field(path, values, grid, space="physical"):
    """Write ``values (m, Nt, Nx, ..)`` as a JSON header line plus little-endian payload.

    Frequency-space payloads are complex and stored as interleaved float64 pairs.
    """
    values = np.asarray(values)
    if values.shape[1:] != grid.shape:
        raise FieldFormatError(f"field shape {values.shape[1:]} does not match grid {grid.shape}")
    if space not in ("physical", "frequency"):
        raise FieldFormatError(f"unknown space {space!r}")
    is_complex = np.iscomplexobj(values)
    header = dict(grid.header(values.shape[0], space), complex=bool(is_complex))
    dtype = "<c16" if is_complex else "<f8"
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        fh.write(np.ascontiguousarray(values, dtype=dtype).tobytes(order="C"))


def read_field(path):
    """Inverse of :func:`write_field`; returns ``(values, grid, header)``."""
    with open(path, "rb") as fh:
        line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FieldFormatError(f"{path}: header is not JSON") from exc
    missing = {"d", "Nt", "Nx", "m", "layout", "space"} - set(header)
    if missing:
        raise FieldFormatError(f"{path}: header lacks {sorted(missing)}")
    if header["layout"] != "component-major":
        raise FieldFormatError(f"{path}: unsupported layout {header['layout']!r}")
    try:
        grid = make_grid(header["d"], header["Nt"], header["Nx"], header.get("T", 1.0), header.get("k", 1))
    except GridError as exc:
        raise FieldFormatError(f"{path}: {exc}") from exc
    dtype = "<c16" if header.get("complex", False) else "<f8"
    shape = (header["m"],) + grid.shape
    n = int(np.prod(shape))
    if len(payload) != n * np.dtype(dtype).itemsize:
        raise FieldFormatError(f"{path}: payload has {len(payload)} bytes, expected {n * np.dtype(dtype).itemsize}")
    values = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    return values, grid, header


def save_spacetime(path, field, space="physical"):
    vals = field.spectrum if space == "frequency" else field.values
    write_field(path, vals, field.grid, space)


def load_spacetime(path):
    values, grid, header = read_field(path)
    if header["space"] == "frequency":
        return SpaceTimeField.from_spectrum(grid, values, real=True)
    return SpaceTimeField(grid, values)


# -- plot data --------------------------------------------------------------------

def fmt(x):
    """Fixed 17-significant-digit float text."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.17g}"


TRACE_COLUMNS = ("t", "kinetic", "dissipation", "balance_residual")


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating, int, np.integer))
                        and not isinstance(v, bool) else v for v in row])


def read_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        cols = next(r)
        rows = [[float(v) for v in row] for row in r]
    return cols, rows


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    if obj is None or isinstance(obj, str):
        return obj
    if hasattr(obj, "to_dict"):
        return _jsonable(obj.to_dict())
    return str(obj)


def dumps(obj):
    """JSON text with floats at 17 significant digits and sorted keys."""
    return _dump(_jsonable(obj), 0) + "\n"


def _dump(o, level):
    pad = "  " * (level + 1)
    end = "  " * level
    if isinstance(o, dict):
        if not o:
            return "{}"
        items = [f"{pad}{json.dumps(k)}: {_dump(v, level + 1)}" for k, v in sorted(o.items())]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(o, list):
        if not o:
            return "[]"
        if all(not isinstance(v, (dict, list)) for v in o):
            return "[" + ", ".join(_dump(v, level + 1) for v in o) + "]"
        return "[\n" + ",\n".join(pad + _dump(v, level + 1) for v in o) + "\n" + end + "]"
    if isinstance(o, float):
        return fmt(o) if "e" in fmt(o) or "." in fmt(o) else fmt(o) + ".0"
    return json.dumps(o)


def write_json(path, obj):
    Path(path).write_text(dumps(obj))


def emit_plotdata(obj, path):
    """Write an energy trace as CSV or any report as JSON (chosen by suffix)."""
    path = Path(path)
    if path.suffix == ".csv":
        if hasattr(obj, "rows"):
            write_csv(path, TRACE_COLUMNS, obj.rows())
        else:
            cols, rows = obj
            write_csv(path, cols, rows)
    else:
        write_json(path, obj)
    return path


# -- configuration ----------------------------------------------------------------

def read_config(path):
    """Flat ``key = value`` file (``#`` comments) as a dict of strings."""
    text = Path(path).read_text()
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string("[top]\n" + text)
    except configparser.Error as exc:
        raise ValueError(f"{path}: {exc}") from exc
    return {k.replace("-", "_"): v for k, v in cp["top"].items()}
