"""CSV ingestion and lossless JSON serialization."""

from __future__ import annotations

import csv
import json
import math
import re
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ClusterIndex, ClusteredSample, build_sample
from .errors import EmptyFile, MissingColumn, ParseError

__all__ = ["ingest_csv", "ingest_index", "dumps", "to_jsonable"]

_NUMBER = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")


def ingest_csv(path, cluster_column: str, columns: Sequence[str] | None = None) -> ClusteredSample:
    """Read a comma-separated file with a header row into a clustered sample.

    ``columns`` selects (and orders) the numeric columns; by default every
    column other than ``cluster_column`` is used. Cluster labels are kept as
    strings. Rows are grouped by first appearance of their label and keep
    file order within a cluster.

    Raises
    ------
    EmptyFile
        No header, or a header with no data rows.
    MissingColumn
        The cluster column or a selected column is absent from the header.
    ParseError
        A selected cell is not a plain decimal number, or a row has the wrong
        number of fields. Lines and columns are 1-based.
    """
    values, labels, columns = _read(path, cluster_column, columns)
    return build_sample(values, labels, columns)


def ingest_index(path, cluster_column: str) -> ClusterIndex:
    """Cluster layout of a CSV file; only the cluster column is read."""
    _, labels, _ = _read(path, cluster_column, [])
    return build_sample(np.zeros(len(labels)), labels).index


def _read(path, cluster_column, columns):
    with open(Path(path), encoding="utf-8-sig", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or not any(h.strip() for h in header):
            raise EmptyFile(f"{path}: no header row")
        header = [h.strip() for h in header]
        pos = {name: j for j, name in enumerate(header)}
        if cluster_column not in pos:
            raise MissingColumn(cluster_column)
        if columns is None:
            columns = [h for h in header if h != cluster_column]
        for c in columns:
            if c not in pos:
                raise MissingColumn(c)
        cidx = pos[cluster_column]
        sel = [pos[c] for c in columns]

        rows, labels = [], []
        for fields in reader:
            line = reader.line_num
            if not fields or (len(fields) == 1 and not fields[0].strip()):
                continue
            if len(fields) != len(header):
                raise ParseError(line, len(fields), f"expected {len(header)} fields, found {len(fields)}")
            vals = []
            for j in sel:
                cell = fields[j].strip()
                if not _NUMBER.fullmatch(cell):
                    raise ParseError(line, j + 1, f"not a number: {cell!r}")
                vals.append(float(cell))
            rows.append(vals)
            labels.append(fields[cidx].strip())
    if not rows:
        raise EmptyFile(f"{path}: header but no data rows")
    return np.array(rows, dtype=np.float64).reshape(len(rows), len(sel)), labels, list(columns)


def to_jsonable(obj):
    """Convert numpy containers and scalars to plain Python values."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    if obj is None or isinstance(obj, str):
        return obj
    if hasattr(obj, "__array__"):
        return to_jsonable(np.asarray(obj))
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _encode(obj, indent: int, level: int) -> str:
    pad = "\n" + " " * (indent * (level + 1)) if indent else ""
    end = "\n" + " " * (indent * level) if indent else ""
    sep = "," + pad if indent else ","
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{_string(k)}: {_encode(v, indent, level + 1)}" for k, v in obj.items()]
        return "{" + pad + sep.join(items) + end + "}"
    if isinstance(obj, list):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list)) for v in obj):
            return "[" + ", ".join(_encode(v, indent, level + 1) for v in obj) + "]"
        return "[" + pad + sep.join(_encode(v, indent, level + 1) for v in obj) + end + "]"
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return "null"
        return format(obj, ".17g")
    return _string(obj)


def _string(s: str) -> str:
    return json.dumps(str(s), ensure_ascii=False)


def dumps(obj, indent: int = 2) -> str:
    """JSON text with every float written to 17 significant digits.

    Non-finite floats become ``null``.
    """
    return _encode(to_jsonable(obj), indent, 0) + "\n"
