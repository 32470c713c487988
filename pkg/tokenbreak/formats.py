"""On-disk formats: FMAT1 feature files, label files, JSON reports, CSV.

FMAT1 layout: b"FMAT1", u32 rows, u32 cols (little-endian), then rows*cols
little-endian float32 values, row-major.
"""

from __future__ import annotations

import csv
import io
import json
import os
from typing import Any, Iterable, List, Sequence

import numpy as np
from pydantic import BaseModel

from .errors import FeatureFormatError
from .utils import atomic_write_bytes, atomic_write_text

FMAT_MAGIC = b"FMAT1"


def encode_features(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    if x.ndim != 2:
        raise FeatureFormatError(f"feature matrix must be 2D, got shape {x.shape}")
    header = np.array(x.shape, dtype="<u4").tobytes()
    return FMAT_MAGIC + header + np.ascontiguousarray(x, dtype="<f4").tobytes()


def write_features(path: str, x: np.ndarray) -> str:
    return atomic_write_bytes(path, encode_features(x))


def read_features(path: str) -> np.ndarray:
    if not os.path.isfile(path):
        raise FeatureFormatError(f"no such feature file: {path}")
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(FMAT_MAGIC):
        raise FeatureFormatError(f"{path}: bad magic, expected {FMAT_MAGIC!r}")
    off = len(FMAT_MAGIC)
    if len(data) < off + 8:
        raise FeatureFormatError(f"{path}: truncated header")
    rows, cols = (int(v) for v in np.frombuffer(data, dtype="<u4", count=2, offset=off))
    off += 8
    expected = off + 4 * rows * cols
    if len(data) != expected:
        raise FeatureFormatError(f"{path}: {len(data)} bytes, header implies {expected}")
    return np.frombuffer(data, dtype="<f4", count=rows * cols, offset=off).astype(np.float64).reshape(rows, cols)


def write_labels(path: str, labels: Iterable[int]) -> str:
    return atomic_write_text(path, "".join(f"{int(v)}\n" for v in labels))


def read_labels(path: str) -> np.ndarray:
    if not os.path.isfile(path):
        raise FeatureFormatError(f"no such label file: {path}")
    out: List[int] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(int(line))
            except ValueError as e:
                raise FeatureFormatError(f"{path}:{lineno}: not an integer label: {line!r}") from e
    return np.asarray(out, dtype=np.int64)


def write_lines(path: str, lines: Sequence[str]) -> str:
    return atomic_write_text(path, "".join(f"{s}\n" for s in lines))


def to_json(obj: Any) -> str:
    """Stable JSON: sorted keys, 2-space indent, trailing newline."""
    if isinstance(obj, BaseModel):
        obj = obj.model_dump(mode="json")
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_json(path: str, obj: Any) -> str:
    return atomic_write_text(path, to_json(obj))


def to_csv(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_csv_cell(v) for v in row])
    return buf.getvalue()


def _csv_cell(v: Any) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
