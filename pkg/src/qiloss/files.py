"""Descriptor CSV files and JSON reports.

Descriptor files store floats with Python's shortest round-trip ``repr`` so
that writing and re-reading a set is lossless. Reports and metric tables use
a fixed 9-significant-digit format (see :func:`qiloss.trainer.fmt_float`).
"""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from .quasi_iso import DescriptorSet


class DescriptorFileError(ValueError):
    def __init__(self, path, line: int | None, msg: str):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {msg}")
        self.path, self.line = path, line


def _parse_float(text: str, path, line: int, col: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DescriptorFileError(path, line, f"column {col!r}: not a number: {text!r}") from None
    if not math.isfinite(v):
        raise DescriptorFileError(path, line, f"column {col!r}: value must be finite")
    return v


def parse_descriptors(text: str, path="<string>") -> DescriptorSet:
    """Strictly parse ``id,z,f0,...,f{C-1}`` CSV text; every depth must be > 0."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise DescriptorFileError(path, None, "empty file")
    header = [h.strip() for h in rows[0]]
    n_feat = len(header) - 2
    expected = ["id", "z"] + [f"f{k}" for k in range(max(n_feat, 0))]
    if n_feat < 1 or header != expected:
        raise DescriptorFileError(path, 1, f"header must be {','.join(expected[:2])},f0,...; got {','.join(header)}")
    ids, depths, feats = [], [], []
    seen = set()
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DescriptorFileError(path, line, f"expected {len(header)} columns, got {len(row)}")
        oid = row[0].strip()
        if not oid:
            raise DescriptorFileError(path, line, "empty id")
        if oid in seen:
            raise DescriptorFileError(path, line, f"duplicate id {oid!r}")
        seen.add(oid)
        z = _parse_float(row[1], path, line, "z")
        if not z > 0:
            raise DescriptorFileError(path, line, f"depth must be > 0, got {row[1].strip()}")
        ids.append(oid)
        depths.append(z)
        feats.append([_parse_float(v, path, line, header[k + 2]) for k, v in enumerate(row[2:])])
    if not ids:
        raise DescriptorFileError(path, None, "no data rows")
    return DescriptorSet(depths, feats, ids)


def read_descriptors(path) -> DescriptorSet:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise DescriptorFileError(path, None, f"not UTF-8: {e}") from None
    return parse_descriptors(text, path)


def format_descriptors(ds: DescriptorSet) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "z"] + [f"f{k}" for k in range(ds.dim)])
    for oid, z, f in zip(ds.ids, ds.depths, ds.features):
        w.writerow([oid, repr(float(z))] + [repr(float(v)) for v in f])
    return buf.getvalue()


def write_descriptors(ds: DescriptorSet, path) -> None:
    Path(path).write_text(format_descriptors(ds), encoding="utf-8")


def round9(x: float) -> float | str:
    """Round to 9 significant digits; infinities become the strings ``"inf"``/``"-inf"``."""
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        raise ValueError("NaN cannot be written to a report")
    return float(format(x, ".9g"))


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, bool) or obj is None or isinstance(obj, (str, int)):
        return obj
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return round9(obj)


def dumps_report(obj) -> str:
    """Serialise with insertion-ordered keys and 9-digit floats, newline-terminated."""
    return json.dumps(_clean(obj), indent=2, ensure_ascii=False, allow_nan=False) + "\n"
