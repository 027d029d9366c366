"""CSV helpers shared by the command line and the tests."""

from __future__ import annotations

import csv
import hashlib
from pathlib import Path

import numpy as np

__all__ = ["load_csv", "write_snapshot_csv", "read_snapshot_csv", "sha256_file"]


def _convert(values: list[str]):
    try:
        arr = np.array([float(v) for v in values])
    except ValueError:
        return values
    if np.all(arr == np.round(arr)) and all("." not in v and "e" not in v.lower() for v in values):
        return arr.astype(np.int64)
    return arr


def load_csv(path_like) -> dict:
    """Read a headed CSV into ``{column: array}``.

    Columns that parse as numbers become numpy arrays; anything else (such
    as the ``all`` summary row of a classification report) stays a list of
    strings.
    """
    p = Path(path_like)
    with p.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{p}: empty CSV") from None
        rows = [r for r in reader if r]
    for i, r in enumerate(rows, start=2):
        if len(r) != len(header):
            raise ValueError(f"{p}:{i}: expected {len(header)} fields, got {len(r)}")
    return {name: _convert([r[j] for r in rows]) for j, name in enumerate(header)}


def write_snapshot_csv(Z, path_like) -> Path:
    """``token,dim_1..dim_d`` with one row per token (column of ``Z``)."""
    Z = np.asarray(Z, dtype=float)
    p = Path(path_like)
    with p.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["token"] + [f"dim_{i + 1}" for i in range(Z.shape[0])])
        for x in range(Z.shape[1]):
            w.writerow([x + 1] + [repr(float(v)) for v in Z[:, x]])
    return p


def read_snapshot_csv(path_like) -> np.ndarray:
    cols = load_csv(path_like)
    dims = [k for k in cols if k.startswith("dim_")]
    order = np.argsort(cols["token"])
    return np.vstack([np.asarray(cols[k], dtype=float)[order] for k in dims])


def sha256_file(path_like) -> str:
    h = hashlib.sha256()
    with Path(path_like).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
