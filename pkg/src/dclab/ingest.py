"""Attention-weight dumps and structured-connection classification.

A dump is JSONL: a header line
``{"n_layers", "n_heads", "n", "c", "tokens"}`` followed by one record
``{"l", "h", "q", "k", "w"}`` per weight. Layers and heads are 0-based;
positions and tokens are 1-based in files and 0-based in memory. Files
ending in ``.gz`` are read and written compressed.
"""

from __future__ import annotations

import csv
import gzip
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import AttentionMap
from .graph import Graph

__all__ = [
    "DumpError",
    "AttentionDump",
    "read_dump",
    "write_dump",
    "dump_from_map",
    "LABELS",
    "PRECEDENCE",
    "ClassificationReport",
    "classify",
    "classify_maps",
    "label_records",
    "emit_report",
    "load_report_csv",
]

ROW_SUM_TOL = 1e-3
LABELS = ("A", "B", "T", "other")
PRECEDENCE = "T>A>B>other"


class DumpError(ValueError):
    pass


def _open(p: Path, mode: str):
    return gzip.open(p, mode + "t") if p.suffix == ".gz" else p.open(mode)


@dataclass(frozen=True)
class AttentionDump:
    """Flat record arrays plus the token sequence they refer to.

    ``flagged`` lists ``(layer, head, query)`` triples (0-based) whose
    weights do not sum to one within ``tol``.
    """

    n_layers: int
    n_heads: int
    n: int
    c: int
    tokens: np.ndarray
    layer: np.ndarray
    head: np.ndarray
    query: np.ndarray
    key: np.ndarray
    weight: np.ndarray
    flagged: tuple = ()
    tol: float = ROW_SUM_TOL

    def __len__(self):
        return self.weight.size


def _row_sums(layer, head, query, weight, n_heads, n):
    flat = (layer.astype(np.int64) * n_heads + head) * n + query
    ids, inv = np.unique(flat, return_inverse=True)
    sums = np.bincount(inv, weights=weight)
    return ids, sums


def _validate(header, layer, head, query, key, weight, tol):
    L, H, n, c = (int(header[f]) for f in ("n_layers", "n_heads", "n", "c"))
    if weight.size:
        if layer.min() < 0 or layer.max() >= L or head.min() < 0 or head.max() >= H:
            raise DumpError("layer/head index out of range")
        if query.min() < 0 or query.max() >= n or key.min() < 0:
            raise DumpError("query/key position out of range")
        if np.any(key > query):
            i = int(np.flatnonzero(key > query)[0])
            raise DumpError(f"record {i + 1}: key {key[i] + 1} after query {query[i] + 1}")
        if np.any(weight < 0):
            raise DumpError("negative attention weight")
    ids, sums = _row_sums(layer, head, query, weight, H, n)
    bad = ids[np.abs(sums - 1.0) > tol]
    flagged = tuple((int(i // (H * n)), int(i // n % H), int(i % n)) for i in bad)
    return flagged


def read_dump(path_like, tol: float = ROW_SUM_TOL) -> AttentionDump:
    """Load and validate a dump; rows off the row-sum tolerance are flagged."""
    p = Path(path_like)
    with _open(p, "r") as fh:
        first = fh.readline()
        if not first.strip():
            raise DumpError(f"{p}: empty dump")
        try:
            header = json.loads(first)
        except json.JSONDecodeError as exc:
            raise DumpError(f"{p}:1: bad header ({exc.msg})") from None
        missing = [f for f in ("n_layers", "n_heads", "n", "c") if f not in header]
        if missing:
            raise DumpError(f"{p}:1: header lacks {', '.join(missing)}")
        if not header.get("tokens"):
            raise DumpError(f"{p}:1: header has no token sequence")
        cols = [[], [], [], [], []]
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                vals = (int(rec["l"]), int(rec["h"]), int(rec["q"]) - 1, int(rec["k"]) - 1, float(rec["w"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DumpError(f"{p}:{lineno}: malformed record ({exc})") from None
            if vals[2] < 0 or vals[3] < 0 or vals[2] >= header["n"]:
                raise DumpError(f"{p}:{lineno}: position out of range")
            if vals[3] > vals[2]:
                raise DumpError(f"{p}:{lineno}: key {vals[3] + 1} after query {vals[2] + 1}")
            for col, v in zip(cols, vals):
                col.append(v)
    tokens = np.asarray(header["tokens"], dtype=np.int64) - 1
    if tokens.size != header["n"]:
        raise DumpError(f"{p}: {tokens.size} tokens but n={header['n']}")
    if tokens.min() < 0 or tokens.max() >= header["c"]:
        raise DumpError(f"{p}: tokens outside 1..{header['c']}")
    layer, head, query, key = (np.asarray(a, dtype=np.int64) for a in cols[:4])
    weight = np.asarray(cols[4], dtype=float)
    flagged = _validate(header, layer, head, query, key, weight, tol)
    return AttentionDump(int(header["n_layers"]), int(header["n_heads"]), int(header["n"]), int(header["c"]),
                         tokens, layer, head, query, key, weight, flagged, tol)


def write_dump(dump: AttentionDump, path_like) -> Path:
    """Write ``dump`` as JSONL; weights use ``repr`` so they round-trip exactly."""
    p = Path(path_like)
    header = {"n_layers": dump.n_layers, "n_heads": dump.n_heads, "n": dump.n, "c": dump.c,
              "tokens": (dump.tokens + 1).tolist()}
    with _open(p, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for l, h, q, k, w in zip(dump.layer.tolist(), dump.head.tolist(), (dump.query + 1).tolist(),
                                 (dump.key + 1).tolist(), dump.weight.tolist()):
            fh.write(f'{{"l": {l}, "h": {h}, "q": {q}, "k": {k}, "w": {w!r}}}\n')
    return p


def dump_from_map(maps, tol: float = ROW_SUM_TOL) -> AttentionDump:
    """In-memory dump of attention maps: one head per map in one layer, or a
    nested list ``maps[layer][head]``."""
    if isinstance(maps, AttentionMap):
        maps = [[maps]]
    elif isinstance(maps[0], AttentionMap):
        maps = [list(maps)]
    first = maps[0][0]
    parts = []
    for l, heads in enumerate(maps):
        for h, A in enumerate(heads):
            if A.n != first.n or not np.array_equal(A.tokens, first.tokens):
                raise DumpError("all maps in a dump must share one sequence")
            r, k, w = A.entries()
            parts.append((np.full(r.size, l), np.full(r.size, h), r, k, w))
    layer, head, query, key, weight = (np.concatenate(x) for x in zip(*parts))
    header = {"n_layers": len(maps), "n_heads": max(len(hs) for hs in maps), "n": first.n, "c": first.c}
    flagged = _validate(header, layer, head, query, key, weight, tol)
    return AttentionDump(header["n_layers"], header["n_heads"], first.n, first.c, np.asarray(first.tokens),
                         layer, head, query, key, weight, flagged, tol)


# ---------------------------------------------------------- classification


@dataclass
class ClassificationReport:
    """Per-head weight fractions by label; rows of ``fractions`` follow ``heads``."""

    heads: list
    fractions: np.ndarray
    totals: np.ndarray
    precedence: str = PRECEDENCE
    flagged_rows: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def global_fractions(self) -> np.ndarray:
        """Mass-weighted mean over heads."""
        mass = self.totals.sum(axis=1)
        return (self.fractions * mass[:, None]).sum(axis=0) / mass.sum()

    def fraction(self, label: str, head=None) -> float:
        j = LABELS.index(label)
        if head is None:
            return float(self.global_fractions[j])
        return float(self.fractions[self.heads.index(tuple(head)), j])

    def to_dict(self) -> dict:
        return {
            "precedence": self.precedence,
            "labels": list(LABELS),
            "flagged_rows": self.flagged_rows,
            "heads": [
                {"layer": l, "head": h, **{f"frac_{lab}": float(v) for lab, v in zip(LABELS, row)},
                 "mass": float(t.sum())}
                for (l, h), row, t in zip(self.heads, self.fractions, self.totals)
            ],
            "global": {f"frac_{lab}": float(v) for lab, v in zip(LABELS, self.global_fractions)},
            **self.meta,
        }


def label_records(dump: AttentionDump, g: Graph) -> np.ndarray:
    """Label index per record (into :data:`LABELS`) by precedence T > A > B > other."""
    if g.c != dump.c:
        raise DumpError(f"graph has {g.c} vertices, dump has c={dump.c}")
    if dump.weight.size and (dump.query.max() >= dump.n or dump.key.max() >= dump.n):
        raise DumpError("query/key position out of range")
    return _labels(dump.tokens[dump.query], dump.tokens[dump.key], dump.key, g)


def _labels(xq, xk, key, g: Graph) -> np.ndarray:
    # later assignments win, so they run from lowest to highest precedence
    lab = np.full(np.shape(key), LABELS.index("other"), dtype=np.int8)
    lab[g.is_edge(xq, xk)] = LABELS.index("B")
    lab[xq == xk] = LABELS.index("A")
    lab[key == 0] = LABELS.index("T")
    return lab


def classify(dump: AttentionDump, g: Graph) -> ClassificationReport:
    """Split each head's weight mass into A/B/T/other with overlaps counted once."""
    lab = label_records(dump, g)
    hid = dump.layer * dump.n_heads + dump.head
    n_ids = dump.n_layers * dump.n_heads
    totals = np.zeros((n_ids, len(LABELS)))
    np.add.at(totals, (hid, lab), dump.weight)
    present = np.flatnonzero(totals.sum(axis=1) > 0)
    totals = totals[present]
    fractions = totals / totals.sum(axis=1, keepdims=True)
    heads = [(int(i // dump.n_heads), int(i % dump.n_heads)) for i in present]
    return ClassificationReport(heads, fractions, totals, PRECEDENCE, len(dump.flagged))


def classify_maps(maps, g: Graph) -> ClassificationReport:
    """Same labels as :func:`classify`, computed row by row from attention
    maps (``maps[layer][head]``) without materialising a dump."""
    heads, totals, seen = [], [], {}
    for l, layer in enumerate(maps):
        for h, A in enumerate(layer):
            if id(A) not in seen:
                if A.c != g.c:
                    raise DumpError(f"graph has {g.c} vertices, map has c={A.c}")
                t = np.zeros(len(LABELS))
                for k in range(A.n):
                    w = A.row(k)
                    lab = _labels(A.tokens[k], A.tokens[: k + 1], np.arange(k + 1), g)
                    t += np.bincount(lab, weights=w, minlength=len(LABELS))
                seen[id(A)] = t
            heads.append((l, h))
            totals.append(seen[id(A)])
    totals = np.array(totals)
    return ClassificationReport(heads, totals / totals.sum(axis=1, keepdims=True), totals)


def emit_report(report: ClassificationReport, path_like, fmt: str | None = None) -> Path:
    """Write ``layer,head,frac_A,frac_B,frac_T,frac_other`` rows plus an
    ``all,all`` row with the global mean, or the JSON form."""
    p = Path(path_like)
    fmt = fmt or ("json" if p.suffix == ".json" else "csv")
    if fmt == "json":
        p.write_text(json.dumps(report.to_dict(), indent=2))
        return p
    if fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")
    with p.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "head"] + [f"frac_{lab}" for lab in LABELS])
        for (l, h), row in zip(report.heads, report.fractions):
            w.writerow([l, h] + [repr(float(v)) for v in row])
        w.writerow(["all", "all"] + [repr(float(v)) for v in report.global_fractions])
    return p


def load_report_csv(path_like) -> tuple[list, np.ndarray, np.ndarray]:
    """Read a CSV report back as ``(heads, fractions, global_row)``."""
    with Path(path_like).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols = [f"frac_{lab}" for lab in LABELS]
    data = [r for r in rows if r["layer"] != "all"]
    summary = [r for r in rows if r["layer"] == "all"]
    heads = [(int(r["layer"]), int(r["head"])) for r in data]
    fr = np.array([[float(r[c]) for c in cols] for r in data])
    glob = np.array([float(summary[0][c]) for c in cols]) if summary else None
    return heads, fr, glob
