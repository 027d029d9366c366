"""Structured attention maps: nice maps, maps reflecting a token function, and mixtures.

A map is stored in factored form so that no ``n x n`` array is ever built.
Row ``k`` (0-based) has weight on column ``j <= k``::

    a[k, j] = token_mass[k, x_j] / F(x_j, k+1)
            + first_mass[k] * [j == 0]
            + diag_mass[k]  * [j == k]
            + extra[k, j]

i.e. ``token_mass[k, y]`` is the total mass given to token ``y``, spread
uniformly over its occurrences up to position ``k``. ``extra`` is an
optional sparse lower-triangular correction for hand-built maps.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .dgp import TokenSequence, frequency_table
from .graph import Graph

__all__ = [
    "AttentionError",
    "AttentionMap",
    "MixtureWeights",
    "admissible_matrix",
    "construct_typed",
    "from_rows",
    "mix",
    "verify_attention",
    "niceness",
    "balance_deviation",
    "reflected_latent_image",
    "write_attention_jsonl",
    "read_attention_jsonl",
    "BLOCK",
]

# Row block used for prefix-sum application; fixed so results do not depend
# on the number of worker threads.
BLOCK = 1024


class AttentionError(ValueError):
    pass


@dataclass(frozen=True)
class MixtureWeights:
    rho_a: float
    rho_b: float
    rho_o: float
    rho_t: float

    def __post_init__(self):
        w = self.as_tuple()
        if any(v < 0 for v in w):
            raise AttentionError(f"mixture weights must be non-negative, got {w}")
        if abs(sum(w) - 1.0) > 1e-12:
            raise AttentionError(f"mixture weights must sum to 1, got sum {sum(w)!r}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.rho_a, self.rho_b, self.rho_o, self.rho_t)

    @classmethod
    def of(cls, rho) -> "MixtureWeights":
        if isinstance(rho, MixtureWeights):
            return rho
        return cls(*map(float, rho))


@dataclass(frozen=True)
class AttentionMap:
    tokens: np.ndarray
    c: int
    token_mass: np.ndarray
    first_mass: np.ndarray
    diag_mass: np.ndarray
    extra: sp.csr_matrix | None = None
    tag: str = "custom"
    admissible: np.ndarray | None = None
    rho: tuple | None = None
    _counts: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self._counts is None:
            F = np.zeros((self.n, self.c), dtype=np.int64)
            F[np.arange(self.n), self.tokens] = 1
            object.__setattr__(self, "_counts", np.cumsum(F, axis=0))

    @property
    def n(self) -> int:
        return self.tokens.size

    def _per_token_weight(self, k: int) -> np.ndarray:
        F = self._counts[k]
        return np.divide(self.token_mass[k], F, out=np.zeros(self.c), where=F > 0)

    def row(self, k: int) -> np.ndarray:
        """Dense weights of row ``k`` over columns ``0..k``."""
        w = self._per_token_weight(k)[self.tokens[: k + 1]]
        w[0] += self.first_mass[k]
        w[k] += self.diag_mass[k]
        if self.extra is not None:
            lo, hi = self.extra.indptr[k], self.extra.indptr[k + 1]
            np.add.at(w, self.extra.indices[lo:hi], self.extra.data[lo:hi])
        return w

    def sparse_row(self, k: int) -> list[tuple[int, float]]:
        w = self.row(k)
        nz = np.flatnonzero(w)
        return list(zip(nz.tolist(), w[nz].tolist()))

    def token_masses(self) -> np.ndarray:
        """``(n, c)`` per-row total mass on each token."""
        out = np.array(self.token_mass, dtype=float, copy=True)
        rows = np.arange(self.n)
        out[rows, self.tokens[0]] += self.first_mass
        np.add.at(out, (rows, self.tokens), self.diag_mass)
        if self.extra is not None:
            coo = self.extra.tocoo()
            np.add.at(out, (coo.row, self.tokens[coo.col]), coo.data)
        return out

    def row_sums(self) -> np.ndarray:
        s = self.token_mass.sum(axis=1) + self.first_mass + self.diag_mass
        if self.extra is not None:
            s = s + np.asarray(self.extra.sum(axis=1)).ravel()
        return s

    def entries(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All nonzero ``(rows, cols, weights)`` in row-major order."""
        rs, cs, ws = [], [], []
        for k in range(self.n):
            w = self.row(k)
            nz = np.flatnonzero(w)
            rs.append(np.full(nz.size, k))
            cs.append(nz)
            ws.append(w[nz])
        return np.concatenate(rs), np.concatenate(cs), np.concatenate(ws)

    def to_dense(self) -> np.ndarray:
        A = np.zeros((self.n, self.n))
        for k in range(self.n):
            A[k, : k + 1] = self.row(k)
        return A

    def apply(self, V: np.ndarray, threads: int = 1) -> np.ndarray:
        """``u_k = sum_j a_{k,j} v_j`` for all rows; ``V`` has shape ``(n, d)``.

        Work is split into fixed blocks of :data:`BLOCK` rows. Each block's
        arithmetic is independent of ``threads``, so the output is bitwise
        identical for any thread count.
        """
        V = np.asarray(V, dtype=float)
        if V.shape[0] != self.n:
            raise AttentionError(f"V has {V.shape[0]} rows, map has {self.n}")
        n, c, d = self.n, self.c, V.shape[1]
        starts = list(range(0, n, BLOCK))
        onehot = np.zeros((n, c))
        onehot[np.arange(n), self.tokens] = 1.0

        def block_sum(s):
            e = min(s + BLOCK, n)
            return onehot[s:e].T @ V[s:e]

        def block_out(args):
            s, offset = args
            e = min(s + BLOCK, n)
            oh = onehot[s:e]
            S = offset[None] + np.cumsum(oh[:, :, None] * V[s:e, None, :], axis=0)
            w = np.divide(self.token_mass[s:e], self._counts[s:e], out=np.zeros((e - s, c)), where=self._counts[s:e] > 0)
            U = np.einsum("ky,kyd->kd", w, S)
            U += self.first_mass[s:e, None] * V[0]
            U += self.diag_mass[s:e, None] * V[s:e]
            return U

        with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
            sums = list(ex.map(block_sum, starts))
            offsets = [np.zeros((c, d))]
            for bs in sums[:-1]:
                offsets.append(offsets[-1] + bs)
            parts = list(ex.map(block_out, zip(starts, offsets)))
        U = np.concatenate(parts, axis=0)
        if self.extra is not None:
            U += self.extra @ V
        return U


def admissible_matrix(kind, g: Graph | None = None, c: int | None = None) -> np.ndarray:
    """Boolean ``(c, c)`` matrix with ``[x, y]`` true iff ``y in f(x)``.

    ``kind`` is ``"A"`` (self), ``"B"`` (graph neighbours), ``"O"`` (all
    tokens), a length-``c`` integer array (singleton map ``x -> f[x]``) or
    an explicit boolean matrix.
    """
    c = g.c if c is None else c
    if isinstance(kind, str):
        if kind == "A":
            return np.eye(c, dtype=bool)
        if kind == "B":
            if g is None:
                raise AttentionError("B-type needs a graph")
            return g.adjacency > 0
        if kind == "O":
            return np.ones((c, c), dtype=bool)
        raise AttentionError(f"unknown attention type {kind!r}")
    arr = np.asarray(kind)
    if arr.ndim == 1:
        if arr.shape != (c,) or arr.min() < 0 or arr.max() >= c:
            raise AttentionError("singleton map must send [c] into [c]")
        m = np.zeros((c, c), dtype=bool)
        m[np.arange(c), arr] = True
        return m
    if arr.shape != (c, c):
        raise AttentionError(f"admissible matrix must be ({c}, {c})")
    return arr.astype(bool)


def construct_typed(seq: TokenSequence, g: Graph | None, kind) -> AttentionMap:
    """Build the canonical typed map for ``kind`` in ``{"A","B","O","T"}`` or a
    singleton/set-valued token function.

    Rows ``k > c`` give each admissible token ``y`` the mass
    ``F_{y,k} / sum_{y' in f(x_k)} F_{y',k}``, spread uniformly over its
    occurrences, so the balance deviation is exactly zero. Rows ``k <= c``
    attend to themselves. ``"T"`` sends every row to position 1.
    """
    n, c = seq.n, seq.c
    zeros_n = np.zeros(n)
    if isinstance(kind, str) and kind == "T":
        return AttentionMap(seq.tokens, c, np.zeros((n, c)), np.ones(n), zeros_n.copy(), tag="T")
    adm = admissible_matrix(kind, g, c)
    F = frequency_table(seq).cumulative()
    mask = adm[seq.tokens]
    num = np.where(mask, F, 0).astype(float)
    R = num.sum(axis=1)
    late = np.arange(n) >= c
    empty = np.flatnonzero(late & (R == 0))
    if empty.size:
        raise AttentionError(f"row {int(empty[0]) + 1} has no admissible earlier token (x={int(seq.tokens[empty[0]]) + 1})")
    token_mass = np.zeros((n, c))
    token_mass[late] = num[late] / R[late, None]
    diag = np.where(late, 0.0, 1.0)
    tag = kind if isinstance(kind, str) else "custom"
    return AttentionMap(seq.tokens, c, token_mass, zeros_n, diag, tag=tag, admissible=adm, _counts=F)


def from_rows(seq: TokenSequence, rows, tag: str = "custom") -> AttentionMap:
    """Explicit map from per-row ``[(col, weight), ...]`` lists (0-based)."""
    n = seq.n
    r, cidx, w = [], [], []
    for k, row in enumerate(rows):
        for j, a in row:
            if j > k:
                raise AttentionError(f"row {k + 1} has weight above the diagonal (col {j + 1})")
            r.append(k)
            cidx.append(j)
            w.append(a)
    extra = sp.csr_matrix((np.asarray(w, dtype=float), (r, cidx)), shape=(n, n))
    extra.sum_duplicates()
    return AttentionMap(seq.tokens, seq.c, np.zeros((n, seq.c)), np.zeros(n), np.zeros(n), extra=extra, tag=tag)


def mix(maps, rho) -> AttentionMap:
    """Convex combination ``rho_A A + rho_B B + rho_O O + rho_T T``."""
    rho = MixtureWeights.of(rho)
    maps = list(maps)
    if len(maps) != 4:
        raise AttentionError("mix needs four maps tagged A, B, O, T")
    tags = [m.tag for m in maps]
    if tags != ["A", "B", "O", "T"]:
        raise AttentionError(f"maps must be tagged A, B, O, T in order, got {tags}")
    n = maps[0].n
    if any(m.n != n for m in maps) or any(not np.array_equal(m.tokens, maps[0].tokens) for m in maps):
        raise AttentionError("maps must share the same sequence")
    w = rho.as_tuple()
    tm = sum(r * m.token_mass for r, m in zip(w, maps))
    fm = sum(r * m.first_mass for r, m in zip(w, maps))
    dm = sum(r * m.diag_mass for r, m in zip(w, maps))
    extras = [r * m.extra for r, m in zip(w, maps) if m.extra is not None]
    extra = sum(extras[1:], extras[0]).tocsr() if extras else None
    return AttentionMap(maps[0].tokens, maps[0].c, tm, fm, dm, extra=extra, tag="mixture", rho=w, _counts=maps[0]._counts)


@dataclass(frozen=True)
class Verification:
    valid: bool
    worst_row_sum_error: float
    lower_triangular: bool
    non_negative: bool


def verify_attention(A: AttentionMap, tol: float = 1e-12) -> Verification:
    """Check lower-triangularity, non-negativity and unit row sums; never raises."""
    try:
        # mass on a token with no occurrence yet has no column to land on
        tm = np.where(A._counts > 0, A.token_mass, 0.0)
        sums = tm.sum(axis=1) + A.first_mass + A.diag_mass
        nonneg = bool((A.token_mass >= 0).all() and (A.first_mass >= 0).all() and (A.diag_mass >= 0).all())
        lower = True
        if A.extra is not None:
            coo = A.extra.tocoo()
            lower = bool(np.all(coo.col <= coo.row))
            nonneg = nonneg and bool(np.all(coo.data >= 0))
            sums = sums + np.asarray(A.extra.sum(axis=1)).ravel()
        err = float(np.abs(sums - 1.0).max())
        return Verification(lower and nonneg and err <= tol, err, lower, nonneg)
    except Exception:  # noqa: BLE001 - verification reports, it does not raise
        return Verification(False, math.inf, False, False)


def niceness(A: AttentionMap, start: int = 1) -> float:
    """Smallest ``psi`` with ``sum_{i<=j} a_{k,i} <= psi j / k`` for all ``j``
    and all 1-based rows ``k >= start``."""
    best = 0.0
    for k in range(max(start, 1) - 1, A.n):
        S = np.cumsum(A.row(k))
        j = np.arange(1, k + 2)
        best = max(best, float(((k + 1) * S / j).max()))
    return best


def balance_deviation(A: AttentionMap, seq: TokenSequence, f=None, g: Graph | None = None) -> float:
    """Worst ``sqrt(k) |mass(k, y) - F_{y,k} / sum_{y' in f(x_k)} F_{y',k}|``
    over ``k > c`` and ``y in f(x_k)``; ``f`` defaults to the map's own."""
    adm = A.admissible if f is None else admissible_matrix(f, g, seq.c)
    if adm is None:
        raise AttentionError("no token function given and none attached to the map")
    c = seq.c
    F = frequency_table(seq).cumulative()[c:].astype(float)
    mask = adm[seq.tokens[c:]]
    R = np.where(mask, F, 0.0).sum(axis=1, keepdims=True)
    target = np.divide(F, R, out=np.zeros_like(F), where=R > 0)
    mass = A.token_masses()[c:]
    k = np.arange(c + 1, seq.n + 1, dtype=float)[:, None]
    dev = np.where(mask, np.abs(mass - target) * np.sqrt(k), 0.0)
    return float(dev.max(initial=0.0))


def reflected_latent_image(f, Z: np.ndarray, pi, g: Graph | None = None) -> np.ndarray:
    """Latent image ``z'_x = sum_{y in f(x)} pi_y z_y / sum_{y in f(x)} pi_y``.

    ``Z`` is ``(d, c)`` with one column per token. Tokens with empty
    ``f(x)`` map to the zero vector.
    """
    Z = np.asarray(Z, dtype=float)
    pi = np.asarray(pi, dtype=float)
    c = Z.shape[1]
    if pi.shape != (c,):
        raise AttentionError(f"pi has shape {pi.shape}, Z has {c} columns")
    adm = admissible_matrix(f, g, c)
    P = adm * pi[None, :]
    tot = P.sum(axis=1, keepdims=True)
    P = np.divide(P, tot, out=np.zeros_like(P), where=tot > 0)
    return Z @ P.T


def write_attention_jsonl(A: AttentionMap, path_like) -> Path:
    """Header ``{n, type, rho}`` then one ``{row, col, weight}`` per nonzero (1-based)."""
    p = Path(path_like)
    rows, cols, ws = A.entries()
    with p.open("w") as fh:
        fh.write(json.dumps({"n": A.n, "type": A.tag, "rho": list(A.rho) if A.rho else None}) + "\n")
        for r, cidx, w in zip((rows + 1).tolist(), (cols + 1).tolist(), ws.tolist()):
            fh.write(f'{{"row": {r}, "col": {cidx}, "weight": {w!r}}}\n')
    return p


def read_attention_jsonl(path_like, seq: TokenSequence) -> AttentionMap:
    p = Path(path_like)
    with p.open() as fh:
        header = json.loads(fh.readline())
        if header.get("n") != seq.n:
            raise AttentionError(f"{p}: header n={header.get('n')} does not match sequence n={seq.n}")
        rows = [[] for _ in range(seq.n)]
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rows[rec["row"] - 1].append((rec["col"] - 1, float(rec["weight"])))
            except (ValueError, KeyError, IndexError) as exc:
                raise AttentionError(f"{p}:{lineno}: bad record ({exc})") from None
    A = from_rows(seq, rows, tag=header.get("type") or "custom")
    if header.get("rho"):
        object.__setattr__(A, "rho", tuple(header["rho"]))
    return A
