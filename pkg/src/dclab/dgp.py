"""Token sequences from a traversal-then-random-walk process, with uniform-jump noise.

Tokens and positions are 0-indexed in memory; position ``i`` is context
index ``k = i + 1``. Sequence files store 1-indexed tokens.
"""

from __future__ import annotations

import bisect
import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import Graph, ReweightedGraph

__all__ = [
    "TokenSequence",
    "FrequencyTable",
    "generate",
    "frequency_table",
    "concentration_report",
    "ConcentrationReport",
    "second_half_check",
    "non_neighbor_count",
    "non_edge_jump_probability",
    "transition_frequencies",
    "write_sequence_json",
    "read_sequence_json",
    "write_counts_csv",
]


@dataclass(frozen=True)
class TokenSequence:
    tokens: np.ndarray
    c: int
    noise_flags: np.ndarray | None = None
    epsilon: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        t = np.asarray(self.tokens, dtype=np.int64)
        if t.ndim != 1 or t.size == 0:
            raise ValueError("tokens must be a non-empty 1-d array")
        if t.min() < 0 or t.max() >= self.c:
            raise ValueError(f"tokens must lie in [0, {self.c})")
        flags = np.zeros(t.size, dtype=bool) if self.noise_flags is None else np.asarray(self.noise_flags, dtype=bool)
        if flags.shape != t.shape:
            raise ValueError("noise_flags must match tokens")
        t.setflags(write=False)
        flags.setflags(write=False)
        object.__setattr__(self, "tokens", t)
        object.__setattr__(self, "noise_flags", flags)

    @property
    def n(self) -> int:
        return self.tokens.size

    def __len__(self):
        return self.n

    @property
    def has_traversal_prefix(self) -> bool:
        return self.n >= self.c and np.array_equal(self.tokens[: self.c], np.arange(self.c))


def generate(rg: ReweightedGraph | Graph, n: int, epsilon: float = 0.0, seed: int = 0, pi=None) -> TokenSequence:
    """Sample a sequence: identity traversal of ``[c]``, then a random walk.

    ``x_{c+1}`` is drawn from ``pi`` (the reweighted graph's law by default).
    Each later step jumps to a uniform token of ``[c]`` with probability
    ``epsilon`` (flagged), otherwise moves to a neighbour with probability
    proportional to the edge weight.
    """
    g = rg.graph if isinstance(rg, ReweightedGraph) else rg
    if pi is None:
        pi = rg.pi if isinstance(rg, ReweightedGraph) else g.degrees / g.degrees.sum()
    c = g.c
    if n <= 10 * c:
        raise ValueError(f"need n > 10c = {10 * c}, got n={n}")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    m = n - c
    u_step = rng.random(m)
    u_noise = rng.random(m)
    jumps = rng.integers(0, c, size=m)

    P = g.adjacency / g.adjacency.sum(axis=1, keepdims=True)
    cum = [np.cumsum(row).tolist() for row in P]
    for row in cum:
        row[-1] = 1.0
    cum_pi = np.cumsum(pi).tolist()
    cum_pi[-1] = 1.0

    tokens = np.empty(n, dtype=np.int64)
    tokens[:c] = np.arange(c)
    flags = np.zeros(n, dtype=bool)
    x = bisect.bisect_right(cum_pi, u_step[0])
    tokens[c] = x
    un = u_noise.tolist()
    us = u_step.tolist()
    jl = jumps.tolist()
    out = [x]
    fl = [False]
    for i in range(1, m):
        if un[i] < epsilon:
            x = jl[i]
            fl.append(True)
        else:
            x = bisect.bisect_right(cum[x], us[i])
            fl.append(False)
        out.append(x)
    tokens[c:] = out
    flags[c:] = fl
    return TokenSequence(tokens, c, flags, float(epsilon), seed)


@dataclass(frozen=True)
class FrequencyTable:
    """Occurrence lists per token; ``count(x, k)`` is ``F_{x,k}`` (1-based ``k``)."""

    seq: TokenSequence
    occurrences: tuple = field(init=False)
    last_occurrence: np.ndarray = field(init=False)

    def __post_init__(self):
        t = self.seq.tokens
        order = np.argsort(t, kind="stable")
        bounds = np.searchsorted(t[order], np.arange(self.seq.c + 1))
        occ = tuple(order[bounds[x] : bounds[x + 1]] for x in range(self.seq.c))
        last = np.array([o[-1] if o.size else -1 for o in occ])
        object.__setattr__(self, "occurrences", occ)
        object.__setattr__(self, "last_occurrence", last)

    def count(self, x: int, k: int) -> int:
        """Occurrences of token ``x`` among the first ``k`` positions."""
        return int(np.searchsorted(self.occurrences[x], k, side="left"))

    def cumulative(self) -> np.ndarray:
        """Dense ``(n, c)`` table whose row ``i`` is ``F_{., i+1}``."""
        onehot = np.zeros((self.seq.n, self.seq.c), dtype=np.int64)
        onehot[np.arange(self.seq.n), self.seq.tokens] = 1
        return np.cumsum(onehot, axis=0)


def frequency_table(seq: TokenSequence) -> FrequencyTable:
    return FrequencyTable(seq)


@dataclass(frozen=True)
class ConcentrationReport:
    max_scaled_deviation: float
    per_set_worst: float
    argmax_position: int
    argmax_token: int


def concentration_report(seq: TokenSequence, pi, n_subsets: int = 64, seed: int = 0) -> ConcentrationReport:
    """Worst ``sqrt(k) |F_{y,k}/k - pi_y| / log n`` over ``k in [c+1, n]``.

    The set form replaces ``{y}`` by random subsets ``S`` of the vocabulary.
    """
    pi = np.asarray(pi, dtype=float)
    n, c = seq.n, seq.c
    F = frequency_table(seq).cumulative()[c:].astype(float)
    k = np.arange(c + 1, n + 1, dtype=float)[:, None]
    scale = np.sqrt(k) / math.log(n)
    dev = np.abs(F / k - pi) * scale
    i, y = np.unravel_index(np.argmax(dev), dev.shape)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_subsets):
        mask = rng.random(c) < 0.5
        if not mask.any():
            continue
        s = np.abs(F[:, mask].sum(axis=1, keepdims=True) / k - pi[mask].sum()) * scale
        worst = max(worst, float(s.max()))
    return ConcentrationReport(float(dev[i, y]), worst, int(i + c + 1), int(y))


def second_half_check(seq: TokenSequence) -> np.ndarray:
    """Per token: does it occur at some 1-based position beyond ``ceil(n/2)``."""
    half = math.ceil(seq.n / 2)
    out = np.zeros(seq.c, dtype=bool)
    out[np.unique(seq.tokens[half:])] = True
    return out


def non_neighbor_count(seq: TokenSequence, g: Graph, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Sliding count of non-edge transitions.

    Returns ``(positions, counts)`` with 1-based positions ``k >= window``;
    each count covers transitions ``(x_j, x_{j+1})`` for ``j`` in
    ``[k - window + 1, k - 1]``. Transitions inside the traversal prefix
    (``j <= c``) are ignored.
    """
    if not 1 < window <= seq.n:
        raise ValueError(f"window must lie in (1, n], got {window}")
    t = seq.tokens
    bad = ~g.is_edge(t[:-1], t[1:])
    bad[: seq.c] = False  # transition j (1-based) sits at index j-1
    cs = np.concatenate([[0], np.cumsum(bad)])
    k = np.arange(window, seq.n + 1)
    counts = cs[k - 1] - cs[k - window]
    return k, counts


def non_edge_jump_probability(seq: TokenSequence, g: Graph) -> float:
    """Fraction of flagged jumps whose transition is not a graph edge."""
    t = seq.tokens
    flagged = np.flatnonzero(seq.noise_flags[1:]) + 1
    flagged = flagged[flagged > seq.c]
    if flagged.size == 0:
        return 0.0
    return float(np.mean(~g.is_edge(t[flagged - 1], t[flagged])))


def transition_frequencies(seq: TokenSequence, start: int | None = None) -> np.ndarray:
    """Row-normalised empirical transition matrix after the traversal prefix."""
    start = seq.c if start is None else start
    t = seq.tokens[start:]
    T = np.zeros((seq.c, seq.c))
    np.add.at(T, (t[:-1], t[1:]), 1.0)
    rows = T.sum(axis=1, keepdims=True)
    return np.divide(T, rows, out=np.zeros_like(T), where=rows > 0)


def write_sequence_json(seq: TokenSequence, path_like) -> Path:
    p = Path(path_like)
    payload = {
        "c": seq.c,
        "n": seq.n,
        "epsilon": seq.epsilon,
        "seed": seq.seed,
        "tokens": (seq.tokens + 1).tolist(),
        "noise_flags": seq.noise_flags.tolist(),
    }
    p.write_text(json.dumps(payload))
    return p


def read_sequence_json(path_like) -> TokenSequence:
    d = json.loads(Path(path_like).read_text())
    tokens = np.asarray(d["tokens"], dtype=np.int64) - 1
    if tokens.size != d["n"]:
        raise ValueError("token count does not match n")
    return TokenSequence(tokens, int(d["c"]), d.get("noise_flags"), float(d.get("epsilon", 0.0)), d.get("seed"))


def write_counts_csv(positions, counts, path_like) -> Path:
    p = Path(path_like)
    with p.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["position", "count"])
        w.writerows(zip(np.asarray(positions).tolist(), np.asarray(counts).tolist()))
    return p
