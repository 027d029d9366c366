"""Vocabulary graphs, stationary laws, the reweighted operator and its eigenbasis.

Vertices are 0-indexed in memory. Edge-list files use 1-indexed vertices.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components

__all__ = [
    "GraphError",
    "Graph",
    "ReweightedGraph",
    "SpectralBasis",
    "build_graph",
    "grid",
    "ring",
    "complete",
    "path",
    "from_adjacency",
    "read_edge_list",
    "parse_graph_spec",
    "stationary_distribution",
    "reweight",
    "spectral_basis",
    "symmetric_eigh",
    "decay_factor",
    "write_spectra_csv",
]


class GraphError(ValueError):
    """Raised for malformed, disconnected or degenerate graphs."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Graph:
    """Undirected vocabulary graph given by a symmetric non-negative adjacency."""

    adjacency: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        W = np.asarray(self.adjacency, dtype=float)
        if W.ndim != 2 or W.shape[0] != W.shape[1] or W.shape[0] < 2:
            raise GraphError(f"adjacency must be square with c >= 2, got shape {W.shape}")
        if not np.all(np.isfinite(W)) or np.any(W < 0):
            raise GraphError("adjacency entries must be finite and non-negative")
        if not np.array_equal(W, W.T):
            raise GraphError("adjacency must be symmetric")
        ncomp, _ = connected_components(W > 0, directed=False)
        if ncomp != 1:
            raise GraphError(f"graph is disconnected ({ncomp} components)")
        object.__setattr__(self, "adjacency", _frozen(W))

    @property
    def c(self) -> int:
        return self.adjacency.shape[0]

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    @property
    def edges(self) -> list[tuple[int, int]]:
        """Undirected edges ``(u, v)`` with ``u <= v``, 0-indexed."""
        iu, iv = np.nonzero(np.triu(self.adjacency))
        return list(zip(iu.tolist(), iv.tolist()))

    def neighbors(self, x: int) -> np.ndarray:
        return np.flatnonzero(self.adjacency[x] > 0)

    def is_edge(self, x, y) -> np.ndarray:
        return self.adjacency[x, y] > 0


def from_adjacency(W, name: str = "custom") -> Graph:
    return Graph(np.asarray(W, dtype=float), name=name)


def grid(rows: int, cols: int) -> Graph:
    """4-neighbour grid without periodic boundary; vertex ``r*cols + col``."""
    if rows < 1 or cols < 1 or rows * cols < 2:
        raise GraphError("grid needs at least two vertices")
    c = rows * cols
    W = np.zeros((c, c))
    for r in range(rows):
        for q in range(cols):
            v = r * cols + q
            if q + 1 < cols:
                W[v, v + 1] = W[v + 1, v] = 1.0
            if r + 1 < rows:
                W[v, v + cols] = W[v + cols, v] = 1.0
    return Graph(W, name=f"grid:{rows}x{cols}")


def ring(c: int) -> Graph:
    if c < 3:
        raise GraphError("ring needs c >= 3")
    W = np.zeros((c, c))
    idx = np.arange(c)
    W[idx, (idx + 1) % c] = 1.0
    W[(idx + 1) % c, idx] = 1.0
    return Graph(W, name=f"ring:{c}")


def complete(c: int, self_loops: bool = False) -> Graph:
    W = np.ones((c, c))
    if not self_loops:
        np.fill_diagonal(W, 0.0)
    return Graph(W, name=f"complete:{c}" + ("+loops" if self_loops else ""))


def path(c: int) -> Graph:
    W = np.zeros((c, c))
    idx = np.arange(c - 1)
    W[idx, idx + 1] = W[idx + 1, idx] = 1.0
    return Graph(W, name=f"path:{c}")


def read_edge_list(path_like) -> Graph:
    """Read a ``u v [weight]`` edge list with 1-indexed vertices and ``#`` comments."""
    p = Path(path_like)
    edges = []
    for lineno, raw in enumerate(p.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise GraphError(f"{p}:{lineno}: expected 'u v [weight]', got {raw!r}")
        try:
            u, v = int(parts[0]), int(parts[1])
            w = float(parts[2]) if len(parts) == 3 else 1.0
        except ValueError as exc:
            raise GraphError(f"{p}:{lineno}: {exc}") from None
        if u < 1 or v < 1:
            raise GraphError(f"{p}:{lineno}: vertices are 1-indexed")
        if w < 0:
            raise GraphError(f"{p}:{lineno}: negative weight")
        edges.append((u - 1, v - 1, w))
    if not edges:
        raise GraphError(f"{p}: no edges")
    c = max(max(u, v) for u, v, _ in edges) + 1
    W = np.zeros((c, c))
    for u, v, w in edges:
        W[u, v] = W[v, u] = w
    return Graph(W, name=f"file:{p.name}")


def build_graph(kind: str, *args) -> Graph:
    """Build a graph by kind: ``grid(rows, cols)``, ``ring(c)``, ``complete(c)``,
    ``path(c)`` or ``file(path)``."""
    builders = {"grid": grid, "ring": ring, "complete": complete, "path": path, "file": read_edge_list}
    try:
        builder = builders[kind]
    except KeyError:
        raise GraphError(f"unknown graph kind {kind!r}") from None
    return builder(*args)


def parse_graph_spec(spec: str) -> Graph:
    """Parse textual specs like ``grid:4x4``, ``ring:8``, ``complete:5``, ``file:g.txt``."""
    kind, _, arg = spec.partition(":")
    if kind == "grid":
        r, _, q = arg.lower().partition("x")
        try:
            return grid(int(r), int(q))
        except ValueError:
            raise GraphError(f"bad grid spec {spec!r}") from None
    if kind in ("ring", "complete", "path"):
        try:
            return build_graph(kind, int(arg))
        except ValueError:
            raise GraphError(f"bad graph spec {spec!r}") from None
    if kind == "file":
        return read_edge_list(arg)
    raise GraphError(f"unknown graph spec {spec!r}")


def stationary_distribution(g: Graph, mode: str = "walk", tol: float = 1e-13, max_iter: int = 100_000) -> np.ndarray:
    """Stationary distribution of the vocabulary graph.

    ``walk`` gives the degree-proportional law of the simple random walk.
    ``perron`` gives the L1-normalised leading eigenvector of the adjacency,
    found by power iteration on ``(W + I)`` which shares the Perron vector
    and is aperiodic.
    """
    if mode == "walk":
        deg = g.degrees
        return deg / deg.sum()
    if mode != "perron":
        raise ValueError(f"unknown stationary mode {mode!r}")
    B = g.adjacency + np.eye(g.c)
    v = np.full(g.c, 1.0 / g.c)
    residual = np.inf
    for _ in range(max_iter):
        w = B @ v
        w /= w.sum()
        residual = np.abs(w - v).max()
        v = w
        if residual < tol:
            break
    else:
        raise GraphError(f"Perron iteration did not converge (residual {residual:.3e})")
    return v / v.sum()


@dataclass(frozen=True)
class ReweightedGraph:
    """Graph reweighted by a probability vector: ``w_xy = w~_xy pi_x pi_y``.

    ``M = D^{-1/2} W D^{-1/2}`` is the normalised operator whose top
    eigenvectors the representations converge to.
    """

    graph: Graph
    pi: np.ndarray
    W: np.ndarray = field(init=False)
    d: np.ndarray = field(init=False)
    M: np.ndarray = field(init=False)

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        if pi.shape != (self.graph.c,):
            raise GraphError(f"pi has shape {pi.shape}, expected ({self.graph.c},)")
        if np.any(pi <= 0) or abs(pi.sum() - 1.0) > 1e-10:
            raise GraphError("pi must be strictly positive and sum to 1")
        W = self.graph.adjacency * np.outer(pi, pi)
        d = W.sum(axis=1)
        if np.any(d <= 0):
            raise GraphError(f"isolated vertex after reweighting: {np.flatnonzero(d <= 0).tolist()}")
        s = 1.0 / np.sqrt(d)
        M = W * np.outer(s, s)
        M = 0.5 * (M + M.T)
        object.__setattr__(self, "pi", _frozen(pi))
        object.__setattr__(self, "W", _frozen(W))
        object.__setattr__(self, "d", _frozen(d))
        object.__setattr__(self, "M", _frozen(M))

    @property
    def c(self) -> int:
        return self.graph.c

    @property
    def D(self) -> np.ndarray:
        return np.diag(self.d)

    @property
    def sqrt_d(self) -> np.ndarray:
        return np.sqrt(self.d)

    @property
    def transition(self) -> np.ndarray:
        """Row-normalised reweighted adjacency ``D^{-1} W``."""
        return self.W / self.d[:, None]

    @property
    def laplacian(self) -> np.ndarray:
        """Symmetrically normalised Laplacian ``I - M``."""
        return np.eye(self.c) - self.M


def reweight(g: Graph, pi=None) -> ReweightedGraph:
    if pi is None:
        pi = stationary_distribution(g)
    return ReweightedGraph(g, np.asarray(pi, dtype=float))


@dataclass(frozen=True)
class SpectralBasis:
    """Orthonormal eigenbasis of ``M`` split as ``[f1 | X | Y]`` at index ``q``.

    ``eigenvalues`` are eigenvalues of ``M`` itself in the chosen order;
    ``vectors`` holds the eigenvectors as columns.
    """

    eigenvalues: np.ndarray
    vectors: np.ndarray
    q: int
    order: str

    @property
    def c(self) -> int:
        return self.vectors.shape[0]

    @property
    def f1(self) -> np.ndarray:
        return self.vectors[:, 0]

    @property
    def X(self) -> np.ndarray:
        return self.vectors[:, 1 : self.q]

    @property
    def Y(self) -> np.ndarray:
        return self.vectors[:, self.q :]

    def with_q(self, q: int) -> "SpectralBasis":
        _check_q(q, self.c)
        return SpectralBasis(self.eigenvalues, self.vectors, q, self.order)


def _check_q(q: int, c: int):
    if not 1 <= q < c:
        raise ValueError(f"split index q must satisfy 1 <= q < c={c}, got {q}")


def _sign_fix(U: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    U = U.copy()
    for i in range(U.shape[1]):
        nz = np.flatnonzero(np.abs(U[:, i]) > tol)
        if nz.size and U[nz[0], i] < 0:
            U[:, i] = -U[:, i]
    return U


def _sort_keys(lam: np.ndarray, order: str, weights):
    if weights is not None:
        mu = weights[0] + weights[1] * lam
        return np.lexsort((-lam, -np.abs(mu)))
    if order == "signed":
        return np.argsort(-lam, kind="stable")
    if order == "abs":
        return np.lexsort((-lam, -np.abs(lam)))
    raise ValueError(f"unknown eigenvalue order {order!r}")


def symmetric_eigh(A: np.ndarray, order: str = "signed", weights=None, check: bool = True):
    """Dense symmetric eigendecomposition with ordering and sign convention."""
    A = np.asarray(A, dtype=float)
    lam, U = np.linalg.eigh(A)
    idx = _sort_keys(lam, order, weights)
    lam, U = lam[idx], _sign_fix(U[:, idx])
    if check:
        scale = max(np.linalg.norm(A), 1.0)
        residual = np.abs(A @ U - U * lam).max()
        if residual > 1e-8 * scale:
            raise GraphError(f"eigensolver residual {residual:.3e} too large")
    return lam, U


def spectral_basis(rg: ReweightedGraph, q: int, order: str = "signed", weights=None) -> SpectralBasis:
    """Eigenbasis of ``M`` split at ``q``.

    Parameters
    ----------
    rg : ReweightedGraph
    q : int
        ``X`` holds eigenvectors ``2..q`` and ``Y`` the rest (1-based).
    order : {"signed", "abs"}
        ``signed`` sorts eigenvalues from largest to smallest, i.e. from the
        smoothest to the roughest eigenvector. ``abs`` sorts by non-increasing
        magnitude, which on bipartite graphs interleaves the ``-1`` eigenvalue
        with the top of the spectrum.
    weights : (rho_a, rho_b), optional
        Sort by ``|rho_a + rho_b * lambda|`` instead, the order in which the
        layer operator ``rho_a I + rho_b M`` preserves components.

    Ties are broken towards the larger signed eigenvalue. Within a
    degenerate cluster the returned vectors are an arbitrary orthonormal
    basis of the eigenspace; compare subspaces, not individual vectors.
    """
    _check_q(q, rg.c)
    lam, U = symmetric_eigh(rg.M, order=order, weights=weights)
    # the trivial eigenvector sqrt(d) belongs in front whatever the ordering
    top = int(np.argmax(np.abs(U.T @ (rg.sqrt_d / np.linalg.norm(rg.sqrt_d)))))
    if top != 0:
        perm = [top] + [i for i in range(rg.c) if i != top]
        lam, U = lam[perm], U[:, perm]
    return SpectralBasis(_frozen(lam), _frozen(U), q, order if weights is None else "weighted")


def decay_factor(basis: SpectralBasis, rho_a: float, rho_b: float, q: int | None = None) -> float:
    """Per-layer contraction ``|mu_{q+1}| / |mu_q|`` of ``rho_a I + rho_b M``,
    with ``mu`` sorted by non-increasing magnitude."""
    if rho_a < 0 or rho_b < 0:
        raise ValueError("mixture weights must be non-negative")
    q = basis.q if q is None else q
    _check_q(q, basis.c)
    mu = np.sort(np.abs(rho_a + rho_b * np.asarray(basis.eigenvalues)))[::-1]
    if mu[q - 1] == 0:
        raise ZeroDivisionError(f"mu_q = 0 at q={q}; decay factor undefined")
    return float(mu[q] / mu[q - 1])


def write_spectra_csv(basis: SpectralBasis, path_like) -> Path:
    """Write ``index,eigenvalue,component_1..component_c`` rows (1-based index)."""
    p = Path(path_like)
    c = basis.c
    with p.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "eigenvalue"] + [f"component_{i + 1}" for i in range(c)])
        for i in range(c):
            w.writerow([i + 1, repr(float(basis.eigenvalues[i]))] + [repr(float(v)) for v in basis.vectors[:, i]])
    return p
