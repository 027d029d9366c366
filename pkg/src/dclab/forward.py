"""Simplified Transformer forward process with fixed attention maps.

Representations at positions are rows of ``(n, d)`` arrays. Latent
representations are ``(d, c)`` matrices with one column per token.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import AttentionMap, MixtureWeights
from .graph import ReweightedGraph

__all__ = [
    "ForwardError",
    "Sigma",
    "Identity",
    "Linear",
    "ScaledTanh",
    "Composed",
    "parse_sigma",
    "LayerSpec",
    "RepresentationTrace",
    "init_embeddings",
    "forward",
    "latent_recursion",
    "latent_trajectory",
    "great_mapping_bounds",
    "at_iterate_ratio",
    "write_trace",
    "read_trace",
]


class ForwardError(ArithmeticError):
    pass


class Sigma:
    """Neuron-wise map applied to each row of an ``(m, d)`` array."""

    lipschitz: float = 1.0

    def __call__(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def on_latent(self, Z: np.ndarray) -> np.ndarray:
        """Apply column-wise to a ``(d, c)`` latent matrix."""
        return self(np.asarray(Z).T).T


class Identity(Sigma):
    def __call__(self, X):
        return np.asarray(X, dtype=float)

    def __repr__(self):
        return "Identity()"


class Linear(Sigma):
    def __init__(self, matrix):
        W = np.asarray(matrix, dtype=float)
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise ValueError("linear sigma needs a square matrix")
        s = np.linalg.svd(W, compute_uv=False)
        if s[-1] == 0:
            raise ValueError("linear sigma must be non-singular")
        self.matrix = W
        self.singular_values = (float(s[-1]), float(s[0]))
        self.condition_number = float(s[0] / s[-1])
        self.lipschitz = float(s[0])

    def __call__(self, X):
        return np.asarray(X, dtype=float) @ self.matrix.T

    def __repr__(self):
        return f"Linear(d={self.matrix.shape[0]}, cond={self.condition_number:.3g})"


class ScaledTanh(Sigma):
    """``scale * tanh(u / scale)``: 1-Lipschitz, identity near the origin."""

    def __init__(self, scale: float = 1.0):
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.scale = float(scale)

    def __call__(self, X):
        return self.scale * np.tanh(np.asarray(X, dtype=float) / self.scale)

    def __repr__(self):
        return f"ScaledTanh({self.scale})"


class Composed(Sigma):
    """``parts[0]`` applied first."""

    def __init__(self, parts):
        self.parts = list(parts)
        self.lipschitz = float(np.prod([p.lipschitz for p in self.parts]))

    def __call__(self, X):
        for p in self.parts:
            X = p(X)
        return X

    def __repr__(self):
        return f"Composed({self.parts!r})"


def parse_sigma(spec) -> Sigma:
    """Build a sigma from ``"identity"``, ``{"linear": [[...]]}``,
    ``{"scaled_tanh": s}`` or a list of those (composition)."""
    if spec is None or spec == "identity":
        return Identity()
    if isinstance(spec, Sigma):
        return spec
    if isinstance(spec, str) and spec.startswith("scaled_tanh"):
        _, _, s = spec.partition(":")
        return ScaledTanh(float(s) if s else 1.0)
    if isinstance(spec, list):
        return Composed([parse_sigma(s) for s in spec])
    if isinstance(spec, dict) and len(spec) == 1:
        (key, val), = spec.items()
        if key == "linear":
            return Linear(val)
        if key == "scaled_tanh":
            return ScaledTanh(val)
    raise ValueError(f"unknown sigma spec {spec!r}")


@dataclass(frozen=True)
class LayerSpec:
    rho: MixtureWeights
    sigma: Sigma = field(default_factory=Identity)
    residual: bool = False

    @classmethod
    def make(cls, rho, sigma=None, residual=False) -> "LayerSpec":
        return cls(MixtureWeights.of(rho), parse_sigma(sigma), bool(residual))


@dataclass
class RepresentationTrace:
    """Per-layer representations. ``V[0]`` rows are the embeddings ``b_{x_k}``;
    ``V[l+1] = sigma_l(U[l] (+ V[l]))``. Layers dropped by thinning are ``None``."""

    V: list
    U: list
    embeddings: np.ndarray

    @property
    def L(self) -> int:
        return len(self.U)

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    @property
    def n(self) -> int:
        return next(v for v in self.V if v is not None).shape[0]


def init_embeddings(c: int, d: int, scheme: str = "gaussian", seed: int = 0, path=None) -> np.ndarray:
    """Embedding table ``(c, d)``; row ``x`` is ``b_x``.

    ``gaussian`` draws i.i.d. entries of variance ``1/d``; ``orthogonal``
    takes ``c`` rows of a random orthogonal ``d x d`` matrix (``d >= c``);
    ``from_file`` loads a ``.npy`` or whitespace-delimited text file.
    """
    if d < 2:
        raise ValueError("embedding dimension must be at least 2")
    rng = np.random.default_rng(seed)
    if scheme == "gaussian":
        return rng.standard_normal((c, d)) / np.sqrt(d)
    if scheme == "orthogonal":
        if d < c:
            raise ValueError(f"orthogonal embeddings need d >= c (d={d}, c={c})")
        Q, R = np.linalg.qr(rng.standard_normal((d, d)))
        Q = Q * np.sign(np.diag(R))
        return Q[:c].copy()
    if scheme == "from_file":
        p = Path(path)
        B = np.load(p) if p.suffix == ".npy" else np.loadtxt(p)
        if B.shape != (c, d):
            raise ValueError(f"embedding file has shape {B.shape}, expected {(c, d)}")
        return B
    raise ValueError(f"unknown embedding scheme {scheme!r}")


def forward(seq, layers, maps, embeddings, threads: int = 1, keep=None) -> RepresentationTrace:
    """Run the forward process for ``len(layers)`` attention layers.

    ``maps`` is one :class:`AttentionMap` per layer (or a single map reused).
    ``keep`` optionally lists layer indices whose ``V``/``U`` are retained;
    the final ``V`` is always kept.
    """
    layers = list(layers)
    if isinstance(maps, AttentionMap):
        maps = [maps] * len(layers)
    maps = list(maps)
    if len(maps) != len(layers):
        raise ForwardError(f"{len(layers)} layers but {len(maps)} attention maps")
    B = np.asarray(embeddings, dtype=float)
    if any(m.n != seq.n for m in maps):
        raise ForwardError("attention maps must match the sequence length")
    V = B[seq.tokens]
    Vs, Us = [V], []
    for ell, (spec, A) in enumerate(zip(layers, maps)):
        U = A.apply(V, threads=threads)
        pre = U + V if spec.residual else U
        with np.errstate(over="ignore", invalid="ignore"):
            V = spec.sigma(pre)
        if not np.all(np.isfinite(V)):
            raise ForwardError(f"non-finite representation after layer {ell + 1}")
        Us.append(U)
        Vs.append(V)
        if keep is not None and ell not in keep:
            Us[ell] = None
            Vs[ell] = None
    return RepresentationTrace(Vs, Us, B)


def latent_recursion(Z, rho, rg: ReweightedGraph, sigma=None, v1=None, residual: bool = False) -> np.ndarray:
    """One layer of the latent map on a ``(d, c)`` matrix::

        z'_x = rho_A z_x + rho_B sum_y (w_xy / d_x) z_y + rho_O sum_y pi_y z_y + rho_T v1

    With ``residual`` the input is added before ``sigma``. ``rho`` may be a
    plain 4-tuple that does not sum to one.
    """
    Z = np.asarray(Z, dtype=float)
    ra, rb, ro, rt = rho.as_tuple() if isinstance(rho, MixtureWeights) else map(float, rho)
    if Z.shape[1] != rg.c:
        raise ValueError(f"Z has {Z.shape[1]} columns, graph has {rg.c} vertices")
    out = ra * Z + rb * Z @ rg.transition.T + ro * (Z @ rg.pi)[:, None]
    if rt:
        if v1 is None:
            raise ValueError("rho_T > 0 needs the position-1 representation v1")
        out = out + rt * np.asarray(v1, dtype=float)[:, None]
    if residual:
        out = out + Z
    sigma = parse_sigma(sigma)
    return sigma.on_latent(out)


def latent_trajectory(B, layers, rg: ReweightedGraph, first_token: int = 0) -> list:
    """Latent matrices ``Z^(1..L+1)`` from embeddings ``B`` (``(c, d)``).

    The position-1 representation is tracked alongside: row 1 of every typed
    map attends to itself, so it evolves as ``v1 <- sigma(v1 (+ v1))``.
    """
    Z = np.asarray(B, dtype=float).T
    v1 = Z[:, first_token].copy()
    out = [Z]
    for spec in layers:
        Z = latent_recursion(Z, spec.rho, rg, spec.sigma, v1, spec.residual)
        pre = v1 + v1 if spec.residual else v1
        v1 = spec.sigma(pre[None])[0]
        out.append(Z)
    return out


def _subspace_norm(Z, rg, U):
    return np.linalg.norm(np.asarray(Z) @ (rg.sqrt_d[:, None] * U))


def at_iterate_ratio(sigma, Z, rg: ReweightedGraph, U) -> float:
    """``||sigma(Z) D^{1/2} U|| / ||Z D^{1/2} U||`` at one latent matrix."""
    sigma = parse_sigma(sigma)
    den = _subspace_norm(Z, rg, U)
    if den < 1e-12:
        raise ZeroDivisionError("latent matrix has no mass in the subspace")
    return float(_subspace_norm(sigma.on_latent(Z), rg, U) / den)


@dataclass(frozen=True)
class GreatMappingBounds:
    gamma1: float
    gamma2: float
    skipped: int


def great_mapping_bounds(sigma, rg: ReweightedGraph, U, d: int, samples: int = 1000, seed: int = 0, scale: float = 1.0) -> GreatMappingBounds:
    """Empirical ``(gamma_1, gamma_2)`` over random Gaussian latent matrices."""
    sigma = parse_sigma(sigma)
    U = np.asarray(U, dtype=float)
    if not np.allclose(U.T @ U, np.eye(U.shape[1]), atol=1e-10):
        raise ValueError("U must have orthonormal columns")
    rng = np.random.default_rng(seed)
    lo, hi, skipped = np.inf, -np.inf, 0
    for _ in range(samples):
        Z = scale * rng.standard_normal((d, rg.c))
        den = _subspace_norm(Z, rg, U)
        if den < 1e-12:
            skipped += 1
            continue
        r = _subspace_norm(sigma.on_latent(Z), rg, U) / den
        lo, hi = min(lo, r), max(hi, r)
    return GreatMappingBounds(float(lo), float(hi), skipped)


def write_trace(trace: RepresentationTrace, path_like) -> tuple[Path, Path]:
    """Raw little-endian float64 blocks plus a JSON sidecar with byte offsets."""
    p = Path(path_like)
    side = p.with_suffix(p.suffix + ".json")
    offsets = {"V": [], "U": []}
    pos = 0
    with p.open("wb") as fh:
        for name, mats in (("V", trace.V), ("U", trace.U)):
            for m in mats:
                if m is None:
                    offsets[name].append(None)
                    continue
                buf = np.ascontiguousarray(m, dtype="<f8").tobytes()
                offsets[name].append(pos)
                fh.write(buf)
                pos += len(buf)
        emb = np.ascontiguousarray(trace.embeddings, dtype="<f8").tobytes()
        emb_offset = pos
        fh.write(emb)
    meta = {"n": trace.n, "d": trace.d, "L": trace.L, "c": trace.embeddings.shape[0],
            "dtype": "<f8", "layer_offsets": offsets, "embedding_offset": emb_offset}
    side.write_text(json.dumps(meta, indent=1))
    return p, side


def read_trace(path_like) -> RepresentationTrace:
    p = Path(path_like)
    meta = json.loads(p.with_suffix(p.suffix + ".json").read_text())
    raw = p.read_bytes()
    n, d, c = meta["n"], meta["d"], meta["c"]

    def block(off, rows):
        if off is None:
            return None
        return np.frombuffer(raw, dtype="<f8", count=rows * d, offset=off).reshape(rows, d).copy()

    V = [block(o, n) for o in meta["layer_offsets"]["V"]]
    U = [block(o, n) for o in meta["layer_offsets"]["U"]]
    return RepresentationTrace(V, U, block(meta["embedding_offset"], c))
