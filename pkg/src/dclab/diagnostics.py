"""Measurements of double convergence.

Context-wise: how fast position representations approach per-token limits.
Layer-wise: how the latent matrices lose mass outside the leading
eigenvectors of ``M``. Latent matrices are ``(d, c)`` with one column per
token; spectral quantities are taken in the ``D^{1/2}``-weighted frame
``Z D^{1/2}`` where ``M`` is the natural operator.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import orthogonal_procrustes, subspace_angles

from .dgp import TokenSequence, frequency_table
from .graph import Graph, ReweightedGraph, SpectralBasis, reweight, spectral_basis, symmetric_eigh

__all__ = [
    "DiagnosticsError",
    "LatentSnapshot",
    "snapshot",
    "GoodnessReport",
    "goodness",
    "subspace_ratio",
    "projection_evolution_check",
    "EnergyReport",
    "energy",
    "PCAAlignment",
    "pca_align",
    "peripheral_compression",
    "NoiseCurve",
    "noise_robustness",
    "ConvergenceReport",
    "convergence_report",
    "write_energy_csv",
    "write_alignment_csv",
    "write_report_json",
]


class DiagnosticsError(ValueError):
    pass


@dataclass(frozen=True)
class LatentSnapshot:
    """Latent matrix ``Z`` (``d x c``) read off a trace or a recursion.

    ``rule`` records where the columns came from: ``"last"`` takes each
    token's representation at its final occurrence, ``"latent"`` marks an
    exact latent iterate.
    """

    Z: np.ndarray
    layer: int
    rule: str = "last"

    def __post_init__(self):
        Z = np.array(self.Z, dtype=float)
        if Z.ndim != 2:
            raise DiagnosticsError("snapshot matrix must be 2-d")
        if not np.all(np.isfinite(Z)):
            raise DiagnosticsError(f"non-finite entries in layer-{self.layer} snapshot")
        Z.setflags(write=False)
        object.__setattr__(self, "Z", Z)

    @property
    def c(self) -> int:
        return self.Z.shape[1]

    @property
    def N(self) -> float:
        """Largest column norm."""
        return float(np.linalg.norm(self.Z, axis=0).max())


def _as_Z(snap) -> np.ndarray:
    return snap.Z if isinstance(snap, LatentSnapshot) else np.asarray(snap, dtype=float)


def snapshot(trace, seq: TokenSequence, layer: int = -1) -> LatentSnapshot:
    """Columns of ``trace.V[layer]`` at each token's last occurrence."""
    L = len(trace.V) - 1
    ell = L if layer == -1 else layer
    V = trace.V[ell]
    if V is None:
        raise DiagnosticsError(f"layer {ell} was not kept in the trace")
    last = frequency_table(seq).last_occurrence
    if np.any(last < 0):
        missing = np.flatnonzero(last < 0).tolist()
        raise DiagnosticsError(f"tokens never observed: {missing}")
    return LatentSnapshot(V[last].T, ell, "last")


# ---------------------------------------------------------------- goodness


@dataclass(frozen=True)
class GoodnessReport:
    gamma: float
    argmax_position: int
    decade_means: tuple

    def decade_ratio(self, late: int = 0, early: int = 2) -> float:
        """Ratio of mean errors, decade ``late`` over decade ``early``."""
        return self.decade_means[late] / self.decade_means[early]


def goodness(V, Z, seq: TokenSequence, n_decades: int = 6) -> GoodnessReport:
    """Estimate ``gamma`` with ``||v_k - z_{x_k}|| <= gamma / sqrt(k)``.

    Decade ``j`` averages the error over 1-based positions
    ``k in [n / 2^(j+1), n / 2^j]``; ``j = 0`` is the latest.
    """
    V = np.asarray(V, dtype=float)
    Z = _as_Z(Z)
    if V.shape != (seq.n, Z.shape[0]) or Z.shape[1] != seq.c:
        raise DiagnosticsError(f"shape mismatch: V {V.shape}, Z {Z.shape}, n={seq.n}, c={seq.c}")
    err = np.linalg.norm(V - Z.T[seq.tokens], axis=1)
    k = np.arange(1, seq.n + 1)
    scaled = np.sqrt(k) * err
    i = int(np.argmax(scaled))
    means = []
    for j in range(n_decades):
        lo, hi = seq.n / 2 ** (j + 1), seq.n / 2**j
        sel = (k >= lo) & (k <= hi)
        means.append(float(err[sel].mean()) if sel.any() else float("nan"))
    return GoodnessReport(float(scaled[i]), i + 1, tuple(means))


# ------------------------------------------------------- layer-wise ratios


def _weighted(Z: np.ndarray, rg: ReweightedGraph) -> np.ndarray:
    return Z * rg.sqrt_d[None, :]


def subspace_ratio(snap, rg: ReweightedGraph, basis: SpectralBasis, q: int | None = None) -> float:
    """``||Z D^{1/2} Y||_F / ||Z D^{1/2} X||_F``."""
    b = basis if q is None else basis.with_q(q)
    Zw = _weighted(_as_Z(snap), rg)
    den = np.linalg.norm(Zw @ b.X)
    if den < 1e-12:
        raise DiagnosticsError("no mass left in the leading subspace; ratio undefined")
    return float(np.linalg.norm(Zw @ b.Y) / den)


def projection_evolution_check(z, rho, rg: ReweightedGraph, U, t: float | None = None) -> float:
    """Deviation of one latent update from its linear image off the top eigenvector.

    ``z`` is one coordinate of the latent (a length-``c`` vector); the update is
    ``z' = rho_A z + rho_B P z + rho_O (pi . z) 1 + rho_T t 1`` with
    ``P = D^{-1} W`` and ``t`` the position-1 value (defaults to ``z[0]``).
    Returns ``||U^T D^{1/2} z' - U^T (rho_A I + rho_B M) D^{1/2} z||``.
    """
    z = np.asarray(z, dtype=float)
    U = np.asarray(U, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    s = rg.sqrt_d
    leak = np.abs(U.T @ s).max() / np.linalg.norm(s)
    if leak > 1e-10:
        raise DiagnosticsError(f"U is not orthogonal to D^(1/2) 1 (overlap {leak:.2e})")
    ra, rb, ro, rt = (float(r) for r in (rho.as_tuple() if hasattr(rho, "as_tuple") else rho))
    t = z[0] if t is None else float(t)
    z_new = ra * z + rb * rg.transition @ z + ro * (rg.pi @ z) + rt * t
    lhs = U.T @ (s * z_new)
    rhs = U.T @ ((ra * np.eye(rg.c) + rb * rg.M) @ (s * z))
    return float(np.linalg.norm(lhs - rhs))


# ------------------------------------------------------------------ energy


@dataclass(frozen=True)
class EnergyReport:
    total: float
    components: np.ndarray
    normalized_total: float | None = None
    normalized_components: np.ndarray | None = None

    def share(self, idx, normalized: bool = True) -> float:
        """Fraction of the total carried by components ``idx`` (0-based)."""
        comps = self.normalized_components if normalized and self.normalized_components is not None else self.components
        tot = float(np.sum(comps))
        return float(np.sum(comps[list(idx)]) / tot) if tot > 0 else 0.0


def energy(snap, rg: ReweightedGraph, basis: SpectralBasis | None = None, mode: str = "spectral") -> EnergyReport:
    """Dirichlet energy ``sum_{x,y} w_xy ||z_x - z_y||^2``.

    ``brute`` evaluates the double sum directly. ``spectral`` splits it as
    ``e_i = 2 (1 - lambda_i) ||Z D^{1/2} u_i||^2`` in the eigenbasis of ``M``
    and also reports the same split for ``Z / ||Z||_F``.
    """
    Z = _as_Z(snap)
    if Z.shape[1] != rg.c:
        raise DiagnosticsError(f"Z has {Z.shape[1]} columns, graph has {rg.c} vertices")
    if mode == "brute":
        xs, ys = np.nonzero(rg.W)
        diffs = Z[:, xs] - Z[:, ys]
        total = float(np.sum(rg.W[xs, ys] * np.einsum("ij,ij->j", diffs, diffs)))
        return EnergyReport(total, np.array([total]))
    if mode != "spectral":
        raise ValueError(f"unknown energy mode {mode!r}")
    basis = spectral_basis(rg, 2) if basis is None else basis
    proj = _weighted(Z, rg) @ basis.vectors
    comps = 2.0 * (1.0 - basis.eigenvalues) * np.sum(proj**2, axis=0)
    comps = np.maximum(comps, 0.0)
    fro = np.linalg.norm(Z)
    ncomps = comps / fro**2 if fro > 0 else np.zeros_like(comps)
    return EnergyReport(float(comps.sum()), comps, float(ncomps.sum()), ncomps)


# ------------------------------------------------------------- alignment


@dataclass(frozen=True)
class PCAAlignment:
    """Principal angles (degrees, ascending) between the top principal
    directions of a snapshot and ``span(u_2..u_q)``.

    ``pcs`` and ``eig`` hold token coordinates (``c x (q-1)``); ``eig_aligned``
    is ``eig`` rotated onto ``pcs`` by the best orthogonal map.
    ``removed`` is the token-space direction taken out by centering.
    """

    angles: np.ndarray
    pcs: np.ndarray
    eig: np.ndarray
    eig_aligned: np.ndarray
    singular_values: np.ndarray
    rank: int
    centering: str
    removed_angle_to_ones: float
    removed_angle_to_top: float

    @property
    def max_angle(self) -> float:
        return float(np.max(self.angles)) if self.angles.size else float("nan")


def _angle(a, b) -> float:
    cos = abs(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
    return math.degrees(math.acos(min(1.0, cos)))


def _center(Z: np.ndarray, rg: ReweightedGraph, centering: str):
    c = Z.shape[1]
    if centering == "mean":
        return Z - Z.mean(axis=1, keepdims=True), np.ones(c)
    if centering == "degree":
        # D-weighted centering, then the D^{1/2} frame: this removes exactly
        # the component along the top eigenvector sqrt(d) of M
        d = rg.d
        C = Z - (Z @ d / d.sum())[:, None]
        return C * rg.sqrt_d[None, :], rg.sqrt_d.copy()
    raise ValueError(f"unknown centering {centering!r}")


def pca_align(snap, basis: SpectralBasis, rg: ReweightedGraph, q: int | None = None,
              centering: str = "degree", tol: float = 1e-10) -> PCAAlignment:
    """Compare the leading principal directions of ``Z`` with ``u_2..u_q``.

    Parameters
    ----------
    snap : LatentSnapshot or array (d, c)
    basis : SpectralBasis of ``M``
    rg : ReweightedGraph the basis came from
    q : int, optional
        Compare ``q - 1`` directions; defaults to ``basis.q``.
    centering : {"degree", "mean"}
        ``degree`` subtracts the degree-weighted mean column and works in the
        ``Z D^{1/2}`` frame, where the layer recursion acts through ``M``.
        ``mean`` subtracts the plain mean column and compares raw token
        coordinates; on non-regular graphs this leaves a systematic tilt of
        the principal directions towards ``D^{-1/2} u_i``.
    """
    q = basis.q if q is None else q
    k = q - 1
    if k < 1:
        raise DiagnosticsError("need q >= 2 for at least one principal direction")
    Z = _as_Z(snap)
    C, removed = _center(Z, rg, centering)
    _, s, Vt = np.linalg.svd(C, full_matrices=False)
    scale = s[0] if s.size and s[0] > 0 else 1.0
    rank = int(np.sum(s > tol * scale)) if s.size and s[0] > 0 else 0
    k_eff = min(k, rank)
    pcs = Vt[:k_eff].T
    eig = basis.vectors[:, 1:q]
    angles = np.sort(np.degrees(subspace_angles(pcs, eig))) if k_eff else np.array([])
    aligned = eig @ orthogonal_procrustes(eig, pcs)[0] if k_eff == k else eig
    return PCAAlignment(
        angles=angles,
        pcs=pcs,
        eig=eig,
        eig_aligned=aligned,
        singular_values=s,
        rank=rank,
        centering=centering,
        removed_angle_to_ones=_angle(removed, np.ones(Z.shape[1])),
        removed_angle_to_top=_angle(removed, basis.f1),
    )


def _radius_ratio(U2: np.ndarray, corners, centers) -> float:
    r = np.linalg.norm(U2, axis=1)
    return float(r[corners].mean() / r[centers].mean())


def peripheral_compression(g: Graph, pi=None, basis_m: SpectralBasis | None = None,
                           operator: str = "M") -> tuple[float, float]:
    """Corner-to-center mean radius in the ``(u_2, u_3)`` embedding.

    Returns ``(ratio_reweighted, ratio_W)``: the first uses eigenvectors of
    ``M`` (``operator="M"``) or of the unnormalised reweighted adjacency
    ``W = diag(pi) W~ diag(pi)`` (``operator="W"``), the second those of the
    original adjacency. Corners are the minimum-degree vertices, centers the
    maximum-degree ones; radii make the result invariant to rotations inside
    a degenerate eigenspace.
    """
    if g.c < 3:
        raise DiagnosticsError("need at least three vertices")
    deg = g.degrees
    corners = np.flatnonzero(np.isclose(deg, deg.min()))
    centers = np.flatnonzero(np.isclose(deg, deg.max()))
    if operator == "M":
        if basis_m is None:
            basis_m = spectral_basis(reweight(g, pi), 3)
        U = basis_m.vectors[:, 1:3]
    elif operator == "W":
        _, Ur = symmetric_eigh(reweight(g, pi).W, order="signed")
        U = Ur[:, 1:3]
    else:
        raise ValueError(f"unknown operator {operator!r}")
    _, Uw = symmetric_eigh(g.adjacency, order="signed")
    return _radius_ratio(U, corners, centers), _radius_ratio(Uw[:, 1:3], corners, centers)


@dataclass(frozen=True)
class NoiseCurve:
    angles: np.ndarray
    tolerance: float = 2.0
    start: int = 2

    @property
    def final(self) -> float:
        return float(self.angles[-1])

    @property
    def settles(self) -> bool:
        """Non-increasing beyond layer ``start`` up to ``tolerance`` degrees."""
        tail = self.angles[self.start:]
        return bool(np.all(np.diff(tail) <= self.tolerance))


def noise_robustness(clean_basis: SpectralBasis, rg: ReweightedGraph, snapshots, q: int | None = None,
                     centering: str = "degree", tolerance: float = 2.0) -> NoiseCurve:
    """Largest principal angle per layer between noisy snapshots and the clean basis.

    ``rg`` sets the centering weights and should be the clean graph.
    """
    angles = [pca_align(s, clean_basis, rg, q, centering).max_angle for s in snapshots]
    return NoiseCurve(np.array(angles), tolerance)


# ------------------------------------------------------------- reporting


@dataclass
class ConvergenceReport:
    gamma: float
    decade_means: tuple
    ratios: list
    energies: list
    angles: list
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "decade_means": list(self.decade_means),
            "subspace_ratios": list(self.ratios),
            "normalized_energy": [list(map(float, e)) for e in self.energies],
            "principal_angles_deg": [list(map(float, a)) for a in self.angles],
            **self.extra,
        }


def convergence_report(trace, seq: TokenSequence, rg: ReweightedGraph, basis: SpectralBasis,
                       latents=None, centering: str = "degree") -> ConvergenceReport:
    """Collect per-layer ratios, energies and angles for a forward trace.

    ``latents`` (exact latent matrices per layer) sets the goodness target;
    without it the final-layer snapshot is used.
    """
    layers = [ell for ell, V in enumerate(trace.V) if V is not None]
    snaps = [snapshot(trace, seq, ell) for ell in layers]
    L = layers[-1]
    target = latents[L] if latents is not None else snaps[-1].Z
    good = goodness(trace.V[L], target, seq)
    ratios, energies, angles = [], [], []
    for s in snaps:
        try:
            ratios.append(subspace_ratio(s, rg, basis))
        except DiagnosticsError:
            ratios.append(float("nan"))
        energies.append(energy(s, rg, basis).normalized_components)
        angles.append(pca_align(s, basis, rg, centering=centering).angles)
    return ConvergenceReport(good.gamma, good.decade_means, ratios, energies, angles, {"layers": layers})


def write_energy_csv(energies, path_like, layers=None) -> Path:
    """``layer,component,normalized_energy`` rows; components are 1-based."""
    p = Path(path_like)
    layers = range(len(energies)) if layers is None else layers
    with p.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "component", "normalized_energy"])
        for ell, e in zip(layers, energies):
            for i, v in enumerate(np.asarray(e)):
                w.writerow([ell, i + 1, repr(float(v))])
    return p


def write_alignment_csv(al: PCAAlignment, pcs_path, eig_path) -> tuple[Path, Path]:
    """``token,pc1,pc2`` and ``token,eig2,eig3`` (rotated onto the PCs)."""
    out = []
    for path, M, names in (
        (pcs_path, al.pcs, [f"pc{i + 1}" for i in range(al.pcs.shape[1])]),
        (eig_path, al.eig_aligned, [f"eig{i + 2}" for i in range(al.eig_aligned.shape[1])]),
    ):
        p = Path(path)
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["token"] + names)
            for x in range(M.shape[0]):
                w.writerow([x + 1] + [repr(float(v)) for v in M[x]])
        out.append(p)
    return tuple(out)


def write_report_json(report, path_like) -> Path:
    p = Path(path_like)
    payload = report.to_dict() if hasattr(report, "to_dict") else asdict(report)
    p.write_text(json.dumps(payload, indent=2, default=_jsonable))
    return p


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")
