"""Walk through the grid(4,4) experiment layer by layer.

Generates a random-walk sequence, runs the eight-layer forward process and
prints, per layer, the high-to-low frequency ratio, the share of energy in
the two leading non-trivial eigencomponents and the principal angles to the
predicted eigenvectors. The exact latent recursion is printed alongside.

    python demos/grid_alignment.py [--n 8192] [--seed 7]
"""

import argparse

import numpy as np

from dclab.cli import layer_maps, stage_seeds
from dclab.dgp import generate
from dclab.diagnostics import energy, pca_align, snapshot, subspace_ratio
from dclab.forward import LayerSpec, forward, init_embeddings, latent_trajectory
from dclab.graph import decay_factor, grid, reweight, spectral_basis

RHO = (0.25, 0.5, 0.2, 0.05)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=8192)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    g = grid(4, 4)
    rg = reweight(g)
    basis = spectral_basis(rg, 3)
    print("leading eigenvalues of M:", np.round(basis.eigenvalues[:4], 4))
    print(f"per-layer decay factor: {decay_factor(basis, RHO[0], RHO[1]):.4f}")

    seeds = stage_seeds(args.seed)
    seq = generate(rg, args.n, 0.0, seed=seeds["sequence"])
    specs = [LayerSpec.make(RHO)] * 8
    B = init_embeddings(16, 16, "orthogonal", seed=seeds["embedding"])
    trace = forward(seq, specs, layer_maps(seq, g, specs), B)
    latents = latent_trajectory(B, specs, rg, first_token=int(seq.tokens[0]))

    print(f"\n{'layer':>5} {'ratio':>9} {'latent':>9} {'e2+e3':>7} {'latent':>7}  angles (deg)")
    for ell, Z in enumerate(latents):
        s = snapshot(trace, seq, ell)
        angles = pca_align(s, basis, rg).angles
        print(f"{ell:>5} {subspace_ratio(s, rg, basis):9.4f} {subspace_ratio(Z, rg, basis):9.4f} "
              f"{energy(s, rg, basis).share([1, 2]):7.4f} {energy(Z, rg, basis).share([1, 2]):7.4f}  "
              f"{np.round(angles, 2).tolist()}")


if __name__ == "__main__":
    main()
