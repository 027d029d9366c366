"""Two smaller stories: uniform-jump noise and attention-dump labelling.

First a clean and a noisy (one percent uniform jumps) sequence go through
the same forward process; the final alignment barely moves. Then a mixed
attention map is dumped and its weight mass is split into self, neighbour,
first-position and other connections.

    python demos/noise_and_classify.py
"""

import numpy as np

from dclab.attention import construct_typed, mix
from dclab.cli import layer_maps, stage_seeds
from dclab.dgp import generate, non_neighbor_count
from dclab.diagnostics import noise_robustness, snapshot
from dclab.forward import LayerSpec, forward, init_embeddings
from dclab.graph import grid, reweight, spectral_basis
from dclab.ingest import LABELS, classify, dump_from_map

g = grid(4, 4)
rg = reweight(g)
basis = spectral_basis(rg, 3)
specs = [LayerSpec.make((0.25, 0.5, 0.2, 0.05))] * 8
seeds = stage_seeds(0)

for eps in (0.0, 0.01):
    seq = generate(rg, 16384, eps, seed=seeds["sequence"])
    _, counts = non_neighbor_count(seq, g, 500)
    trace = forward(seq, specs, layer_maps(seq, g, specs), init_embeddings(16, 16, "orthogonal", seed=seeds["embedding"]))
    curve = noise_robustness(basis, rg, [snapshot(trace, seq, ell) for ell in range(9)])
    print(f"epsilon={eps}: mean non-edge steps per 500-window {counts.mean():.2f}; "
          f"max angle per layer {np.round(curve.angles, 1).tolist()}")

seq = generate(rg, 2048, 0.0, seed=11)
A = mix([construct_typed(seq, g, k) for k in "ABOT"], (0.3, 0.4, 0.2, 0.1))
report = classify(dump_from_map(A), g)
print("\nweight fractions:", {lab: round(v, 4) for lab, v in zip(LABELS, report.global_fractions.tolist())})
