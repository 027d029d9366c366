"""Command-line driver: ``dclab <subcommand>`` or ``dclab run config.json``.

Exit codes: 0 success, 2 invalid usage or configuration, 3 numeric failure
(the message names the stage).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .attention import AttentionError, MixtureWeights, construct_typed, mix
from .dgp import generate, non_neighbor_count, read_sequence_json, write_counts_csv, write_sequence_json
from .diagnostics import (
    DiagnosticsError,
    convergence_report,
    energy,
    noise_robustness,
    pca_align,
    snapshot,
    write_alignment_csv,
    write_energy_csv,
    write_report_json,
)
from .forward import ForwardError, LayerSpec, forward, init_embeddings, latent_trajectory, parse_sigma, read_trace, write_trace
from .graph import GraphError, parse_graph_spec, reweight, spectral_basis, stationary_distribution, write_spectra_csv
from .ingest import DumpError, classify, classify_maps, emit_report, read_dump
from .io import sha256_file, write_snapshot_csv

EMITS = ("spectra", "trace", "snapshot", "convergence", "energy", "pca", "noise", "classify")
STAGES = ("sequence", "embedding")
DEFAULT_RHO = (0.25, 0.5, 0.2, 0.05)
NUMERIC_ERRORS = (ArithmeticError, np.linalg.LinAlgError, DiagnosticsError, AttentionError, GraphError)


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"numeric failure in stage '{stage}': {cause}")
        self.stage = stage


@dataclass(frozen=True)
class ExperimentConfig:
    graph: str
    n: int
    layers: tuple
    q: int = 3
    seed: int = 0
    epsilon: float = 0.0
    stationary: str = "walk"
    embedding: str = "orthogonal"
    d: int = 16
    embedding_path: str | None = None
    attention_graph: str | None = None
    centering: str = "degree"
    window: int = 500
    output_dir: str = "out"
    emit: tuple = ("spectra", "snapshot", "convergence", "energy", "pca")

    def layer_specs(self) -> list:
        return [LayerSpec.make(l["rho"], l.get("sigma"), l.get("residual", False)) for l in self.layers]

    def canonical(self) -> dict:
        """Everything that determines the outputs (the output directory does not)."""
        d = asdict(self)
        d.pop("output_dir")
        d["layers"] = [dict(l) for l in self.layers]
        d["emit"] = list(self.emit)
        return d


def _field(d: dict, name: str, kind, default=None, required=False):
    if name not in d:
        if required:
            raise ConfigError(f"field '{name}': required")
        return default
    v = d[name]
    try:
        if kind is int and (isinstance(v, bool) or int(v) != v):
            raise TypeError
        return kind(v)
    except (TypeError, ValueError):
        raise ConfigError(f"field '{name}': expected {kind.__name__}, got {v!r}") from None


def _parse_layers(raw) -> tuple:
    if isinstance(raw, dict):
        count = raw.get("repeat")
        if not isinstance(count, int) or isinstance(count, bool) or count < 1:
            raise ConfigError("field 'layers.repeat': expected a positive integer")
        body = {k: v for k, v in raw.items() if k != "repeat"}
        raw = [body] * count
    if not isinstance(raw, list) or not raw:
        raise ConfigError("field 'layers': expected a non-empty list or {repeat, rho, ...}")
    out = []
    for i, layer in enumerate(raw, start=1):
        if not isinstance(layer, dict) or "rho" not in layer:
            raise ConfigError(f"layer {i}: missing 'rho'")
        try:
            rho = [float(Fraction(str(r))) for r in layer["rho"]]
        except (TypeError, ValueError, ZeroDivisionError):
            raise ConfigError(f"layer {i}: rho must be four numbers") from None
        if len(rho) != 4:
            raise ConfigError(f"layer {i}: rho must have four entries (A, B, O, T), got {len(rho)}")
        if min(rho) < 0:
            raise ConfigError(f"layer {i}: rho entries must be non-negative")
        if abs(sum(rho) - 1.0) > 1e-12:
            raise ConfigError(f"layer {i}: rho sums to {sum(rho):.12g}, expected 1")
        try:
            parse_sigma(layer.get("sigma"))
        except ValueError as exc:
            raise ConfigError(f"layer {i}: {exc}") from None
        out.append({"rho": rho, "sigma": layer.get("sigma", "identity"), "residual": bool(layer.get("residual", False))})
    return tuple(out)


def config_from_dict(d: dict, base_dir=None) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown field(s): {', '.join(unknown)}")
    graph = _field(d, "graph", str, required=True)
    try:
        g = parse_graph_spec(graph)
    except (GraphError, OSError) as exc:
        raise ConfigError(f"field 'graph': {exc}") from None
    n = _field(d, "n", int, required=True)
    if n <= 10 * g.c:
        raise ConfigError(f"field 'n': need n > 10c = {10 * g.c}, got {n}")
    q = _field(d, "q", int, 3)
    if not 2 <= q < g.c:
        raise ConfigError(f"field 'q': need 2 <= q < c = {g.c}, got {q}")
    eps = _field(d, "epsilon", float, 0.0)
    if not 0.0 <= eps <= 1.0:
        raise ConfigError(f"field 'epsilon': must lie in [0, 1], got {eps}")
    stationary = _field(d, "stationary", str, "walk")
    if stationary not in ("walk", "perron"):
        raise ConfigError(f"field 'stationary': expected 'walk' or 'perron', got {stationary!r}")
    scheme = _field(d, "embedding", str, "orthogonal")
    if scheme not in ("gaussian", "orthogonal", "from_file"):
        raise ConfigError(f"field 'embedding': unknown scheme {scheme!r}")
    dim = _field(d, "d", int, 16)
    if dim < 2 or (scheme == "orthogonal" and dim < g.c):
        raise ConfigError(f"field 'd': {dim} is too small for the '{scheme}' embedding")
    emb_path = d.get("embedding_path")
    if scheme == "from_file":
        if not emb_path:
            raise ConfigError("field 'embedding_path': required for the 'from_file' embedding")
        if base_dir is not None and not Path(emb_path).is_absolute():
            emb_path = str(Path(base_dir) / emb_path)
    emit = tuple(d.get("emit", ExperimentConfig.emit))
    bad = [e for e in emit if e not in EMITS]
    if bad:
        raise ConfigError(f"field 'emit': unknown artifact(s) {bad}; choose from {list(EMITS)}")
    centering = _field(d, "centering", str, "degree")
    if centering not in ("degree", "mean"):
        raise ConfigError(f"field 'centering': expected 'degree' or 'mean', got {centering!r}")
    window = _field(d, "window", int, 500)
    if not 1 < window <= n:
        raise ConfigError(f"field 'window': must lie in (1, n], got {window}")
    att = d.get("attention_graph")
    if att is not None:
        try:
            if parse_graph_spec(att).c != g.c:
                raise ConfigError("field 'attention_graph': vertex count differs from 'graph'")
        except (GraphError, OSError) as exc:
            raise ConfigError(f"field 'attention_graph': {exc}") from None
    return ExperimentConfig(
        graph=graph, n=n, layers=_parse_layers(d.get("layers")), q=q, seed=_field(d, "seed", int, 0),
        epsilon=eps, stationary=stationary, embedding=scheme, d=dim, embedding_path=emb_path,
        attention_graph=att, centering=centering, window=window,
        output_dir=_field(d, "output_dir", str, "out"), emit=emit,
    )


def load_config(path_like) -> ExperimentConfig:
    p = Path(path_like)
    try:
        raw = json.loads(p.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON (line {exc.lineno}): {exc.msg}") from None
    return config_from_dict(raw, base_dir=p.parent)


def stage_seeds(seed: int) -> dict:
    """Per-stage seeds from ``numpy.random.SeedSequence(seed).spawn``."""
    children = np.random.SeedSequence(seed).spawn(len(STAGES))
    return {name: int(ch.generate_state(1)[0]) for name, ch in zip(STAGES, children)}


def resolve_threads(threads: int | None) -> int:
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("DCLAB_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"DCLAB_THREADS must be an integer, got {env!r}") from None
    return 1


class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, et, exc, tb):
        if exc is not None and isinstance(exc, NUMERIC_ERRORS) and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def layer_maps(seq, g, specs) -> list:
    """One mixed map per layer; layers with equal weights share a map."""
    typed = {k: construct_typed(seq, g, k) for k in "ABOT"}
    cache = {}
    out = []
    for spec in specs:
        key = spec.rho.as_tuple()
        if key not in cache:
            cache[key] = mix([typed[k] for k in "ABOT"], spec.rho)
        out.append(cache[key])
    return out


def run_experiment(cfg: ExperimentConfig, out_dir=None, threads: int = 1) -> dict:
    """Execute a configured experiment and return its manifest."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = stage_seeds(cfg.seed)
    specs = cfg.layer_specs()
    artifacts = []

    def record(*paths):
        artifacts.extend(Path(p) for p in paths)

    with _Stage("graph"):
        g = parse_graph_spec(cfg.graph)
        rg = reweight(g, stationary_distribution(g, cfg.stationary))
        basis = spectral_basis(rg, cfg.q)
        att_g = parse_graph_spec(cfg.attention_graph) if cfg.attention_graph else g
    with _Stage("sequence"):
        seq = generate(rg, cfg.n, cfg.epsilon, seed=seeds["sequence"])
    with _Stage("attention"):
        maps = layer_maps(seq, att_g, specs)
    with _Stage("forward"):
        B = init_embeddings(g.c, cfg.d, cfg.embedding, seed=seeds["embedding"], path=cfg.embedding_path)
        trace = forward(seq, specs, maps, B, threads=threads)
    with _Stage("diagnostics"):
        if "spectra" in cfg.emit:
            record(write_spectra_csv(basis, out / "spectra.csv"))
        if "trace" in cfg.emit:
            record(*write_trace(trace, out / "trace.bin"))
        snaps = [snapshot(trace, seq, ell) for ell in range(len(trace.V))]
        if "snapshot" in cfg.emit:
            record(write_snapshot_csv(snaps[-1].Z, out / "snapshot.csv"))
        if "convergence" in cfg.emit:
            latents = latent_trajectory(B, specs, rg, first_token=int(seq.tokens[0]))
            rep = convergence_report(trace, seq, rg, basis, latents, cfg.centering)
            rep.extra.update({"final_max_angle_deg": float(np.max(rep.angles[-1])), "centering": cfg.centering})
            record(write_report_json(rep, out / "convergence.json"))
        if "energy" in cfg.emit:
            record(write_energy_csv([energy(s, rg, basis).normalized_components for s in snaps], out / "energy.csv"))
        if "pca" in cfg.emit:
            al = pca_align(snaps[-1], basis, rg, centering=cfg.centering)
            record(*write_alignment_csv(al, out / "pca.csv", out / "eig.csv"))
        if "noise" in cfg.emit:
            pos, counts = non_neighbor_count(seq, g, cfg.window)
            record(write_counts_csv(pos, counts, out / "counts.csv"))
            curve = noise_robustness(basis, rg, snaps, centering=cfg.centering)
            record(_write_curve(out / "alignment.csv", {"angle_deg": curve.angles}))
        if "classify" in cfg.emit:
            rep = classify_maps([[m] for m in maps], att_g)
            record(emit_report(rep, out / "classification.csv"))

    manifest = {
        "version": __version__,
        "config": cfg.canonical(),
        "seed": cfg.seed,
        "seed_splitting": f"numpy.random.SeedSequence(seed).spawn({len(STAGES)}) -> generate_state(1)[0]",
        "stage_seeds": seeds,
        "artifacts": [
            {"name": p.name, "sha256": sha256_file(p), "bytes": p.stat().st_size} for p in artifacts
        ],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def _write_curve(path, columns: dict) -> Path:
    p = Path(path)
    names = list(columns)
    L = len(columns[names[0]])
    with p.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer"] + names)
        for ell in range(L):
            w.writerow([ell] + [repr(float(columns[k][ell])) for k in names])
    return p


# ------------------------------------------------------------ subcommands


def _rho(text: str) -> tuple:
    try:
        vals = tuple(float(Fraction(s.strip())) for s in text.split(","))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"bad --rho {text!r}; expected a,b,o,t") from None
    if len(vals) != 4:
        raise argparse.ArgumentTypeError("--rho needs four comma-separated weights")
    return vals


def _specs(args) -> list:
    try:
        sigma = json.loads(args.sigma) if args.sigma.lstrip().startswith(("{", "[")) else args.sigma
        MixtureWeights.of(args.rho)
        return [LayerSpec.make(args.rho, sigma, args.residual)] * args.layers
    except (ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(str(exc)) from None


def _graph(args):
    try:
        return parse_graph_spec(args.graph)
    except (GraphError, OSError) as exc:
        raise ConfigError(f"--graph: {exc}") from None


def _reweighted(args):
    g = _graph(args)
    return g, reweight(g, stationary_distribution(g, args.stationary))


def cmd_spectra(args) -> int:
    g, rg = _reweighted(args)
    if not 1 <= args.q < g.c:
        raise ConfigError(f"--q must satisfy 1 <= q < c = {g.c}")
    with _Stage("spectra"):
        basis = spectral_basis(rg, args.q, order=args.order)
    if args.format == "json":
        payload = {"graph": args.graph, "q": args.q, "order": args.order,
                   "eigenvalues": basis.eigenvalues.tolist(), "vectors": basis.vectors.T.tolist()}
        Path(args.out).write_text(json.dumps(payload, indent=1))
    else:
        write_spectra_csv(basis, args.out)
    return 0


def _sequence(args, rg, epsilon=None, stage_seed=None):
    if getattr(args, "sequence", None):
        return read_sequence_json(args.sequence)
    if args.n is None:
        raise ConfigError("--n is required when no --sequence is given")
    if args.n <= 10 * rg.c:
        raise ConfigError(f"--n must exceed 10c = {10 * rg.c}")
    eps = args.epsilon if epsilon is None else epsilon
    if not 0 <= eps <= 1:
        raise ConfigError("--epsilon must lie in [0, 1]")
    seed = stage_seeds(args.seed)["sequence"] if stage_seed is None else stage_seed
    with _Stage("sequence"):
        return generate(rg, args.n, eps, seed=seed)


def cmd_generate(args) -> int:
    g, rg = _reweighted(args)
    seq = _sequence(args, rg)
    write_sequence_json(seq, args.out)
    if args.counts:
        pos, counts = non_neighbor_count(seq, g, args.window)
        write_counts_csv(pos, counts, args.counts)
    return 0


def _run_forward(args, g, rg, seq, threads):
    specs = _specs(args)
    with _Stage("attention"):
        maps = layer_maps(seq, g, specs)
    with _Stage("forward"):
        B = init_embeddings(g.c, args.d, args.embedding, seed=stage_seeds(args.seed)["embedding"], path=args.embedding_path)
        return forward(seq, specs, maps, B, threads=threads), specs, B


def cmd_forward(args) -> int:
    g, rg = _reweighted(args)
    seq = _sequence(args, rg)
    trace, _, _ = _run_forward(args, g, rg, seq, resolve_threads(args.threads))
    write_trace(trace, args.out)
    if args.snapshot:
        write_snapshot_csv(snapshot(trace, seq).Z, args.snapshot)
    return 0


def cmd_diagnose(args) -> int:
    g, rg = _reweighted(args)
    seq = read_sequence_json(args.sequence)
    trace = read_trace(args.trace)
    if seq.n != trace.n:
        raise ConfigError(f"sequence has n={seq.n}, trace has n={trace.n}")
    with _Stage("diagnostics"):
        basis = spectral_basis(rg, args.q)
        rep = convergence_report(trace, seq, rg, basis, centering=args.centering)
        if args.format == "csv":
            write_energy_csv(rep.energies, args.out, layers=rep.extra["layers"])
        else:
            write_report_json(rep, args.out)
    return 0


def cmd_denoise(args) -> int:
    g, rg = _reweighted(args)
    threads = resolve_threads(args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with _Stage("spectra"):
        basis = spectral_basis(rg, args.q)
    att_g = parse_graph_spec(args.attention_graph) if args.attention_graph else g
    seed = stage_seeds(args.seed)["sequence"]
    curves = {}
    for label, eps in (("noisy_angle_deg", args.epsilon), ("clean_angle_deg", 0.0)):
        seq = _sequence(args, rg, epsilon=eps, stage_seed=seed)
        if label == "noisy_angle_deg":
            pos, counts = non_neighbor_count(seq, g, args.window)
            write_counts_csv(pos, counts, out / "counts.csv")
        trace, _, _ = _run_forward(args, att_g, rg, seq, threads)
        with _Stage("diagnostics"):
            snaps = [snapshot(trace, seq, ell) for ell in range(len(trace.V))]
            curves[label] = noise_robustness(basis, rg, snaps, centering=args.centering).angles
    _write_curve(out / "alignment.csv", curves)
    return 0


def cmd_classify(args) -> int:
    g = _graph(args)
    try:
        dump = read_dump(args.dump)
    except (DumpError, OSError) as exc:
        raise ConfigError(f"--dump: {exc}") from None
    try:
        rep = classify(dump, g)
    except DumpError as exc:
        raise ConfigError(str(exc)) from None
    emit_report(rep, args.out, args.format)
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    manifest = run_experiment(cfg, args.out, resolve_threads(args.threads))
    print(f"{len(manifest['artifacts'])} artifacts written to {args.out or cfg.output_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dclab", description="Graph-walk in-context representation experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, graph=True):
        if graph:
            sp.add_argument("--graph", required=True, help="grid:RxC, ring:C, path:C, complete:C or file:PATH")
            sp.add_argument("--stationary", choices=["walk", "perron"], default="walk")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=None, help="worker threads (default: $DCLAB_THREADS or 1)")

    def model(sp):
        sp.add_argument("--layers", type=int, default=8)
        sp.add_argument("--rho", type=_rho, default=DEFAULT_RHO, help="mixture weights a,b,o,t")
        sp.add_argument("--sigma", default="identity", help="identity, scaled_tanh[:s] or a JSON spec")
        sp.add_argument("--residual", action="store_true")
        sp.add_argument("--d", type=int, default=16)
        sp.add_argument("--embedding", choices=["gaussian", "orthogonal", "from_file"], default="orthogonal")
        sp.add_argument("--embedding-path", default=None)

    def seqargs(sp):
        sp.add_argument("--n", type=int)
        sp.add_argument("--epsilon", type=float, default=0.0)

    s = sub.add_parser("spectra", help="eigenvalues and eigenvectors of the reweighted operator")
    common(s)
    s.add_argument("--q", type=int, default=3)
    s.add_argument("--order", choices=["signed", "abs"], default="signed")
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=["csv", "json"], default="csv")
    s.set_defaults(func=cmd_spectra)

    s = sub.add_parser("generate", help="sample a token sequence")
    common(s)
    seqargs(s)
    s.add_argument("--out", required=True)
    s.add_argument("--counts", default=None, help="also write the non-neighbor count CSV here")
    s.add_argument("--window", type=int, default=500)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("forward", help="run the layered forward process")
    common(s)
    seqargs(s)
    model(s)
    s.add_argument("--sequence", default=None, help="sequence JSON (otherwise one is generated)")
    s.add_argument("--out", required=True, help="trace file (a .json sidecar is written next to it)")
    s.add_argument("--snapshot", default=None, help="final-layer snapshot CSV")
    s.set_defaults(func=cmd_forward)

    s = sub.add_parser("diagnose", help="convergence report for a stored trace")
    common(s)
    s.add_argument("--trace", required=True)
    s.add_argument("--sequence", required=True)
    s.add_argument("--q", type=int, default=3)
    s.add_argument("--centering", choices=["degree", "mean"], default="degree")
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=["csv", "json"], default="json")
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("denoise", help="alignment under uniform-jump noise versus a clean run")
    common(s)
    seqargs(s)
    model(s)
    s.add_argument("--q", type=int, default=3)
    s.add_argument("--window", type=int, default=500)
    s.add_argument("--centering", choices=["degree", "mean"], default="degree")
    s.add_argument("--attention-graph", default=None, help="graph for B-type attention (default: --graph)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_denoise)

    s = sub.add_parser("classify", help="label attention weights in a dump")
    s.add_argument("--dump", required=True)
    s.add_argument("--graph", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=["csv", "json"], default="csv")
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("run", help="run an experiment config")
    s.add_argument("config")
    s.add_argument("--out", default=None, help="override the config's output_dir")
    s.add_argument("--threads", type=int, default=None)
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"dclab: config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"dclab: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
