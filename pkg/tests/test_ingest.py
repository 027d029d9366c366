import gzip
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dclab.attention import construct_typed, mix
from dclab.dgp import generate
from dclab.graph import grid, read_edge_list
from dclab.ingest import (
    LABELS,
    AttentionDump,
    DumpError,
    classify,
    classify_maps,
    dump_from_map,
    emit_report,
    label_records,
    load_report_csv,
    read_dump,
    write_dump,
)

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="module")
def small(rg44, g44):
    seq = generate(rg44, 256, 0.0, seed=2)
    return {k: construct_typed(seq, g44, k) for k in "ABOT"}


def _write(tmp_path, lines, name="d.jsonl"):
    p = tmp_path / name
    p.write_text("".join(json.dumps(x) + "\n" for x in lines))
    return p


HEADER = {"n_layers": 1, "n_heads": 1, "n": 2, "c": 2, "tokens": [1, 2]}


# ----------------------------------------------------------------- golden


def test_golden_report():
    dump = read_dump(DATA / "golden_dump.jsonl")
    g = read_edge_list(DATA / "golden_path3.txt")
    rep = classify(dump, g)
    heads, fr, glob = load_report_csv(DATA / "golden_report.csv")
    assert rep.heads == heads
    np.testing.assert_allclose(rep.fractions, fr, atol=1e-12)
    np.testing.assert_allclose(rep.global_fractions, glob, atol=1e-12)
    assert rep.flagged_rows == 0


def test_golden_labels_follow_precedence():
    dump = read_dump(DATA / "golden_dump.jsonl")
    g = read_edge_list(DATA / "golden_path3.txt")
    lab = [LABELS[i] for i in label_records(dump, g)[:10]]
    # position 1 holds token 2, so query 4 (token 2) at key 1 is T, not A
    assert lab == ["T", "T", "A", "T", "other", "A", "T", "B", "B", "A"]


# --------------------------------------------------------------- read/write


def test_round_trip_bit_exact(tmp_path, small):
    dump = dump_from_map([small["B"], small["O"]])
    back = read_dump(write_dump(dump, tmp_path / "d.jsonl"))
    for f in ("tokens", "layer", "head", "query", "key", "weight"):
        np.testing.assert_array_equal(getattr(back, f), getattr(dump, f))
    assert (back.n_layers, back.n_heads, back.n, back.c) == (1, 2, dump.n, dump.c)


def test_gzip_round_trip(tmp_path, small):
    dump = dump_from_map(small["A"])
    p = write_dump(dump, tmp_path / "d.jsonl.gz")
    with gzip.open(p, "rt") as fh:
        assert json.loads(fh.readline())["n"] == dump.n
    np.testing.assert_array_equal(read_dump(p).weight, dump.weight)


def test_half_row_is_flagged(tmp_path):
    p = _write(tmp_path, [HEADER, {"l": 0, "h": 0, "q": 1, "k": 1, "w": 1.0},
                          {"l": 0, "h": 0, "q": 2, "k": 2, "w": 0.5}])
    dump = read_dump(p)
    assert dump.flagged == ((0, 0, 1),)
    assert classify(dump, grid(1, 2)).flagged_rows == 1


def test_tolerance_edge(tmp_path):
    p = _write(tmp_path, [HEADER, {"l": 0, "h": 0, "q": 1, "k": 1, "w": 1.0},
                          {"l": 0, "h": 0, "q": 2, "k": 2, "w": 1.0005}])
    assert read_dump(p).flagged == ()


def test_empty_file(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("")
    with pytest.raises(DumpError, match="empty"):
        read_dump(p)


@pytest.mark.parametrize(
    "lines, match",
    [
        (["{not json"], "bad header"),
        ([json.dumps({"n": 2, "c": 2, "tokens": [1, 2]})], "lacks"),
        ([json.dumps({**HEADER, "tokens": []})], "no token"),
        ([json.dumps(HEADER), '{"l": 0, "h": 0, "q": 1}'], ":2: malformed"),
        ([json.dumps(HEADER), '{"l": 0, "h": 0, "q": 1, "k": 2, "w": 1}'], "after query"),
        ([json.dumps({**HEADER, "tokens": [1, 3]})], "outside"),
    ],
)
def test_malformed_dumps(tmp_path, lines, match):
    p = tmp_path / "m.jsonl"
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(DumpError, match=match):
        read_dump(p)


# ----------------------------------------------------------- classification


def test_traversal_map_is_all_t(typed8k, g44):
    rep = classify(dump_from_map(typed8k["T"]), g44)
    assert rep.fraction("T") == 1.0


def test_self_only_dump(tmp_path):
    n = 5
    header = {"n_layers": 1, "n_heads": 1, "n": n, "c": 2, "tokens": [1, 2, 1, 2, 1]}
    recs = [{"l": 0, "h": 0, "q": k, "k": k, "w": 1.0} for k in range(1, n + 1)]
    rep = classify(read_dump(_write(tmp_path, [header] + recs)), grid(1, 2))
    assert rep.fraction("A") == pytest.approx(4 / 5)
    assert rep.fraction("T") == pytest.approx(1 / 5)


def test_typed_maps_have_no_other_mass(typed8k, g44):
    rep = classify(dump_from_map([typed8k["A"], typed8k["B"]]), g44)
    assert rep.fraction("other", (0, 0)) == 0.0
    assert rep.fraction("B", (0, 0)) == 0.0
    assert rep.fraction("other", (0, 1)) == 0.0


def test_streaming_matches_dump(small, g44):
    m = mix([small[k] for k in "ABOT"], (0.25, 0.5, 0.2, 0.05))
    maps = [[m, small["O"]], [m, m]]
    a = classify(dump_from_map(maps), g44)
    b = classify_maps(maps, g44)
    assert a.heads == b.heads
    np.testing.assert_allclose(a.fractions, b.fractions, atol=1e-12)


def test_graph_size_mismatch(typed8k):
    with pytest.raises(DumpError):
        classify(dump_from_map(typed8k["A"]), grid(2, 2))


def test_global_mean_is_mass_weighted(tmp_path):
    dump = read_dump(DATA / "golden_dump.jsonl")
    rep = classify(dump, read_edge_list(DATA / "golden_path3.txt"))
    mass = rep.totals.sum(axis=1)
    np.testing.assert_allclose(rep.global_fractions, mass @ rep.fractions / mass.sum())
    np.testing.assert_allclose(rep.fractions.sum(axis=1), 1.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=4), min_size=1, max_size=4),
       st.integers(0, 1000))
def test_fractions_sum_to_one(rows, seed):
    rng = np.random.default_rng(seed)
    n = len(rows)
    recs = []
    for q, ws in enumerate(rows):
        ws = np.asarray(ws[: q + 1])
        ws = ws / ws.sum()
        for k, w in enumerate(ws):
            recs.append((q, k, w))
    q, k, w = (np.array(x) for x in zip(*recs))
    tokens = rng.integers(0, 4, n)
    dump = AttentionDump(1, 1, n, 4, tokens, np.zeros_like(q), np.zeros_like(q), q, k, w)
    rep = classify(dump, grid(2, 2))
    assert rep.fractions.sum() == pytest.approx(1.0)
    assert rep.totals.sum() == pytest.approx(n)


# ------------------------------------------------------------------ reports


def test_csv_and_json_reports(tmp_path):
    rep = classify(read_dump(DATA / "golden_dump.jsonl"), read_edge_list(DATA / "golden_path3.txt"))
    heads, fr, glob = load_report_csv(emit_report(rep, tmp_path / "r.csv"))
    np.testing.assert_array_equal(fr, rep.fractions)
    np.testing.assert_array_equal(glob, rep.global_fractions)
    payload = json.loads(emit_report(rep, tmp_path / "r.json").read_text())
    assert payload["precedence"] == "T>A>B>other"
    assert payload["heads"][1]["frac_A"] == 0.75
    assert payload["global"]["frac_other"] == pytest.approx(0.0375)
    with pytest.raises(ValueError):
        emit_report(rep, tmp_path / "r.x", fmt="xml")


def test_mixture_fraction_identity(small, g44):
    # each label's mass is linear in the mixture weights
    rho = np.array([0.25, 0.5, 0.2, 0.05])
    parts = np.array([classify(dump_from_map(small[k]), g44).totals[0] for k in "ABOT"])
    mixed = classify(dump_from_map(mix([small[k] for k in "ABOT"], rho)), g44).totals[0]
    np.testing.assert_allclose(mixed, rho @ parts, rtol=1e-9)
