import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flexchain.ingest import SynthSpec, generate_synthetic_system
from flexchain.pathrec import (CountTensor, PathMultiset, exit_fractions, final_distributors,
                               path_counts, reconstruct_paths)
from flexchain.tensors import (ALTERNATIVE, END_NODE, OBSERVED, TensorError, alternative_edges,
                               build_one_step, build_shipment_tensor, build_two_step,
                               graph_edge_list, mix, read_tensor, to_second_order, write_graph,
                               write_tensor)

from helpers import fig1_paths


def counts(entries):
    return CountTensor({k: float(v) for k, v in entries.items()})


def _system(seed, n_dist=25):
    cat, log = generate_synthetic_system(SynthSpec(n_manufacturers=2, n_distributors=n_dist,
                                                   n_final_buyers=80, seed=seed))
    return reconstruct_paths(log, cat)


# -- two-step ---------------------------------------------------------------------

def test_two_step_single_entry():
    assert build_two_step(counts({("i", "j", "k"): 5})).entries == {("i", "j", "k"): 1.0}


def test_two_step_hand_normalization():
    t = build_two_step(counts({("i", "j", "k"): 3, ("i", "j2", "k2"): 1}))
    assert t.entries == {("i", "j", "k"): 0.75, ("i", "j2", "k2"): 0.25}


def test_two_step_empty_raises():
    with pytest.raises(TensorError):
        build_two_step(CountTensor())


def test_toy_two_step_and_one_step():
    c = path_counts(fig1_paths())
    t2, t1 = build_two_step(c), build_one_step(c)
    assert t2[("E", "D", "A")] == 1.0 and t2[("E", "D", "C")] == 0.0
    assert t1[("E", "D", "A")] == 0.5 and t1[("E", "D", "C")] == 0.5


def test_one_step_single_route():
    c = counts({("i", "j", "k"): 2, ("j", "k", "m"): 4})
    assert build_one_step(c)[("i", "j", "k")] == 1.0


def test_one_step_follows_intermediary_volume():
    c = counts({("i", "j", "k"): 1, ("j", "k", "x"): 9, ("j", "k2", "x"): 1, ("l", "j", "k2"): 7})
    t1 = build_one_step(c)
    for orderer in ("i", "l"):
        assert t1[(orderer, "j", "k")] == pytest.approx(0.9, abs=1e-15)
        assert t1[(orderer, "j", "k2")] == pytest.approx(0.1, abs=1e-15)


def test_one_step_gate_and_intermediary_shares():
    # i uses j (3 orders) and j2 (1 order); j2 orders only from z, j from x and y
    c = counts({("i", "j", "x"): 3, ("i", "j2", "z"): 1,
                ("j", "x", "m"): 1, ("j", "y", "m"): 1, ("j2", "z", "m"): 1})
    t1 = build_one_step(c)
    assert t1.entries == {("i", "j", "x"): 0.375, ("i", "j", "y"): 0.375, ("i", "j2", "z"): 0.25,
                          ("j", "x", "m"): 0.5, ("j", "y", "m"): 0.5, ("j2", "z", "m"): 1.0}


# -- mixing ------------------------------------------------------------------------

def test_mix_toy():
    c = path_counts(fig1_paths())
    t = mix(build_two_step(c), build_one_step(c), {"E": 0.5})
    assert t[("E", "D", "A")] == 0.75 and t[("E", "D", "C")] == 0.25


def test_mix_limits_exact():
    pm = _system(1)
    c = path_counts(pm)
    t2, t1 = build_two_step(c), build_one_step(c)
    assert mix(t2, t1, 0.0).entries == t2.entries
    assert mix(t2, t1, 1.0).entries == t1.entries


@pytest.mark.parametrize("bad", [-0.1, 1.5, {"E": 2.0}])
def test_mix_rejects_out_of_range(bad):
    c = path_counts(fig1_paths())
    with pytest.raises(TensorError):
        mix(build_two_step(c), build_one_step(c), bad)


def _max_row_error(t):
    return max(abs(v - 1.0) for v in t.row_sums().values())


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10**6), phi=st.floats(0, 1))
def test_rows_stochastic_and_support_union(seed, phi):
    c = path_counts(_system(seed, n_dist=15))
    t2, t1 = build_two_step(c), build_one_step(c)
    tm = mix(t2, t1, phi)
    for t in (t2, t1, tm):
        assert _max_row_error(t) <= 1e-12
    if 0 < phi < 1:
        assert tm.support() == t2.support() | t1.support()


def test_mix_affine():
    c = path_counts(_system(4))
    t2, t1 = build_two_step(c), build_one_step(c)
    lo, hi = mix(t2, t1, 0.0), mix(t2, t1, 1.0)
    for phi in np.random.default_rng(0).random(5):
        t = mix(t2, t1, float(phi))
        for key in lo.entries.keys() | hi.entries.keys():
            assert abs(t[key] - (lo[key] + phi * (hi[key] - lo[key]))) <= 1e-12


# -- shipment tensor ---------------------------------------------------------------

def test_shipment_single_route():
    t = build_two_step(counts({("k", "j", "i"): 2}))
    assert build_shipment_tensor(t, {"k": 2.0}).entries == {("i", "j", "k"): 1.0}


def test_shipment_volume_weighting():
    t = build_two_step(counts({("a", "j", "s"): 3, ("b", "j2", "s"): 1}))
    b = build_shipment_tensor(t, {"a": 3.0, "b": 1.0})
    assert b.entries == {("s", "j", "a"): 0.75, ("s", "j2", "b"): 0.25}


def test_shipment_unit_volumes_proportional_to_transpose():
    c = path_counts(_system(2))
    t = build_two_step(c)
    b = build_shipment_tensor(t, None)
    by_source: dict = {}
    for (k, j, i), v in t.entries.items():
        by_source.setdefault(i, {})[(i, j, k)] = v
    for i, row in by_source.items():
        tot = sum(row.values())
        for key, v in row.items():
            assert b[key] == pytest.approx(v / tot, rel=1e-12)
    assert max(abs(s - 1) for s in b.slice_sums().values()) <= 1e-12


def test_shipment_zero_volume_source_absent():
    t = build_two_step(counts({("a", "j", "s"): 3}))
    b = build_shipment_tensor(t, {"a": 0.0})
    assert b.entries == {}


# -- second-order graph -------------------------------------------------------------

def test_line_graph_absorbs_in_three_steps():
    b = build_shipment_tensor(build_two_step(counts({("i", "j", "k"): 1})), None)
    g = to_second_order(b, {"i"})
    assert g.edges == {(("k", "j"), ("j", "i")): 1.0, (("j", "i"), ("i", "†")): 1.0,
                       (("i", "†"), END_NODE): 1.0, (END_NODE, END_NODE): 1.0}
    M = g.matrix().toarray()
    start = np.zeros(len(g.nodes))
    start[g.index()[("k", "j")]] = 1
    end = np.zeros(len(g.nodes))
    end[g.index()[END_NODE]] = 1
    v = start @ np.linalg.matrix_power(M, 3)
    assert np.array_equal(v, end)
    assert not np.array_equal(start @ np.linalg.matrix_power(M, 2), end)


def test_dangling_meta_node():
    b = build_shipment_tensor(build_two_step(counts({("i", "j", "k"): 1})), None)
    with pytest.raises(TensorError):
        to_second_order(b, {"x"})
    g = to_second_order(b, {"x"}, dangling="absorb")
    assert g.edges[(("j", "i"), ("i", "†"))] == 1.0


def test_empty_final_set():
    b = build_shipment_tensor(build_two_step(counts({("i", "j", "k"): 1})), None)
    with pytest.raises(TensorError):
        to_second_order(b, set())


def test_toy_alternative_edge_in_graph():
    pm = fig1_paths()
    c = path_counts(pm)
    t2, t1 = build_two_step(c), build_one_step(c)
    omega, p = final_distributors(pm), exit_fractions(pm)
    g0 = to_second_order(build_shipment_tensor(t2, None), omega, p)
    g1 = to_second_order(build_shipment_tensor(t1, None), omega, p)
    new = set(g1.edges) - set(g0.edges)
    assert (("C", "D"), ("D", "E")) in new
    assert g1.edges[(("C", "D"), ("D", "E"))] > 0
    labelled = {(a, b): cls for a, b, _, cls in graph_edge_list(g1, g0)}
    assert labelled[(("C", "D"), ("D", "E"))] == ALTERNATIVE


def test_alternative_edges_toy():
    c = path_counts(fig1_paths())
    edges = {(a, b): cls for a, b, _, cls in alternative_edges(build_two_step(c), build_one_step(c))}
    assert edges[(("E", "D"), ("D", "C"))] == ALTERNATIVE
    assert edges[(("E", "D"), ("D", "A"))] == OBSERVED


def test_no_alternatives_when_supports_nest():
    c = counts({("i", "j", "k"): 1, ("j", "k", "m"): 1})
    edges = alternative_edges(build_two_step(c), build_one_step(c))
    assert all(cls == OBSERVED for *_, cls in edges)


@pytest.mark.parametrize("seed", range(3))
def test_edge_classes_partition_union(seed):
    c = path_counts(_system(seed))
    t2, t1 = build_two_step(c), build_one_step(c)
    edges = alternative_edges(t2, t1)
    obs = {(a, b) for a, b, _, cls in edges if cls == OBSERVED}
    alt = {(a, b) for a, b, _, cls in edges if cls == ALTERNATIVE}
    union = {((i, j), (j, k)) for i, j, k in t2.support() | t1.support() if "*" not in (i, j, k)}
    assert len(obs) + len(alt) == len(union)
    assert obs | alt == union


@pytest.mark.parametrize("seed", range(3))
def test_second_order_chain_absorbs(seed):
    pm = _system(seed, n_dist=12)
    c = path_counts(pm)
    for t in (build_two_step(c), build_one_step(c)):
        g = to_second_order(build_shipment_tensor(t, None), final_distributors(pm),
                            exit_fractions(pm))
        M = g.matrix().toarray()
        assert len(g.nodes) <= 400
        assert np.allclose(M.sum(axis=1), 1.0, atol=1e-12)
        v = np.full(len(g.nodes), 1.0 / len(g.nodes))
        for _ in range(2000):
            v = v @ M
        assert v[g.index()[END_NODE]] == pytest.approx(1.0, abs=1e-8)


def test_csv_exports(tmp_path):
    c = path_counts(fig1_paths())
    t2, t1 = build_two_step(c), build_one_step(c)
    write_tensor(t1.entries, tmp_path / "t.csv")
    assert read_tensor(tmp_path / "t.csv") == t1.entries
    write_graph(alternative_edges(t2, t1), tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "src_pair,dst_pair,weight,class"
    assert "E|D,D|C,0.5,alternative" in lines
