import math

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phlab.census import (DisjointnessError, EntropyError, _rle, assert_disjoint, build_box_graph, chain_classes,
                          class_boxes, entropy_lower_bound, forward_closure, invariant_saturated_closure,
                          minimal_u_saturated,
                          outer_soundness, quasi_attractor_census, u_saturate)
from phlab.models import CAT, LinearToral, ModelError, SkewProduct, default_instance


@pytest.fixture(scope="module")
def skew3():
    f = SkewProduct(CAT, 0.2, 3)
    g = build_box_graph(f, (16, 16, 32))
    return f, g, chain_classes(g)


def _nx_components(graph):
    G = nx.DiGraph()
    G.add_nodes_from(range(graph.n_boxes))
    for i in range(graph.n_boxes):
        G.add_edges_from((i, int(j)) for j in graph.successors(i))
    return G


# ---------------------------------------------------------------- graph construction

def test_resolution_must_be_a_power_of_two():
    with pytest.raises(ModelError):
        build_box_graph(LinearToral(CAT), 12)


@pytest.mark.parametrize("model, res", [
    (LinearToral(CAT), 32),
    (default_instance(), (8, 8, 16)),
    (SkewProduct(CAT, 0.2, 3), (16, 16, 32)),
    (SkewProduct(CAT, 0.1, 2, omega=0.13), (8, 8, 16)),
])
def test_graph_is_an_outer_approximation(model, res):
    assert outer_soundness(build_box_graph(model, res), n=10_000)["missing"] == 0


def test_perturbed_graph_is_an_outer_approximation(default_construction):
    g = build_box_graph(default_construction.g, (8, 8, 16))
    assert outer_soundness(g, n=10_000)["missing"] == 0


@settings(max_examples=15, deadline=None)
@given(eps=st.floats(0.0, 0.15), k=st.integers(1, 4), omega=st.floats(0.0, 1.0), seed=st.integers(0, 99))
def test_skew_graphs_contain_true_transitions(eps, k, omega, seed):
    f = SkewProduct(CAT, eps, k, omega=omega)
    assert outer_soundness(build_box_graph(f, (8, 8, 8)), n=2000, seed=seed)["missing"] == 0


# ---------------------------------------------------------------- chain classes

def test_components_match_networkx(skew3):
    _, g, cond = skew3
    G = _nx_components(g)
    ours = {}
    for i, lab in enumerate(cond.labels):
        ours.setdefault(int(lab), set()).add(i)
    theirs = {frozenset(c) for c in nx.strongly_connected_components(G)}
    assert {frozenset(c) for c in ours.values()} == theirs
    C = nx.condensation(G)
    sinks = {frozenset(C.nodes[n]["members"]) for n in C if C.out_degree(n) == 0}
    assert {frozenset(class_boxes(cond, c).tolist()) for c in cond.terminal} == sinks


def test_cat_map_is_one_class():
    cond = chain_classes(build_box_graph(LinearToral(CAT), 64))
    assert len(cond.classes) == 1 and len(cond.terminal) == 1


@pytest.mark.parametrize("nf", [8, 16, 32])
def test_product_map_has_one_class_per_fiber_slab(nf):
    g = build_box_graph(default_instance(), (16, 16, nf))
    rep = quasi_attractor_census(g, chain_classes(g))
    assert rep.terminal_classes == rep.chain_classes == nf
    assert rep.minimal_u_saturated == nf
    assert all(rep.trapping) and all(rep.saturated)
    assert all(abs(v - 1 / nf) < 1e-12 for v in rep.volumes)


def test_perturbed_count_is_bounded_and_non_increasing(default_construction):
    counts = []
    for nf in (8, 16, 32):
        g = build_box_graph(default_construction.g, (16, 16, nf))
        counts.append(len(chain_classes(g).terminal))
    assert all(1 <= c <= nf for c, nf in zip(counts, (8, 16, 32)))
    assert all(b <= a for a, b in zip(counts, counts[1:]))


def test_skew_has_three_terminal_classes_on_the_attracting_circles(skew3):
    f, g, cond = skew3
    assert len(cond.terminal) == 3
    rng = np.random.default_rng(0)
    for theta in (0.0, 1 / 3, 2 / 3):
        p = np.column_stack([rng.random((20, 2)), np.full(20, theta + 1e-3)])
        labels = set(cond.labels[g.box_of(p)].tolist())
        assert len(labels) == 1 and labels.pop() in cond.terminal


@pytest.mark.parametrize("k", [1, 2, 3, 4])
@pytest.mark.parametrize("eps", [0.05, 0.2])
def test_refinement_only_splits_spurious_merges(k, eps):
    f = SkewProduct(CAT, eps, k)
    counts = [len(chain_classes(build_box_graph(f, (8, 8, nf))).terminal) for nf in (8, 16, 32, 64)]
    assert all(a <= b <= k for a, b in zip(counts, counts[1:]))
    assert counts[-1] == k


def test_terminal_classes_are_forward_closed(skew3):
    _, g, cond = skew3
    for c in cond.terminal:
        b = class_boxes(cond, c)
        assert np.array_equal(forward_closure(g, b), b)


# ---------------------------------------------------------------- saturation

def test_saturation_is_idempotent_and_grows(skew3):
    _, g, cond = skew3
    seed = class_boxes(cond, cond.terminal[0])[:1]
    once = u_saturate(g, seed)
    assert np.isin(seed, once).all()
    assert np.array_equal(u_saturate(g, once), once)


def test_single_box_grows_to_its_slab_class(skew3):
    _, g, cond = skew3
    for c in cond.terminal:
        b = class_boxes(cond, c)
        assert np.array_equal(invariant_saturated_closure(g, b[:1]), b)


def test_trivial_saturations():
    g = build_box_graph(LinearToral(CAT), 16)
    assert u_saturate(g, []).size == 0
    assert u_saturate(g, np.arange(g.n_boxes)).size == g.n_boxes
    assert len(minimal_u_saturated(g, chain_classes(g))) == 1


def test_skew_minimal_saturated_sets_are_three_and_disjoint(skew3):
    _, g, cond = skew3
    sets = minimal_u_saturated(g, cond)
    assert len(sets) == 3
    for i in range(3):
        for j in range(i + 1, 3):
            assert np.intersect1d(sets[i], sets[j]).size == 0


def test_overlapping_minimal_sets_raise():
    assert_disjoint([np.array([1, 2]), np.array([3])])
    with pytest.raises(DisjointnessError):
        assert_disjoint([np.array([1, 2]), np.array([3]), np.array([2, 4])])


# ---------------------------------------------------------------- entropy

def test_cat_entropy_bound():
    bound, info = entropy_lower_bound(LinearToral(CAT), details=True)
    assert info["k0"] == 2 and bound == math.log(2) / 2
    assert info["min_separation"] >= 0.05 and info["min_image_diameter"] >= 0.2


def test_skew_class_entropy_bound(skew3):
    f, g, cond = skew3
    bound = entropy_lower_bound(f, class_boxes(cond, cond.terminal[0]), g)
    assert bound == math.log(2) / 2 <= 0.9624


def test_identity_has_no_entropy_bound():
    with pytest.raises(EntropyError):
        entropy_lower_bound(LinearToral(np.eye(2, dtype=int)))


def test_too_small_k0_fails_the_doubling_check():
    with pytest.raises(EntropyError):
        entropy_lower_bound(LinearToral(CAT), k0=1)


# ---------------------------------------------------------------- serialization

@given(st.lists(st.integers(0, 500), max_size=60))
def test_run_length_encoding_round_trips(boxes):
    runs = _rle(boxes)
    back = [a + i for a, n in runs for i in range(n)]
    assert back == sorted(set(boxes))
