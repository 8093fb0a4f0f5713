import random
from collections import Counter
from fractions import Fraction
from itertools import combinations
from math import comb

import pytest
from hypothesis import given, strategies as st
from scipy.stats import chisquare

from app.env import settings
from app.apis.complex_core import (
    build_complete,
    build_from_facets,
    builtin_complex,
    constraint_graph,
    grassmann_graph,
    kneser_graph,
    link,
    parse_facet_text,
    read_complex,
    sample_nested,
)
from app.apis.utils import ArgumentError, DimensionError, EmptyComplexError, MembershipError, PurityError, SizeError


def facet_lists():
    return st.integers(min_value=3, max_value=7).flatmap(
        lambda n: st.integers(min_value=1, max_value=n).flatmap(
            lambda d: st.tuples(
                st.just(n),
                st.lists(st.sets(st.integers(0, n - 1), min_size=d, max_size=d), min_size=1, max_size=6),
            )
        )
    )


@given(facet_lists())
def test_levels_are_downward_closed(case):
    n, facets = case
    X = build_from_facets(n, facets)
    for i in range(1, X.d + 1):
        below = set(X.level(i - 1))
        for face in X.level(i):
            assert all(sub in below for sub in combinations(face, i - 1))


@given(facet_lists())
def test_measures_sum_to_one_and_push_down(case):
    n, facets = case
    X = build_from_facets(n, facets)
    for i in range(X.d + 1):
        weights = X.weights(i)
        assert sum(weights.values()) == 1
    for i in range(1, X.d + 1):
        upper = X.weights(i)
        for face, mu in X.weights(i - 1).items():
            pushed = sum(upper.get(tuple(sorted(face + (v,))), 0) for v in range(n) if v not in face) / i
            assert pushed == mu


def test_complete_weights_are_uniform():
    X = build_complete(10, 4)
    assert X.weight((0, 3, 5)) == Fraction(1, comb(10, 3))
    assert X.weight((0, 1, 2, 3, 4)) == 0
    assert X.facet_count == comb(10, 4)


def test_builtin_surfaces(rp2, torus):
    assert (len(rp2.level(1)), len(rp2.level(2)), len(rp2.level(3))) == (6, 15, 10)
    assert rp2.euler_characteristic() == 1
    assert (len(torus.level(1)), len(torus.level(2)), len(torus.level(3))) == (7, 21, 14)
    assert torus.euler_characteristic() == 0
    for X in (rp2, torus):
        for edge in X.level(2):
            assert len(X.facets_containing(edge)) == 2


def test_builtin_rejects_unknown_name():
    with pytest.raises(ArgumentError):
        builtin_complex("klein")
    with pytest.raises(ArgumentError):
        builtin_complex("complete", n=6)


def test_build_errors():
    with pytest.raises(PurityError):
        build_from_facets(5, [(0, 1, 2), (2, 3)])
    with pytest.raises(EmptyComplexError):
        build_from_facets(5, [])
    with pytest.raises(ArgumentError):
        build_from_facets(3, [(0, 1, 5)])
    with pytest.raises(SizeError):
        build_complete(settings.vertex_cap + 1, 2)
    with pytest.raises(ArgumentError):
        build_complete(4, 5)


def test_isolated_vertices_are_reported():
    X = build_from_facets(6, [(0, 1), (1, 2)])
    assert X.isolated_vertices == (3, 4, 5)


def test_parse_facet_text_reports_first_bad_line(fixtures_dir):
    with pytest.raises(PurityError, match="line 5"):
        read_complex(fixtures_dir / "mixed_sizes.facets")
    n, d, facets = parse_facet_text("# comment\n4 2\n0 1\n\n1 3\n")
    assert (n, d, facets) == (4, 2, [(0, 1), (1, 3)])
    with pytest.raises(ArgumentError, match="line 2"):
        parse_facet_text("4 2\n0 x\n")


def test_read_complex_matches_builtin(fixtures_dir, rp2):
    X = read_complex(fixtures_dir / "rp2.facets")
    assert X.facets == rp2.facets


def test_sample_nested_is_a_chain():
    X = build_complete(12, 6)
    rng = random.Random(3)
    for _ in range(50):
        chain = sample_nested(X, [1, 3, 6], rng)
        assert [len(face) for face in chain] == [1, 3, 6]
        assert set(chain[0]) <= set(chain[1]) <= set(chain[2])
    with pytest.raises(ArgumentError):
        sample_nested(X, [3, 2], rng)
    with pytest.raises(DimensionError):
        sample_nested(X, [2, 7], rng)


def test_link_of_complete_and_listed(rp2):
    L = link(build_complete(8, 4), (0, 1))
    assert L.is_complete and L.d == 2 and 0 not in L.ground
    Lv = link(rp2, (0,))
    assert Lv.d == 2
    assert set(Lv.facets) == {tuple(v for v in f if v != 0) for f in rp2.facets_containing((0,))}
    with pytest.raises(MembershipError):
        link(build_from_facets(6, [(0, 1, 2), (2, 3, 4)]), (5,))


def test_constraint_graph_weights(complete_6_3):
    G = constraint_graph(complete_6_3, 1)
    assert len(G.vertices) == 6
    assert sum(G.edges.values()) == pytest.approx(1.0)
    triangles = G.triangles
    assert len(triangles) == comb(6, 3) * 6
    assert sum(w for _, w in triangles) == pytest.approx(1.0)
    for (u, v, w), _ in triangles:
        assert not (set(u) & set(v)) and not (set(v) & set(w))
    with pytest.raises(DimensionError):
        constraint_graph(complete_6_3, 2)


def test_kneser_graph_shape():
    G = kneser_graph(range(10), 2)
    assert len(G.vertices) == comb(10, 2)
    degree = {v: 0 for v in G.vertices}
    for u, v in G.edges:
        assert not set(u) & set(v)
        degree[u] += 1
        degree[v] += 1
    assert set(degree.values()) == {comb(8, 2)}


def test_edge_sampler_returns_disjoint_pairs(rp2):
    G = constraint_graph(rp2, 1)
    rng = random.Random(0)
    for _ in range(100):
        u, v = G.sample_edge(rng)
        assert G.edge_weight(u, v) > 0


def test_grassmann_graph_small():
    G = grassmann_graph(2, 4, 2)
    assert len(G.vertices) == 35
    assert all(w > 0 for w in G.edges.values())
    assert not G.has_triangles
    G1 = grassmann_graph(2, 3, 1)
    assert len(G1.vertices) == 7
    assert G1.has_triangles and G1.triangles


@pytest.mark.parametrize("name", ["rp2", "torus"])
def test_face_sampler_is_uniform_on_surface_edges(name, request):
    X = request.getfixturevalue(name)
    edges = X.level(2)
    rng = random.Random(11)
    counts = Counter(X.sample_face(2, rng) for _ in range(300 * len(edges)))
    assert set(counts) == set(edges)
    assert chisquare([counts[e] for e in edges]).pvalue > 1e-3


LOPSIDED = [(0, 1, 2), (0, 1, 3), (0, 2, 3), (0, 3, 4), (1, 2, 4)]


def test_constraint_graph_vertex_marginal_is_the_level_measure():
    X = build_from_facets(5, LOPSIDED)
    G = constraint_graph(X, 1)
    rng = random.Random(3)
    counts = Counter(G.sample_edge(rng)[0] for _ in range(100_000))
    tv = sum(abs(counts[u] / 100_000 - float(w)) for u, w in X.weights(1).items()) / 2
    assert tv <= 0.02


@pytest.mark.parametrize("facets", [None, LOPSIDED])
def test_link_measure_is_the_conditional_measure(facets, complete_6_3):
    X = complete_6_3 if facets is None else build_from_facets(5, facets)
    face = (0,)
    L = link(X, face)
    for i in range(1, L.d + 1):
        upper = {A: float(w) for A, w in X.weights(i + 1).items() if set(face) <= set(A)}
        total = sum(upper.values())
        expected = {tuple(v for v in A if v not in face): w / total for A, w in upper.items()}
        got = {A: float(w) for A, w in L.weights(i).items() if w}
        assert got.keys() == expected.keys()
        for A, w in expected.items():
            assert got[A] == pytest.approx(w)
