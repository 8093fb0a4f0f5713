import random

import pytest
from hypothesis import given, strategies as st

from app.env import settings
from app.apis.complex_core import build_complete, constraint_graph, grassmann_graph, kneser_graph
from app.apis.ug_core import (
    SWAP,
    UGInstance,
    coboundary_audit,
    coboundary_instance,
    cycle_consistency,
    f2_cocycle_witness,
    f2_cohomology,
    f2_witnesses,
    gf2_nullspace,
    identity,
    inverse,
    planted_list_instance,
    preprocess,
    random_instance,
    read_instance,
    select_labeling,
    star_solution,
    strong_consistency,
    strong_to_weak,
    then,
    triangle_consistency,
    ug_value_exact,
    ug_value_propagate,
    write_instance,
)
from app.apis.utils import ArgumentError, PreconditionError, SizeError


def perms(m: int):
    return st.permutations(list(range(m))).map(tuple)


@given(st.integers(2, 5).flatmap(lambda m: st.tuples(perms(m), perms(m), perms(m))))
def test_permutation_algebra(triple):
    p, q, r = triple
    assert then(then(p, q), r) == then(p, then(q, r))
    assert then(p, inverse(p)) == identity(len(p))
    assert inverse(then(p, q)) == then(inverse(q), inverse(p))


@given(st.integers(0, 1000), st.integers(2, 4))
def test_reverse_direction_is_the_inverse(seed, m):
    psi = random_instance(constraint_graph(build_complete(6, 3), 1), m, seed)
    for u, v in psi.edges:
        assert psi.perm(v, u) == inverse(psi.perm(u, v))
        x = psi.perm(u, v)[1]
        assert psi.perm(v, u)[x] == 1


def test_instance_rejects_non_permutations(complete_6_3):
    graph = constraint_graph(complete_6_3, 1)
    edge = next(iter(graph.edges))
    with pytest.raises(ArgumentError):
        UGInstance(graph, 3, {edge: (0, 0, 1)})
    with pytest.raises(ArgumentError):
        UGInstance(graph, 0, {})


def test_missing_edges_are_flagged_arbitrary(complete_6_3):
    graph = constraint_graph(complete_6_3, 1)
    edge = next(iter(graph.edges))
    psi = UGInstance(graph, 2, {edge: SWAP})
    assert edge not in psi.arbitrary
    assert len(psi.arbitrary) == len(graph.edges) - 1


def test_coboundary_instances_are_fully_explained():
    graph = constraint_graph(build_complete(7, 3), 1)
    psi, g = coboundary_instance(graph, 3, seed=4)
    assert triangle_consistency(psi, "exact").estimate == pytest.approx(1.0)
    assert psi.explained_mass(g)[0] == pytest.approx(sum(graph.edges.values()))
    report, found = coboundary_audit(psi, seed=1)
    assert report.c_hat == pytest.approx(0.0, abs=1e-12)
    assert report.best_value == pytest.approx(1.0)
    h = select_labeling(found)
    assert psi.value(h) == pytest.approx(1.0)


def test_random_permutations_are_rarely_consistent():
    graph = constraint_graph(build_complete(6, 3), 1)
    values = [triangle_consistency(random_instance(graph, 3, seed), "exact").estimate for seed in range(60)]
    assert sum(values) / len(values) == pytest.approx(1 / 6, abs=0.06)


def test_monte_carlo_consistency_tracks_exact():
    graph = constraint_graph(build_complete(8, 3), 1)
    psi = random_instance(graph, 2, seed=3)
    exact = triangle_consistency(psi, "exact").estimate
    sampled = triangle_consistency(psi, "monte_carlo", trials=4000, seed=2)
    assert sampled.covers(exact, slack=0.02)


def test_rp2_witness_is_consistent_but_not_a_coboundary(rp2, complete_6_3):
    psi = f2_cocycle_witness(rp2)
    assert psi is not None and psi.m == 2
    assert triangle_consistency(psi, "exact").estimate == pytest.approx(1.0)
    assert ug_value_exact(psi).value < 1
    report, _ = coboundary_audit(psi, mode="exact")
    assert report.c_hat > 0
    assert report.method == "exact"
    assert cycle_consistency(psi).inconsistent > 0
    assert f2_cocycle_witness(complete_6_3) is None


def test_f2_cohomology_dimensions(rp2, torus, complete_6_3):
    assert len(f2_cohomology(rp2)[1]) == 1
    assert len(f2_cohomology(torus)[1]) == 2
    assert len(f2_witnesses(complete_6_3)) == 0


@given(st.lists(st.integers(0, 2 ** 8 - 1), max_size=6))
def test_gf2_nullspace_vectors_are_orthogonal(rows):
    for vec in gf2_nullspace(rows, 8):
        assert vec
        for row in rows:
            assert bin(row & vec).count("1") % 2 == 0


def test_kneser_propagation_finds_m_satisfying_labelings():
    graph = kneser_graph(range(8), 2)
    for seed in range(5):
        psi, _ = coboundary_instance(graph, 3, seed)
        solution = ug_value_propagate(psi, restarts=2, seed=seed)
        assert solution.value == pytest.approx(1.0)
        assert len(solution.satisfying) == 3
        assert len(set(solution.satisfying)) == 3


def test_exact_and_propagated_values_agree_on_small_instances():
    graph = constraint_graph(build_complete(6, 3), 1)
    for seed in range(4):
        psi, _ = coboundary_instance(graph, 2, seed)
        assert ug_value_exact(psi).value == pytest.approx(ug_value_propagate(psi, 4, seed).value)
        noisy = random_instance(graph, 2, seed)
        assert ug_value_propagate(noisy, 4, seed).value <= ug_value_exact(noisy).value + 1e-12


def test_exact_value_cap(monkeypatch, complete_6_3):
    psi = random_instance(constraint_graph(complete_6_3, 1), 3, 0)
    monkeypatch.setattr(settings, "ug_exact_cap", 100)
    with pytest.raises(SizeError):
        ug_value_exact(psi)


def test_star_solution_on_consistent_instance(complete_6_3):
    psi, _ = coboundary_instance(constraint_graph(complete_6_3, 1), 3, seed=2)
    P, report = star_solution(psi, (0,))
    assert report.fraction == pytest.approx(1.0)
    assert report.xi_u == 0
    assert report.bound == pytest.approx(2 / 3)
    assert not report.vacuous
    with pytest.raises(ArgumentError):
        star_solution(psi, (9,))


def test_preprocess_statuses(complete_6_3):
    graph = constraint_graph(complete_6_3, 1)
    psi, _ = coboundary_instance(graph, 3, seed=1)
    result = preprocess(psi, 0.1)
    assert result.status == "coboundary"
    assert result.rounds == 1 and result.instance.m == 2
    assert result.final_value == pytest.approx(1.0)
    noisy = random_instance(graph, 3, seed=8)
    assert preprocess(noisy, 0.1).status == "unchanged"
    with pytest.raises(PreconditionError):
        preprocess(UGInstance(graph, 1, {}), 0.1)


def test_planted_lists_are_strongly_consistent(complete_6_3):
    f = "011010"
    g = "100101"
    psi = planted_list_instance(complete_6_3, 1, [f, g], seed=5)
    assert strong_consistency(psi, "exact").estimate == pytest.approx(1.0)
    weak, law = strong_to_weak(psi, "exact")
    assert weak.lists is None
    assert law.holds and law.weak_inconsistency == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ArgumentError):
        planted_list_instance(complete_6_3, 1, [f, f])


def test_corrupted_lists_obey_the_weak_law():
    rng = random.Random(0)
    for j in range(6):
        X = build_complete(6 + j % 2, 3)
        f = "".join(rng.choice("01") for _ in range(X.n_vertices))
        g = "".join("1" if b == "0" else "0" for b in f)
        psi = planted_list_instance(X, 1, [f, g], seed=j)
        pi = {e: then(p, SWAP) if rng.random() < 0.2 else p for e, p in psi.stored().items()}
        _, law = strong_to_weak(UGInstance(psi.graph, 2, pi, psi.lists, psi.lists3), "exact")
        assert law.holds
        assert law.weak_inconsistency <= 3 * law.strong_inconsistency + 1e-12


def test_triangle_free_graphs_are_rejected():
    psi = random_instance(grassmann_graph(2, 4, 2), 2, seed=0)
    with pytest.raises(PreconditionError):
        triangle_consistency(psi)


def test_instance_file_round_trip(tmp_path, rp2):
    psi = f2_cocycle_witness(rp2)
    path = tmp_path / "psi.txt"
    write_instance(psi, path)
    again = read_instance(path, psi.graph)
    assert again.stored() == psi.stored()
    path.write_text("2 1\n0 ; 1 ; 1,0,7\n", encoding="ascii")
    with pytest.raises(ArgumentError):
        read_instance(path, psi.graph)


def test_kneser_cycles_close_on_coboundaries_only():
    graph = kneser_graph(range(6), 2)
    psi, _ = coboundary_instance(graph, 3, seed=2)
    report = cycle_consistency(psi, 5)
    assert report.cycles_checked > 0 and report.inconsistent == 0
    assert report.first_bad is None
    noisy = cycle_consistency(random_instance(graph, 3, seed=2), 3)
    assert noisy.inconsistent > 0 and noisy.first_bad
