from itertools import combinations
from math import comb

import pytest
from hypothesis import given, strategies as st

from app.apis.complex_core import build_complete
from app.apis.dp_test import LocalAssignment
from app.apis.list_decoder import (
    DecodeParams,
    ShortListRound,
    best_agreeing_function,
    build_ug_from_lists,
    classify_pair,
    decode_global,
    eta_cover,
    list_size_census,
    local_decode,
    majority_project,
    planted_assignment,
    prune,
    radius_schedule,
    select_and_decode,
    shield_audit,
    short_list,
    subinstance_stability,
)
from app.apis.models import StageStatus
from app.apis.ug_core import coboundary_audit
from app.apis.utils import ArgumentError, DimensionError, distance, restrict

F_12 = "011010011100"
G_12 = "".join(b if v % 2 else ("1" if b == "0" else "0") for v, b in enumerate(F_12))


def complement(f: str) -> str:
    return "".join("1" if b == "0" else "0" for b in f)


def words(n: int):
    return st.text(alphabet="01", min_size=n, max_size=n)


def test_best_agreeing_function_exhaustive_and_heuristic():
    X = build_complete(12, 12)
    G = LocalAssignment.direct_product(X, 4, F_12).restricted_to(range(12))
    exhaustive = best_agreeing_function(G, method="exhaustive")
    assert exhaustive.function == F_12 and exhaustive.agreement == pytest.approx(1.0)
    heuristic = best_agreeing_function(G, method="heuristic", trials=300)
    assert heuristic.function == F_12
    with pytest.raises(ArgumentError):
        best_agreeing_function(G, method="annealing")


def test_short_list_recovers_two_planted_functions():
    X = build_complete(12, 12)
    G = planted_assignment(X, 4, [F_12, G_12], seed=3).restricted_to(range(12))
    out = short_list(G, 0.3, 0, 0.1, seed=3)
    assert set(out.functions) == {F_12, G_12}
    assert not out.empty and out.within_bound
    assert out.size_bound == pytest.approx(2 / out.deltas[-1])
    assert out.deltas[0] == 0.3 and out.deltas[1] == pytest.approx(0.3 - 0.3 / 16)
    late = short_list(G, 0.3, 1, 0.1, seed=3)
    assert len(late.survivors) == 1
    assert late.pruning[0].startswith("round 0")


def test_short_list_on_random_table_is_empty():
    X = build_complete(12, 12)
    G = LocalAssignment.random(X, 4, seed=8).restricted_to(range(12))
    out = short_list(G, 0.5, 0, 0.1, seed=1, rounds=3)
    assert out.empty and out.survivors == []


def test_short_list_arguments():
    G = LocalAssignment.random(build_complete(8, 8), 3, seed=0).restricted_to(range(8))
    with pytest.raises(ArgumentError):
        short_list(G, 0.0)
    with pytest.raises(ArgumentError):
        short_list(G, 0.3, r=9, rounds=8)


@given(st.lists(words(10), min_size=1, max_size=8), st.floats(0.05, 0.6), st.integers(0, 3))
def test_prune_keeps_a_maximal_separated_set(functions, eta, r):
    trace = [
        ShortListRound(round=i, delta=0.3, function=f, agreement=0.5, randomized=1, randomized_measure=0.1)
        for i, f in enumerate(functions)
    ]
    kept, log = prune(trace, r, eta)
    kept_functions = [f for _, f in kept]
    for a, b in combinations(kept_functions, 2):
        assert distance(a, b) >= eta
    for entry in trace[r:]:
        assert any(distance(entry.function, f) < eta for f in kept_functions) or entry.function in kept_functions
    assert len(kept) + len(log) == len(trace)


@given(st.lists(st.tuples(words(8), st.floats(0, 1)), min_size=1, max_size=10), st.floats(0.05, 0.9))
def test_eta_cover_is_separated_and_covering(candidates, eta):
    kept = eta_cover(candidates, eta)
    for a, b in combinations(kept, 2):
        assert distance(a, b) > eta
    for f, _ in candidates:
        assert any(distance(f, g) <= eta for g in kept)
    best = max(range(len(candidates)), key=lambda i: (candidates[i][1], -i))
    assert kept[0] == candidates[best][0]


def test_radius_schedules():
    assert radius_schedule(0.1, "geometric", 3) == pytest.approx([0.1, 0.4, 1.0])
    ladder = radius_schedule(0.1, "ladder", 2)
    assert ladder[1] == pytest.approx(0.1 / 3.321928094887362)
    assert radius_schedule(0.4, "ladder", 2)[1] == pytest.approx(0.2)
    with pytest.raises(ArgumentError):
        radius_schedule(0.1, "spiral")
    with pytest.raises(ArgumentError):
        radius_schedule(0.0)


def test_local_decode_on_direct_product():
    X = build_complete(12, 6)
    F = LocalAssignment.direct_product(X, 4, F_12)
    decoded = local_decode(F, (0,), (1, 2, 3), trials=400, seed=2)
    assert decoded.cons.estimate == 1.0
    assert all(decoded.function[v] == F_12[v] for v in range(12) if v not in decoded.gaps)
    assert decoded.covered + len(decoded.gaps) == 11
    with pytest.raises(ArgumentError):
        local_decode(F, (0, 1), (1, 2))
    with pytest.raises(ArgumentError):
        local_decode(F, (0,), (1, 2))
    with pytest.raises(ArgumentError):
        local_decode(F, (), (1, 2, 3, 4))


def test_classify_pair():
    X = build_complete(12, 6)
    F = LocalAssignment.direct_product(X, 4, F_12)
    excellent = classify_pair(F, (0,), (1, 2, 3), eps=0.2, nu=0.1, h=0.1, trials=300, seed=1)
    assert excellent.pair_class == "excellent" and excellent.good
    assert excellent.defect == 0.0
    noisy = classify_pair(LocalAssignment.random(X, 4, seed=3), (0,), (1, 2, 3), eps=0.2, nu=0.01, h=0.1, trials=300, seed=1)
    assert noisy.pair_class == "good"
    assert noisy.defect > 0.01
    with pytest.raises(ArgumentError):
        classify_pair(F, (0, 1, 2), (3,), 0.2, 0.1, 0.1)


def test_list_size_census():
    ell, census, off = list_size_census({(0,): ("0", "1"), (1,): ("0", "1"), (2,): ("1",)})
    assert (ell, census, off) == (2, {1: 1, 2: 2}, 1)
    assert list_size_census({(0,): ("0",)}, ell=2)[2] == 1


def test_majority_project_of_planted_lists(rp2):
    X = build_complete(8, 4)
    f = "00110101"
    lists = {D: (restrict(f, D), restrict(complement(f), D)) for D in X.level(4)}
    projected, report = majority_project(lists, X, 2, samples=8)
    assert projected[(0, 1)] == tuple(sorted({restrict(f, (0, 1)), restrict(complement(f), (0, 1))}))
    assert report.stable_fraction == 1.0 and report.ell == 2 and report.off_size == 0
    assert not report.exact
    listed = {D: (restrict(f[:6], D),) for D in rp2.facets}
    projected, report = majority_project(listed, rp2, 1, samples=None)
    assert report.exact and projected[(2,)] == (f[2],)
    with pytest.raises(DimensionError):
        majority_project(lists, X, 5)


def planted_levels(X, functions, t):
    return [
        {B: tuple(sorted({restrict(f, B) for f in functions})) for B in X.level(level)}
        for level in (t, 2 * t, 3 * t)
    ]


def test_planted_lists_decode_through_unique_games():
    X = build_complete(7, 3)
    f = "0110100"
    lists_t, lists_2t, lists_3t = planted_levels(X, [f, complement(f)], 1)
    psi, built = build_ug_from_lists(X, 1, lists_t, lists_2t, lists_3t)
    assert built.ell == 2 and built.arbitrary_edges == 0 and built.irregular == 0
    audit, g = coboundary_audit(psi, mode="exact")
    assert audit.c_hat == pytest.approx(0.0, abs=1e-12)
    assert audit.strong_xi_hat == pytest.approx(0.0, abs=1e-12)
    R, selection = select_and_decode(X, psi, g, audit.c_hat, lists_2t=lists_2t)
    assert selection.function in (f, complement(f))
    assert selection.r_agreement == pytest.approx(1.0)
    assert not selection.failed
    assert selection.r_pass is None
    with pytest.raises(ArgumentError):
        select_and_decode(X, psi.without_lists(), g)
    assert select_and_decode(X, psi, g, c_hat=0.5)[1].failed


def test_irregular_lists_flag_their_edges():
    X = build_complete(7, 3)
    f = "0110100"
    lists_t, lists_2t, _ = planted_levels(X, [f, complement(f)], 1)
    lists_t[(0,)] = ("1",)
    _, built = build_ug_from_lists(X, 1, lists_t, lists_2t)
    assert built.irregular == 1 and built.arbitrary_edges == 6
    with pytest.raises(ArgumentError):
        build_ug_from_lists(X, 1, {(v,): ("0", "1", "1") for v in range(7)}, lists_2t, ell=3)


def test_subinstance_stability_of_a_direct_product():
    X = build_complete(12, 3)
    G = planted_assignment(X, 3, [F_12], seed=2)
    report = subinstance_stability(G, 6, restrictions=10, seed=4)
    assert report.full_value == pytest.approx(1.0)
    assert report.within == report.restrictions == 10
    assert max(report.deviations) == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(ArgumentError):
        subinstance_stability(G, 2)


@pytest.mark.slow
def test_decode_global_recovers_planted_function():
    X = build_complete(14, 8)
    f = "01101001110010"
    params = DecodeParams(s=3, seed=5)
    decoded, report = decode_global(planted_assignment(X, 5, [f], 0.05, seed=5), params)
    assert decoded == f
    assert report.halted_at is None
    assert all(stage.status != StageStatus.FAILED for stage in report.stages)
    assert [stage.stage for stage in report.stages][:3] == ["local_pass", "short_lists", "consistency"]
    assert report.stages[2].status == StageStatus.SKIPPED


def test_decode_global_halts_on_random_table():
    X = build_complete(14, 8)
    decoded, report = decode_global(LocalAssignment.random(X, 5, seed=9), DecodeParams(s=3, seed=9))
    assert decoded is None
    assert report.halted_at == "local_pass"
    assert report.stages[-1].status == StageStatus.FAILED
    with pytest.raises(DimensionError):
        decode_global(LocalAssignment.random(build_complete(8, 4), 2, seed=0), DecodeParams(t=2))


def test_fresh_agreement_ignores_randomized_leftovers():
    X = build_complete(12, 8)
    G = LocalAssignment.direct_product(X, 4, F_12).restricted_to((0, 1, 2, 3))
    out = short_list(G, 0.3, 0, 0.1, seed=2)
    # a single face: every round finds a perfect match for its fresh random string
    assert len(out.trace) == 8
    assert out.trace[0].function == F_12[:4] and out.trace[0].fresh_agreement == 1.0
    assert all(entry.fresh_agreement == 0.0 for entry in out.trace[1:])


def test_consistency_stage_is_green_on_a_direct_product():
    X = build_complete(12, 12)
    F = planted_assignment(X, 4, [F_12], seed=1)
    decoded, report = decode_global(F, DecodeParams(s=2, faces=3, consistency_faces=2))
    consistency = next(stage for stage in report.stages if stage.stage == "consistency")
    assert consistency.status == StageStatus.GREEN
    assert consistency.metrics["downward"] == 1.0 and consistency.metrics["upward"] == 1.0
    assert report.halted_at is None
    assert decoded == F_12


def test_selection_measures_r_only_above_t1():
    X = build_complete(8, 6)
    f = "00110101"
    lists_t, lists_2t, lists_3t = planted_levels(X, [f, complement(f)], 2)
    psi, built = build_ug_from_lists(X, 2, lists_t, lists_2t, lists_3t)
    assert built.arbitrary_edges == 0
    audit, g = coboundary_audit(psi, seed=1)
    _, selection = select_and_decode(X, psi, g, audit.c_hat, lists_2t=lists_2t, trials=2000)
    assert selection.function in (f, complement(f))
    assert selection.r_pass is not None
    assert selection.r_pass.estimate == pytest.approx(1.0)


def test_shield_audit_after_one_round():
    X = build_complete(16, 16)
    f = "0110100110010110"
    g = "".join(b if v % 2 else complement(b) for v, b in enumerate(f))
    G = planted_assignment(X, 8, [f, g], seed=4).restricted_to(range(16))
    audit = shield_audit(G, f, g, 1 / 16, seed=4)
    assert audit.separated and audit.distance == pytest.approx(0.5)
    assert audit.fresh_bound == pytest.approx(2 ** -8)
    # only the face of odd vertices avoids every coordinate where f and g differ
    assert audit.joint.report.estimate == pytest.approx(1 / comb(16, 8))
    assert audit.before == pytest.approx(audit.joint.report.estimate)
    assert audit.after <= audit.randomized_measure
    assert audit.holds
    with pytest.raises(ArgumentError):
        shield_audit(LocalAssignment.direct_product(X, 8, g).restricted_to(range(16)), complement(g), g, 0.1)
