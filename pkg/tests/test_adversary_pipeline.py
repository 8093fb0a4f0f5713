import pytest

from app.apis.adversary_pipeline import (
    build_adversarial_F,
    global_agreement_audit,
    induced_labeling,
    lift_face,
    lift_lists,
    planted_adversary,
    plurality_function,
)
from app.apis.complex_core import build_complete
from app.apis.dp_test import LocalAssignment
from app.apis.ug_core import SWAP, UGInstance, planted_list_instance, then
from app.apis.utils import ArgumentError, DimensionError, project, restrict


def complement(f: str) -> str:
    return "".join("1" if b == "0" else "0" for b in f)


F_10 = "0110100110"


def test_lift_face_recovers_planted_restrictions():
    X = build_complete(10, 6)
    psi = planted_list_instance(X, 1, [F_10, complement(F_10)], seed=3)
    A = (0, 2, 4, 6, 8)
    lifted, status = lift_face(psi, A, 1)
    assert status == "consistent"
    assert lifted == tuple(sorted({restrict(F_10, A), restrict(complement(F_10), A)}))
    weak, status = lift_face(psi.without_lists().with_lists(psi.lists, None), A, 1)
    assert status == "consistent" and weak == lifted


def test_lift_face_rejects_inconsistent_faces():
    X = build_complete(10, 6)
    psi = planted_list_instance(X, 1, [F_10, complement(F_10)], seed=3)
    pi = psi.stored()
    edge = ((0,), (2,))
    pi[edge] = then(pi[edge], SWAP)
    broken = UGInstance(psi.graph, 2, pi, psi.lists, psi.lists3)
    assert lift_face(broken, (0, 2, 4, 6, 8), 1) == (None, "inconsistent")
    assert lift_face(broken, (1, 3, 5, 7, 9), 1)[1] == "consistent"


def test_lift_lists_preconditions():
    X = build_complete(10, 6)
    psi = planted_list_instance(X, 1, [F_10, complement(F_10)])
    with pytest.raises(DimensionError):
        lift_lists(X, psi, 4)
    with pytest.raises(DimensionError):
        lift_lists(X, psi, 7)
    with pytest.raises(ArgumentError):
        lift_lists(X, psi.without_lists(), 5)


def test_planted_lists_lift_everywhere():
    X = build_complete(10, 6)
    psi = planted_list_instance(X, 1, [F_10, complement(F_10)], seed=1)
    lifted = lift_lists(X, psi, 5)
    assert lifted.fraction_consistent == pytest.approx(1.0)
    assert lifted.fraction_report.trials == 252
    assert all(line.count(";") == 2 for line in lifted.serialize())
    F = build_adversarial_F(lifted, seed=2)
    for A in X.level(5)[:20]:
        assert F[A] in lifted[A]


def test_planted_adversary_matches_conditioned_expectation():
    X = build_complete(10, 6)
    report, lists, _ = planted_adversary(X, [F_10, complement(F_10)], 1, 5, 2, seed=4, trials=4000, expectation_facets=5)
    assert report.fraction_consistent == pytest.approx(1.0)
    # four 5-faces of a facet contain each 2-face; distinct faces pass iff both pick the same function
    assert report.expected == pytest.approx(1 / 4 + (3 / 4) / 2)
    assert abs(report.test.estimate - report.expected) <= 0.04


def test_exhaustive_audit_on_direct_product():
    X = build_complete(8, 4)
    f = "01101001"
    F = LocalAssignment.direct_product(X, 4, f)
    audit = global_agreement_audit(F, 0.0, planted=[f])
    assert audit.best_function == f
    assert audit.agreement == pytest.approx(1.0)
    assert audit.candidates == {"planted_0": pytest.approx(1.0)}
    assert plurality_function(F) == f


def test_adversarial_F_has_no_good_global_function():
    X = build_complete(12, 6)
    f = "011010011100"
    lifted = lift_lists(X, planted_list_instance(X, 1, [f, complement(f)], seed=2), 5)
    F = build_adversarial_F(lifted, seed=5)
    audit = global_agreement_audit(F, 0.0, planted=[f, complement(f)])
    assert audit.agreement <= 0.6
    assert all(score >= 0.4 for score in audit.candidates.values())
    decoded = global_agreement_audit(F, 0.0, policy="decoded", decoded={"f": f})
    assert decoded.candidates["f"] == pytest.approx(audit.candidates["planted_0"])
    assert decoded.candidates["f"] <= decoded.agreement <= audit.agreement + 1e-9
    with pytest.raises(ArgumentError):
        global_agreement_audit(F, 0.0, policy="oracle")


def test_induced_labeling_reads_lists():
    X = build_complete(8, 6)
    f = "00110101"
    psi = planted_list_instance(X, 2, [f, complement(f)], seed=7)
    induced = induced_labeling(psi, f)
    assert induced.unmatched == 0
    assert induced.value == pytest.approx(1.0)
    flipped = ("1" if f[0] == "0" else "0") + f[1:]
    assert induced_labeling(psi, flipped).unmatched == 7


def test_lifting_commutes_with_restriction():
    X = build_complete(10, 6)
    psi = planted_list_instance(X, 1, [F_10, complement(F_10)], seed=3)
    pi = psi.stored()
    edge = ((0,), (2,))
    pi[edge] = then(pi[edge], SWAP)
    broken = UGInstance(psi.graph, 2, pi, psi.lists, psi.lists3)
    outer, inner = lift_lists(X, broken, 6), lift_lists(X, broken, 5)
    checked = 0
    for A in X.level(6)[:60]:
        if outer[A] is None:
            assert {0, 2} <= set(A)
            continue
        for drop in A:
            B = tuple(v for v in A if v != drop)
            assert {project(A, x, B) for x in outer[A]} == set(inner[B])
            checked += 1
    assert checked > 0
