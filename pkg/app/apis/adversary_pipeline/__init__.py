"""Lift strongly consistent level-t lists to k-faces and build the adversarial assignment.

A k-face A is consistent when every triangle of the Kneser graph K(A, t) is
consistent (strongly, when 3t-lists are attached). On such a face the m labelings
propagated from one root assemble m strings C_i ∈ {0,1}^k with C_i|_T = L(T)_{S_i(T)}.
"""

import logging
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
from fastapi import APIRouter, HTTPException
from pydantic import BaseModel, Field

from app.env import settings
from app.apis.complex_core import SimplicialComplex, build_complete
from app.apis.dp_test import (
    LocalAssignment,
    agr_set,
    agreement_landscape,
    bits_to_mask,
    mask_to_bits,
    planted_pass_probability,
    run_dp_test,
)
from app.apis.models import TestReport
from app.apis.ug_core import UGInstance, strong_ok, triangle_ok, planted_list_instance
from app.apis.utils import ArgumentError, DimensionError, Face, HdxError, InvariantError, make_rng, parallel_map, restrict

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/adversary")


def _kneser_triangles(A: Face, t: int):
    for u in combinations(A, t):
        rest = [x for x in A if x not in set(u)]
        for v in combinations(rest, t):
            if v < u:
                continue
            rest2 = [x for x in rest if x not in set(v)]
            for w in combinations(rest2, t):
                if w > v:
                    yield u, v, w


def lift_face(psi: UGInstance, A: Face, t: int) -> Tuple[Optional[Tuple[str, ...]], str]:
    """(sorted lifted list, status) for one k-face; the list is None when inconsistent."""
    strong = psi.lists3 is not None
    for tri in _kneser_triangles(A, t):
        if not triangle_ok(psi, tri) or (strong and not strong_ok(psi, tri)):
            return None, "inconsistent"
    vertices = list(combinations(A, t))
    K = nx.Graph()
    K.add_nodes_from(vertices)
    K.add_edges_from((u, v) for u, v in combinations(vertices, 2) if not set(u) & set(v))
    root = vertices[0]
    tree = list(nx.bfs_edges(K, root))
    strings = []
    for i in range(psi.m):
        labels = {root: i}
        for u, v in tree:
            labels[v] = psi.perm(u, v)[labels[u]]
        bits: Dict[int, str] = {}
        for T in vertices:
            for x, b in zip(T, psi.lists[T][labels[T]]):
                if bits.setdefault(x, b) != b:
                    if strong:
                        raise InvariantError(f"Assembly contradiction at vertex {x} of strongly consistent face {A}")
                    return None, "assembly"
        strings.append("".join(bits[x] for x in A))
    return tuple(sorted(set(strings))), "consistent"


class LiftedLists:
    """Per-face lifted lists; faces are lifted on demand and cached."""

    def __init__(self, X: SimplicialComplex, psi: UGInstance, k: int, t: int):
        self.X = X
        self.psi = psi
        self.k = k
        self.t = t
        self.m = psi.m
        self._faces: Dict[Face, Tuple[Optional[Tuple[str, ...]], str]] = {}
        self.fraction_consistent: Optional[float] = None
        self.fraction_report: Optional[TestReport] = None

    def lift(self, A: Sequence[int]) -> Tuple[Optional[Tuple[str, ...]], str]:
        A = tuple(A)
        if A not in self._faces:
            self._faces[A] = lift_face(self.psi, A, self.t)
        return self._faces[A]

    def __getitem__(self, A: Sequence[int]) -> Optional[Tuple[str, ...]]:
        return self.lift(A)[0]

    def entries(self, A: Sequence[int]) -> Tuple[str, ...]:
        """The lifted list, or the all-zeros string on inconsistent faces."""
        return self[A] or ("0" * self.k,)

    def census(self, seed: int = 0, samples: Optional[int] = None) -> float:
        """μ_k mass of consistent faces; exact when the level is small enough to lift entirely."""
        X, k = self.X, self.k
        if X.is_enumerable(k) and X.level_size_bound(k) <= settings.lift_enum_cap:
            weights = X.weights(k)
            faces = list(weights)
            statuses = parallel_map(lambda A: self.lift(A)[1], faces)
            self.fraction_consistent = float(sum(weights[A] for A, s in zip(faces, statuses) if s == "consistent"))
            self.fraction_report = TestReport.exact(
                sum(s == "consistent" for s in statuses), len(faces), self.fraction_consistent
            )
        else:
            samples = samples or 2000
            faces = [X.sample_face(k, make_rng(seed, "census", j)) for j in range(samples)]
            hits = sum(self.lift(A)[1] == "consistent" for A in faces)
            self.fraction_report = TestReport.monte_carlo(hits, samples, seed)
            self.fraction_consistent = self.fraction_report.estimate
        return self.fraction_consistent

    def items(self):
        return self._faces.items()

    def serialize(self) -> List[str]:
        """`face_ids ; status ; strings` per lifted face."""
        return [
            f"{','.join(map(str, A))} ; {status} ; {' '.join(entries or ())}"
            for A, (entries, status) in sorted(self._faces.items())
        ]


def lift_lists(X: SimplicialComplex, psi: UGInstance, k: int, seed: int = 0, samples: Optional[int] = None) -> LiftedLists:
    if psi.lists is None:
        raise ArgumentError("Lifting needs lists on the t-faces")
    t = len(psi.vertices[0])
    if k < 5 * t or k > X.d:
        raise DimensionError(f"Lifting needs 5t <= k <= d, got t={t}, k={k}, d={X.d}")
    lifted = LiftedLists(X, psi, k, t)
    fraction = lifted.census(seed, samples)
    logger.info(f"Lifted lists to level {k}: consistent mass {fraction:.4f}")
    return lifted


def build_adversarial_F(lists: LiftedLists, seed: int) -> LocalAssignment:
    """F[A] uniform from L(A), independently per face."""
    return LocalAssignment(
        lists.X,
        lists.k,
        entry=lambda A: make_rng(seed, "pick", A).choice(lists.entries(A)),
    )


def plurality_function(F: LocalAssignment, faces: Optional[Sequence[Face]] = None) -> str:
    """Per-vertex μ_k-weighted plurality of the bits F assigns; ties → 0."""
    n = F.X.n_vertices
    votes = np.zeros((n, 2))
    if faces is None:
        weights = F.X.weights(F.k)
        faces = list(weights)
        mass = [float(weights[A]) for A in faces]
    else:
        mass = [1.0] * len(faces)
    for A, w in zip(faces, mass):
        for x, b in zip(A, F[A]):
            votes[x, int(b)] += w
    return "".join("1" if votes[x, 1] > votes[x, 0] else "0" for x in range(n))


class GlobalAudit(BaseModel):
    best_function: str
    agreement: float
    provenance: str
    eps: float
    candidates: Dict[str, float] = Field(default_factory=dict)


def global_agreement_audit(
    F: LocalAssignment,
    eps: float,
    policy: str = "exhaustive",
    planted: Sequence[str] = (),
    decoded: Optional[Dict[str, str]] = None,
    seed: int = 0,
) -> GlobalAudit:
    """max_f μ_k{A : Δ(F[A], f|_A) ≤ ε} over all 2^n functions, or over named candidates."""
    candidates: Dict[str, str] = {f"planted_{i}": f for i, f in enumerate(planted)}
    if policy == "exhaustive":
        landscape = agreement_landscape(F, eps)
        best = int(np.argmax(landscape))
        scores = {name: float(landscape[bits_to_mask(f)]) for name, f in candidates.items()}
        return GlobalAudit(
            best_function=mask_to_bits(best, F.X.n_vertices),
            agreement=float(landscape[best]),
            provenance="exhaustive",
            eps=eps,
            candidates=scores,
        )
    if policy != "decoded":
        raise ArgumentError(f"Unknown candidate policy {policy!r}")
    faces = None
    if not F.X.is_enumerable(F.k):
        faces = [F.X.sample_face(F.k, make_rng(seed, "plurality", j)) for j in range(settings.default_trials // 10)]
    candidates["plurality"] = plurality_function(F, faces)
    candidates.update(decoded or {})
    scores = {name: agr_set(f, F, eps, seed=seed).measure for name, f in candidates.items()}
    name = max(sorted(scores), key=scores.get)
    return GlobalAudit(best_function=candidates[name], agreement=scores[name], provenance=name, eps=eps, candidates=scores)


class InducedLabeling(BaseModel):
    labels: Dict[str, int]
    unmatched: int
    value: float


def induced_labeling(psi: UGInstance, f: str) -> InducedLabeling:
    """I[T] = first list index whose entry equals f|_T (0 when none does), and val(I)."""
    labeling = {}
    unmatched = 0
    for T in psi.vertices:
        entries = psi.lists[T]
        piece = restrict(f, T)
        if piece in entries:
            labeling[T] = entries.index(piece)
        else:
            labeling[T] = 0
            unmatched += 1
    return InducedLabeling(
        labels={",".join(map(str, T)): i for T, i in labeling.items()},
        unmatched=unmatched,
        value=psi.value(labeling),
    )


class PlantedRunReport(BaseModel):
    fraction_consistent: float
    test: TestReport
    expected: float


def planted_adversary(
    X: SimplicialComplex,
    functions: Sequence[str],
    t: int,
    k: int,
    s: int,
    seed: int = 0,
    trials: Optional[int] = None,
    expectation_facets: int = 40,
) -> Tuple[PlantedRunReport, LiftedLists, LocalAssignment]:
    """Planted lists → lifted lists → adversarial F → tester, with the conditioned expectation."""
    psi = planted_list_instance(X, t, functions, seed)
    lists = lift_lists(X, psi, k, seed)
    F = build_adversarial_F(lists, seed)
    report = run_dp_test(F, k, s, "monte_carlo", trials, seed)
    facets = [X.sample_facet(make_rng(seed, "expectation", j)) for j in range(expectation_facets)]
    expected = planted_pass_probability(X, functions, k, s, facets)
    return PlantedRunReport(fraction_consistent=lists.fraction_consistent, test=report, expected=expected), lists, F


class PlantedRequest(BaseModel):
    n: int
    d: int
    k: int
    s: int
    t: int = 1
    functions: List[str]
    seed: int = 0
    trials: int = 20_000


@router.post("/planted", response_model=PlantedRunReport)
async def planted(body: PlantedRequest) -> PlantedRunReport:
    """Tester pass rate of the adversarial F built from planted global functions"""
    try:
        X = build_complete(body.n, body.d)
        report, _, _ = planted_adversary(X, body.functions, body.t, body.k, body.s, body.seed, body.trials, expectation_facets=5)
        return report
    except HdxError as e:
        logger.error(f"Planted adversary rejected: {e}")
        raise HTTPException(status_code=400, detail=str(e))
