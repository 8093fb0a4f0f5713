"""List decoding of agreement tables.

Per top face D the short list algorithm repeatedly finds a function agreeing with F|_D,
re-randomizes the faces it explains and records it. Lists are projected to low levels
by weighted majority, turned into a Unique-Games instance, and a coboundary labeling
selects one entry per t-face; per-vertex plurality then gives the global function.
Plurality ties are broken toward 0 everywhere.
"""

import logging
from collections import Counter, defaultdict
from itertools import product
from math import comb, floor, log2
from typing import Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from fastapi import APIRouter, HTTPException
from pydantic import BaseModel, Field
from scipy.stats import binom

from app.env import settings
from app.apis.complex_core import ComplexSpecRequest, SimplicialComplex, build_complete, build_from_spec, constraint_graph
from app.apis.dp_test import (
    AUTO,
    JointAgreement,
    LocalAssignment,
    agr_set,
    agreement_landscape,
    joint_agreement,
    landscape_from_table,
    localized_pass,
    mask_to_bits,
    run_dp_test,
    run_list_agreement_test,
)
from app.apis.models import StageReport, StageStatus, TestReport
from app.apis.ug_core import UGInstance, coboundary_audit, identity, inverse, select_labeling, then
from app.apis.utils import (
    ArgumentError,
    DimensionError,
    Face,
    HdxError,
    InvariantError,
    distance,
    interleave,
    make_rng,
    mix_seed,
    parallel_map,
    project,
    random_bits,
    restrict,
)

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/decoder")

EXHAUSTIVE = "exhaustive"
HEURISTIC = "heuristic"

Lists = Union[Mapping[Face, Sequence[str]], Callable[[Face], Sequence[str]]]


def _lookup(lists: Lists) -> Callable[[Face], Sequence[str]]:
    return lists if callable(lists) else (lambda A: lists.get(A, ()))


def planted_assignment(
    X: SimplicialComplex, k: int, functions: Sequence[str], corruption: float = 0.0, seed: int = 0
) -> LocalAssignment:
    """F[A] = f|_A for f uniform among `functions`, replaced by uniform bits with probability `corruption`."""
    if not functions:
        raise ArgumentError("Need at least one planted function")
    if any(len(f) != X.n_vertices for f in functions):
        raise ArgumentError(f"Planted functions must have {X.n_vertices} bits")

    def entry(A: Face) -> str:
        rng = make_rng(seed, "planted", A)
        if rng.random() < corruption:
            return random_bits(rng, k)
        return restrict(functions[rng.randrange(len(functions))], A)

    return LocalAssignment(X, k, entry=entry)


class BestFunction(NamedTuple):
    # bits over `domain`, one per vertex in sorted order
    function: str
    agreement: float
    method: str
    domain: Face


def _domain(G: LocalAssignment) -> Tuple[List[Tuple[Face, str]], List[float], Face]:
    items = list(G.items())
    if not items:
        raise ArgumentError("Assignment has an empty domain")
    if G.lazy:
        weights = G.X.weights(G.k)
        mass = [float(weights[A]) for A, _ in items]
    else:
        mass = [1.0 / len(items)] * len(items)
    domain = tuple(sorted({v for A, _ in items for v in A}))
    return items, mass, domain


class _Scorer:
    """Incremental agr_ε over a fixed table, for bit-flip ascent."""

    def __init__(self, items: Sequence[Tuple[Face, str]], mass: Sequence[float], domain: Face, eps: float):
        pos = {v: j for j, v in enumerate(domain)}
        self.faces = [[pos[v] for v in A] for A, _ in items]
        self.entries = [bits for _, bits in items]
        self.mass = list(mass)
        self.budget = floor(eps * len(items[0][0]) + 1e-9)
        self.incident: Dict[int, List[Tuple[int, int]]] = defaultdict(list)
        for idx, positions in enumerate(self.faces):
            for slot, j in enumerate(positions):
                self.incident[j].append((idx, slot))

    def mismatches(self, f: List[str]) -> List[int]:
        return [sum(f[j] != e for j, e in zip(positions, entry)) for positions, entry in zip(self.faces, self.entries)]

    def score(self, f: Sequence[str]) -> float:
        return sum(w for w, miss in zip(self.mass, self.mismatches(list(f))) if miss <= self.budget)

    def ascend(self, f: str, max_passes: int = 20) -> str:
        bits = list(f)
        miss = self.mismatches(bits)
        for _ in range(max_passes):
            improved = False
            for j in range(len(bits)):
                gain = 0.0
                for idx, slot in self.incident[j]:
                    after = miss[idx] + (1 if bits[j] == self.entries[idx][slot] else -1)
                    gain += self.mass[idx] * ((after <= self.budget) - (miss[idx] <= self.budget))
                if gain > 1e-15:
                    for idx, slot in self.incident[j]:
                        miss[idx] += 1 if bits[j] == self.entries[idx][slot] else -1
                    bits[j] = "1" if bits[j] == "0" else "0"
                    improved = True
            if not improved:
                break
        return "".join(bits)


def _plurality(items: Sequence[Tuple[Face, str]], mass: Sequence[float], domain: Face) -> str:
    pos = {v: j for j, v in enumerate(domain)}
    votes = np.zeros((len(domain), 2))
    for (A, bits), w in zip(items, mass):
        for v, b in zip(A, bits):
            votes[pos[v], int(b)] += w
    return "".join("1" if votes[j, 1] > votes[j, 0] else "0" for j in range(len(domain)))


def best_agreeing_function(
    G: LocalAssignment,
    eps: float = 0.0,
    method: str = AUTO,
    seed: int = 0,
    decode_pairs: int = 4,
    trials: int = 2000,
) -> BestFunction:
    """The function on G's domain with the largest agr_ε found.

    Exhaustive over all 2^|D| functions when |D| is small enough; otherwise the best of
    per-vertex plurality and local decodes, each refined by greedy bit flips.
    """
    items, mass, domain = _domain(G)
    if method == AUTO:
        method = EXHAUSTIVE if len(domain) <= settings.exhaustive_n_cap else HEURISTIC
    if method == EXHAUSTIVE:
        landscape = landscape_from_table(items, mass, domain, eps)
        best = int(np.argmax(landscape))
        return BestFunction(mask_to_bits(best, len(domain)), min(1.0, max(0.0, float(landscape[best]))), EXHAUSTIVE, domain)
    if method != HEURISTIC:
        raise ArgumentError(f"Unknown search method {method!r}")
    scorer = _Scorer(items, mass, domain, eps)
    candidates = [_plurality(items, mass, domain)]
    k = G.k
    full = not G.lazy and len(items) == comb(len(domain), k)
    if k >= 2 and (full or G.lazy):
        a = max(1, k // 4)
        for j in range(decode_pairs):
            rng = make_rng(seed, "pair", j)
            A = rng.choice(items)[0]
            A0 = tuple(sorted(rng.sample(A, a)))
            B0 = tuple(v for v in A if v not in set(A0))
            decoded = local_decode(G, A0, B0, trials, mix_seed(seed, "decode", j), within=None if G.lazy else domain)
            candidates.append(decoded.function if not G.lazy else "".join(decoded.function[v] for v in domain))
    refined = [scorer.ascend(f) for f in candidates]
    scores = [scorer.score(f) for f in refined]
    best = max(range(len(refined)), key=lambda i: (round(scores[i], 12), -i))
    return BestFunction(refined[best], scores[best], HEURISTIC, domain)


class ShortListRound(BaseModel):
    round: int
    delta: float
    function: str
    agreement: float
    randomized: int
    randomized_measure: float
    # agreement with the input table outside faces claimed by earlier rounds
    fresh_agreement: Optional[float] = None


class ShortListOutput(BaseModel):
    face: List[int]
    survivors: List[Tuple[int, str]]
    trace: List[ShortListRound]
    deltas: List[float]
    pruning: List[str] = Field(default_factory=list)
    r: int
    eta: float
    size_bound: float
    within_bound: bool
    empty: bool

    @property
    def functions(self) -> List[str]:
        return [f for _, f in self.survivors]


def prune(trace: Sequence[ShortListRound], r: int, eta: float) -> Tuple[List[Tuple[int, str]], List[str]]:
    """Greedy maximal independent set, in round order, of the rounds ≥ r; f and g are adjacent when Δ < η."""
    kept: List[Tuple[int, str]] = []
    log: List[str] = []
    for entry in trace:
        if entry.round < r:
            log.append(f"round {entry.round}: below r={r}")
            continue
        clash = next((i for i, f in kept if distance(f, entry.function) < eta), None)
        if clash is None:
            kept.append((entry.round, entry.function))
        else:
            log.append(f"round {entry.round}: within {eta} of round {clash}")
    return kept, log


def short_list(
    G: LocalAssignment,
    delta: float,
    r: int = 0,
    eta: float = 0.1,
    seed: int = 0,
    eps: float = 0.0,
    rounds: int = 8,
    decrement: Optional[float] = None,
    method: str = AUTO,
) -> ShortListOutput:
    """Find-and-randomize rounds on G, then prune the rounds ≥ r at radius η."""
    if not 0 < delta < 1:
        raise ArgumentError(f"δ must lie in (0,1), got {delta}")
    if r < 0 or r > rounds:
        raise ArgumentError(f"Round index r={r} outside [0, {rounds}]")
    step = delta / 16 if decrement is None else decrement
    table = dict(G.items())
    original = dict(table)
    claimed = set()
    domain = tuple(sorted({v for A in table for v in A}))
    total = len(table)
    trace: List[ShortListRound] = []
    deltas: List[float] = []
    level = delta
    best: Optional[BestFunction] = None
    for i in range(rounds):
        deltas.append(level)
        if best is None:
            best = best_agreeing_function(LocalAssignment(G.X, G.k, table=table), eps, method, mix_seed(seed, "search", i))
        if best.agreement > level:
            hits = [A for A, bits in table.items() if distance(project(domain, best.function, A), bits) <= eps]
            fresh = sum(
                1 for A, bits in original.items() if A not in claimed and distance(project(domain, best.function, A), bits) <= eps
            )
            claimed.update(hits)
            for A in hits:
                table[A] = random_bits(make_rng(seed, "round", i, A), G.k)
            trace.append(
                ShortListRound(
                    round=i,
                    delta=level,
                    function=best.function,
                    agreement=best.agreement,
                    randomized=len(hits),
                    randomized_measure=len(hits) / total,
                    fresh_agreement=fresh / total,
                )
            )
            best = None
        level -= step
    if not trace:
        logger.warning(f"Short list on {domain[:6]}... found nothing above δ={delta}; the face did not pass locally")
    survivors, log = prune(trace, r, eta)
    final = max(deltas[-1], 1e-12) if deltas else delta
    return ShortListOutput(
        face=list(domain),
        survivors=survivors,
        trace=trace,
        deltas=deltas,
        pruning=log,
        r=r,
        eta=eta,
        size_bound=2 / final,
        within_bound=len(trace) <= 2 / final,
        empty=not trace,
    )


class ShieldAudit(BaseModel):
    distance: float
    separated: bool
    randomized: int
    randomized_measure: float
    before: float
    after: float
    fresh_rate: TestReport
    fresh_bound: float
    joint: JointAgreement
    holds: bool


def shield_audit(G: LocalAssignment, f: str, g: str, nu: float, eps: float = 0.0, seed: int = 0) -> ShieldAudit:
    """What g can take from Agr_ε(f, G) once a short-list round re-randomizes it.

    `before` and `after` are the mass of randomized faces where g is within ν of the table,
    counted exactly on the same stream short_list uses for round 0. A fresh uniform string
    is within ν of g|_A with probability Pr[Bin(k, 1/2) ≤ kν].
    """
    table = dict(G.items())
    if not table:
        raise ArgumentError("Assignment has an empty domain")
    k = G.k
    domain = tuple(sorted({v for A in table for v in A}))
    region = [A for A, bits in table.items() if distance(restrict(f, A), bits) <= eps]
    if not region:
        raise ArgumentError("f agrees with no face of the table")
    before = sum(distance(restrict(g, A), table[A]) <= nu for A in region)
    after = sum(distance(restrict(g, A), random_bits(make_rng(seed, "round", 0, A), k)) <= nu for A in region)
    fresh_rate = TestReport.monte_carlo(after, len(region), seed)
    fresh_bound = float(binom.cdf(floor(k * nu + 1e-9), k, 0.5))
    joint = joint_agreement(f, g, G, nu, domain, seed=seed)
    holds = fresh_rate.ci_lo <= fresh_bound and (joint.holds or not joint.separated)
    return ShieldAudit(
        distance=joint.distance,
        separated=joint.separated,
        randomized=len(region),
        randomized_measure=len(region) / len(table),
        before=before / len(table),
        after=after / len(table),
        fresh_rate=fresh_rate,
        fresh_bound=fresh_bound,
        joint=joint,
        holds=holds,
    )


def radius_schedule(eta: float, schedule: str = "geometric", steps: int = 2) -> List[float]:
    """Prune radii η_0 = η, η_1, ...: `geometric` multiplies by 4, `ladder` divides by max(2, log2(1/η_i))."""
    if not 0 < eta < 1:
        raise ArgumentError(f"η must lie in (0,1), got {eta}")
    radii = [eta]
    for _ in range(steps - 1):
        last = radii[-1]
        if schedule == "geometric":
            radii.append(min(1.0, last * 4))
        elif schedule == "ladder":
            radii.append(last / max(2.0, log2(1 / last)))
        else:
            raise ArgumentError(f"Unknown radius schedule {schedule!r}")
    return radii


def eta_cover(candidates: Sequence[Tuple[str, float]], eta: float) -> List[str]:
    """Greedy by decreasing agreement: keep a candidate iff it is more than η from every kept one."""
    ranked = sorted(range(len(candidates)), key=lambda i: (-candidates[i][1], i))
    kept: List[str] = []
    for i in ranked:
        f = candidates[i][0]
        if all(distance(f, g) > eta for g in kept):
            kept.append(f)
    for f, _ in candidates:
        if not any(distance(f, g) <= eta for g in kept):
            raise InvariantError(f"{f} is not covered at radius {eta}")
    return kept


def _extend(F: LocalAssignment, base: Face, size: int, within: Optional[Face], rng) -> Face:
    """`size` vertices outside `base` drawn so that base ∪ result is a face (inside `within` when given)."""
    taken = set(base)
    if within is not None:
        pool = [v for v in within if v not in taken]
    else:
        pool = [v for v in F.X.sample_facet_containing(base, rng) if v not in taken]
    if len(pool) < size:
        raise DimensionError(f"Cannot extend {base} by {size} vertices")
    return tuple(sorted(rng.sample(pool, size)))


def _joined(A0: Face, B: Face) -> Face:
    return tuple(sorted(A0 + B))


def _checked_pair(F: LocalAssignment, A0: Sequence[int], B0: Sequence[int]) -> Tuple[Face, Face, str]:
    A0, B0 = tuple(sorted(A0)), tuple(sorted(B0))
    if len(A0) < 1:
        raise ArgumentError("αk < 1: A₀ must hold at least one vertex")
    if set(A0) & set(B0):
        raise ArgumentError(f"A₀ = {A0} and B₀ = {B0} intersect")
    if len(A0) + len(B0) != F.k:
        raise ArgumentError(f"|A₀| + |B₀| = {len(A0) + len(B0)}, expected k = {F.k}")
    union = _joined(A0, B0)
    return A0, B0, project(union, F[union], A0)


class LocalDecode(NamedTuple):
    # bits over `within` (or all vertices); A₀ carries F[A₀ ∪ B₀]|_{A₀}
    function: str
    covered: int
    gaps: Tuple[int, ...]
    cons: TestReport


def local_decode(
    F: LocalAssignment,
    A0: Sequence[int],
    B0: Sequence[int],
    trials: int = 2000,
    seed: int = 0,
    within: Optional[Sequence[int]] = None,
) -> LocalDecode:
    """Per-vertex plurality of F[A₀ ∪ B] over sampled B ∈ Cons(A₀, B₀)."""
    A0, B0, reference = _checked_pair(F, A0, B0)
    within = tuple(within) if within is not None else None
    ground = within if within is not None else tuple(range(F.X.n_vertices))
    votes: Dict[int, List[int]] = defaultdict(lambda: [0, 0])
    hits = 0
    for j in range(trials):
        B = _extend(F, A0, len(B0), within, make_rng(seed, "cons", j))
        union = _joined(A0, B)
        bits = F[union]
        if project(union, bits, A0) != reference:
            continue
        hits += 1
        for v, b in zip(union, bits):
            if v not in A0:
                votes[v][int(b)] += 1
    fixed = dict(zip(A0, reference))
    out, gaps = [], []
    for v in ground:
        if v in fixed:
            out.append(fixed[v])
        elif v in votes:
            zero, one = votes[v]
            out.append("1" if one > zero else "0")
        else:
            out.append("0")
            gaps.append(v)
    if gaps:
        logger.info(f"Local decode of {A0}|{B0}: {len(gaps)} vertices never covered by a consistent sample")
    return LocalDecode("".join(out), len(ground) - len(gaps) - len(A0), tuple(gaps), TestReport.monte_carlo(hits, trials, seed))


class PairClass(BaseModel):
    a0: List[int]
    b0: List[int]
    cons_measure: float
    cons: TestReport
    defect: Optional[float] = None
    pair_class: str
    local_decode: Optional[str] = None
    coverage_gap: List[int] = Field(default_factory=list)

    @property
    def good(self) -> bool:
        return self.pair_class in ("good", "excellent")


def classify_pair(
    F: LocalAssignment,
    A0: Sequence[int],
    B0: Sequence[int],
    eps: float,
    nu: float,
    h: float,
    trials: int = 2000,
    seed: int = 0,
    within: Optional[Sequence[int]] = None,
) -> PairClass:
    """Good: Pr[B ∈ Cons(A₀,B₀)] ≥ ε/2. Excellent: also Pr over shared-E pairs (D₁∪E, D₂∪E), both
    consistent, that F disagrees on E in more than an h fraction is at most ν."""
    A0, B0, reference = _checked_pair(F, A0, B0)
    a, b = len(A0), len(B0)
    if b < a:
        raise ArgumentError(f"Excellence needs |B₀| >= |A₀|, got {b} < {a}")
    within = tuple(within) if within is not None else None

    def consistent(B: Face) -> bool:
        union = _joined(A0, B)
        return project(union, F[union], A0) == reference

    hits = sum(consistent(_extend(F, A0, b, within, make_rng(seed, "good", j))) for j in range(trials))
    cons = TestReport.monte_carlo(hits, trials, seed)
    if cons.estimate < eps / 2:
        return PairClass(a0=list(A0), b0=list(B0), cons_measure=cons.estimate, cons=cons, pair_class="bad")
    bad = 0
    for j in range(trials):
        rng = make_rng(seed, "excellent", j)
        E = _extend(F, A0, a, within, rng)
        D1 = _extend(F, _joined(A0, E), b - a, within, rng)
        D2 = _extend(F, _joined(A0, E), b - a, within, rng)
        B1, B2 = _joined(D1, E), _joined(D2, E)
        if not (consistent(B1) and consistent(B2)):
            continue
        U1, U2 = _joined(A0, B1), _joined(A0, B2)
        bad += distance(project(U1, F[U1], E), project(U2, F[U2], E)) > h
    defect = bad / trials
    decoded = local_decode(F, A0, B0, trials, mix_seed(seed, "decode"), within)
    return PairClass(
        a0=list(A0),
        b0=list(B0),
        cons_measure=cons.estimate,
        cons=cons,
        defect=defect,
        pair_class="excellent" if defect <= nu else "good",
        local_decode=decoded.function,
        coverage_gap=list(decoded.gaps),
    )


def list_size_census(lists: Mapping[Face, Sequence[str]], ell: Optional[int] = None) -> Tuple[int, Dict[int, int], int]:
    """(ℓ, histogram of list sizes, faces whose list size differs from ℓ); ℓ defaults to the most common size."""
    census = Counter(len(entries) for entries in lists.values())
    if ell is None:
        ell = max(sorted(census), key=census.get) if census else 0
    off = sum(c for size, c in census.items() if size != ell)
    return ell, dict(sorted(census.items())), off


class ProjectionReport(BaseModel):
    level: int
    faces: int
    skipped: int
    exact: bool
    stable_fraction: float
    mean_majority_mass: float
    ell: int
    size_census: Dict[int, int]
    off_size: int


def majority_project(
    lists: Lists,
    X: SimplicialComplex,
    t: int,
    samples: Optional[int] = 8,
    threshold: float = 0.1,
    seed: int = 0,
    ell: Optional[int] = None,
) -> Tuple[Dict[Face, Tuple[str, ...]], ProjectionReport]:
    """L[B] = the most weighted value of L[D]|_B over top faces D ⊇ B (a sorted tuple of distinct strings).

    Every D containing B is used when the complex lists few enough of them; otherwise
    `samples` facets are drawn from μ_d conditioned on B.
    """
    if not 1 <= t <= X.d:
        raise DimensionError(f"Projection level t={t} outside [1, {X.d}]")
    lookup = _lookup(lists)
    faces = X.level(t)

    def project_face(B: Face) -> Tuple[Optional[Tuple[str, ...]], float, bool]:
        if not X.is_complete and (samples is None or len(X.facets_containing(B)) <= samples):
            tops, exact = X.facets_containing(B), True
        else:
            tops = [X.sample_facet_containing(B, make_rng(seed, "project", B, j)) for j in range(samples or 8)]
            exact = False
        votes: Counter = Counter()
        for D in tops:
            entries = lookup(D)
            if entries:
                votes[tuple(sorted({project(D, x, B) for x in entries}))] += 1
        if not votes:
            return None, 0.0, exact
        winner = max(sorted(votes), key=votes.get)
        return winner, votes[winner] / sum(votes.values()), exact

    results = parallel_map(project_face, list(faces))
    projected: Dict[Face, Tuple[str, ...]] = {}
    masses = []
    exact = True
    for B, (winner, share, face_exact) in zip(faces, results):
        exact = exact and face_exact
        if winner is None:
            continue
        projected[B] = winner
        masses.append(share)
    skipped = len(faces) - len(projected)
    if skipped:
        logger.warning(f"Majority projection to level {t}: {skipped} faces had no listed top face")
    ell, census, off = list_size_census(projected, ell)
    return projected, ProjectionReport(
        level=t,
        faces=len(faces),
        skipped=skipped,
        exact=exact,
        stable_fraction=sum(m >= 1 - threshold for m in masses) / len(masses) if masses else 0.0,
        mean_majority_mass=float(np.mean(masses)) if masses else 0.0,
        ell=ell,
        size_census=census,
        off_size=off,
    )


class ListGraphReport(BaseModel):
    ell: int
    irregular: int
    arbitrary_edges: int
    arbitrary_mass: float


def _regularize(entries: Sequence[str], ell: int, t: int) -> Tuple[Tuple[str, ...], bool]:
    """Exactly ℓ distinct strings: truncate, or pad with the smallest missing strings of length t."""
    distinct = list(dict.fromkeys(entries))
    if len(distinct) == ell and len(entries) == ell:
        return tuple(distinct), False
    distinct = distinct[:ell]
    for bits in product("01", repeat=t):
        if len(distinct) == ell:
            break
        word = "".join(bits)
        if word not in distinct:
            distinct.append(word)
    return tuple(distinct), True


def build_ug_from_lists(
    X: SimplicialComplex,
    t: int,
    lists_t: Mapping[Face, Sequence[str]],
    lists_2t: Mapping[Face, Sequence[str]],
    lists_3t: Optional[Mapping[Face, Sequence[str]]] = None,
    ell: Optional[int] = None,
) -> Tuple[UGInstance, ListGraphReport]:
    """π(u,v) is the unique reindexing with L[u∪v] = {L[u]_i ∘ L[v]_π(i)}; elsewhere identity, flagged arbitrary."""
    graph = constraint_graph(X, t)
    ell = ell or list_size_census(dict(lists_t))[0]
    if ell < 1:
        raise ArgumentError("Lists at level t are empty")
    if 2 ** t < ell:
        raise ArgumentError(f"ℓ = {ell} lists cannot fit in {{0,1}}^{t}")
    lists: Dict[Face, Tuple[str, ...]] = {}
    irregular = set()
    for u in graph.vertices:
        lists[u], bad = _regularize(lists_t.get(u, ()), ell, t)
        if bad:
            irregular.add(u)
    pi = {}
    arbitrary = []
    for (u, v) in graph.edges:
        W = tuple(sorted(u + v))
        LW = tuple(lists_2t.get(W, ()))
        mapping = None
        if u not in irregular and v not in irregular and len(LW) == ell and len(set(LW)) == ell:
            parts = [(project(W, x, u), project(W, x, v)) for x in LW]
            if {p for p, _ in parts} == set(lists[u]) and {q for _, q in parts} == set(lists[v]):
                mapping = {lists[u].index(p): lists[v].index(q) for p, q in parts}
                if len(mapping) != ell or len(set(mapping.values())) != ell:
                    mapping = None
        if mapping is None:
            pi[(u, v)] = identity(ell)
            arbitrary.append((u, v))
        else:
            pi[(u, v)] = tuple(mapping[i] for i in range(ell))
    lists3 = {T: tuple(sorted(set(entries))) for T, entries in lists_3t.items()} if lists_3t is not None else None
    psi = UGInstance(graph, ell, pi, lists, lists3, arbitrary)
    mass = sum(graph.edges[e] for e in psi.arbitrary)
    if irregular:
        logger.info(f"{len(irregular)} t-faces had lists of the wrong size; their edges are arbitrary")
    return psi, ListGraphReport(ell=ell, irregular=len(irregular), arbitrary_edges=len(psi.arbitrary), arbitrary_mass=mass)


class Selection(BaseModel):
    function: str
    # None at t = 1: every intersecting pair of 1-faces is the same face
    r_pass: Optional[TestReport] = None
    r_agreement: float
    failed: bool
    c_hat: Optional[float] = None


def select_and_decode(
    X: SimplicialComplex,
    psi: UGInstance,
    g: Mapping,
    c_hat: Optional[float] = None,
    threshold: float = 0.1,
    lists_2t: Optional[Mapping[Face, Sequence[str]]] = None,
    trials: Optional[int] = None,
    seed: int = 0,
) -> Tuple[Dict[Face, str], Selection]:
    """R(u) = L[u]_{h(u)} with h(u) = g(u)⁻¹(0), then the per-vertex μ_t-weighted plurality of R."""
    if psi.lists is None:
        raise ArgumentError("Selection needs lists on the t-faces")
    h = select_labeling(dict(g))
    R = {u: psi.lists[u][h[u]] for u in psi.vertices}
    for (u, v), p in psi.stored().items():
        if (u, v) in psi.arbitrary or p != then(g[u], inverse(g[v])):
            continue
        if lists_2t is not None:
            joined = interleave([(u, R[u]), (v, R[v])])
            if joined[1] not in lists_2t.get(joined[0], ()):
                raise InvariantError(f"R({u}) and R({v}) do not concatenate to a member of L[{joined[0]}]")
        elif p[h[u]] != h[v]:
            raise InvariantError(f"Selected labels violate explained edge {(u, v)}")
    votes = np.zeros((X.n_vertices, 2))
    for u, bits in R.items():
        w = float(X.weight(u))
        for x, b in zip(u, bits):
            votes[x, int(b)] += w
    function = "".join("1" if votes[x, 1] > votes[x, 0] else "0" for x in range(X.n_vertices))
    t = len(psi.vertices[0])
    r_pass = None
    if t >= 2:
        r_pass = run_dp_test(LocalAssignment(X, t, table=R), t, max(1, t // 2), AUTO, trials, seed)
    else:
        logger.info("Direct-product pass rate of R is not measured at t = 1")
    total = sum(float(X.weight(u)) for u in R)
    agree = sum(float(X.weight(u)) for u, bits in R.items() if restrict(function, u) == bits)
    failed = c_hat is not None and c_hat > threshold
    if failed:
        logger.warning(f"ĉ = {c_hat:.4f} above {threshold}; the selected function is unreliable")
    return R, Selection(
        function=function,
        r_pass=r_pass,
        r_agreement=agree / total if total else 0.0,
        failed=failed,
        c_hat=c_hat,
    )


class StabilityReport(BaseModel):
    full_value: float
    values: List[float]
    deviations: List[float]
    within: int
    restrictions: int
    tolerance: float


def subinstance_stability(
    G: LocalAssignment,
    q: int,
    restrictions: int = 50,
    eps: float = 0.0,
    seed: int = 0,
    tolerance: float = 0.1,
) -> StabilityReport:
    """max_g agr_ε(g, G) against the same maximum on random q-vertex restrictions, both exhaustive."""
    X = G.X
    n = X.n_vertices
    if not G.k <= q <= n:
        raise ArgumentError(f"Restriction size q={q} outside [{G.k}, {n}]")
    full = float(np.max(agreement_landscape(G, eps)))
    weights = X.weights(G.k)
    items = list(G.items())
    values, deviations = [], []
    for j in range(restrictions):
        Q = tuple(sorted(make_rng(seed, "Q", j).sample(range(n), q)))
        inside = set(Q)
        local = [(A, bits) for A, bits in items if inside.issuperset(A)]
        mass = np.array([float(weights[A]) for A, _ in local])
        if not local or mass.sum() <= 0:
            raise ArgumentError(f"Restriction {Q} holds no k-faces")
        value = float(np.max(landscape_from_table(local, list(mass / mass.sum()), Q, eps)))
        values.append(value)
        deviations.append(abs(value - full))
    within = sum(dev <= tolerance for dev in deviations)
    logger.info(f"Sub-instance stability: {within}/{restrictions} restrictions within {tolerance} of {full:.4f}")
    return StabilityReport(
        full_value=full, values=values, deviations=deviations, within=within, restrictions=restrictions, tolerance=tolerance
    )


class DecodeParams(BaseModel):
    s: Optional[int] = None
    t: int = 1
    delta: float = 0.3
    eps: float = 0.0
    nu: float = 0.1
    eta: float = 0.1
    rounds: int = 8
    decrement: Optional[float] = None
    schedule: str = "geometric"
    radius_steps: int = 2
    r_grid: int = 1
    faces: int = 24
    local_threshold: float = 0.35
    min_good_fraction: float = 0.5
    consistency_faces: int = 8
    consistency_threshold: float = 0.8
    list_trials: int = 200
    list_threshold: float = 0.5
    projection_samples: int = 6
    stability_threshold: float = 0.8
    strong_lists: bool = True
    max_arbitrary: float = 0.2
    coboundary_mode: str = "auto"
    restarts: int = 8
    c_threshold: float = 0.1
    min_agreement: float = 0.3
    trials: Optional[int] = None
    seed: int = 0


class DecodeReport(BaseModel):
    stages: List[StageReport]
    function: Optional[str] = None
    agreement: Optional[float] = None
    halted_at: Optional[str] = None
    seed: int


class _FaceLists:
    """Short-list traces per top face, computed on demand; pruning is cheap and redone per (r, η)."""

    def __init__(self, F: LocalAssignment, params: DecodeParams):
        self.F = F
        self.params = params
        self._outputs: Dict[Face, ShortListOutput] = {}
        self.r = 0
        self.eta = params.eta

    def output(self, D: Face) -> ShortListOutput:
        if D not in self._outputs:
            p = self.params
            self._outputs[D] = short_list(
                self.F.restricted_to(D),
                p.delta,
                0,
                p.eta,
                mix_seed(p.seed, "short_list", D),
                p.eps,
                p.rounds,
                p.decrement,
            )
        return self._outputs[D]

    def at(self, r: int, eta: float) -> Callable[[Face], Tuple[str, ...]]:
        return lambda D: tuple(f for _, f in prune(self.output(tuple(D)).trace, r, eta)[0])

    def __call__(self, D: Face) -> Tuple[str, ...]:
        return self.at(self.r, self.eta)(D)


def _stage(stage: str, ok: Optional[bool], seed: int, **metrics) -> StageReport:
    status = StageStatus.SKIPPED if ok is None else (StageStatus.GREEN if ok else StageStatus.FAILED)
    return StageReport(stage=stage, status=status, metrics=metrics, seed=seed)


def _consistency_audit(F: LocalAssignment, lists: _FaceLists, faces: Sequence[Face], p: DecodeParams) -> StageReport:
    """L[D]|_B against the short list of F on a half face B; also the best agreement on D and on B.

    L[B] keeps the rounds whose agreement with the input table, outside the faces claimed by
    earlier rounds, reaches the last level of the δ schedule.
    """
    down, up, gaps = [], [], []
    dropped = 0
    for j, D in enumerate(faces[: p.consistency_faces]):
        rng = make_rng(p.seed, "half", j)
        B = tuple(sorted(rng.sample(D, len(D) // 2)))
        above = [project(D, f, B) for f in lists(D)]
        sub = short_list(F.restricted_to(B), p.delta, 0, lists.eta, mix_seed(p.seed, "half_list", B), p.eps, p.rounds, p.decrement)
        floor = sub.deltas[-1] if sub.deltas else p.delta
        kept = [entry for entry in sub.trace if (entry.fresh_agreement or 0.0) >= floor]
        dropped += len(sub.trace) - len(kept)
        below = [f for _, f in prune(kept, lists.r, lists.eta)[0]]
        if above:
            down.append(sum(any(distance(x, y) < lists.eta for y in below) for x in above) / len(above))
        if below:
            up.append(sum(any(distance(x, y) < lists.eta for y in above) for x in below) / len(below))
        top = lists.output(D).trace
        gaps.append(abs((top[0].agreement if top else 0.0) - (sub.trace[0].agreement if sub.trace else 0.0)))
    downward = float(np.mean(down)) if down else 0.0
    upward = float(np.mean(up)) if up else 0.0
    ok = downward >= p.consistency_threshold and upward >= p.consistency_threshold
    return _stage(
        "consistency",
        ok,
        p.seed,
        downward=downward,
        upward=upward,
        value_gap_max=max(gaps) if gaps else 0.0,
        faces=len(down),
        dropped_rounds=dropped,
    )


def decode_global(F: LocalAssignment, params: Optional[DecodeParams] = None) -> Tuple[Optional[str], DecodeReport]:
    """Run the staged decoder; halts at the first failing stage with the reports gathered so far."""
    p = params or DecodeParams()
    X, k = F.X, F.k
    s = p.s if p.s is not None else k // 2
    t = p.t
    if 3 * t > X.d:
        raise DimensionError(f"Decoding through level-{t} lists needs 3t <= d, got d={X.d}")
    stages: List[StageReport] = []

    def halt(stage: StageReport) -> Tuple[Optional[str], DecodeReport]:
        stages.append(stage)
        logger.warning(f"Decoder halted at stage {stage.stage}: {stage.metrics}")
        return None, DecodeReport(stages=stages, halted_at=stage.stage, seed=p.seed)

    # local pass census
    tops = [X.sample_facet(make_rng(p.seed, "local", j)) for j in range(p.faces)]
    rates = [localized_pass(F, D, k, s, AUTO, p.trials, mix_seed(p.seed, "local", D)).estimate for D in tops]
    good = [D for D, rate in zip(tops, rates) if rate >= p.local_threshold]
    fraction = len(good) / len(tops)
    stage = _stage("local_pass", fraction >= p.min_good_fraction, p.seed, good_fraction=fraction, mean_pass=float(np.mean(rates)))
    if stage.status != StageStatus.GREEN:
        return halt(stage)
    stages.append(stage)

    lists = _FaceLists(F, p)
    outputs = [lists.output(D) for D in good]
    sizes = [len(o.survivors) for o in outputs]
    stage = _stage(
        "short_lists",
        all(not o.empty for o in outputs),
        p.seed,
        mean_size=float(np.mean(sizes)),
        max_size=max(sizes),
        within_bound=all(o.within_bound for o in outputs),
        size_bound=min(o.size_bound for o in outputs),
    )
    if stage.status != StageStatus.GREEN:
        return halt(stage)
    stages.append(stage)

    if k > X.d // 2:
        stages.append(_stage("consistency", None, p.seed, reason=f"k={k} exceeds d/2={X.d // 2}"))
    else:
        stage = _consistency_audit(F, lists, good, p)
        if stage.status != StageStatus.GREEN:
            return halt(stage)
        stages.append(stage)

    grid = {}
    for r in range(p.r_grid):
        for i, eta in enumerate(radius_schedule(p.eta, p.schedule, p.radius_steps)):
            report = run_list_agreement_test(lists.at(r, eta), eta, X, p.list_trials, mix_seed(p.seed, "list", r, i))
            grid[(r, i)] = (report.estimate, eta)
    (r, i), (rate, eta) = max(sorted(grid.items()), key=lambda item: item[1][0])
    lists.r, lists.eta = r, eta
    stage = _stage(
        "list_agreement",
        rate >= p.list_threshold,
        p.seed,
        pass_rate=rate,
        r=r,
        radius_index=i,
        eta=eta,
        grid={f"{a},{b}": v[0] for (a, b), v in grid.items()},
    )
    if stage.status != StageStatus.GREEN:
        return halt(stage)
    stages.append(stage)

    levels = [t, 2 * t] + ([3 * t] if p.strong_lists else [])
    projected, reports = {}, {}
    for level in levels:
        projected[level], reports[level] = majority_project(
            lists, X, level, p.projection_samples, 1 - p.stability_threshold, mix_seed(p.seed, "project", level)
        )
    stability = min(reports[level].stable_fraction for level in levels)
    stage = _stage(
        "projection",
        stability >= p.stability_threshold,
        p.seed,
        stable_fraction={level: reports[level].stable_fraction for level in levels},
        ell=reports[t].ell,
        off_size={level: reports[level].off_size for level in levels},
    )
    if stage.status != StageStatus.GREEN:
        return halt(stage)
    stages.append(stage)

    psi, built = build_ug_from_lists(X, t, projected[t], projected[2 * t], projected.get(3 * t))
    stage = _stage("ug_build", built.arbitrary_mass <= p.max_arbitrary, p.seed, **built.model_dump())
    if stage.status != StageStatus.GREEN:
        return halt(stage)
    stages.append(stage)

    audit, g = coboundary_audit(psi, p.restarts, p.seed, p.coboundary_mode, p.trials)
    stage = _stage("coboundary", audit.c_hat_working <= p.c_threshold, p.seed, **audit.model_dump(exclude={"best_assignment", "best_g"}))
    if stage.status != StageStatus.GREEN:
        return halt(stage)
    stages.append(stage)

    _, selection = select_and_decode(X, psi, g, audit.c_hat_working, p.c_threshold, projected[2 * t], p.trials, p.seed)
    agreement = agr_set(selection.function, F, p.nu, seed=p.seed).measure
    stage = _stage(
        "select",
        agreement >= p.min_agreement,
        p.seed,
        agreement=agreement,
        r_pass=selection.r_pass.estimate if selection.r_pass else None,
        r_agreement=selection.r_agreement,
    )
    if stage.status != StageStatus.GREEN:
        stages.append(stage)
        return selection.function, DecodeReport(stages=stages, function=selection.function, agreement=agreement, halted_at="select", seed=p.seed)
    stages.append(stage)
    logger.info(f"Decoded a global function with agr_{p.nu} = {agreement:.4f}")
    return selection.function, DecodeReport(stages=stages, function=selection.function, agreement=agreement, seed=p.seed)


class ShortListRequest(BaseModel):
    n: int
    k: int
    functions: List[str]
    corruption: float = 0.0
    delta: float = 0.3
    eta: float = 0.1
    r: int = 0
    rounds: int = 8
    seed: int = 0


@router.post("/short-list", response_model=ShortListOutput)
async def run_short_list(body: ShortListRequest) -> ShortListOutput:
    """Short list of a planted table on the single face [n]"""
    try:
        X = build_complete(body.n, body.n)
        G = planted_assignment(X, body.k, body.functions, body.corruption, body.seed)
        return short_list(G.restricted_to(range(body.n)), body.delta, body.r, body.eta, body.seed, rounds=body.rounds)
    except HdxError as e:
        logger.error(f"Short list rejected: {e}")
        raise HTTPException(status_code=400, detail=str(e))


class DecodeRequest(BaseModel):
    complex: ComplexSpecRequest
    k: int
    functions: List[str]
    corruption: float = 0.0
    params: DecodeParams = Field(default_factory=DecodeParams)


@router.post("/decode", response_model=DecodeReport)
async def decode(body: DecodeRequest) -> DecodeReport:
    """Decode a planted, partly corrupted table back to a global function"""
    try:
        X = build_from_spec(body.complex)
        F = planted_assignment(X, body.k, body.functions, body.corruption, body.params.seed)
        _, report = decode_global(F, body.params)
        return report
    except HdxError as e:
        logger.error(f"Decode rejected: {e}")
        raise HTTPException(status_code=400, detail=str(e))
