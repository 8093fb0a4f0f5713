"""Local assignments F: X(k) → {0,1}^k and the two-query direct product tester.

Test distribution: D ∼ μ_d, I ⊆ D of size s, then A, A' ⊆ D of size k containing I,
independently. Accept iff F[A] and F[A'] agree on I.
"""

import logging
import random
from collections import Counter, defaultdict
from fractions import Fraction
from itertools import combinations
from math import comb, floor, log
from pathlib import Path
from typing import Callable, Dict, FrozenSet, Iterable, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from fastapi import APIRouter, HTTPException
from pydantic import BaseModel
from scipy.stats import hypergeom

from app.env import settings
from app.apis.complex_core import ComplexSpecRequest, SimplicialComplex, build_complete, build_from_spec
from app.apis.models import TestReport
from app.apis.utils import (
    ArgumentError,
    DimensionError,
    Face,
    HdxError,
    SizeError,
    distance,
    make_rng,
    parallel_map,
    project,
    random_bits,
    restrict,
)

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/dp-test")

EXACT = "exact"
MONTE_CARLO = "monte_carlo"
AUTO = "auto"

CHUNK = 4096


class LocalAssignment:
    """F on X(k): an eager table or a lazily evaluated, cached entry function."""

    def __init__(
        self,
        X: SimplicialComplex,
        k: int,
        table: Optional[Mapping[Face, str]] = None,
        entry: Optional[Callable[[Face], str]] = None,
    ):
        if not 1 <= k <= X.d:
            raise DimensionError(f"Assignment level k={k} outside [1, {X.d}]")
        if (table is None) == (entry is None):
            raise ArgumentError("Pass exactly one of table or entry")
        self.X = X
        self.k = k
        self._entry = entry
        self._table: Dict[Face, str] = {}
        if table is not None:
            for face, bits in table.items():
                face = tuple(face)
                if len(face) != k or len(bits) != k:
                    raise ArgumentError(f"Entry {face} -> {bits!r} does not have length {k}")
                self._table[face] = bits
        self.lazy = entry is not None

    @classmethod
    def direct_product(cls, X: SimplicialComplex, k: int, f: str) -> "LocalAssignment":
        if len(f) != X.n_vertices:
            raise ArgumentError(f"Global function has {len(f)} bits, complex has {X.n_vertices} vertices")
        return cls(X, k, entry=lambda A: restrict(f, A))

    @classmethod
    def random(cls, X: SimplicialComplex, k: int, seed: int) -> "LocalAssignment":
        return cls(X, k, entry=lambda A: random_bits(make_rng(seed, "F", A), k))

    def __getitem__(self, face: Sequence[int]) -> str:
        face = tuple(face)
        if face not in self._table:
            if self._entry is None:
                raise ArgumentError(f"{face} is outside the assignment's domain")
            self._table[face] = self._entry(face)
        return self._table[face]

    def faces(self) -> Tuple[Face, ...]:
        return tuple(self._table) if not self.lazy else self.X.level(self.k)

    def items(self) -> Iterable[Tuple[Face, str]]:
        for face in self.faces():
            yield face, self[face]

    def restricted_to(self, D: Sequence[int]) -> "LocalAssignment":
        """F|_D on the k-subsets of D."""
        D = tuple(D)
        return LocalAssignment(self.X, self.k, table={A: self[A] for A in combinations(D, self.k)})


def hamming(f: str, g: str) -> float:
    return distance(f, g)


def hamming_on(A: Sequence[int], f: str, g: str) -> float:
    if len(f) != len(g):
        raise ArgumentError(f"Length mismatch: {len(f)} vs {len(g)}")
    if any(v >= len(f) or v < 0 for v in A):
        raise ArgumentError(f"{tuple(A)} is not within a domain of size {len(f)}")
    return distance(restrict(f, A), restrict(g, A))


class TailReport(BaseModel):
    R: float
    above_2R: TestReport
    below_half_R: TestReport


def restriction_distance_tail(
    f: str, g: str, k: int, trials: int, seed: int, X: Optional[SimplicialComplex] = None
) -> TailReport:
    """Pr[Δ_A(f,g) > 2R] and Pr[Δ_A(f,g) < R/2] for A ∼ μ_k, R = Δ(f,g)."""
    R = hamming(f, g)
    X = X or build_complete(len(f), k)
    above = below = 0
    for trial in range(trials):
        delta = hamming_on(X.sample_face(k, make_rng(seed, trial)), f, g)
        above += delta > 2 * R
        below += delta < R / 2
    return TailReport(
        R=R,
        above_2R=TestReport.monte_carlo(above, trials, seed),
        below_half_R=TestReport.monte_carlo(below, trials, seed),
    )


class AgreementSet(NamedTuple):
    faces: FrozenSet[Face]
    measure: float
    exact: bool
    report: Optional[TestReport]


def agr_set(
    f: str,
    F: LocalAssignment,
    nu: float,
    within: Optional[Sequence[int]] = None,
    trials: Optional[int] = None,
    seed: int = 0,
) -> AgreementSet:
    """Agr_ν(f, F) = {A : Δ_A(f, F[A]) ≤ ν} and its μ_k measure.

    With `within`, A ranges uniformly over the k-subsets of that face instead.
    """
    if not 0 <= nu <= 1:
        raise ArgumentError(f"ν must lie in [0,1], got {nu}")
    k = F.k
    if within is not None:
        D = tuple(within)
        if comb(len(D), k) <= settings.level_cap:
            faces = list(combinations(D, k))
            hits = frozenset(A for A in faces if distance(restrict(f, A), F[A]) <= nu)
            return AgreementSet(hits, len(hits) / len(faces), True, None)
        sampler = lambda rng: tuple(sorted(rng.sample(D, k)))
    elif F.X.is_enumerable(k):
        weights = F.X.weights(k)
        hits = frozenset(A for A, _ in F.items() if distance(restrict(f, A), F[A]) <= nu)
        return AgreementSet(hits, float(sum(weights[A] for A in hits)), True, None)
    else:
        sampler = lambda rng: F.X.sample_face(k, rng)
    trials = trials or settings.default_trials
    logger.info(f"Level {k} not enumerable; sampling {trials} faces for Agr_{nu}")
    hits = set()
    passes = 0
    for trial in range(trials):
        A = sampler(make_rng(seed, trial))
        if distance(restrict(f, A), F[A]) <= nu:
            passes += 1
            hits.add(A)
    report = TestReport.monte_carlo(passes, trials, seed)
    return AgreementSet(frozenset(hits), report.estimate, False, report)


# c in the 2^{-c·kν} bound: lower Chernoff tail from a mean of 6kν down to 2kν
SHIELD_EXPONENT = 4 / (3 * log(2))


class JointAgreement(BaseModel):
    distance: float
    nu: float
    k: int
    report: TestReport
    hypergeom_bound: float
    chernoff_bound: float
    separated: bool
    holds: bool


def joint_agreement(
    f: str,
    g: str,
    F: LocalAssignment,
    nu: float,
    within: Sequence[int],
    trials: Optional[int] = None,
    seed: int = 0,
) -> JointAgreement:
    """Measure of Agr_ν(f, F) ∩ Agr_ν(g, F) for A uniform among the k-subsets of `within`.

    A face in both sets has Δ_A(f, g) ≤ 2ν, so the measure is at most a hypergeometric
    lower tail; once Δ_D(f, g) > 6ν it is also at most 2^{-c·kν}.
    """
    if not 0 <= nu <= 1:
        raise ArgumentError(f"ν must lie in [0,1], got {nu}")
    D = tuple(within)
    k = F.k
    if len(D) < k:
        raise DimensionError(f"Face of size {len(D)} has no {k}-subsets")

    def both(A: Face) -> bool:
        bits = F[A]
        return distance(restrict(f, A), bits) <= nu and distance(restrict(g, A), bits) <= nu

    if comb(len(D), k) <= settings.level_cap:
        faces = list(combinations(D, k))
        report = TestReport.exact(sum(both(A) for A in faces), len(faces))
    else:
        trials = trials or settings.default_trials
        passes = sum(both(tuple(sorted(make_rng(seed, "joint", trial).sample(D, k)))) for trial in range(trials))
        report = TestReport.monte_carlo(passes, trials, seed)
    apart = sum(f[v] != g[v] for v in D)
    delta = apart / len(D)
    tail = float(hypergeom(len(D), apart, k).cdf(floor(2 * k * nu + 1e-9)))
    separated = delta > 6 * nu
    bound = 2.0 ** (-SHIELD_EXPONENT * k * nu) if separated else 1.0
    slack = report.ci_hi - report.estimate
    return JointAgreement(
        distance=delta,
        nu=nu,
        k=k,
        report=report,
        hypergeom_bound=tail,
        chernoff_bound=bound,
        separated=separated,
        holds=report.estimate <= min(tail, bound) + slack + 1e-12,
    )


def _check_levels(X: SimplicialComplex, k: int, s: int) -> None:
    if s > k:
        raise ArgumentError(f"Intersection size s={s} exceeds k={k}")
    if s < 0 or k > X.d:
        raise DimensionError(f"Need 0 <= s <= k <= d, got s={s}, k={k}, d={X.d}")


def _exact_inside(F: LocalAssignment, D: Face, s: int) -> Tuple[int, int, int]:
    """(passes, pairs, same-face pairs) over all (I, A, A') inside one facet."""
    k = F.k
    passes = pairs = same = 0
    for I in combinations(D, s):
        rest = tuple(v for v in D if v not in set(I))
        patterns: Counter = Counter()
        count = 0
        for extra in combinations(rest, k - s):
            A = tuple(sorted(I + extra))
            patterns[project(A, F[A], I)] += 1
            count += 1
        passes += sum(c * c for c in patterns.values())
        pairs += count * count
        same += count
    return passes, pairs, same


def _exact_work(X: SimplicialComplex, k: int, s: int, facets: int) -> int:
    return facets * comb(X.d, s) * comb(X.d - s, k - s)


def _three_step_trial(F: LocalAssignment, D: Face, s: int, rng: random.Random) -> Tuple[bool, bool, int]:
    I = tuple(sorted(rng.sample(D, s)))
    rest = [v for v in D if v not in set(I)]
    A = tuple(sorted(I + tuple(rng.sample(rest, F.k - s))))
    B = tuple(sorted(I + tuple(rng.sample(rest, F.k - s))))
    ok = project(A, F[A], I) == project(B, F[B], I)
    return ok, A == B, len(set(A) & set(B))


def _run_trials(trial: Callable[[random.Random], Tuple[bool, bool, int]], trials: int, seed: int) -> TestReport:
    def chunk(start: int) -> Tuple[int, int, Counter]:
        passes = same = 0
        sizes: Counter = Counter()
        for j in range(start, min(start + CHUNK, trials)):
            ok, equal, inter = trial(make_rng(seed, j))
            passes += ok
            same += equal
            sizes[inter] += 1
        return passes, same, sizes

    results = parallel_map(chunk, list(range(0, trials, CHUNK)))
    passes = sum(r[0] for r in results)
    same = sum(r[1] for r in results)
    sizes = sum((r[2] for r in results), Counter())
    return TestReport.monte_carlo(
        passes,
        trials,
        seed,
        same_face_rate=same / trials if trials else 0.0,
        intersection_histogram={size: n / trials for size, n in sorted(sizes.items())},
    )


def _resolve_mode(mode: str, work: int) -> str:
    if mode == AUTO:
        return EXACT if work <= settings.exact_enum_cap else MONTE_CARLO
    if mode == EXACT and work > settings.exact_enum_cap:
        raise SizeError(f"Exact enumeration needs {work} steps, above {settings.exact_enum_cap}", required_cap=work)
    if mode not in (EXACT, MONTE_CARLO):
        raise ArgumentError(f"Unknown mode {mode!r}")
    return mode


def run_dp_test(
    F: LocalAssignment,
    k: int,
    s: int,
    mode: str = AUTO,
    trials: Optional[int] = None,
    seed: int = 0,
) -> TestReport:
    """Acceptance probability of the (k, s) tester; A = A' counts as an accept."""
    X = F.X
    if k != F.k:
        raise ArgumentError(f"Assignment lives on level {F.k}, not {k}")
    _check_levels(X, k, s)
    mode = _resolve_mode(mode, _exact_work(X, k, s, X.facet_count))
    if mode == EXACT:
        passes = pairs = same = 0
        for D in X.facets:
            p, q, r = _exact_inside(F, D, s)
            passes, pairs, same = passes + p, pairs + q, same + r
        return TestReport.exact(passes, pairs, same_face_rate=same / pairs)
    trials = trials or settings.default_trials
    return _run_trials(lambda rng: _three_step_trial(F, X.sample_facet(rng), s, rng), trials, seed)


def localized_pass(
    F: LocalAssignment,
    D: Sequence[int],
    k: int,
    s: int,
    mode: str = AUTO,
    trials: Optional[int] = None,
    seed: int = 0,
) -> TestReport:
    """The tester restricted to the Johnson scheme inside a single facet D."""
    D = tuple(D)
    X = F.X
    if len(D) != X.d:
        raise DimensionError(f"|D| = {len(D)} but facets have size {X.d}")
    _check_levels(X, k, s)
    mode = _resolve_mode(mode, _exact_work(X, k, s, 1))
    if mode == EXACT:
        passes, pairs, same = _exact_inside(F, D, s)
        return TestReport.exact(passes, pairs, same_face_rate=same / pairs)
    trials = trials or settings.default_trials
    return _run_trials(lambda rng: _three_step_trial(F, D, s, rng), trials, seed)


def agreement_test_variant(
    F: LocalAssignment,
    k: int,
    s: int,
    variant: str = "three_step",
    trials: Optional[int] = None,
    seed: int = 0,
) -> TestReport:
    """`three_step` is run_dp_test; `intersection` draws A' with |A ∩ A'| = s exactly inside D."""
    if variant == "three_step":
        return run_dp_test(F, k, s, MONTE_CARLO, trials, seed)
    if variant != "intersection":
        raise ArgumentError(f"Unknown tester variant {variant!r}")
    X = F.X
    _check_levels(X, k, s)
    if X.d < 2 * k - s:
        raise DimensionError(f"|A ∩ A'| = {s} needs d >= {2 * k - s}, got {X.d}")

    def trial(rng: random.Random) -> Tuple[bool, bool, int]:
        D = X.sample_facet(rng)
        A = tuple(sorted(rng.sample(D, k)))
        I = tuple(sorted(rng.sample(A, s)))
        outside = [v for v in D if v not in set(A)]
        B = tuple(sorted(I + tuple(rng.sample(outside, k - s))))
        return project(A, F[A], I) == project(B, F[B], I), A == B, s

    return _run_trials(trial, trials or settings.default_trials, seed)


def exact_intersection_distribution(d: int, k: int, s: int) -> Dict[int, float]:
    """|A ∩ A'| under the three-step sampler: s plus a hypergeometric overlap of the free parts."""
    law = hypergeom(d - s, k - s, k - s)
    return {s + x: float(law.pmf(x)) for x in range(0, k - s + 1) if law.pmf(x) > 0}


def intersection_histogram(X: SimplicialComplex, k: int, s: int, trials: int, seed: int = 0) -> Dict[int, float]:
    _check_levels(X, k, s)
    sizes: Counter = Counter()
    for j in range(trials):
        rng = make_rng(seed, j)
        D = X.sample_facet(rng)
        I = rng.sample(D, s)
        rest = [v for v in D if v not in set(I)]
        A = set(I) | set(rng.sample(rest, k - s))
        B = set(I) | set(rng.sample(rest, k - s))
        sizes[len(A & B)] += 1
    return {size: n / trials for size, n in sorted(sizes.items())}


def expected_pass_probability(
    X: SimplicialComplex,
    lists: Callable[[Face], Sequence[str]],
    k: int,
    s: int,
    facets: Optional[Sequence[Face]] = None,
) -> float:
    """E over F[A] ∼ uniform(lists(A)) of the tester's acceptance, exact inside each facet.

    Averages over `facets` (default: all of them, which must be enumerable).
    """
    _check_levels(X, k, s)
    facets = X.facets if facets is None else facets
    total = 0.0
    for D in facets:
        inside = 0.0
        for I in combinations(D, s):
            rest = tuple(v for v in D if v not in set(I))
            mass: Dict[str, float] = defaultdict(float)
            self_overlap = 0.0
            count = 0
            for extra in combinations(rest, k - s):
                A = tuple(sorted(I + extra))
                entries = lists(A)
                local: Counter = Counter(project(A, x, I) for x in entries)
                for p, c in local.items():
                    mass[p] += c / len(entries)
                    self_overlap += (c / len(entries)) ** 2
                count += 1
            cross = sum(m * m for m in mass.values()) - self_overlap
            inside += (cross + count) / (count * count)
        total += inside / comb(X.d, s)
    return total / len(facets)


def planted_pass_probability(
    X: SimplicialComplex, functions: Sequence[str], k: int, s: int, facets: Optional[Sequence[Face]] = None
) -> float:
    """Expected acceptance when F[A] is a uniform pick among the distinct restrictions of `functions`."""
    return expected_pass_probability(X, lambda A: sorted({restrict(f, A) for f in functions}), k, s, facets)


def lists_match(LA: Sequence[str], A: Face, LB: Sequence[str], B: Face, on: Face, eta: float) -> bool:
    """L[A]|_on and L[B]|_on in 1-to-1 correspondence within distance η; ambiguity fails."""
    if not LA or not LB or len(LA) != len(LB):
        return False
    left = [project(A, x, on) for x in LA]
    right = [project(B, y, on) for y in LB]
    chosen = set()
    for x in left:
        candidates = [j for j, y in enumerate(right) if x == y or distance(x, y) < eta]
        if len(candidates) != 1:
            return False
        chosen.add(candidates[0])
    return len(chosen) == len(left)


def run_list_agreement_test(
    L: Union[Mapping[Face, Sequence[str]], Callable[[Face], Sequence[str]]],
    eta: float,
    X: SimplicialComplex,
    trials: Optional[int] = None,
    seed: int = 0,
    mode: str = MONTE_CARLO,
) -> TestReport:
    """B ∼ μ_{⌊d/2⌋}, A and A' ∼ μ_d conditioned on containing B; accept on a unique matching."""
    lookup = L if callable(L) else (lambda A: L.get(A, ()))
    b = X.d // 2
    if X.d % 2:
        logger.info(f"Odd d={X.d}; list agreement uses |B| = {b}")
    if mode == EXACT:
        work = sum(len(X.facets_containing(B)) ** 2 for B in X.level(b))
        _resolve_mode(EXACT, work)
        weights = X.weights(b)
        estimate = Fraction(0) if X.exact else 0.0
        passes = pairs = 0
        for B, mu in weights.items():
            around = X.facets_containing(B)
            hits = sum(lists_match(lookup(A), A, lookup(A2), A2, B, eta) for A in around for A2 in around)
            passes += hits
            pairs += len(around) ** 2
            estimate += mu * Fraction(hits, len(around) ** 2) if X.exact else float(mu) * hits / len(around) ** 2
        return TestReport.exact(passes, pairs, float(estimate), b=b)

    def trial(rng: random.Random) -> Tuple[bool, bool, int]:
        A = X.sample_facet(rng)
        B = tuple(sorted(rng.sample(A, b)))
        A2 = X.sample_facet_containing(B, rng)
        return lists_match(lookup(A), A, lookup(A2), A2, B, eta), A == A2, len(set(A) & set(A2))

    report = _run_trials(trial, trials or settings.default_trials, seed)
    report.diagnostics["b"] = b
    return report


def krawtchouk_row(k: int, r: int) -> np.ndarray:
    """ĥ(w) for the Hamming ball of radius r in {0,1}^k, as a function of |S| = w."""
    values = np.zeros(k + 1)
    for w in range(k + 1):
        values[w] = sum(
            (-1) ** i * comb(w, i) * comb(k - w, j - i)
            for j in range(r + 1)
            for i in range(0, min(w, j) + 1)
            if j - i <= k - w
        )
    return values / 2 ** k


def fwht(a: np.ndarray) -> np.ndarray:
    """Unnormalized Walsh-Hadamard transform of a length 2^n vector."""
    n = a.shape[0]
    h = 1
    while h < n:
        a = a.reshape(-1, 2, h)
        a = np.stack((a[:, 0] + a[:, 1], a[:, 0] - a[:, 1]), axis=1)
        h *= 2
    return a.reshape(n)


def landscape_from_table(
    items: Sequence[Tuple[Face, str]],
    weights: Sequence[float],
    ground: Sequence[int],
    eps: float = 0.0,
    chunk: int = 4096,
) -> np.ndarray:
    """val[g] = Σ weight of faces A with Δ(entry(A), g|_A) ≤ ε, g indexed by Σ g_j 2^j over positions j of `ground`."""
    n = len(ground)
    if n > settings.exhaustive_n_cap:
        raise SizeError(f"Exhaustive search over 2^{n} functions exceeds the cap 2^{settings.exhaustive_n_cap}", required_cap=n)
    spectrum = np.zeros(2 ** n)
    if not items:
        return spectrum
    pos = {v: j for j, v in enumerate(ground)}
    k = len(items[0][0])
    r = floor(eps * k + 1e-9)
    ball = krawtchouk_row(k, r)
    subsets = np.array([[(S >> j) & 1 for j in range(k)] for S in range(2 ** k)], dtype=np.int64)
    coeff = ball[subsets.sum(axis=1)]
    for start in range(0, len(items), chunk):
        block = items[start:start + chunk]
        positions = np.array([[pos[v] for v in face] for face, _ in block], dtype=np.int64)
        patterns = np.array([[int(b) for b in bits] for _, bits in block], dtype=np.int64)
        mu = np.asarray(weights[start:start + chunk], dtype=float)
        masks = subsets @ (np.int64(1) << positions).T
        signs = 1 - 2 * ((subsets @ patterns.T) % 2)
        values = coeff[:, None] * signs * mu[None, :]
        spectrum += np.bincount(masks.ravel(), weights=values.ravel(), minlength=2 ** n)
    return fwht(spectrum)


def agreement_landscape(F: LocalAssignment, eps: float = 0.0, chunk: int = 4096) -> np.ndarray:
    """val[g] = μ_k{A : Δ_A(F[A], g|_A) ≤ ε} for every global g, indexed by the bitmask Σ g_v 2^v."""
    X = F.X
    if X.n_vertices > settings.exhaustive_n_cap:
        raise SizeError(
            f"Exhaustive search over 2^{X.n_vertices} functions exceeds the cap 2^{settings.exhaustive_n_cap}",
            required_cap=X.n_vertices,
        )
    items = list(F.items())
    weights = X.weights(F.k)
    return landscape_from_table(items, [float(weights[A]) for A, _ in items], range(X.n_vertices), eps, chunk)


def mask_to_bits(mask: int, n: int) -> str:
    return "".join(str((mask >> v) & 1) for v in range(n))


def bits_to_mask(bits: str) -> int:
    return sum(1 << v for v, b in enumerate(bits) if b == "1")


def write_assignment(F: LocalAssignment, path: Union[str, Path]) -> None:
    lines = [",".join(map(str, face)) + "\t" + bits for face, bits in sorted(F.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_assignment(path: Union[str, Path], X: SimplicialComplex) -> LocalAssignment:
    table: Dict[Face, str] = {}
    k = None
    for lineno, raw in enumerate(Path(path).read_text(encoding="ascii").splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            ids, bits = raw.split("\t")
            face = tuple(int(v) for v in ids.split(","))
        except ValueError:
            raise ArgumentError(f"line {lineno}: expected `ids<TAB>bits`, got {raw!r}")
        if set(bits) - {"0", "1"}:
            raise ArgumentError(f"line {lineno}: entry {bits!r} is not a 0/1 string")
        k = k or len(face)
        table[face] = bits
    if k is None:
        raise ArgumentError(f"{path} holds no entries")
    return LocalAssignment(X, k, table=table)


class DpTestRequest(BaseModel):
    complex: ComplexSpecRequest
    k: int
    s: int
    function: Optional[str] = None
    seed: int = 0
    mode: str = AUTO
    trials: Optional[int] = None


@router.post("/run", response_model=TestReport)
async def run_test(body: DpTestRequest) -> TestReport:
    """Direct product test on f's restrictions, or on a seeded random table when no function is given"""
    try:
        X = build_from_spec(body.complex)
        if body.function is not None:
            F = LocalAssignment.direct_product(X, body.k, body.function)
        else:
            F = LocalAssignment.random(X, body.k, body.seed)
        return run_dp_test(F, body.k, body.s, body.mode, body.trials, body.seed)
    except HdxError as e:
        logger.error(f"dp test rejected: {e}")
        raise HTTPException(status_code=400, detail=str(e))
