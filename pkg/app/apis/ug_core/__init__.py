"""Unique-Games instances on constraint graphs and the coboundary audit.

Conventions: a permutation is a tuple p with p[i] the image of i. π(u,v) sends a label
at u to the label at v, so a labeling A satisfies (u,v) iff π(u,v)[A(u)] == A(v).
`then(p, q)` applies p first. A triangle (u,v,w) is consistent iff
then(π(u,v), π(v,w)) == π(u,w). A permutation labeling g maps local labels to global
ones, and (u,v) is explained by g iff π(u,v) == then(g[u], inverse(g[v])).
"""

import logging
import random
from itertools import combinations, permutations
from math import factorial
from pathlib import Path
from typing import Dict, Hashable, Iterable, List, NamedTuple, Optional, Sequence, Set, Tuple, Union

import networkx as nx
import numpy as np
from fastapi import APIRouter, HTTPException
from pydantic import BaseModel

from app.env import settings
from app.apis.complex_core import ComplexSpecRequest, ConstraintGraph, SimplicialComplex, build_from_spec, constraint_graph
from app.apis.models import CoboundaryReport, TestReport
from app.apis.utils import (
    ArgumentError,
    Face,
    HdxError,
    InvariantError,
    PreconditionError,
    SizeError,
    interleave,
    make_rng,
    parallel_map,
    project,
)

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/ug")

Permutation = Tuple[int, ...]
Vertex = Hashable
Edge = Tuple[Vertex, Vertex]

CHUNK = 1 << 15


def identity(m: int) -> Permutation:
    return tuple(range(m))


def inverse(p: Permutation) -> Permutation:
    out = [0] * len(p)
    for i, x in enumerate(p):
        out[x] = i
    return tuple(out)


def then(p: Permutation, q: Permutation) -> Permutation:
    return tuple(q[x] for x in p)


def is_permutation(p: Sequence[int], m: int) -> bool:
    return len(p) == m and sorted(p) == list(range(m))


def random_permutation(m: int, rng: random.Random) -> Permutation:
    p = list(range(m))
    rng.shuffle(p)
    return tuple(p)


class UGInstance:
    """π stored once per edge with u < v; the reverse direction is the inverse."""

    def __init__(
        self,
        graph: ConstraintGraph,
        m: int,
        pi: Dict[Edge, Permutation],
        lists: Optional[Dict[Vertex, Tuple[str, ...]]] = None,
        lists3: Optional[Dict[Face, Tuple[str, ...]]] = None,
        arbitrary: Iterable[Edge] = (),
    ):
        if m < 1:
            raise ArgumentError(f"Alphabet size must be positive, got {m}")
        self.graph = graph
        self.m = m
        self._pi: Dict[Edge, Permutation] = {}
        for (u, v), p in pi.items():
            if not is_permutation(p, m):
                raise ArgumentError(f"π{(u, v)} = {p} is not a permutation of [{m}]")
            if u < v:
                self._pi[(u, v)] = tuple(p)
            else:
                self._pi[(v, u)] = inverse(tuple(p))
        self.arbitrary: Set[Edge] = {e if e[0] < e[1] else (e[1], e[0]) for e in arbitrary}
        for e in graph.edges:
            if e not in self._pi:
                self._pi[e] = identity(m)
                self.arbitrary.add(e)
        self.lists = lists
        self.lists3 = lists3
        if lists is not None:
            for u, entries in lists.items():
                if len(entries) != m or len(set(entries)) != m:
                    raise ArgumentError(f"List at {u} must hold {m} distinct entries, got {entries}")

    def __repr__(self) -> str:
        return f"UGInstance(graph={self.graph.name!r}, m={self.m}, edges={len(self._pi)})"

    @property
    def vertices(self) -> Tuple[Vertex, ...]:
        return self.graph.vertices

    @property
    def edges(self) -> Dict[Edge, float]:
        return self.graph.edges

    def perm(self, u: Vertex, v: Vertex) -> Permutation:
        if u < v:
            return self._pi[(u, v)]
        return inverse(self._pi[(v, u)])

    def stored(self) -> Dict[Edge, Permutation]:
        return dict(self._pi)

    def without_lists(self) -> "UGInstance":
        return UGInstance(self.graph, self.m, self._pi, arbitrary=self.arbitrary)

    def with_lists(self, lists: Dict[Vertex, Tuple[str, ...]], lists3: Optional[Dict[Face, Tuple[str, ...]]]) -> "UGInstance":
        return UGInstance(self.graph, self.m, self._pi, lists, lists3, self.arbitrary)

    def value(self, labeling: Dict[Vertex, int]) -> float:
        return sum(w for (u, v), w in self.edges.items() if self._pi[(u, v)][labeling[u]] == labeling[v])

    def explained_mass(self, g: Dict[Vertex, Permutation], skip: Iterable[Edge] = ()) -> Tuple[float, float]:
        """(mass of edges with π = g(u)g(v)⁻¹, total mass considered)."""
        skip = set(skip)
        good = total = 0.0
        for (u, v), w in self.edges.items():
            if (u, v) in skip:
                continue
            total += w
            if self._pi[(u, v)] == then(g[u], inverse(g[v])):
                good += w
        return good, total

    def nx_graph(self) -> nx.Graph:
        G = nx.Graph()
        G.add_nodes_from(self.vertices)
        G.add_weighted_edges_from((u, v, w) for (u, v), w in self.edges.items())
        return G


def triangle_ok(psi: UGInstance, tri: Tuple) -> bool:
    u, v, w = tri
    return then(psi.perm(u, v), psi.perm(v, w)) == psi.perm(u, w)


def strong_ok(psi: UGInstance, tri: Tuple) -> bool:
    u, v, w = tri
    Lu, Lv, Lw = psi.lists[u], psi.lists[v], psi.lists[w]
    p, q = psi.perm(u, v), psi.perm(u, w)
    T = tuple(sorted(u + v + w))
    expected = {interleave([(u, Lu[i]), (v, Lv[p[i]]), (w, Lw[q[i]])])[1] for i in range(psi.m)}
    return set(psi.lists3.get(T, ())) == expected


def _measure_triangles(psi: UGInstance, check, mode: str, trials: Optional[int], seed: int) -> TestReport:
    graph = psi.graph
    if not graph.has_triangles:
        raise PreconditionError(f"{graph.name} has no triangles; triangle consistency is undefined")
    if mode == "auto":
        mode = "exact" if graph.triangles_enumerable else "monte_carlo"
    if mode == "exact":
        triangles = graph.triangles
        hits = [check(psi, tri) for tri, _ in triangles]
        estimate = sum(w for (_, w), ok in zip(triangles, hits) if ok)
        return TestReport.exact(sum(hits), len(hits), min(1.0, estimate))
    trials = trials or settings.default_trials
    passes = sum(check(psi, graph.sample_triangle(make_rng(seed, j))) for j in range(trials))
    return TestReport.monte_carlo(passes, trials, seed)


def triangle_consistency(psi: UGInstance, mode: str = "auto", trials: Optional[int] = None, seed: int = 0) -> TestReport:
    """1 − ξ̂ with T ∼ μ_3t split uniformly."""
    return _measure_triangles(psi, triangle_ok, mode, trials, seed)


def strong_consistency(psi: UGInstance, mode: str = "auto", trials: Optional[int] = None, seed: int = 0) -> TestReport:
    """1 − ξ̂ₛ: L'(T) equals {L(u)_i ∘ L(v)_{π(u,v)(i)} ∘ L(w)_{π(u,w)(i)}} as a set."""
    if psi.lists is None or psi.lists3 is None:
        raise PreconditionError("Strong consistency needs lists on t-faces and 3t-faces")
    return _measure_triangles(psi, strong_ok, mode, trials, seed)


class WeakLawReport(BaseModel):
    weak_inconsistency: float
    strong_inconsistency: float
    holds: bool


def strong_to_weak(psi: UGInstance, mode: str = "auto", trials: Optional[int] = None, seed: int = 0) -> Tuple[UGInstance, WeakLawReport]:
    """Drop the lists and check weak inconsistency ≤ 3 × strong inconsistency."""
    strong = 1 - strong_consistency(psi, mode, trials, seed).estimate
    weak = 1 - triangle_consistency(psi, mode, trials, seed).estimate
    slack = 1e-12 if mode != "monte_carlo" and psi.graph.triangles_enumerable else 4 / (trials or settings.default_trials) ** 0.5
    return psi.without_lists(), WeakLawReport(
        weak_inconsistency=weak,
        strong_inconsistency=strong,
        holds=weak <= 3 * strong + slack,
    )


class CycleReport(BaseModel):
    cycles_checked: int
    inconsistent: int
    first_bad: Optional[List[str]] = None


def cycle_consistency(psi: UGInstance, max_len: int = 5) -> CycleReport:
    """Compose π around every simple cycle of length ≤ max_len; consistent cycles give the identity."""
    checked = bad = 0
    first = None
    for cycle in nx.simple_cycles(psi.nx_graph(), length_bound=max_len):
        if len(cycle) < 3:
            continue
        checked += 1
        p = identity(psi.m)
        for a, b in zip(cycle, cycle[1:] + cycle[:1]):
            p = then(p, psi.perm(a, b))
        if p != identity(psi.m):
            bad += 1
            first = first or [str(x) for x in cycle]
    return CycleReport(cycles_checked=checked, inconsistent=bad, first_bad=first)


class UGSolution(NamedTuple):
    value: float
    assignment: Dict[Vertex, int]
    satisfying: Tuple[Tuple[int, ...], ...] = ()


def _exhaustive_pairwise(
    n_vars: int,
    q: int,
    constraints: Sequence[Tuple[int, int, np.ndarray, float]],
    fixed: Dict[int, int],
) -> Tuple[float, Tuple[int, ...]]:
    """Max of Σ w·table[x_a, x_b] over [q]^n_vars; ties go to the lexicographically first labeling."""
    free = [i for i in range(n_vars) if i not in fixed]
    total = q ** len(free)
    best_value, best_index = -1.0, 0
    for start in range(0, total, CHUNK):
        index = np.arange(start, min(start + CHUNK, total), dtype=np.int64)
        labels = np.zeros((len(index), n_vars), dtype=np.int64)
        rest = index.copy()
        for pos in reversed(free):
            labels[:, pos] = rest % q
            rest //= q
        for pos, value in fixed.items():
            labels[:, pos] = value
        score = np.zeros(len(index))
        for a, b, table, w in constraints:
            score += w * table[labels[:, a], labels[:, b]]
        top = float(score.max())
        if top > best_value + 1e-12:
            best_value = top
            best_index = int(index[np.argmax(score >= top - 1e-12)])
    labels = [0] * n_vars
    rest = best_index
    for pos in reversed(free):
        labels[pos] = rest % q
        rest //= q
    for pos, value in fixed.items():
        labels[pos] = value
    return best_value, tuple(labels)


def _label_tables(psi: UGInstance) -> List[Tuple[int, int, np.ndarray, float]]:
    index = {v: i for i, v in enumerate(psi.vertices)}
    out = []
    for (u, v), w in psi.edges.items():
        p = psi.perm(u, v)
        table = np.zeros((psi.m, psi.m))
        for x in range(psi.m):
            table[x, p[x]] = 1.0
        out.append((index[u], index[v], table, w))
    return out


def ug_value_exact(psi: UGInstance) -> UGSolution:
    n = len(psi.vertices)
    size = psi.m ** n
    if size > settings.ug_exact_cap:
        raise SizeError(
            f"m^|V| = {size} exceeds {settings.ug_exact_cap}; use ug_value_propagate", required_cap=size
        )
    value, labels = _exhaustive_pairwise(n, psi.m, _label_tables(psi), {})
    return UGSolution(value, dict(zip(psi.vertices, labels)))


def _greedy_labels(psi: UGInstance, labels: Dict[Vertex, int], G: nx.Graph, max_passes: int = 50) -> Dict[Vertex, int]:
    """Single-vertex improvement until no vertex gains incident weight."""
    for _ in range(max_passes):
        improved = False
        for u in psi.vertices:
            scores = [0.0] * psi.m
            for v in G.neighbors(u):
                w = G[u][v]["weight"]
                target = labels[v]
                scores[inverse(psi.perm(u, v))[target]] += w
            best = max(range(psi.m), key=lambda x: (scores[x], -x))
            if scores[best] > scores[labels[u]] + 1e-15:
                labels[u] = best
                improved = True
        if not improved:
            break
    return labels


def _propagate_labels(psi: UGInstance, G: nx.Graph, root: Vertex, label: int) -> Dict[Vertex, int]:
    labels = {root: label}
    for u, v in nx.bfs_edges(G, root):
        labels[v] = psi.perm(u, v)[labels[u]]
    return labels


def ug_value_propagate(psi: UGInstance, restarts: int = 32, seed: int = 0) -> UGSolution:
    """BFS propagation from random roots and every root label, then greedy repair; a lower bound."""
    G = psi.nx_graph()
    order = {v: i for i, v in enumerate(psi.vertices)}
    assignment: Dict[Vertex, int] = {}
    satisfying_parts: List[List[Dict[Vertex, int]]] = []
    for c, component in enumerate(nx.connected_components(G)):
        members = sorted(component, key=order.get)
        sub = G.subgraph(members)
        rng = make_rng(seed, "roots", c)
        roots = rng.sample(members, min(restarts, len(members)))
        starts = [(root, label) for root in roots for label in range(psi.m)]

        def attempt(start: Tuple[Vertex, int]) -> Tuple[float, Tuple[int, ...], bool, Dict[Vertex, int]]:
            labels = _propagate_labels(psi, sub, *start)
            exact = all(psi.perm(u, v)[labels[u]] == labels[v] for u, v in sub.edges)
            if not exact:
                labels = _greedy_labels(psi, labels, sub)
            mass = sum(d["weight"] for u, v, d in sub.edges(data=True) if psi.perm(u, v)[labels[u]] == labels[v])
            return mass, tuple(labels[v] for v in members), exact, labels

        results = parallel_map(attempt, starts)
        best = max(results, key=lambda r: (round(r[0], 12), tuple(-x for x in r[1])))
        assignment.update(best[3])
        distinct = {r[1]: r[3] for r in results if r[2]}
        satisfying_parts.append([distinct[key] for key in sorted(distinct)])
    value = psi.value(assignment)
    satisfying: Tuple[Tuple[int, ...], ...] = ()
    if all(satisfying_parts) and len(satisfying_parts) == 1:
        satisfying = tuple(tuple(s[v] for v in psi.vertices) for s in satisfying_parts[0])
    return UGSolution(value, assignment, satisfying)


def best_value(psi: UGInstance, restarts: int = 32, seed: int = 0) -> Tuple[UGSolution, str]:
    if psi.m ** len(psi.vertices) <= settings.ug_exact_cap:
        return ug_value_exact(psi), "exact"
    return ug_value_propagate(psi, restarts, seed), "propagate"


class StarReport(BaseModel):
    fraction: float
    xi_u: float
    bound: float
    vacuous: bool


def star_solution(psi: UGInstance, U: Vertex) -> Tuple[Dict[Vertex, Permutation], StarReport]:
    """P(U) = id, P(V) = π(V,U) on neighbours of U, id elsewhere."""
    G = psi.nx_graph()
    if U not in G:
        raise ArgumentError(f"{U} is not a vertex of {psi.graph.name}")
    P = {v: identity(psi.m) for v in psi.vertices}
    for V in G.neighbors(U):
        P[V] = psi.perm(V, U)
    good, total = psi.explained_mass(P)
    through = [(tri, w) for tri, w in psi.graph.triangles if U in tri]
    mass = sum(w for _, w in through)
    xi_u = sum(w for tri, w in through if not triangle_ok(psi, tri)) / mass if mass else 0.0
    r = len(U) if isinstance(U, tuple) else 1
    n = len({x for v in psi.vertices for x in (v if isinstance(v, tuple) else (v,))})
    if 2 * r * r > n:
        logger.warning(f"r^2 = {r * r} > n/2 = {n / 2}; the star bound is vacuous")
    bound = (1 - xi_u) * max(0.0, 1 - 2 * r * r / n)
    return P, StarReport(fraction=good / total, xi_u=xi_u, bound=bound, vacuous=2 * r * r > n)


def _shrink(psi: UGInstance, labeling: Dict[Vertex, int]) -> UGInstance:
    """Delete A(u) from every alphabet; an unsatisfied edge reconnects its two orphans."""
    m = psi.m
    keep = {u: [x for x in range(m) if x != labeling[u]] for u in psi.vertices}
    new_index = {u: {x: i for i, x in enumerate(keep[u])} for u in psi.vertices}
    pi = {}
    for (u, v), p in psi.stored().items():
        image = []
        for x in keep[u]:
            y = p[x]
            if y == labeling[v]:
                y = p[labeling[u]]
            image.append(new_index[v][y])
        pi[(u, v)] = tuple(image)
    lists = lists3 = None
    if psi.lists is not None:
        lists = {u: tuple(psi.lists[u][x] for x in keep[u]) for u in psi.vertices}
    if psi.lists3 is not None:
        removed = {u: psi.lists[u][labeling[u]] for u in psi.vertices} if psi.lists else {}
        lists3 = {}
        t = len(psi.vertices[0])
        for T, entries in psi.lists3.items():
            scores = [
                sum(project(T, e, R) == removed.get(R) for R in combinations(T, t))
                for e in entries
            ]
            drop = max(range(len(entries)), key=lambda i: (scores[i], -i))
            lists3[T] = tuple(e for i, e in enumerate(entries) if i != drop)
    return UGInstance(psi.graph, m - 1, pi, lists, lists3, psi.arbitrary)


class PreprocessResult(NamedTuple):
    instance: UGInstance
    rounds: int
    status: str
    final_value: float


def preprocess(psi: UGInstance, c: float, restarts: int = 32, seed: int = 0) -> PreprocessResult:
    """Strip labelings of value ≥ 1 − c/m until none remains.

    status is `shrunk`, `unchanged`, or `coboundary` when a good labeling exists at m = 2.
    """
    if psi.m < 2:
        raise PreconditionError(f"Preprocessing needs m >= 2, got {psi.m}")
    start_m = psi.m
    rounds = 0
    current = psi
    while True:
        solution, method = best_value(current, restarts, seed)
        threshold = 1 - c / current.m
        if solution.value < threshold:
            status = "shrunk" if rounds else "unchanged"
            logger.info(f"Preprocess stopped after {rounds} rounds at m={current.m}, value {solution.value:.4f} ({method})")
            return PreprocessResult(current, rounds, status, solution.value)
        if current.m - 1 < 2:
            logger.info(f"Instance was (1-{c})-coboundary: value {solution.value:.4f} at m={current.m}")
            return PreprocessResult(current, rounds, "coboundary", solution.value)
        current = _shrink(current, solution.assignment)
        rounds += 1
        if rounds > start_m:
            raise InvariantError(f"Preprocess exceeded {start_m} rounds")


def gf2_nullspace(rows: Sequence[int], n_cols: int) -> List[int]:
    """Basis of {x : row·x = 0 for every row} over GF(2), rows and vectors as int bitsets."""
    work = list(rows)
    pivots: List[Tuple[int, int]] = []
    row_idx = 0
    for col in range(n_cols):
        pivot = next((r for r in range(row_idx, len(work)) if (work[r] >> col) & 1), None)
        if pivot is None:
            continue
        work[row_idx], work[pivot] = work[pivot], work[row_idx]
        for r in range(len(work)):
            if r != row_idx and (work[r] >> col) & 1:
                work[r] ^= work[row_idx]
        pivots.append((col, row_idx))
        row_idx += 1
    pivot_cols = {col for col, _ in pivots}
    basis = []
    for free in range(n_cols):
        if free in pivot_cols:
            continue
        vec = 1 << free
        for col, r in pivots:
            if (work[r] >> free) & 1:
                vec |= 1 << col
        basis.append(vec)
    return basis


def gf2_reduce(vec: int, basis: Dict[int, int]) -> int:
    """Reduce against an echelon basis keyed by leading bit."""
    while vec:
        lead = vec.bit_length() - 1
        if lead not in basis:
            return vec
        vec ^= basis[lead]
    return 0


def f2_cohomology(X: SimplicialComplex) -> Tuple[Tuple[Face, ...], List[int]]:
    """Edges of X and a basis of cocycles spanning H¹(X; F₂) modulo coboundaries."""
    edges = X.level(2)
    index = {e: i for i, e in enumerate(edges)}
    triangles = X.level(3) if X.d >= 3 else ()
    delta1 = [sum(1 << index[e] for e in combinations(T, 2)) for T in triangles]
    delta0 = [
        sum(1 << i for i, e in enumerate(edges) if v in e)
        for (v,) in X.level(1)
    ]
    echelon: Dict[int, int] = {}
    for row in delta0:
        row = gf2_reduce(row, echelon)
        if row:
            echelon[row.bit_length() - 1] = row
    witnesses = []
    for z in gf2_nullspace(delta1, len(edges)):
        residue = gf2_reduce(z, echelon)
        if residue:
            echelon[residue.bit_length() - 1] = residue
            witnesses.append(z)
    return edges, witnesses


SWAP = (1, 0)


def cochain_instance(X: SimplicialComplex, edges: Sequence[Face], cochain: int) -> UGInstance:
    """m = 2 instance on G_1[X]: swap on edges where the cochain bit is 1."""
    graph = constraint_graph(X, 1)
    pi = {}
    for i, (a, b) in enumerate(edges):
        pi[((a,), (b,))] = SWAP if (cochain >> i) & 1 else identity(2)
    return UGInstance(graph, 2, pi)


def f2_witnesses(X: SimplicialComplex) -> List[UGInstance]:
    edges, witnesses = f2_cohomology(X)
    logger.info(f"dim H^1({X.name}; F2) = {len(witnesses)}")
    return [cochain_instance(X, edges, z) for z in witnesses]


def f2_cocycle_witness(X: SimplicialComplex) -> Optional[UGInstance]:
    """A 1-triangle-consistent instance with no coboundary explanation, or None when H¹ vanishes."""
    witnesses = f2_witnesses(X)
    return witnesses[0] if witnesses else None


def with_f2_lists(psi: UGInstance) -> UGInstance:
    """L(u) = (0, 1) and L'(T) = {i · π(u,v)(i) · π(u,w)(i)} for T split in sorted order."""
    lists = {u: ("0", "1") for u in psi.vertices}
    lists3 = {}
    for T in {tuple(sorted(sum(tri, ()))) for tri, _ in psi.graph.triangles}:
        u, v, w = (T[0],), (T[1],), (T[2],)
        p, q = psi.perm(u, v), psi.perm(u, w)
        lists3[T] = tuple(f"{i}{p[i]}{q[i]}" for i in range(2))
    return psi.with_lists(lists, lists3)


def coboundary_instance(graph: ConstraintGraph, m: int, seed: int) -> Tuple[UGInstance, Dict[Vertex, Permutation]]:
    """π(u,v) = g(u)g(v)⁻¹ for a seeded random g."""
    rng = make_rng(seed, "g")
    g = {v: random_permutation(m, rng) for v in graph.vertices}
    pi = {(u, v): then(g[u], inverse(g[v])) for (u, v) in graph.edges}
    return UGInstance(graph, m, pi), g


def random_instance(graph: ConstraintGraph, m: int, seed: int) -> UGInstance:
    rng = make_rng(seed, "pi")
    return UGInstance(graph, m, {e: random_permutation(m, rng) for e in graph.edges})


def planted_list_instance(
    X: SimplicialComplex, t: int, functions: Sequence[str], seed: Optional[int] = None
) -> UGInstance:
    """Lists of restrictions of m global functions; per-face orders shuffled when a seed is given."""
    graph = constraint_graph(X, t)
    m = len(functions)
    order: Dict[Vertex, Permutation] = {}
    lists: Dict[Vertex, Tuple[str, ...]] = {}
    for u in graph.vertices:
        sigma = random_permutation(m, make_rng(seed, "order", u)) if seed is not None else identity(m)
        entries = tuple("".join(functions[sigma[i]][x] for x in u) for i in range(m))
        if len(set(entries)) != m:
            raise ArgumentError(f"Planted functions collide on {u}; lists must be distinct")
        order[u] = sigma
        lists[u] = entries
    pi = {(u, v): then(order[u], inverse(order[v])) for (u, v) in graph.edges}
    lists3 = {
        T: tuple(sorted({"".join(f[x] for x in T) for f in functions}))
        for T in X.level(3 * t)
    }
    return UGInstance(graph, m, pi, lists, lists3)


def _perm_tables(psi: UGInstance, perms: List[Permutation]) -> List[Tuple[int, int, np.ndarray, float]]:
    index = {v: i for i, v in enumerate(psi.vertices)}
    lookup = {p: i for i, p in enumerate(perms)}
    out = []
    for (u, v), w in psi.edges.items():
        target = psi.perm(u, v)
        table = np.zeros((len(perms), len(perms)))
        for a, pa in enumerate(perms):
            # g(v) is forced once g(u) is fixed
            b = lookup[inverse(then(inverse(pa), target))]
            table[a, b] = 1.0
        out.append((index[u], index[v], table, w))
    return out


def _exact_g(psi: UGInstance) -> Dict[Vertex, Permutation]:
    perms = sorted(permutations(range(psi.m)))
    G = psi.nx_graph()
    order = {v: i for i, v in enumerate(psi.vertices)}
    roots = [min(component, key=order.get) for component in nx.connected_components(G)]
    _, labels = _exhaustive_pairwise(len(psi.vertices), len(perms), _perm_tables(psi, perms), {order[r]: 0 for r in roots})
    return {v: perms[labels[i]] for i, v in enumerate(psi.vertices)}


def _repair_g(psi: UGInstance, g: Dict[Vertex, Permutation], G: nx.Graph, max_passes: int = 50) -> Dict[Vertex, Permutation]:
    for _ in range(max_passes):
        improved = False
        for u in psi.vertices:
            def score(candidate: Permutation) -> float:
                return sum(
                    G[u][v]["weight"]
                    for v in G.neighbors(u)
                    if psi.perm(u, v) == then(candidate, inverse(g[v]))
                )

            options = sorted({then(psi.perm(u, v), g[v]) for v in G.neighbors(u)} | {g[u]})
            best = max(options, key=lambda p: (score(p), p == g[u]))
            if score(best) > score(g[u]) + 1e-15:
                g[u] = best
                improved = True
        if not improved:
            break
    return g


def _propagate_g(psi: UGInstance, restarts: int, seed: int) -> Dict[Vertex, Permutation]:
    """Random spanning trees: g(root) = id, g(v) = π(v,u)g(u) along tree edges, then repair."""
    G = psi.nx_graph()

    def attempt(r: int) -> Tuple[float, Dict[Vertex, Permutation]]:
        rng = make_rng(seed, "tree", r)
        H = nx.Graph()
        H.add_nodes_from(G.nodes)
        H.add_weighted_edges_from((u, v, rng.random()) for u, v in G.edges)
        tree = nx.minimum_spanning_tree(H)
        g: Dict[Vertex, Permutation] = {}
        order = {v: i for i, v in enumerate(psi.vertices)}
        for component in nx.connected_components(tree):
            members = sorted(component, key=order.get)
            root = rng.choice(members)
            g[root] = identity(psi.m)
            for u, v in nx.bfs_edges(tree, root):
                g[v] = then(psi.perm(v, u), g[u])
        g = _repair_g(psi, g, G)
        return psi.explained_mass(g)[0], g

    results = parallel_map(attempt, list(range(restarts)))
    return max(results, key=lambda r: (round(r[0], 12), tuple(-x for p in (r[1][v] for v in psi.vertices) for x in p)))[1]


def select_labeling(g: Dict[Vertex, Permutation]) -> Dict[Vertex, int]:
    """h(u): the local label that g(u) sends to global label 0."""
    return {u: inverse(p)[0] for u, p in g.items()}


def coboundary_audit(
    psi: UGInstance,
    restarts: int = 32,
    seed: int = 0,
    mode: str = "auto",
    trials: Optional[int] = None,
) -> Tuple[CoboundaryReport, Dict[Vertex, Permutation]]:
    """Measure ξ̂ (and ξ̂ₛ) and search for g minimizing ĉ."""
    xi = 1 - triangle_consistency(psi, trials=trials, seed=seed).estimate if psi.graph.has_triangles else 0.0
    strong = None
    if psi.lists is not None and psi.lists3 is not None:
        strong = 1 - strong_consistency(psi, trials=trials, seed=seed).estimate
    space = factorial(psi.m) ** len(psi.vertices)
    if mode == "auto":
        mode = "exact" if space <= settings.coboundary_exact_cap else "propagate"
    if mode == "exact":
        if space > settings.coboundary_exact_cap:
            raise SizeError(f"(m!)^|V| = {space} exceeds {settings.coboundary_exact_cap}", required_cap=space)
        g = _exact_g(psi)
    else:
        g = _propagate_g(psi, restarts, seed)
    good, total = psi.explained_mass(g)
    good_w, total_w = psi.explained_mass(g, skip=psi.arbitrary)
    solution, value_method = best_value(psi, restarts, seed)
    report = CoboundaryReport(
        xi_hat=max(0.0, xi),
        strong_xi_hat=None if strong is None else max(0.0, strong),
        best_value=solution.value,
        best_assignment=[solution.assignment[v] for v in psi.vertices],
        best_g=[list(g[v]) for v in psi.vertices],
        c_hat=max(0.0, 1 - good / total) if total else 0.0,
        c_hat_working=max(0.0, 1 - good_w / total_w) if total_w else 0.0,
        arbitrary_mass=total - total_w,
        method=mode,
        value_method=value_method,
    )
    return report, g


def _ids(face: Face) -> str:
    return ",".join(map(str, face))


def _parse_ids(text: str) -> Face:
    return tuple(int(v) for v in text.strip().split(","))


def write_instance(psi: UGInstance, path: Union[str, Path]) -> None:
    t = len(psi.vertices[0]) if psi.vertices else 0
    lines = [f"{psi.m} {t}"]
    for (u, v), p in sorted(psi.stored().items()):
        lines.append(f"{_ids(u)} ; {_ids(v)} ; {','.join(map(str, p))}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_instance(path: Union[str, Path], graph: ConstraintGraph) -> UGInstance:
    lines = [ln for ln in Path(path).read_text(encoding="ascii").splitlines() if ln.strip()]
    if not lines:
        raise ArgumentError(f"{path} is empty")
    m, t = (int(x) for x in lines[0].split())
    pi = {}
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            u, v, image = (part.strip() for part in line.split(";"))
            pi[(_parse_ids(u), _parse_ids(v))] = tuple(int(x) for x in image.split(","))
        except ValueError:
            raise ArgumentError(f"line {lineno}: expected `u_ids ; v_ids ; image`, got {line!r}")
    for u, v in pi:
        key = (u, v) if u < v else (v, u)
        if key not in graph.edges or len(u) != t:
            raise ArgumentError(f"{(u, v)} is not an edge of {graph.name}")
    return UGInstance(graph, m, pi)


def write_lists(lists: Dict[Face, Sequence[str]], path: Union[str, Path]) -> None:
    lines = [f"{_ids(face)} ; {' '.join(entries)}" for face, entries in sorted(lists.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_lists(path: Union[str, Path]) -> Dict[Face, Tuple[str, ...]]:
    lists = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="ascii").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            face, entries = line.split(";")
        except ValueError:
            raise ArgumentError(f"line {lineno}: expected `face_ids ; strings`")
        lists[_parse_ids(face)] = tuple(entries.split())
    return lists


class WitnessSummary(BaseModel):
    h1_dimension: int
    triangle_consistency: Optional[float] = None
    audit: Optional[CoboundaryReport] = None


@router.post("/witness", response_model=WitnessSummary)
async def witness(spec: ComplexSpecRequest) -> WitnessSummary:
    """F2 cocycle witnesses of a complex and the coboundary audit of the first one"""
    try:
        instances = f2_witnesses(build_from_spec(spec))
        if not instances:
            return WitnessSummary(h1_dimension=0)
        report, _ = coboundary_audit(instances[0])
        return WitnessSummary(
            h1_dimension=len(instances),
            triangle_consistency=triangle_consistency(instances[0]).estimate,
            audit=report,
        )
    except HdxError as e:
        logger.error(f"Witness search rejected: {e}")
        raise HTTPException(status_code=400, detail=str(e))
