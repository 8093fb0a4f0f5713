"""Pure simplicial complexes with push-down level measures, links and the G_t constraint graphs.

X(i) is the set of size-i faces (cardinality convention, X(0) = {()}). The measure
on X(i) is obtained by drawing a uniform facet and then a uniform size-i subset.
"""

import logging
import random
from collections import defaultdict
from fractions import Fraction
from functools import cached_property
from itertools import combinations, permutations, product
from math import comb, factorial
from pathlib import Path
from typing import Callable, Dict, Hashable, Iterable, List, Optional, Sequence, Tuple, Union

from fastapi import APIRouter, HTTPException
from pydantic import BaseModel

from app.env import settings
from app.apis.utils import (
    ArgumentError,
    DimensionError,
    EmptyComplexError,
    Face,
    HdxError,
    MembershipError,
    PurityError,
    SizeError,
    make_rng,
)

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/complex")

Weight = Union[Fraction, float]


class SimplicialComplex:
    """Immutable pure complex. Complete complexes on a ground set are never materialized eagerly."""

    def __init__(
        self,
        n_vertices: int,
        d: int,
        facets: Optional[Sequence[Face]] = None,
        ground: Optional[Face] = None,
        name: str = "",
    ):
        self.n_vertices = n_vertices
        self.d = d
        self.name = name
        self.is_complete = facets is None
        self.ground: Face = tuple(ground) if ground is not None else tuple(range(n_vertices))
        self._facets: Optional[Tuple[Face, ...]] = tuple(facets) if facets is not None else None
        self._levels: Dict[int, Tuple[Face, ...]] = {}
        self._weights: Dict[int, Dict[Face, Weight]] = {}
        self._containing: Dict[Face, Tuple[Face, ...]] = {}
        self.exact = self.facet_count <= settings.exact_rational_facets

    def __repr__(self) -> str:
        return f"SimplicialComplex(name={self.name!r}, n={self.n_vertices}, d={self.d}, facets={self.facet_count})"

    @cached_property
    def facet_count(self) -> int:
        if self.is_complete:
            return comb(len(self.ground), self.d)
        return len(self._facets)

    @property
    def facets(self) -> Tuple[Face, ...]:
        if self._facets is None:
            self._facets = self.level(self.d)
        return self._facets

    @cached_property
    def isolated_vertices(self) -> Tuple[int, ...]:
        if self.is_complete:
            used = set(self.ground)
        else:
            used = {v for facet in self._facets for v in facet}
        return tuple(v for v in range(self.n_vertices) if v not in used)

    def level_size_bound(self, i: int) -> int:
        if self.is_complete:
            return comb(len(self.ground), i)
        return min(comb(self.n_vertices, i), self.facet_count * comb(self.d, i))

    def is_enumerable(self, i: int) -> bool:
        return 0 <= i <= self.d and self.level_size_bound(i) <= settings.level_cap

    def level(self, i: int) -> Tuple[Face, ...]:
        if not 0 <= i <= self.d:
            raise DimensionError(f"Level {i} outside [0, {self.d}]")
        if i in self._levels:
            return self._levels[i]
        bound = self.level_size_bound(i)
        if bound > settings.level_cap:
            raise SizeError(f"Level {i} may hold {bound} faces, above the level cap {settings.level_cap}", required_cap=bound)
        if self.is_complete:
            faces = tuple(combinations(self.ground, i))
        else:
            faces = tuple(sorted({sub for facet in self._facets for sub in combinations(facet, i)}))
        self._levels[i] = faces
        return faces

    def weights(self, i: int) -> Dict[Face, Weight]:
        """Push-down measure on X(i); exact rationals for small facet counts."""
        if i in self._weights:
            return self._weights[i]
        faces = self.level(i)
        if self.is_complete:
            w = self._uniform_weight(i)
            table = {face: w for face in faces}
        else:
            counts: Dict[Face, int] = defaultdict(int)
            for facet in self._facets:
                for sub in combinations(facet, i):
                    counts[sub] += 1
            denom = self.facet_count * comb(self.d, i)
            if self.exact:
                table = {face: Fraction(counts[face], denom) for face in faces}
            else:
                table = {face: counts[face] / denom for face in faces}
        self._weights[i] = table
        return table

    def _uniform_weight(self, i: int) -> Weight:
        size = comb(len(self.ground), i)
        return Fraction(1, size) if self.exact else 1.0 / size

    def weight(self, face: Sequence[int]) -> Weight:
        face = tuple(face)
        i = len(face)
        if self.is_complete:
            ground = set(self.ground)
            if i > self.d or any(v not in ground for v in face):
                return 0
            return self._uniform_weight(i)
        return self.weights(i).get(face, 0)

    def contains(self, face: Sequence[int]) -> bool:
        face = tuple(face)
        if len(face) > self.d:
            return False
        if self.is_complete:
            ground = set(self.ground)
            return all(v in ground for v in face)
        if self.is_enumerable(len(face)):
            return face in self.weights(len(face))
        target = set(face)
        return any(target <= set(facet) for facet in self._facets)

    def facets_containing(self, face: Sequence[int]) -> Tuple[Face, ...]:
        face = tuple(face)
        if face not in self._containing:
            target = set(face)
            self._containing[face] = tuple(f for f in self.facets if target <= set(f))
        return self._containing[face]

    def sample_facet(self, rng: random.Random) -> Face:
        if self.is_complete:
            return tuple(sorted(rng.sample(self.ground, self.d)))
        return rng.choice(self._facets)

    def sample_facet_containing(self, face: Sequence[int], rng: random.Random) -> Face:
        """Facet drawn from μ_d conditioned on containing `face`."""
        face = tuple(face)
        if self.is_complete:
            rest = [v for v in self.ground if v not in set(face)]
            return tuple(sorted(face + tuple(rng.sample(rest, self.d - len(face)))))
        options = self.facets_containing(face)
        if not options:
            raise MembershipError(f"{face} is not a face")
        return rng.choice(options)

    def sample_face(self, i: int, rng: random.Random) -> Face:
        if not 0 <= i <= self.d:
            raise DimensionError(f"Level {i} outside [0, {self.d}]")
        facet = self.sample_facet(rng)
        return tuple(sorted(rng.sample(facet, i)))

    def euler_characteristic(self) -> int:
        return sum((-1) ** (i - 1) * len(self.level(i)) for i in range(1, self.d + 1))


def build_complete(n: int, d: int, ground: Optional[Face] = None) -> SimplicialComplex:
    if n > settings.vertex_cap:
        raise SizeError(f"n={n} exceeds the vertex cap {settings.vertex_cap}", required_cap=n)
    size = n if ground is None else len(ground)
    if not 1 <= d <= size:
        raise ArgumentError(f"Need 1 <= d <= n, got d={d}, n={size}")
    return SimplicialComplex(n, d, ground=ground, name=f"complete({n},{d})")


def build_from_facets(n: int, facets: Iterable[Iterable[int]], name: str = "") -> SimplicialComplex:
    if n > settings.vertex_cap:
        raise SizeError(f"n={n} exceeds the vertex cap {settings.vertex_cap}", required_cap=n)
    cleaned = sorted({tuple(sorted(int(v) for v in facet)) for facet in facets})
    if not cleaned:
        raise EmptyComplexError("Facet list is empty")
    sizes = {len(f) for f in cleaned}
    if len(sizes) > 1:
        raise PurityError(f"Facets have mixed sizes {sorted(sizes)}")
    for facet in cleaned:
        if len(set(facet)) != len(facet):
            raise ArgumentError(f"Facet {facet} repeats a vertex")
        if facet and (facet[0] < 0 or facet[-1] >= n):
            raise ArgumentError(f"Facet {facet} uses a vertex outside [0, {n})")
    X = SimplicialComplex(n, sizes.pop(), facets=cleaned, name=name)
    if X.isolated_vertices:
        logger.info(f"Complex {name or X!r} has isolated vertices {X.isolated_vertices}")
    return X


RP2_FACETS: Tuple[Face, ...] = (
    (0, 1, 2), (0, 2, 3), (0, 3, 4), (0, 4, 5), (0, 1, 5),
    (1, 2, 4), (2, 3, 5), (1, 3, 4), (2, 4, 5), (1, 3, 5),
)

TORUS_FACETS: Tuple[Face, ...] = tuple(
    tuple(sorted(((i + a) % 7, (i + b) % 7, (i + c) % 7))) for i in range(7) for a, b, c in ((0, 1, 3), (0, 2, 3))
)


def builtin_complex(name: str, n: Optional[int] = None, d: Optional[int] = None) -> SimplicialComplex:
    """`complete` (needs n and d), `rp2` (6-vertex projective plane) or `torus` (7-vertex torus)."""
    if name == "complete":
        if n is None or d is None:
            raise ArgumentError("The complete complex needs n and d")
        return build_complete(n, d)
    if name == "rp2":
        return build_from_facets(6, RP2_FACETS, name="rp2")
    if name == "torus":
        return build_from_facets(7, TORUS_FACETS, name="torus")
    raise ArgumentError(f"Unknown builtin complex {name!r}; choose from complete, rp2, torus")


def parse_facet_text(text: str) -> Tuple[int, int, List[Face]]:
    """Facet file: first non-comment line `n d`, then one facet per line."""
    header = None
    facets: List[Face] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            values = [int(tok) for tok in line.split()]
        except ValueError:
            raise ArgumentError(f"line {lineno}: expected whitespace-separated integers, got {line!r}")
        if header is None:
            if len(values) != 2:
                raise ArgumentError(f"line {lineno}: header must be `n d`")
            header = (values[0], values[1])
            continue
        if len(values) != header[1]:
            raise PurityError(f"line {lineno}: facet has {len(values)} vertices, expected {header[1]}")
        facets.append(tuple(sorted(values)))
    if header is None:
        raise EmptyComplexError("Facet file has no header")
    return header[0], header[1], facets


def read_complex(path: Union[str, Path]) -> SimplicialComplex:
    path = Path(path)
    n, _, facets = parse_facet_text(path.read_text(encoding="ascii"))
    return build_from_facets(n, facets, name=path.stem)


def sample_face(X: SimplicialComplex, i: int, seed: int) -> Face:
    return X.sample_face(i, make_rng(seed))


def sample_nested(X: SimplicialComplex, sizes: Sequence[int], rng: Union[int, random.Random]) -> List[Face]:
    """Chain I_1 ⊆ ... ⊆ I_last with I_last ~ μ_{max} and each a uniform subset of the next."""
    sizes = list(sizes)
    if not sizes or any(a >= b for a, b in zip(sizes, sizes[1:])):
        raise ArgumentError(f"Sizes must be strictly increasing, got {sizes}")
    if sizes[-1] > X.d or sizes[0] < 0:
        raise DimensionError(f"Sizes {sizes} outside [0, {X.d}]")
    rng = make_rng(rng) if isinstance(rng, int) else rng
    chain = [X.sample_face(sizes[-1], rng)]
    for size in reversed(sizes[:-1]):
        chain.append(tuple(sorted(rng.sample(chain[-1], size))))
    return list(reversed(chain))


def link(X: SimplicialComplex, face: Sequence[int]) -> SimplicialComplex:
    face = tuple(face)
    if not face:
        return X
    if len(face) > X.d - 2:
        raise DimensionError(f"Link of a face of size {len(face)} needs d >= {len(face) + 2}")
    if not X.contains(face):
        raise MembershipError(f"{face} is not a face of {X!r}")
    if X.is_complete:
        ground = tuple(v for v in X.ground if v not in set(face))
        return SimplicialComplex(X.n_vertices, X.d - len(face), ground=ground, name=f"link{face}")
    target = set(face)
    facets = [tuple(v for v in f if v not in target) for f in X.facets_containing(face)]
    return SimplicialComplex(X.n_vertices, X.d - len(face), facets=sorted(set(facets)), name=f"link{face}")


def _splits(face: Face, parts: int, t: int) -> Iterable[Tuple[Face, ...]]:
    """All ordered splits of `face` into `parts` disjoint size-t pieces (in sorted face order)."""
    if parts == 0:
        yield ()
        return
    for first in combinations(face, t):
        rest = tuple(v for v in face if v not in set(first))
        for tail in _splits(rest, parts - 1, t):
            yield (first,) + tail


def _split_count(t: int, parts: int) -> int:
    return factorial(parts * t) // factorial(t) ** parts


class ConstraintGraph:
    """Weighted graph with lazily built edge and ordered-triangle tables.

    Edges are stored once, oriented by lexicographic vertex order. Ordered triangles
    (u, v, w) carry the probability of drawing that split.
    """

    def __init__(
        self,
        vertices: Sequence[Hashable],
        edge_builder: Callable[[], Dict[Tuple, float]],
        triangle_builder: Optional[Callable[[], List[Tuple[Tuple, float]]]] = None,
        edge_sampler: Optional[Callable[[random.Random], Tuple]] = None,
        triangle_sampler: Optional[Callable[[random.Random], Tuple]] = None,
        triangle_count_bound: int = 0,
        t: int = 1,
        name: str = "",
    ):
        self.vertices = tuple(vertices)
        self.t = t
        self.name = name
        self.triangle_count_bound = triangle_count_bound if triangle_builder else 0
        self._edge_builder = edge_builder
        self._triangle_builder = triangle_builder
        self._edge_sampler = edge_sampler
        self._triangle_sampler = triangle_sampler

    def __repr__(self) -> str:
        return f"ConstraintGraph(name={self.name!r}, vertices={len(self.vertices)})"

    @cached_property
    def edges(self) -> Dict[Tuple, float]:
        return self._edge_builder()

    @cached_property
    def neighbors(self) -> Dict[Hashable, List[Hashable]]:
        adj: Dict[Hashable, List[Hashable]] = {v: [] for v in self.vertices}
        for u, v in self.edges:
            adj[u].append(v)
            adj[v].append(u)
        return adj

    @property
    def has_triangles(self) -> bool:
        return self._triangle_builder is not None or self._triangle_sampler is not None

    @property
    def triangles_enumerable(self) -> bool:
        return self._triangle_builder is not None and self.triangle_count_bound <= settings.triangle_enum_cap

    @cached_property
    def triangles(self) -> List[Tuple[Tuple, float]]:
        if self._triangle_builder is None:
            return []
        if self.triangle_count_bound > settings.triangle_enum_cap:
            raise SizeError(
                f"{self.triangle_count_bound} ordered triangles exceed the enumeration cap {settings.triangle_enum_cap}",
                required_cap=self.triangle_count_bound,
            )
        return self._triangle_builder()

    def edge_weight(self, u, v) -> float:
        key = (u, v) if u < v else (v, u)
        return self.edges.get(key, 0.0)

    def sample_edge(self, rng: random.Random) -> Tuple:
        if self._edge_sampler is not None:
            return self._edge_sampler(rng)
        keys = list(self.edges)
        u, v = rng.choices(keys, weights=[self.edges[k] for k in keys])[0]
        return (u, v) if rng.random() < 0.5 else (v, u)

    def sample_triangle(self, rng: random.Random) -> Tuple:
        if self._triangle_sampler is not None:
            return self._triangle_sampler(rng)
        triangles = self.triangles
        if not triangles:
            raise DimensionError("Graph has no triangles")
        return rng.choices([tri for tri, _ in triangles], weights=[w for _, w in triangles])[0]


def _simplicial_graph(X: SimplicialComplex, t: int, with_triangles: bool, name: str) -> ConstraintGraph:
    def build_edges() -> Dict[Tuple, float]:
        edges: Dict[Tuple, float] = defaultdict(float)
        share = 2.0 / comb(2 * t, t)
        for W, mu in X.weights(2 * t).items():
            if not mu:
                continue
            for u, v in _splits(W, 2, t):
                if u < v:
                    edges[(u, v)] += float(mu) * share
        return dict(edges)

    def build_triangles() -> List[Tuple[Tuple, float]]:
        count = _split_count(t, 3)
        return [
            (split, float(mu) / count)
            for T, mu in X.weights(3 * t).items()
            if mu
            for split in _splits(T, 3, t)
        ]

    def sample_split(rng: random.Random, parts: int) -> Tuple:
        W = list(X.sample_face(parts * t, rng))
        rng.shuffle(W)
        return tuple(tuple(sorted(W[j * t:(j + 1) * t])) for j in range(parts))

    triangles = with_triangles and 3 * t <= X.d
    return ConstraintGraph(
        X.level(t),
        build_edges,
        build_triangles if triangles else None,
        edge_sampler=lambda rng: sample_split(rng, 2),
        triangle_sampler=(lambda rng: sample_split(rng, 3)) if triangles else None,
        triangle_count_bound=X.level_size_bound(3 * t) * _split_count(t, 3) if triangles else 0,
        t=t,
        name=name,
    )


def constraint_graph(X: SimplicialComplex, t: int) -> ConstraintGraph:
    """G_t[X]: t-faces, adjacent when disjoint with union in X(2t); triangles split 3t-faces."""
    if t < 1 or 3 * t > X.d:
        raise DimensionError(f"G_t needs 1 <= t and 3t <= d, got t={t}, d={X.d}")
    return _simplicial_graph(X, t, True, f"G_{t}[{X.name}]")


def kneser_graph(A: Sequence[int], t: int) -> ConstraintGraph:
    A = tuple(sorted(A))
    if t < 1 or len(A) < 2 * t:
        raise DimensionError(f"Kneser graph K(A,{t}) needs |A| >= {2 * t}, got {len(A)}")
    single = SimplicialComplex(max(A) + 1, len(A), facets=[A], name=f"simplex{A}")
    return _simplicial_graph(single, t, True, f"K({A},{t})")


class GaloisField:
    """Arithmetic tables for GF(q), q in {2, 3, 4}. GF(4) = {0, 1, a, a+1} encoded 0..3 with a^2 = a + 1."""

    def __init__(self, q: int):
        if q not in (2, 3, 4):
            raise ArgumentError(f"Unsupported field size {q}; expected 2, 3 or 4")
        self.q = q
        if q == 4:
            self.add = [[a ^ b for b in range(4)] for a in range(4)]
            self.mul = [
                [0, 0, 0, 0],
                [0, 1, 2, 3],
                [0, 2, 3, 1],
                [0, 3, 1, 2],
            ]
        else:
            self.add = [[(a + b) % q for b in range(q)] for a in range(q)]
            self.mul = [[(a * b) % q for b in range(q)] for a in range(q)]
        self.neg = [next(b for b in range(q) if self.add[a][b] == 0) for a in range(q)]
        self.inv = [0] + [next(b for b in range(q) if self.mul[a][b] == 1) for a in range(1, q)]

    def rank(self, rows: Sequence[Sequence[int]]) -> int:
        work = [list(r) for r in rows]
        rank = 0
        cols = len(work[0]) if work else 0
        for col in range(cols):
            pivot = next((r for r in range(rank, len(work)) if work[r][col]), None)
            if pivot is None:
                continue
            work[rank], work[pivot] = work[pivot], work[rank]
            scale = self.inv[work[rank][col]]
            work[rank] = [self.mul[scale][x] for x in work[rank]]
            for r in range(len(work)):
                if r != rank and work[r][col]:
                    factor = self.neg[work[r][col]]
                    work[r] = [self.add[x][self.mul[factor][y]] for x, y in zip(work[r], work[rank])]
            rank += 1
        return rank


def _rref_subspaces(field: GaloisField, n: int, r: int) -> List[Tuple[Tuple[int, ...], ...]]:
    """Every r-dimensional subspace of GF(q)^n, as its reduced row echelon basis."""
    spaces = []
    for pivots in combinations(range(n), r):
        free = [(i, j) for i, p in enumerate(pivots) for j in range(p + 1, n) if j not in pivots]
        for values in product(range(field.q), repeat=len(free)):
            rows = [[0] * n for _ in range(r)]
            for i, p in enumerate(pivots):
                rows[i][p] = 1
            for (i, j), x in zip(free, values):
                rows[i][j] = x
            spaces.append(tuple(tuple(row) for row in rows))
    return sorted(spaces)


def grassmann_graph(q: int, n: int, r: int) -> ConstraintGraph:
    """r-subspaces of GF(q)^n, adjacent when they intersect trivially; not a simplicial complex."""
    if r < 1 or 2 * r > n:
        raise DimensionError(f"Grassmann graph needs 1 <= r and 2r <= n, got r={r}, n={n}")
    if q ** n > settings.grassmann_cap:
        raise SizeError(f"q^n = {q ** n} exceeds the Grassmann cap {settings.grassmann_cap}", required_cap=q ** n)
    field = GaloisField(q)
    spaces = _rref_subspaces(field, n, r)

    def build_edges() -> Dict[Tuple, float]:
        pairs = [(u, v) for u, v in combinations(spaces, 2) if field.rank(u + v) == 2 * r]
        return {pair: 1.0 / len(pairs) for pair in pairs} if pairs else {}

    def build_triangles() -> List[Tuple[Tuple, float]]:
        found = [
            (u, v, w)
            for u, v, w in permutations(spaces, 3)
            if u < v < w and field.rank(u + v + w) == 3 * r
        ]
        ordered = [perm for tri in found for perm in permutations(tri)]
        return [(tri, 1.0 / len(ordered)) for tri in ordered]

    with_triangles = 3 * r <= n
    return ConstraintGraph(
        spaces,
        build_edges,
        build_triangles if with_triangles else None,
        triangle_count_bound=len(spaces) ** 3 if with_triangles else 0,
        t=r,
        name=f"Grassmann({q},{n},{r})",
    )


class ComplexSpecRequest(BaseModel):
    kind: str = "complete"
    n: Optional[int] = None
    d: Optional[int] = None
    facets: Optional[List[List[int]]] = None


class ComplexSummary(BaseModel):
    name: str
    n_vertices: int
    d: int
    facet_count: int
    level_sizes: Dict[int, int]
    isolated_vertices: List[int]


def build_from_spec(spec: ComplexSpecRequest) -> SimplicialComplex:
    if spec.kind == "facets":
        if spec.n is None:
            raise ArgumentError("A facet-listed complex needs n")
        return build_from_facets(spec.n, spec.facets or [])
    return builtin_complex(spec.kind, spec.n, spec.d)


@router.post("/summary", response_model=ComplexSummary)
async def summarize_complex(spec: ComplexSpecRequest) -> ComplexSummary:
    """Level sizes and isolated vertices of a complete or facet-listed complex"""
    try:
        X = build_from_spec(spec)
        return ComplexSummary(
            name=X.name,
            n_vertices=X.n_vertices,
            d=X.d,
            facet_count=X.facet_count,
            level_sizes={i: X.level_size_bound(i) if X.is_complete else len(X.level(i)) for i in range(1, X.d + 1)},
            isolated_vertices=list(X.isolated_vertices),
        )
    except HdxError as e:
        logger.error(f"Complex summary rejected: {e}")
        raise HTTPException(status_code=400, detail=str(e))
