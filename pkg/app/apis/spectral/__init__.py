"""Spectral audits: down-up walks, link expansion, expander mixing and sampling bounds.

Every eigenvalue computation goes through the symmetrization S = W^{1/2} M W^{-1/2}
of a walk M reversible with respect to W.
"""

import logging
from collections import defaultdict
from itertools import combinations
from math import comb, isinf, sqrt
from typing import Callable, Dict, Hashable, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
from fastapi import APIRouter, HTTPException
from pydantic import BaseModel
from scipy import sparse

from app.env import settings
from app.apis.complex_core import ComplexSpecRequest, SimplicialComplex, build_from_spec, link
from app.apis.models import SpectralReport
from app.apis.utils import ArgumentError, ConvergenceError, DimensionError, Face, HdxError, make_rng, parallel_map

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/spectral")

DENSE = "dense_symmetric_eig"
POWER = "power_iteration"


class Tolerances(BaseModel):
    measure_sum: float = 1e-12
    push_down: float = 1e-10
    row_sum: float = 1e-10
    detailed_balance: float = 1e-9
    residual: float = 1e-8
    mixing_slack: float = 1e-9
    psd: float = 1e-9
    max_iterations: int = 5000
    block_size: int = 16


tolerances = Tolerances()


class WalkMatrix:
    """Row-stochastic M on `rows`, kept as a product of sparse factors."""

    def __init__(self, rows: Sequence[Hashable], factors: List[sparse.spmatrix], stationary: np.ndarray):
        self.rows = tuple(rows)
        self.cols = self.rows
        self.factors = [sparse.csr_matrix(f) for f in factors]
        self.stationary = np.asarray(stationary, dtype=float)

    @classmethod
    def from_weights(cls, rows: Sequence[Hashable], weights: np.ndarray) -> "WalkMatrix":
        """Random walk on a symmetric nonnegative weight matrix; stationary ∝ degree."""
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (len(rows), len(rows)):
            raise ArgumentError(f"Weight matrix shape {weights.shape} does not match {len(rows)} rows")
        degree = weights.sum(axis=1)
        if np.any(degree <= 0):
            raise ArgumentError("Every row needs positive weight")
        return cls(rows, [weights / degree[:, None]], degree / degree.sum())

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def matrix(self) -> np.ndarray:
        product = self.factors[0]
        for f in self.factors[1:]:
            product = product @ f
        return product.toarray()

    def apply(self, V: np.ndarray) -> np.ndarray:
        for f in reversed(self.factors):
            V = f @ V
        return V

    def apply_symmetrized(self, V: np.ndarray) -> np.ndarray:
        root = np.sqrt(self.stationary)
        return root[:, None] * self.apply(V / root[:, None]) if V.ndim == 2 else root * self.apply(V / root)

    def symmetrized(self) -> np.ndarray:
        root = np.sqrt(self.stationary)
        S = root[:, None] * self.matrix / root[None, :]
        return (S + S.T) / 2

    def row_sum_error(self) -> float:
        return float(np.max(np.abs(self.apply(np.ones(len(self))) - 1.0)))

    def detailed_balance_error(self) -> float:
        flow = self.stationary[:, None] * self.matrix
        return float(np.max(np.abs(flow - flow.T)))


def down_up_walk(X: SimplicialComplex, i: int, j: int) -> WalkMatrix:
    """A ∈ X(i) → uniform J ⊆ A of size j → A' ∼ μ_i conditioned on A' ⊇ J."""
    if not 0 <= j <= i <= X.d:
        raise DimensionError(f"Need 0 <= j <= i <= d, got i={i}, j={j}, d={X.d}")
    upper = X.weights(i)
    lower = X.weights(j)
    rows = list(upper)
    index_i = {face: r for r, face in enumerate(rows)}
    index_j = {face: c for c, face in enumerate(lower)}
    ways = comb(i, j)
    down_r, down_c, up_r, up_c, up_v = [], [], [], [], []
    for A in rows:
        for J in combinations(A, j):
            down_r.append(index_i[A])
            down_c.append(index_j[J])
            up_r.append(index_j[J])
            up_c.append(index_i[A])
            up_v.append(float(upper[A]) / (ways * float(lower[J])))
    down = sparse.csr_matrix((np.full(len(down_r), 1.0 / ways), (down_r, down_c)), shape=(len(rows), len(lower)))
    up = sparse.csr_matrix((up_v, (up_r, up_c)), shape=(len(lower), len(rows)))
    stationary = np.array([float(upper[A]) for A in rows])
    return WalkMatrix(rows, [down, up], stationary)


def dense_second_eigenvalue(S: np.ndarray) -> Tuple[float, float, float]:
    """(λ₂, σ₂, residual) of a symmetric matrix whose top eigenvalue is the trivial one."""
    n = S.shape[0]
    if n == 1:
        return 0.0, 0.0, 0.0
    vals, vecs = np.linalg.eigh(S)
    lam2 = float(vals[-2])
    sigma2 = float(max(abs(vals[-2]), abs(vals[0])))
    residual = float(np.linalg.norm(S @ vecs[:, -2] - vals[-2] * vecs[:, -2]))
    return lam2, sigma2, residual


def block_power_iteration(
    apply: Callable[[np.ndarray], np.ndarray],
    top: np.ndarray,
    n: int,
    seed: int = 0,
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
) -> Tuple[float, float, int, float]:
    """Second eigenvalue of a symmetric operator with spectrum in [-1, 1] and known top vector.

    Subspace iteration on S + I with Rayleigh-Ritz extraction; stops on the residual
    of the leading Ritz pair. Returns (λ₂, smallest Ritz value, iterations, residual).
    """
    tol = tolerances.residual if tol is None else tol
    max_iter = tolerances.max_iterations if max_iter is None else max_iter
    if n == 1:
        return 0.0, 0.0, 0, 0.0
    top = top / np.linalg.norm(top)
    block = min(tolerances.block_size, n - 1)
    rng = np.random.default_rng(seed)
    V = rng.standard_normal((n, block))
    residual = np.inf
    for iteration in range(1, max_iter + 1):
        V = V - np.outer(top, top @ V)
        V, _ = np.linalg.qr(V)
        SV = apply(V)
        H = V.T @ SV
        theta, Y = np.linalg.eigh((H + H.T) / 2)
        theta, Y = theta[::-1], Y[:, ::-1]
        ritz = V @ Y
        image = SV @ Y
        residual = float(np.linalg.norm(image[:, 0] - theta[0] * ritz[:, 0]))
        if residual <= tol:
            return float(theta[0]), float(theta[-1]), iteration, residual
        V = image + ritz
    raise ConvergenceError(f"Power iteration did not reach residual {tol} in {max_iter} iterations", residual=residual)


def walk_spectrum(walk: WalkMatrix, method: Optional[str] = None, seed: int = 0) -> Tuple[float, float, str, int, float]:
    """(λ₂, σ₂, method, iterations, residual) for a reversible walk."""
    method = method or (DENSE if len(walk) <= settings.dense_eig_cap else POWER)
    if method == DENSE:
        lam2, sigma2, residual = dense_second_eigenvalue(walk.symmetrized())
        return lam2, sigma2, DENSE, 1, residual
    if method != POWER:
        raise ArgumentError(f"Unknown eigen method {method!r}")
    lam2, lowest, iterations, residual = block_power_iteration(
        walk.apply_symmetrized, np.sqrt(walk.stationary), len(walk), seed=seed
    )
    # σ₂ from the block is a lower estimate unless the walk is PSD
    return lam2, max(abs(lam2), abs(min(lowest, 0.0))), POWER, iterations, residual


def down_up_spectrum(X: SimplicialComplex, i: int, j: int, method: Optional[str] = None, seed: int = 0) -> SpectralReport:
    walk = down_up_walk(X, i, j)
    logger.info(f"Down-up spectrum of {X.name} at levels ({i},{j}): {len(walk)} states")
    lam2, sigma2, method, iterations, residual = walk_spectrum(walk, method, seed)
    bound = j / i if i else 0.0
    return SpectralReport(
        level_i=i,
        level_j=j,
        second_eigenvalue=lam2,
        second_singular=sigma2,
        method=method,
        iterations=iterations,
        residual=residual,
        bound=bound,
        within_bound=lam2 <= bound + tolerances.psd,
    )


def link_spectrum(X: SimplicialComplex, face: Sequence[int]) -> np.ndarray:
    """Ascending eigenvalues of the normalized adjacency of the link's 1-skeleton."""
    L = link(X, face)
    vertices = [v for (v,) in L.level(1)]
    index = {v: r for r, v in enumerate(vertices)}
    weights = np.zeros((len(vertices), len(vertices)))
    for (u, v), mu in L.weights(2).items():
        weights[index[u], index[v]] = weights[index[v], index[u]] = float(mu)
    degree = weights.sum(axis=1)
    root = np.sqrt(degree)
    return np.linalg.eigvalsh(weights / root[:, None] / root[None, :])


class LinkExpansionReport(BaseModel):
    gamma: float
    worst_link: List[int]
    two_sided: bool
    links_checked: int
    sampled_links_only: bool


def _link_gamma(X: SimplicialComplex, face: Face, two_sided: bool) -> float:
    vals = link_spectrum(X, face)
    if len(vals) < 2:
        return 0.0
    return float(max(abs(vals[-2]), abs(vals[0]))) if two_sided else float(vals[-2])


def link_expansion(X: SimplicialComplex, two_sided: bool = True, seed: int = 0) -> LinkExpansionReport:
    """γ = worst link spectrum over faces of size ≤ d−2; complete complexes use one link per level."""
    if X.d < 2:
        raise DimensionError("Link expansion needs d >= 2")
    sampled = False
    if X.is_complete:
        faces = [X.ground[:i] for i in range(X.d - 1)]
    else:
        total = sum(X.level_size_bound(i) for i in range(X.d - 1))
        if total <= settings.link_cap:
            faces = [face for i in range(X.d - 1) for face in X.level(i)]
        else:
            rng = make_rng(seed, "links")
            per_level = max(1, settings.link_cap // (X.d - 1))
            faces = sorted({X.sample_face(i, rng) for i in range(X.d - 1) for _ in range(per_level)})
            sampled = True
            logger.warning(f"{total} links exceed the link cap {settings.link_cap}; sampled {len(faces)}")
    gammas = parallel_map(lambda face: _link_gamma(X, face, two_sided), faces)
    worst = max(range(len(faces)), key=lambda r: (gammas[r], -r))
    return LinkExpansionReport(
        gamma=gammas[worst],
        worst_link=list(faces[worst]),
        two_sided=two_sided,
        links_checked=len(faces),
        sampled_links_only=sampled,
    )


class BipartiteGraph:
    """Joint distribution on left × right vertices."""

    def __init__(self, left: Sequence[Hashable], right: Sequence[Hashable], joint: sparse.spmatrix):
        self.left = tuple(left)
        self.right = tuple(right)
        self.joint = sparse.csr_matrix(joint)
        self.left_measure = np.asarray(self.joint.sum(axis=1)).ravel()
        self.right_measure = np.asarray(self.joint.sum(axis=0)).ravel()
        self.left_index = {u: r for r, u in enumerate(self.left)}
        self.right_index = {v: c for c, v in enumerate(self.right)}
        self._sigma2: Optional[float] = None

    @property
    def second_singular(self) -> float:
        if self._sigma2 is None:
            lroot = np.sqrt(self.left_measure)
            rroot = np.sqrt(self.right_measure)
            normalized = self.joint.toarray() / lroot[:, None] / rroot[None, :]
            values = np.linalg.svd(normalized, compute_uv=False)
            self._sigma2 = float(values[1]) if len(values) > 1 else 0.0
        return self._sigma2

    def indicator(self, side: str, members: Iterable[Hashable]) -> np.ndarray:
        index = self.left_index if side == "left" else self.right_index
        vec = np.zeros(len(index))
        for m in members:
            if m not in index:
                raise ArgumentError(f"{m} is not a {side} vertex")
            vec[index[m]] = 1.0
        return vec


def containment_graph(X: SimplicialComplex, i: int, j: int) -> BipartiteGraph:
    """X(i) vs X(j), j < i: draw A ∼ μ_i and a uniform J ⊆ A."""
    if not 0 <= j < i <= X.d:
        raise DimensionError(f"Need 0 <= j < i <= d, got i={i}, j={j}")
    upper = X.weights(i)
    lower = list(X.weights(j))
    index_j = {face: c for c, face in enumerate(lower)}
    rows, cols, vals = [], [], []
    ways = comb(i, j)
    for r, (A, mu) in enumerate(upper.items()):
        for J in combinations(A, j):
            rows.append(r)
            cols.append(index_j[J])
            vals.append(float(mu) / ways)
    joint = sparse.csr_matrix((vals, (rows, cols)), shape=(len(upper), len(lower)))
    return BipartiteGraph(list(upper), lower, joint)


class MixingAudit(BaseModel):
    lhs: float
    bound: float
    holds: bool
    lam: float


def mixing_audit(G: BipartiteGraph, A: Iterable[Hashable], B: Iterable[Hashable], lam: Optional[float] = None) -> MixingAudit:
    a = G.indicator("left", A)
    b = G.indicator("right", B)
    lam = G.second_singular if lam is None else lam
    mu_a = float(G.left_measure @ a)
    mu_b = float(G.right_measure @ b)
    both = float(a @ (G.joint @ b))
    lhs = abs(both - mu_a * mu_b)
    bound = lam * sqrt(max(mu_a * (1 - mu_a) * mu_b * (1 - mu_b), 0.0))
    return MixingAudit(lhs=lhs, bound=bound, holds=lhs <= bound + tolerances.mixing_slack, lam=lam)


class SamplingAudit(BaseModel):
    delta: float
    eps: float
    bad_mass: float
    bound: float
    holds: bool
    degenerate_eps: bool


def sampling_audit(G: BipartiteGraph, B: Iterable[Hashable], eps: float, lam: Optional[float] = None) -> SamplingAudit:
    """Mass of left vertices whose neighbourhood density in B exceeds μ(B) + ε, against λ²δ/ε²."""
    b = G.indicator("right", B)
    delta = float(G.right_measure @ b)
    if eps <= 0:
        return SamplingAudit(delta=delta, eps=eps, bad_mass=0.0, bound=float("inf"), holds=True, degenerate_eps=True)
    lam = G.second_singular if lam is None else lam
    density = np.asarray(G.joint @ b).ravel() / G.left_measure
    bad = float(G.left_measure[density > delta + eps].sum())
    bound = lam * lam * delta / (eps * eps)
    return SamplingAudit(
        delta=delta,
        eps=eps,
        bad_mass=bad,
        bound=bound,
        holds=isinf(bound) or bad <= bound + tolerances.mixing_slack,
        degenerate_eps=False,
    )


class CheegerAudit(BaseModel):
    mass: float
    cross_mass: float
    conductance: float


def cheeger_audit(X: SimplicialComplex, side: Iterable[Face], b: Optional[int] = None) -> CheegerAudit:
    """Conductance of a set of facets under the walk A → B ∼ μ_b(·|B ⊆ A) → A' ⊇ B."""
    b = X.d // 2 if b is None else b
    inside: Set[Face] = {tuple(f) for f in side}
    through: Dict[Face, int] = defaultdict(int)
    through_inside: Dict[Face, int] = defaultdict(int)
    for facet in X.facets:
        hit = facet in inside
        for B in combinations(facet, b):
            through[B] += 1
            if hit:
                through_inside[B] += 1
    total = X.facet_count * comb(X.d, b)
    cross = sum(
        (count / total) * (through_inside[B] / count) * (1 - through_inside[B] / count)
        for B, count in through.items()
    )
    mass = sum(1 for f in X.facets if f in inside) / X.facet_count
    return CheegerAudit(mass=mass, cross_mass=cross, conductance=cross / mass if mass else 0.0)


class DownUpRequest(BaseModel):
    complex: ComplexSpecRequest
    i: int
    j: int
    method: Optional[str] = None


@router.post("/down-up", response_model=SpectralReport)
async def down_up(body: DownUpRequest) -> SpectralReport:
    """Second eigenvalue of the down-up walk on X(i) through X(j)"""
    try:
        return down_up_spectrum(build_from_spec(body.complex), body.i, body.j, body.method)
    except ConvergenceError as e:
        logger.error(f"Eigen solve failed with residual {e.residual}")
        raise HTTPException(status_code=422, detail=str(e))
    except HdxError as e:
        raise HTTPException(status_code=400, detail=str(e))


class LinkExpansionRequest(BaseModel):
    complex: ComplexSpecRequest
    two_sided: bool = True


@router.post("/links", response_model=LinkExpansionReport)
async def links(body: LinkExpansionRequest) -> LinkExpansionReport:
    try:
        return link_expansion(build_from_spec(body.complex), body.two_sided)
    except HdxError as e:
        raise HTTPException(status_code=400, detail=str(e))
