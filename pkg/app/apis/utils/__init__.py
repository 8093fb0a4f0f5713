"""Shared helpers: error types, seed mixing, Wilson intervals and bit-string plumbing.

Faces are sorted tuples of vertex ids. Bit strings (global functions, entries of
local assignments, list entries) are plain '0'/'1' strings; the j-th character of
an entry attached to a face is the value at the face's j-th smallest vertex.
"""

import hashlib
import logging
import random
from concurrent.futures import ThreadPoolExecutor
from math import comb, sqrt
from typing import Callable, Iterable, Optional, Sequence, TypeVar

from scipy.stats import norm

from app.env import settings

logger = logging.getLogger(__name__)

Face = tuple[int, ...]

T = TypeVar("T")
R = TypeVar("R")


class HdxError(ValueError):
    """Base error for every precondition or size failure in the package."""


class SizeError(HdxError):
    def __init__(self, message: str, required_cap: Optional[int] = None):
        super().__init__(message)
        self.required_cap = required_cap


class PurityError(HdxError):
    pass


class EmptyComplexError(HdxError):
    pass


class DimensionError(HdxError):
    pass


class MembershipError(HdxError):
    pass


class ArgumentError(HdxError):
    pass


class PreconditionError(HdxError):
    pass


class InvariantError(HdxError):
    pass


class ConvergenceError(HdxError):
    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class ConfigError(HdxError):
    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None, column: Optional[int] = None):
        super().__init__(message)
        self.key = key
        self.line = line
        self.column = column


def mix_seed(master: int, *parts) -> int:
    """Derive a child seed from a master seed and any hashable labels (trial index, face, round)."""
    payload = repr((int(master),) + tuple(parts)).encode("ascii")
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "big")


def make_rng(seed: int, *parts) -> random.Random:
    return random.Random(mix_seed(seed, *parts) if parts else seed)


def wilson_interval(passes: int, trials: int, confidence: float = 0.95) -> tuple[float, float]:
    if trials <= 0:
        return 0.0, 1.0
    z = float(norm.ppf(1 - (1 - confidence) / 2))
    p = passes / trials
    denom = 1 + z * z / trials
    centre = (p + z * z / (2 * trials)) / denom
    half = z * sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


def check_face(face: Iterable[int]) -> Face:
    face = tuple(int(v) for v in face)
    if any(a >= b for a, b in zip(face, face[1:])):
        raise ArgumentError(f"Face {face} is not strictly increasing")
    return face


def project(face: Sequence[int], bits: str, sub: Sequence[int]) -> str:
    """Restrict the string attached to `face` to the vertices of `sub` (sub ⊆ face)."""
    pos = {v: j for j, v in enumerate(face)}
    try:
        return "".join(bits[pos[v]] for v in sub)
    except KeyError as e:
        raise ArgumentError(f"Vertex {e.args[0]} of {tuple(sub)} is not in face {tuple(face)}")


def restrict(f: str, face: Sequence[int]) -> str:
    """Restrict a global function (one bit per vertex) to a face."""
    return "".join(f[v] for v in face)


def interleave(parts: Sequence[tuple[Sequence[int], str]]) -> tuple[Face, str]:
    """Concatenate strings living on disjoint faces into the sorted order of their union."""
    values: dict[int, str] = {}
    for face, bits in parts:
        for v, b in zip(face, bits):
            values[v] = b
    union = tuple(sorted(values))
    return union, "".join(values[v] for v in union)


def distance(a: str, b: str) -> float:
    if len(a) != len(b):
        raise ArgumentError(f"Length mismatch: {len(a)} vs {len(b)}")
    if not a:
        return 0.0
    return sum(x != y for x, y in zip(a, b)) / len(a)


def random_bits(rng: random.Random, length: int) -> str:
    if length == 0:
        return ""
    return format(rng.getrandbits(length), f"0{length}b")


def binom(n: int, k: int) -> int:
    return comb(n, k) if 0 <= k <= n else 0


def parallel_map(fn: Callable[[T], R], items: Sequence[T], workers: Optional[int] = None) -> list[R]:
    """Map in a thread pool, preserving input order."""
    workers = settings.workers if workers is None else workers
    if workers == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers or None) as pool:
        return list(pool.map(fn, items))


__all__ = [
    "Face",
    "HdxError",
    "SizeError",
    "PurityError",
    "EmptyComplexError",
    "DimensionError",
    "MembershipError",
    "ArgumentError",
    "PreconditionError",
    "InvariantError",
    "ConvergenceError",
    "ConfigError",
    "mix_seed",
    "make_rng",
    "wilson_interval",
    "check_face",
    "project",
    "restrict",
    "interleave",
    "distance",
    "random_bits",
    "binom",
    "parallel_map",
]
