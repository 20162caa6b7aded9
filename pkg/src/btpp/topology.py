"""B-ary pull/push trees and their 0/1 mixing matrices.

Node labels are 1..n, assigned layer by layer with node 1 as the root.
Matrix rows and columns are 0-based array positions, so node ``i`` sits
at position ``i - 1``.
"""

from __future__ import annotations

import functools
import logging
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)


class SpectralNormError(RuntimeError):
    """Power iteration hit its iteration cap."""

    def __init__(self, message: str, bound: float):
        super().__init__(message)
        self.bound = bound


def geometric_count(B: int, k: int) -> int:
    """Number of nodes in a full B-ary tree of depth k, (B^(k+1) - 1)/(B - 1)."""
    total, layer = 0, 1
    for _ in range(k + 1):
        total += layer
        layer *= B
    return total


@dataclass(frozen=True)
class BAryTree:
    n: int
    B: int
    d: int
    parents: tuple[int, ...]
    child_lists: tuple[tuple[int, ...], ...]

    def parent(self, i: int) -> int:
        return self.parents[i - 1]

    def children(self, i: int) -> tuple[int, ...]:
        return self.child_lists[i - 1]

    def nodes(self) -> range:
        return range(1, self.n + 1)

    def depth(self, i: int) -> int:
        hops = 0
        while i != 1:
            i = self.parent(i)
            hops += 1
        return hops

    def partners(self, i: int) -> tuple[int, ...]:
        """Distinct communication partners of node i, self-loop excluded."""
        found = set(self.children(i))
        if i != 1:
            found.add(self.parent(i))
        return tuple(sorted(found))


def tree_diameter(n: int, B: int) -> int:
    """Smallest d with n <= (B^(d+1) - 1)/(B - 1), by integer accumulation."""
    d, total, layer = 0, 1, 1
    while total < n:
        layer *= B
        total += layer
        d += 1
    return d


@functools.lru_cache(maxsize=None)
def build_bary_tree(n: int, B: int) -> BAryTree:
    if B < 2:
        raise ValueError(f"branch size B must be >= 2, got {B}")
    if n < 1:
        raise ValueError(f"node count n must be >= 1, got {n}")
    parents = [1] + [(i - 2) // B + 1 for i in range(2, n + 1)]
    child_lists = tuple(
        tuple(range(B * (j - 1) + 2, min(B * j + 1, n) + 1)) for j in range(1, n + 1)
    )
    return BAryTree(n=n, B=B, d=tree_diameter(n, B), parents=tuple(parents), child_lists=child_lists)


@dataclass(frozen=True)
class MixingMatrix:
    """Sparse 0/1 matrix; ``support[r]`` lists the columns holding a 1 in row r."""

    n: int
    support: tuple[tuple[int, ...], ...]
    stochasticity: str = "none"

    def to_dense(self, dtype=np.int64) -> np.ndarray:
        M = np.zeros((self.n, self.n), dtype=dtype)
        for r, cols in enumerate(self.support):
            M[r, list(cols)] = 1
        return M

    def transpose(self, stochasticity: str = "none") -> "MixingMatrix":
        rows: list[list[int]] = [[] for _ in range(self.n)]
        for r, cols in enumerate(self.support):
            for c in cols:
                rows[c].append(r)
        return MixingMatrix(self.n, tuple(tuple(sorted(r)) for r in rows), stochasticity)

    @property
    def entries(self) -> frozenset[tuple[int, int]]:
        return frozenset((r, c) for r, cols in enumerate(self.support) for c in cols)


@functools.lru_cache(maxsize=None)
def pull_matrix(tree: BAryTree) -> MixingMatrix:
    """R: row i holds a single 1 at the parent of node i (node 1 pulls from itself)."""
    return MixingMatrix(tree.n, tuple((tree.parent(i) - 1,) for i in tree.nodes()), "row")


@functools.lru_cache(maxsize=None)
def push_matrix(tree: BAryTree) -> MixingMatrix:
    """C = R^T: row j collects node j's children (plus node 1's self-loop)."""
    return pull_matrix(tree).transpose("column")


@dataclass(frozen=True)
class LayerIndexSet:
    i: int
    k: int
    range: range


def layer_index_set(tree: BAryTree, i: int, k: int) -> LayerIndexSet:
    """Rows holding a 1 in column i of R^k, as node labels clipped to [n]."""
    head = geometric_count(tree.B, k)
    if i == 1:
        lo, hi = 1, head
    else:
        lo = head + (i - 2) * tree.B**k + 1
        hi = head + (i - 1) * tree.B**k
    return LayerIndexSet(i, k, range(lo, min(hi, tree.n) + 1))


def closed_form_power(tree: BAryTree, k: int) -> MixingMatrix:
    """R^k assembled column by column from the layer index sets."""
    if k < 1:
        raise ValueError(f"power k must be >= 1, got {k}")
    rows: list[list[int]] = [[] for _ in range(tree.n)]
    for i in tree.nodes():
        for r in layer_index_set(tree, i, k).range:
            rows[r - 1].append(i - 1)
    return MixingMatrix(tree.n, tuple(tuple(r) for r in rows), "row")


def left_eigenvector_u(tree: BAryTree) -> np.ndarray:
    u = np.zeros(tree.n, dtype=np.int64)
    u[0] = tree.n
    return u


def consensus_projection(X: np.ndarray, tree: BAryTree) -> np.ndarray:
    """Pi_u X = X - 1 x_1^T, since u^T X / n is the first row of X."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != tree.n:
        raise ValueError(f"expected {tree.n} rows, got shape {X.shape}")
    return X - X[0]


def restart_seed(*key: int) -> int:
    return zlib.crc32(repr(tuple(key)).encode())


def spectral_norm(
    M: np.ndarray,
    tol: float = 1e-6,
    max_iter: int = 100_000,
    seed: Optional[int] = None,
    stall_window: int = 50,
) -> float:
    """Largest singular value of M by power iteration on M^T M.

    Starts from the all-ones vector. When the Rayleigh quotient stops moving
    for ``stall_window`` iterations without the eigen-residual converging
    (or collapses to zero), restarts once from a pseudo-random vector drawn
    from ``seed`` and keeps the larger estimate.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = M.shape[1]
    if not np.any(M):
        return 0.0

    starts = [np.ones(n)]
    estimates: list[float] = []
    lam = 0.0
    used = 0
    while starts:
        v = starts.pop(0)
        v = v / np.linalg.norm(v)
        lam_prev, flat = -1.0, 0
        while used < max_iter:
            used += 1
            w = M.T @ (M @ v)
            lam = float(v @ w)
            if lam <= 0.0:
                break
            resid = np.linalg.norm(w - lam * v)
            if resid <= tol * lam:
                return float(np.sqrt(max([lam, *estimates])))
            flat = flat + 1 if abs(lam - lam_prev) <= tol * lam else 0
            if flat >= stall_window:
                break
            lam_prev = lam
            v = w / np.linalg.norm(w)
        else:
            raise SpectralNormError(
                f"power iteration did not converge in {max_iter} iterations",
                float(np.sqrt(max([lam, *estimates, 0.0]))),
            )
        estimates.append(max(lam, 0.0))
        if len(estimates) == 1:
            rng = np.random.default_rng(seed if seed is not None else restart_seed(n))
            starts.append(rng.standard_normal(n))
            logger.debug("power iteration stalled at %g; restarting", lam)
    return float(np.sqrt(max(estimates)))
