"""BTPP recursion, the centralized-SGD and ring-DSGD baselines, and stepsizes.

Every step draws one oracle sample per agent from that agent's stream at a
block keyed by the iteration index, so any two engines that follow the
same recursion see the same samples.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from btpp.numerics import RngStream, sparse_apply
from btpp.problems import Problem
from btpp.topology import BAryTree, pull_matrix, push_matrix


class DivergenceError(FloatingPointError):
    def __init__(self, agent: int, iteration: int, records: Optional[list] = None):
        super().__init__(f"non-finite value at agent {agent}, iteration {iteration}")
        self.agent = agent
        self.iteration = iteration
        self.records = records or []


@dataclass
class AlgorithmState:
    X: np.ndarray
    Y: np.ndarray
    G_prev: np.ndarray
    t: int = 0


def sample_gradients(problem: Problem, X: np.ndarray, streams: Sequence[RngStream], block: int) -> np.ndarray:
    return np.stack([problem.stochastic_gradient(i, X[i], streams[i].at(block)) for i in range(problem.n)])


def check_finite(M: np.ndarray, iteration: int) -> None:
    bad = ~np.isfinite(M)
    if bad.any():
        row = int(np.argwhere(bad)[0][0])
        raise DivergenceError(agent=row, iteration=iteration)


def _stack(x0: np.ndarray, problem: Problem) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (problem.p,):
        raise ValueError(f"x0 must have length {problem.p}, got shape {x0.shape}")
    return np.tile(x0, (problem.n, 1))


def btpp_init(problem: Problem, x0: np.ndarray, streams: Sequence[RngStream]) -> AlgorithmState:
    X = _stack(x0, problem)
    G = sample_gradients(problem, X, streams, 0)
    check_finite(G, 0)
    return AlgorithmState(X=X, Y=G.copy(), G_prev=G, t=0)


def btpp_step(
    state: AlgorithmState,
    tree: BAryTree,
    gamma: float,
    problem: Problem,
    streams: Sequence[RngStream],
) -> AlgorithmState:
    """X <- R(X - gamma Y);  Y <- C Y + G(X_new) - G(X)."""
    t = state.t + 1
    X = sparse_apply(pull_matrix(tree), state.X - gamma * state.Y)
    check_finite(X, t)
    G = sample_gradients(problem, X, streams, t)
    Y = sparse_apply(push_matrix(tree), state.Y) + G - state.G_prev
    check_finite(Y, t)
    return AlgorithmState(X=X, Y=Y, G_prev=G, t=t)


def baseline_init(problem: Problem, x0: np.ndarray) -> AlgorithmState:
    X = _stack(x0, problem)
    zeros = np.zeros_like(X)
    return AlgorithmState(X=X, Y=zeros, G_prev=zeros.copy(), t=0)


def centralized_sgd_step(
    state: AlgorithmState, gamma: float, problem: Problem, streams: Sequence[RngStream]
) -> AlgorithmState:
    """One shared iterate moved along the average of all agents' samples."""
    x = state.X[0]
    G = sample_gradients(problem, state.X, streams, state.t)
    acc = G[0].copy()
    for g in G[1:]:
        acc += g
    x_new = x - gamma * (acc / problem.n)
    X = np.tile(x_new, (problem.n, 1))
    check_finite(X, state.t + 1)
    return AlgorithmState(X=X, Y=G, G_prev=G, t=state.t + 1)


@dataclass(frozen=True)
class RingWeights:
    """Symmetric doubly stochastic ring: 1/3 on self and both neighbours for n >= 3."""

    n: int

    @functools.cached_property
    def matrix(self) -> np.ndarray:
        n = self.n
        if n == 1:
            return np.ones((1, 1))
        if n == 2:
            return np.full((2, 2), 0.5)
        W = np.zeros((n, n))
        for i in range(n):
            for j in (i - 1, i, i + 1):
                W[i, j % n] = 1 / 3
        return W

    def neighbors(self, i: int) -> tuple[int, ...]:
        return tuple(sorted({(i - 1) % self.n, (i + 1) % self.n} - {i}))


def dsgd_ring_step(
    state: AlgorithmState, weights: RingWeights, gamma: float, problem: Problem, streams: Sequence[RngStream]
) -> AlgorithmState:
    """Adapt then combine: X <- W (X - gamma G(X))."""
    G = sample_gradients(problem, state.X, streams, state.t)
    X = weights.matrix @ (state.X - gamma * G)
    check_finite(X, state.t + 1)
    return AlgorithmState(X=X, Y=G, G_prev=G, t=state.t + 1)


SCHEDULE_KINDS = ("constant", "theorem1", "theorem2", "decayed")


@dataclass(frozen=True)
class StepSizeSchedule:
    kind: str = "constant"
    base: float = 0.1
    rescale_by_n: bool = False
    n: int = 1
    decay_factor: float = 1.0
    decay_interval: int = 1
    delta_f: Optional[float] = None
    sigma_sq: Optional[float] = None
    L: Optional[float] = None
    mu: Optional[float] = None
    d: Optional[int] = None
    T: Optional[int] = None

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind in ("constant", "decayed") and self.base <= 0:
            raise ValueError("base stepsize must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.decay_interval < 1:
            raise ValueError("decay_interval must be >= 1")
        if self.n < 1:
            raise ValueError("n must be >= 1")

    def with_n(self, n: int, d: Optional[int] = None) -> "StepSizeSchedule":
        return replace(self, n=n, d=self.d if d is None else d)


def _require(schedule: StepSizeSchedule, *names: str) -> None:
    missing = [name for name in names if getattr(schedule, name) is None]
    if missing:
        raise ValueError(f"{schedule.kind} schedule needs {', '.join(missing)}")


def theorem1_stepsize(delta_f: float, sigma_sq: float, L: float, n: int, d: int, T: int) -> float:
    """min{ (D/(3 s2 L n (T+1)))^(1/2), (D/(1500 n^2 d^6 s2 L^2 (T+1)))^(1/3), 1/(100 n d^3 L) }.

    Terms whose denominators vanish (sigma_sq = 0 or d = 0) impose no limit.
    """
    terms = []
    if sigma_sq > 0:
        terms.append(math.sqrt(delta_f / (3 * sigma_sq * L * n * (T + 1))))
        if d > 0:
            terms.append((delta_f / (1500 * n**2 * d**6 * sigma_sq * L**2 * (T + 1))) ** (1 / 3))
    if d > 0:
        terms.append(1 / (100 * n * d**3 * L))
    if not terms:
        raise ValueError("theorem1 stepsize is unbounded for sigma_sq = 0 and d = 0")
    return min(terms)


def theorem2_stepsize(L: float, mu: float, n: int, d: int, T: int) -> float:
    """min{ 1/(100 n d^2 kappa L), 16 log(n (T+1)^2) / (n (T+1) mu) }, requiring T >= 2d."""
    if mu <= 0:
        raise ValueError("theorem2 stepsize needs mu > 0")
    if T < 2 * d:
        raise ValueError(f"theorem2 stepsize needs T >= 2d = {2 * d}, got T = {T}")
    terms = [16 * math.log(n * (T + 1) ** 2) / (n * (T + 1) * mu)]
    if d > 0:
        terms.append(1 / (100 * n * d**2 * (L / mu) * L))
    return min(terms)


def effective_stepsize(schedule: StepSizeSchedule, t: int) -> float:
    s = schedule
    if s.kind == "constant":
        gamma = s.base
    elif s.kind == "decayed":
        gamma = s.base * s.decay_factor ** (t // s.decay_interval)
    elif s.kind == "theorem1":
        _require(s, "delta_f", "sigma_sq", "L", "d", "T")
        gamma = theorem1_stepsize(s.delta_f, s.sigma_sq, s.L, s.n, s.d, s.T)
    else:
        _require(s, "L", "mu", "d", "T")
        gamma = theorem2_stepsize(s.L, s.mu, s.n, s.d, s.T)
    if s.rescale_by_n:
        gamma /= s.n
    return gamma
