"""Experiment driver with two interchangeable BTPP engines.

The matrix engine applies the stacked recursion through ``btpp_step``. The
message engine runs one agent object per node and exchanges vectors over
tree edges in barrier-separated phases. Both reduce children in ascending
label order and draw oracle samples from the same keyed streams, so their
trajectories agree bit for bit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from btpp.algorithms import (
    AlgorithmState,
    DivergenceError,
    RingWeights,
    StepSizeSchedule,
    baseline_init,
    btpp_init,
    btpp_step,
    centralized_sgd_step,
    dsgd_ring_step,
    effective_stepsize,
)
from btpp.numerics import RngStream, agent_streams, frobenius_norm_sq
from btpp.problems import Problem, average_gradient, average_loss, generate_logistic, generate_quadratic
from btpp.topology import BAryTree, build_bary_tree, consensus_projection

logger = logging.getLogger(__name__)

ALGORITHMS = ("btpp", "centralized", "dsgd_ring")
ENGINES = ("matrix", "message")


@dataclass(frozen=True)
class ProblemSpec:
    kind: str
    n: int
    p: int
    J: int = 100
    sigma_h: float = 0.8
    reg_coeff: float = 0.01
    kappa: float = 4.0
    noise_sigma: float = 0.0
    batch: int = 1

    def build(self, seed: int) -> Problem:
        if self.kind == "logistic":
            return generate_logistic(self.n, self.p, self.J, self.sigma_h, self.reg_coeff, seed, self.batch)
        if self.kind == "quadratic":
            return generate_quadratic(self.n, self.p, self.kappa, self.noise_sigma, seed)
        raise ValueError(f"unknown problem type {self.kind!r}")


@dataclass(frozen=True)
class RunConfig:
    algorithm: str
    problem: ProblemSpec
    schedule: StepSizeSchedule
    T: int
    B: int = 2
    seed: int = 0
    stride: int = 10
    engine: str = "matrix"

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.engine not in ENGINES:
            raise ValueError(f"unknown engine {self.engine!r}")
        if self.engine == "message" and self.algorithm != "btpp":
            raise ValueError("the message engine only runs btpp")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.B < 2:
            raise ValueError("B must be >= 2")


@dataclass
class MetricsRecord:
    iter: int
    algo: str
    engine: str
    n: int
    B: int
    seed: int
    gamma: float
    grad_norm_sq: float
    consensus_err: float
    dist_to_opt: Optional[float]
    f_gap: Optional[float]
    vectors_sent: int


# Message engine ----------------------------------------------------------


@dataclass
class Agent:
    label: int
    x: np.ndarray
    y: np.ndarray
    g_prev: np.ndarray


@dataclass
class Mailbox:
    """Per-edge slots for one round, keyed by the child end of the edge."""

    down: dict[int, np.ndarray] = field(default_factory=dict)
    up: dict[int, np.ndarray] = field(default_factory=dict)

    def post_down(self, child: int, payload: np.ndarray) -> None:
        if child in self.down:
            raise RuntimeError(f"second downstream message to node {child}")
        self.down[child] = payload

    def post_up(self, child: int, payload: np.ndarray) -> None:
        if child in self.up:
            raise RuntimeError(f"second upstream message from node {child}")
        self.up[child] = payload

    def take_down(self, child: int) -> np.ndarray:
        try:
            return self.down.pop(child)
        except KeyError:
            raise RuntimeError(f"node {child} is missing its downstream message") from None

    def take_up(self, child: int) -> np.ndarray:
        try:
            return self.up.pop(child)
        except KeyError:
            raise RuntimeError(f"upstream message from node {child} is missing") from None

    def empty(self) -> bool:
        return not self.down and not self.up


def agents_from_state(state: AlgorithmState) -> list[Agent]:
    return [
        Agent(i + 1, state.X[i].copy(), state.Y[i].copy(), state.G_prev[i].copy())
        for i in range(state.X.shape[0])
    ]


def state_from_agents(agents: Sequence[Agent], t: int) -> AlgorithmState:
    return AlgorithmState(
        X=np.stack([a.x for a in agents]),
        Y=np.stack([a.y for a in agents]),
        G_prev=np.stack([a.g_prev for a in agents]),
        t=t,
    )


def message_round(
    agents: Sequence[Agent],
    tree: BAryTree,
    gamma: float,
    problem: Problem,
    streams: Sequence[RngStream],
    t: int,
    mailbox: Optional[Mailbox] = None,
) -> list[Agent]:
    """Advance every agent from iteration t to t + 1."""
    mailbox = mailbox if mailbox is not None else Mailbox()
    if not mailbox.empty():
        raise RuntimeError("mailbox must be empty at the start of a round")

    # post
    outgoing = {}
    for a in agents:
        outgoing[a.label] = a.x - gamma * a.y
        for c in tree.children(a.label):
            mailbox.post_down(c, outgoing[a.label])
        if a.label != 1:
            mailbox.post_up(a.label, a.y)

    # barrier, then update from received messages
    updated = []
    for a in agents:
        i = a.label
        if i == 1:
            x_new = outgoing[1]
            acc = a.y.copy()
        else:
            x_new = mailbox.take_down(i)
            acc = None
        for c in tree.children(i):
            y_c = mailbox.take_up(c)
            if acc is None:
                acc = y_c.copy()
            else:
                acc += y_c
        if acc is None:
            acc = np.zeros_like(a.y)
        g_new = problem.stochastic_gradient(i - 1, x_new, streams[i - 1].at(t + 1))
        y_new = acc + g_new - a.g_prev
        if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(y_new))):
            raise DivergenceError(agent=i - 1, iteration=t + 1)
        updated.append(Agent(i, x_new, y_new, g_new))

    if not mailbox.empty():
        raise RuntimeError("undelivered messages left after the round")
    return updated


# Communication accounting -------------------------------------------------


@dataclass(frozen=True)
class CommAudit:
    partners: dict[int, tuple[int, ...]]
    sent: dict[int, int]
    received: dict[int, int]

    @property
    def max_partners(self) -> int:
        return max(len(p) for p in self.partners.values())

    @property
    def messages(self) -> dict[int, int]:
        return {i: self.sent[i] + self.received[i] for i in self.sent}

    @property
    def total_per_round(self) -> int:
        return sum(self.sent.values())


def comm_audit(tree: BAryTree) -> CommAudit:
    """Per-node partners and vector messages per BTPP round.

    A non-root node sends one y up and one x - gamma y to each child, and
    receives one downstream message plus one y from each child.
    """
    partners, sent, received = {}, {}, {}
    for i in tree.nodes():
        kids = len(tree.children(i))
        has_parent = i != 1
        partners[i] = tree.partners(i)
        sent[i] = int(has_parent) + kids
        received[i] = int(has_parent) + kids
    return CommAudit(partners, sent, received)


def vectors_per_round(algorithm: str, n: int, tree: Optional[BAryTree] = None) -> int:
    if algorithm == "btpp":
        return comm_audit(tree).total_per_round
    if algorithm == "centralized":
        return n * (n - 1)
    return sum(len(RingWeights(n).neighbors(i)) for i in range(n))


# Driver ---------------------------------------------------------------------


def _record(config, problem, tree, X, t, gamma, sent) -> MetricsRecord:
    x1 = X[0]
    grad = average_gradient(problem, x1)
    if tree is not None:
        consensus = frobenius_norm_sq(consensus_projection(X, tree))
    else:
        consensus = frobenius_norm_sq(X - X[0])
    dist = gap = None
    if problem.x_star is not None:
        diff = x1 - problem.x_star
        dist = float(diff @ diff)
    if problem.f_star is not None:
        gap = average_loss(problem, x1) - problem.f_star
    return MetricsRecord(
        iter=t,
        algo=config.algorithm,
        engine=config.engine,
        n=problem.n,
        B=config.B,
        seed=config.seed,
        gamma=gamma,
        grad_norm_sq=float(grad @ grad),
        consensus_err=consensus,
        dist_to_opt=dist,
        f_gap=gap,
        vectors_sent=sent,
    )


# overflow on the way to a non-finite iterate surfaces as DivergenceError
@np.errstate(over="ignore", invalid="ignore")
def run_experiment(
    config: RunConfig, problem: Optional[Problem] = None, x0: Optional[np.ndarray] = None
) -> list[MetricsRecord]:
    """Run T iterations, recording at t = 0, every ``stride`` iterations, and t = T.

    Metric evaluation uses deterministic gradients only and never touches
    the oracle streams. A divergence re-raises with the records so far.
    """
    if problem is None:
        problem = config.problem.build(config.seed)
    n = problem.n
    x0 = np.zeros(problem.p) if x0 is None else np.asarray(x0, dtype=float)
    streams = agent_streams(config.seed, n)
    tree = build_bary_tree(n, config.B) if config.algorithm == "btpp" else None
    schedule = config.schedule.with_n(n, tree.d if tree is not None else None)
    per_round = vectors_per_round(config.algorithm, n, tree)
    ring = RingWeights(n)

    records: list[MetricsRecord] = []
    sent = 0
    try:
        if config.algorithm == "btpp":
            state = btpp_init(problem, x0, streams)
        else:
            state = baseline_init(problem, x0)
        agents = agents_from_state(state) if config.engine == "message" else None
        records.append(_record(config, problem, tree, state.X, 0, effective_stepsize(schedule, 0), sent))

        for t in range(config.T):
            gamma = effective_stepsize(schedule, t)
            if config.engine == "message":
                agents = message_round(agents, tree, gamma, problem, streams, t)
                X = np.stack([a.x for a in agents])
            else:
                if config.algorithm == "btpp":
                    state = btpp_step(state, tree, gamma, problem, streams)
                elif config.algorithm == "centralized":
                    state = centralized_sgd_step(state, gamma, problem, streams)
                else:
                    state = dsgd_ring_step(state, ring, gamma, problem, streams)
                X = state.X
            sent += per_round
            done = t + 1
            if done % config.stride == 0 or done == config.T:
                records.append(
                    _record(config, problem, tree, X, done, effective_stepsize(schedule, done), sent)
                )
    except DivergenceError as err:
        err.records = records
        logger.warning("run diverged: %s (seed %d)", err, config.seed)
        raise
    return records
