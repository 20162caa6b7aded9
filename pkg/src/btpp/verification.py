"""Exact property checks for the tree matrices and the tracking identity.

Every matrix identity here is checked in integer arithmetic: since
u = (n, 0, ..., 0), the rank-one term (1/n) 1 u^T is the 0/1 matrix whose
first column is all ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from btpp.algorithms import btpp_init, btpp_step
from btpp.numerics import agent_streams
from btpp.problems import generate_quadratic
from btpp.simulator import comm_audit
from btpp.topology import (
    BAryTree,
    build_bary_tree,
    closed_form_power,
    geometric_count,
    left_eigenvector_u,
    pull_matrix,
    push_matrix,
    restart_seed,
    spectral_norm,
)

PROPERTIES = (
    "pull_row_stochastic",
    "push_transpose_column_stochastic",
    "closed_form_power",
    "diameter_power_rank_one",
    "spectral_norm_bound",
    "left_eigenvector",
    "projector_commutation",
    "layer_indicator",
    "degree_bound",
    "conservation",
)


@dataclass
class PropertyResult:
    name: str
    checked: int = 0
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def check(self, ok: bool, where: str) -> None:
        self.checked += 1
        if not ok:
            self.failures.append(where)


def rank_one_term(n: int) -> np.ndarray:
    E = np.zeros((n, n), dtype=np.int64)
    E[:, 0] = 1
    return E


def conservation_gap(Y: np.ndarray, G: np.ndarray) -> tuple[float, float]:
    """(||1^T Y - 1^T G||_inf, 1 + ||1^T G||_inf)."""
    col_y, col_g = Y.sum(axis=0), G.sum(axis=0)
    return float(np.max(np.abs(col_y - col_g))), 1.0 + float(np.max(np.abs(col_g)))


def _check_tree(tree: BAryTree, R: np.ndarray, results: dict[str, PropertyResult], spectral_tol: float,
                conservation_steps: int) -> None:
    n, B, d = tree.n, tree.B, tree.d
    tag = f"(n={n}, B={B}"
    I = np.eye(n, dtype=np.int64)
    E = rank_one_term(n)
    C = push_matrix(tree).to_dense()

    results["pull_row_stochastic"].check(
        bool(np.isin(R, (0, 1)).all() and (R.sum(axis=1) == 1).all()), tag + ")"
    )
    results["push_transpose_column_stochastic"].check(
        bool(np.array_equal(C, R.T) and (C.sum(axis=0) == 1).all()), tag + ")"
    )

    powers = {0: I, 1: R}
    for k in range(2, max(d, 1) + 2):
        powers[k] = powers[k - 1] @ R
    for k in range(1, max(d, 1) + 1):
        results["closed_form_power"].check(
            np.array_equal(closed_form_power(tree, k).to_dense(), powers[k]), f"{tag}, k={k})"
        )
    k_d = max(d, 1)
    u = left_eigenvector_u(tree)
    results["diameter_power_rank_one"].check(
        np.array_equal(n * powers[k_d], np.outer(np.ones(n, dtype=np.int64), u)), f"{tag}, k={k_d})"
    )
    for k in range(1, d):
        norm = spectral_norm(powers[k] - E, tol=spectral_tol, seed=restart_seed(n, B, k))
        results["spectral_norm_bound"].check(norm <= math.sqrt(n) + 1e-9, f"{tag}, k={k})")

    results["left_eigenvector"].check(
        bool(np.array_equal(u @ R, u) and np.array_equal(C @ u, u)), tag + ")"
    )

    Pi = I - E
    shifted = I.copy()
    for m in range(1, d + 2):
        shifted = shifted @ (R - E)
        ok = np.array_equal(Pi @ powers[m], Pi @ (powers[m] - E)) and np.array_equal(
            Pi @ powers[m], Pi @ shifted
        ) and np.array_equal(Pi @ shifted, shifted @ Pi)
        results["projector_commutation"].check(bool(ok), f"{tag}, m={m})")

    row = np.zeros(n, dtype=np.int64)
    row[0] = 1
    row -= 1
    C_pow = {0: I}
    for i in range(1, d + 1):
        C_pow[i] = C_pow[i - 1] @ C
        lo = geometric_count(B, i - 1) + 1
        hi = min(geometric_count(B, i), n)
        expected = np.zeros(n, dtype=np.int64)
        expected[lo - 1 : hi] = 1
        results["layer_indicator"].check(
            np.array_equal(row @ (C_pow[i] - C_pow[i - 1]), expected), f"{tag}, i={i})"
        )

    audit = comm_audit(tree)
    results["degree_bound"].check(
        audit.max_partners <= B + 1 and audit.total_per_round == 2 * (n - 1), tag + ")"
    )

    problem = generate_quadratic(n, 3, 4.0, 0.5, seed=restart_seed(n, B))
    streams = agent_streams(restart_seed(n, B), n)
    state = btpp_init(problem, np.ones(3), streams)
    ok = True
    for _ in range(conservation_steps):
        state = btpp_step(state, tree, 0.01 / n, problem, streams)
        gap, scale = conservation_gap(state.Y, state.G_prev)
        ok = ok and gap <= 1e-9 * scale
    results["conservation"].check(ok, tag + ")")


def verify_grid(
    ns: Iterable[int],
    Bs: Iterable[int],
    spectral_tol: float = 1e-6,
    conservation_steps: Optional[int] = None,
    inject_fault: bool = False,
) -> list[PropertyResult]:
    """Run every property over the (n, B) grid.

    ``inject_fault`` flips entry (n, 1) of R for the last grid point; it
    exists so the failure path can be tested.
    """
    results = {name: PropertyResult(name) for name in PROPERTIES}
    grid = [(n, B) for B in Bs for n in ns]
    for idx, (n, B) in enumerate(grid):
        tree = build_bary_tree(n, B)
        R = pull_matrix(tree).to_dense()
        if inject_fault and idx == len(grid) - 1:
            R[n - 1, 0] ^= 1
        steps = conservation_steps if conservation_steps is not None else 2 * tree.d + 10
        _check_tree(tree, R, results, spectral_tol, steps)
    return [results[name] for name in PROPERTIES]
