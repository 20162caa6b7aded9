"""Per-agent objectives and their gradient oracles.

Two families are provided: logistic regression with a non-convex
regularizer over heterogeneous synthetic shards, and diagonal strongly
convex quadratics with a known minimizer. Agent indices are 0-based here.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Union

import numpy as np
from scipy.special import expit

from btpp.numerics import RngStream


@dataclass(frozen=True)
class OracleSpec:
    p: int
    n: int
    L: float
    mu: float
    sigma_sq: Optional[float] = None

    def __post_init__(self):
        if self.L < self.mu:
            raise ValueError(f"L={self.L} must be >= mu={self.mu}")

    @property
    def kappa(self) -> float:
        if self.mu <= 0:
            raise ValueError("condition number undefined when mu = 0")
        return self.L / self.mu


class Problem(Protocol):
    n: int
    p: int
    x_star: Optional[np.ndarray]
    f_star: Optional[float]

    def local_loss(self, i: int, x: np.ndarray) -> float: ...

    def local_gradient(self, i: int, x: np.ndarray) -> np.ndarray: ...

    def stochastic_gradient(self, i: int, x: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...


def _check_dim(x: np.ndarray, p: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (p,):
        raise ValueError(f"expected a vector of length {p}, got shape {x.shape}")
    return x


def average_gradient(problem: Problem, x: np.ndarray) -> np.ndarray:
    """Full gradient of f = (1/n) sum_i f_i, summed in ascending agent order."""
    acc = problem.local_gradient(0, x).copy()
    for i in range(1, problem.n):
        acc += problem.local_gradient(i, x)
    return acc / problem.n


def average_loss(problem: Problem, x: np.ndarray) -> float:
    return sum(problem.local_loss(i, x) for i in range(problem.n)) / problem.n


@dataclass(frozen=True, eq=False)
class LogisticProblem:
    features: np.ndarray      # (n, J, p)
    labels: np.ndarray        # (n, J), entries +-1
    reg_coeff: float
    ground_model: np.ndarray  # (p,)
    local_models: np.ndarray  # (n, p)
    sigma_h: float
    batch: int = 1

    x_star = None
    f_star = None

    def __post_init__(self):
        n, J, p = self.features.shape
        if self.labels.shape != (n, J):
            raise ValueError("labels do not match features")
        if not np.all(np.abs(self.labels) == 1):
            raise ValueError("labels must be +1 or -1")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        if not 1 <= self.batch <= J:
            raise ValueError(f"batch must be in 1..{J}, got {self.batch}")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def J(self) -> int:
        return self.features.shape[1]

    @property
    def p(self) -> int:
        return self.features.shape[2]

    def spec(self) -> OracleSpec:
        # logistic part: ||H_i||_2^2 / (4J); regularizer curvature peaks at 2R
        L = max(np.linalg.norm(H, 2) ** 2 / (4 * self.J) for H in self.features) + 2 * self.reg_coeff
        return OracleSpec(p=self.p, n=self.n, L=float(L), mu=0.0)

    def _reg_gradient(self, x: np.ndarray) -> np.ndarray:
        return 2 * self.reg_coeff * x / (1 + x * x) ** 2

    def local_loss(self, i: int, x: np.ndarray) -> float:
        x = _check_dim(x, self.p)
        margins = self.labels[i] * (self.features[i] @ x)
        return float(np.mean(np.logaddexp(0.0, -margins)) + self.reg_coeff * np.sum(x * x / (1 + x * x)))

    def _loss_gradient(self, i: int, idx, x: np.ndarray) -> np.ndarray:
        H = self.features[i, idx]
        y = self.labels[i, idx]
        weights = -y * expit(-y * (H @ x))
        return weights @ H / len(weights)

    def local_gradient(self, i: int, x: np.ndarray) -> np.ndarray:
        x = _check_dim(x, self.p)
        return self._loss_gradient(i, slice(None), x) + self._reg_gradient(x)

    def sample_gradient(self, i: int, x: np.ndarray, j: int) -> np.ndarray:
        """Single-sample oracle output for data point j of agent i."""
        x = _check_dim(x, self.p)
        return self._loss_gradient(i, [j], x) + self._reg_gradient(x)

    def stochastic_gradient(
        self,
        i: int,
        x: np.ndarray,
        rng: Union[np.random.Generator, RngStream],
        batch: Optional[int] = None,
        full_sweep: bool = False,
    ) -> np.ndarray:
        """Minibatch gradient with indices drawn uniformly with replacement.

        ``full_sweep`` replaces sampling with the whole shard, a diagnostic
        mode that reproduces ``local_gradient``.
        """
        x = _check_dim(x, self.p)
        batch = self.batch if batch is None else batch
        if not 1 <= batch <= self.J:
            raise ValueError(f"batch must be in 1..{self.J}, got {batch}")
        if full_sweep:
            return self.local_gradient(i, x)
        if isinstance(rng, RngStream):
            rng = rng.next_generator()
        idx = rng.integers(0, self.J, size=batch)
        return self._loss_gradient(i, idx, x) + self._reg_gradient(x)

    def gradient_noise(self, i: int, x: np.ndarray) -> float:
        """Exact single-sample oracle variance E||g - grad f_i||^2 at x over the shard."""
        x = _check_dim(x, self.p)
        y = self.labels[i]
        H = self.features[i]
        per_sample = (-y * expit(-y * (H @ x)))[:, None] * H
        dev = per_sample - per_sample.mean(axis=0)
        return float(np.mean(np.sum(dev * dev, axis=1)))


def _streams(seed: int, n: int, purpose: str) -> list[np.random.Generator]:
    return [RngStream(seed, (i, purpose)).at(0) for i in range(n)]


def generate_logistic(
    n: int, p: int, J: int, sigma_h: float, reg_coeff: float, seed: int, batch: int = 1
) -> LogisticProblem:
    """Heterogeneous synthetic shards.

    Agent i gets a local model x~ + v_i with x~ ~ N(0, I), v_i ~ N(0, sigma_h^2 I),
    features h ~ N(0, I), and label +1 with probability sigmoid(h^T x_i).
    """
    if min(n, p, J) < 1:
        raise ValueError("n, p and J must be positive")
    if sigma_h < 0 or reg_coeff < 0:
        raise ValueError("sigma_h and reg_coeff must be non-negative")
    ground = RngStream(seed, (-1, "model")).at(0).standard_normal(p)
    local = np.empty((n, p))
    features = np.empty((n, J, p))
    labels = np.empty((n, J))
    for i, gen in enumerate(_streams(seed, n, "model")):
        local[i] = ground + sigma_h * gen.standard_normal(p)
    for i, gen in enumerate(_streams(seed, n, "data")):
        features[i] = gen.standard_normal((J, p))
        z = gen.random(J)
        labels[i] = np.where(z <= expit(features[i] @ local[i]), 1.0, -1.0)
    return LogisticProblem(features, labels, float(reg_coeff), ground, local, float(sigma_h), batch)


@dataclass(frozen=True, eq=False)
class QuadraticProblem:
    """f_i(x) = 0.5 x^T diag(a_i) x - b_i^T x with additive Gaussian oracle noise."""

    diag: np.ndarray   # (n, p)
    b: np.ndarray      # (n, p)
    noise_sigma: float
    x_star: np.ndarray
    f_star: float

    @property
    def n(self) -> int:
        return self.diag.shape[0]

    @property
    def p(self) -> int:
        return self.diag.shape[1]

    def spec(self) -> OracleSpec:
        return OracleSpec(
            p=self.p,
            n=self.n,
            L=float(self.diag.max()),
            mu=float(self.diag.mean(axis=0).min()),
            sigma_sq=self.p * self.noise_sigma**2,
        )

    def local_loss(self, i: int, x: np.ndarray) -> float:
        x = _check_dim(x, self.p)
        return float(0.5 * np.sum(self.diag[i] * x * x) - self.b[i] @ x)

    def local_gradient(self, i: int, x: np.ndarray) -> np.ndarray:
        x = _check_dim(x, self.p)
        return self.diag[i] * x - self.b[i]

    def stochastic_gradient(
        self, i: int, x: np.ndarray, rng: Union[np.random.Generator, RngStream], batch: Optional[int] = None
    ) -> np.ndarray:
        g = self.local_gradient(i, x)
        if self.noise_sigma == 0:
            return g
        if isinstance(rng, RngStream):
            rng = rng.next_generator()
        return g + self.noise_sigma * rng.standard_normal(self.p)


def generate_quadratic(n: int, p: int, kappa: float, noise_sigma: float, seed: int) -> QuadraticProblem:
    """Each agent's curvatures are a random permutation of linspace(1, kappa, p)."""
    if min(n, p) < 1:
        raise ValueError("n and p must be positive")
    if kappa < 1:
        raise ValueError(f"kappa must be >= 1, got {kappa}")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    levels = np.linspace(1.0, kappa, p)
    diag = np.empty((n, p))
    b = np.empty((n, p))
    for i, gen in enumerate(_streams(seed, n, "quadratic")):
        diag[i] = gen.permutation(levels)
        b[i] = gen.standard_normal(p)
    x_star = b.sum(axis=0) / diag.sum(axis=0)
    f_star = float(np.mean(0.5 * np.sum(diag * x_star * x_star, axis=1) - b @ x_star))
    return QuadraticProblem(diag, b, float(noise_sigma), x_star, f_star)


# Text container: one "scalar name value" or "array name ndim dims..." line
# per field; array values follow on the next line, whitespace-separated.

_FIELDS = {
    "logistic": (LogisticProblem, ["features", "labels", "reg_coeff", "ground_model", "local_models", "sigma_h", "batch"]),
    "quadratic": (QuadraticProblem, ["diag", "b", "noise_sigma", "x_star", "f_star"]),
}


def save_problem(problem: Problem, path: Union[str, Path]) -> None:
    kind = "logistic" if isinstance(problem, LogisticProblem) else "quadratic"
    lines = ["btpp-problem 1", f"type {kind}"]
    for name in _FIELDS[kind][1]:
        value = getattr(problem, name)
        if isinstance(value, np.ndarray):
            lines.append(f"array {name} {value.ndim} " + " ".join(map(str, value.shape)))
            lines.append(" ".join(repr(float(v)) for v in value.ravel()))
        else:
            lines.append(f"scalar {name} {value!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_problem(path: Union[str, Path]) -> Problem:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "btpp-problem 1":
        raise ValueError(f"{path}: not a btpp problem file")
    kind = lines[1].split()[1]
    cls, names = _FIELDS[kind]
    values = {}
    pos = 2
    while pos < len(lines):
        head = lines[pos].split()
        if head[0] == "scalar":
            raw = head[2]
            values[head[1]] = int(raw) if head[1] == "batch" else float(raw)
            pos += 1
        else:
            ndim = int(head[2])
            shape = tuple(int(s) for s in head[3 : 3 + ndim])
            data = np.array(lines[pos + 1].split(), dtype=float) if lines[pos + 1] else np.empty(0)
            values[head[1]] = data.reshape(shape)
            pos += 2
    missing = set(names) - set(values)
    if missing:
        raise ValueError(f"{path}: missing fields {sorted(missing)}")
    return cls(**values)
