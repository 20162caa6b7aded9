"""Simulation lab for B-ary tree push-pull decentralized SGD."""

from btpp.algorithms import (
    AlgorithmState,
    DivergenceError,
    RingWeights,
    StepSizeSchedule,
    btpp_init,
    btpp_step,
    centralized_sgd_step,
    dsgd_ring_step,
    effective_stepsize,
)
from btpp.problems import LogisticProblem, QuadraticProblem, generate_logistic, generate_quadratic
from btpp.simulator import MetricsRecord, ProblemSpec, RunConfig, comm_audit, message_round, run_experiment
from btpp.topology import (
    BAryTree,
    MixingMatrix,
    build_bary_tree,
    closed_form_power,
    consensus_projection,
    left_eigenvector_u,
    pull_matrix,
    push_matrix,
    spectral_norm,
)

__version__ = "0.1.0"
