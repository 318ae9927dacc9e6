"""Taylor-expansion backward estimators for stochastic optimal control.

The package samples forward trajectory batches of a discretized control
problem under arbitrary drifts, fits per-timestep value models by
least-squares Monte Carlo regression on Chebyshev bases, and compares
second-order-expansion backward targets against end-of-interval baselines,
with exact oracles (gridded dynamic programming, Riccati recursions) and an
experiment harness for accuracy sweeps.
"""

__version__ = "0.1.0"

from .backward import backward_pass
from .config import ExperimentConfig, load_config, parse_config_text
from .estimators import (
    BackwardTargets,
    EstimatorKind,
    TaylorTriple,
    delta_y_taylor,
    estimate_targets,
    taylor_triple,
)
from .metrics import (
    ConfidenceRegion,
    DiagnosticReport,
    bias_bound_check,
    confidence_region,
    estimator_bias_variance,
    rae,
)
from .oracles import (
    GridPolicy,
    GridSpec,
    GridTruth,
    RiccatiTruth,
    grid_bellman,
    gt_eval,
    riccati_from_lqr,
    riccati_value,
)
from .policy import QEval, hamiltonian_policy, improve_policy, taylor_q
from .problems import (
    ConstantPolicy,
    ContinuousProblem,
    DiscreteProblem,
    FeedbackPolicy,
    LqrParams,
    build_cartpole_lqr,
    build_nonlinear_1d,
    discretize,
)
from .sampling import (
    DriftProcess,
    TrajectoryBatch,
    drift_correction,
    girsanov_weights,
    reweighted_expectation,
    sample_forward,
)
from .value_model import (
    BasisSpec,
    ValueModel,
    basis_eval,
    fit_function,
    lsmc_fit,
    scaling_from_batch,
)

__all__ = [
    "__version__",
    "backward_pass",
    "ExperimentConfig",
    "load_config",
    "parse_config_text",
    "BackwardTargets",
    "EstimatorKind",
    "TaylorTriple",
    "delta_y_taylor",
    "estimate_targets",
    "taylor_triple",
    "ConfidenceRegion",
    "DiagnosticReport",
    "bias_bound_check",
    "confidence_region",
    "estimator_bias_variance",
    "rae",
    "GridPolicy",
    "GridSpec",
    "GridTruth",
    "RiccatiTruth",
    "grid_bellman",
    "gt_eval",
    "riccati_from_lqr",
    "riccati_value",
    "QEval",
    "hamiltonian_policy",
    "improve_policy",
    "taylor_q",
    "ConstantPolicy",
    "ContinuousProblem",
    "DiscreteProblem",
    "FeedbackPolicy",
    "LqrParams",
    "build_cartpole_lqr",
    "build_nonlinear_1d",
    "discretize",
    "DriftProcess",
    "TrajectoryBatch",
    "drift_correction",
    "girsanov_weights",
    "reweighted_expectation",
    "sample_forward",
    "BasisSpec",
    "ValueModel",
    "basis_eval",
    "fit_function",
    "lsmc_fit",
    "scaling_from_batch",
]
