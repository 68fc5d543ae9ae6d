"""Confidence intervals for crowd-worker quality, from agreement alone.

The package estimates each worker's binary error rate, or full k-ary
response-probability matrix, using only how often workers agree with one
another. No gold labels are needed. Point estimates come with delta-method
confidence intervals, and a simulation harness measures their actual
coverage and size on synthetic crowds.
"""

from .errors import (
    ConvergenceError,
    CrowdGaugeError,
    EmptyDatasetError,
    EstimationFailure,
    GoldLabelError,
    InsufficientConnectivityError,
    InsufficientOverlapError,
    LabelDomainError,
    ResponseConflictError,
    ResponseParseError,
    SingularMatrixError,
    UnknownWorkerError,
)
from .numerics import (
    ConfidenceInterval,
    delta_method_ci,
    eigendecompose,
    invert_matrix,
    normal_quantile,
    optimal_weights,
    propagated_deviation,
)
from .dataset import (
    AgreementStats,
    GoldLabels,
    RemovedWorker,
    ResponseDataset,
    agreement_rates,
    load_gold,
    load_responses,
    overlap_counts,
    prune_spammers,
    reduce_arity,
    write_responses_csv,
)
from .binary import (
    TripleEstimate,
    WorkerReport,
    agreement_covariances,
    build_worker_system,
    cross_triple_covariances,
    error_rate_from_agreements,
    evaluate_all,
    evaluate_triple,
    evaluate_worker,
    greedy_pairs,
)
from .kary import (
    CountsTensor,
    FrequencyMatrices,
    KaryReport,
    ResponseProbEstimate,
    build_counts,
    kary_confidence_intervals,
    kary_deviations,
    numerical_jacobian,
    prob_estimate,
    recover_selectivity,
    response_frequency_matrices,
)
from .simulate import (
    CONFIDENCE_GRID,
    DENSITY_GRID,
    ExperimentResult,
    KaryWorld,
    SimConfig,
    compare_weighting,
    gen_binary_responses,
    gen_binary_workers,
    gen_kary_responses,
    ramp_densities,
    result_to_csv,
    result_to_json,
    run_coverage_experiment,
    run_size_experiment,
    substream,
)

__version__ = "0.1.0"

__all__ = [
    "AgreementStats",
    "CONFIDENCE_GRID",
    "ConfidenceInterval",
    "ConvergenceError",
    "CountsTensor",
    "CrowdGaugeError",
    "DENSITY_GRID",
    "EmptyDatasetError",
    "EstimationFailure",
    "ExperimentResult",
    "FrequencyMatrices",
    "GoldLabelError",
    "GoldLabels",
    "InsufficientConnectivityError",
    "InsufficientOverlapError",
    "KaryReport",
    "KaryWorld",
    "LabelDomainError",
    "RemovedWorker",
    "ResponseConflictError",
    "ResponseDataset",
    "ResponseParseError",
    "ResponseProbEstimate",
    "SimConfig",
    "SingularMatrixError",
    "TripleEstimate",
    "UnknownWorkerError",
    "WorkerReport",
    "agreement_covariances",
    "agreement_rates",
    "build_counts",
    "build_worker_system",
    "compare_weighting",
    "cross_triple_covariances",
    "delta_method_ci",
    "eigendecompose",
    "error_rate_from_agreements",
    "evaluate_all",
    "evaluate_triple",
    "evaluate_worker",
    "gen_binary_responses",
    "gen_binary_workers",
    "gen_kary_responses",
    "greedy_pairs",
    "invert_matrix",
    "kary_confidence_intervals",
    "kary_deviations",
    "load_gold",
    "load_responses",
    "normal_quantile",
    "numerical_jacobian",
    "optimal_weights",
    "overlap_counts",
    "prob_estimate",
    "propagated_deviation",
    "prune_spammers",
    "ramp_densities",
    "recover_selectivity",
    "reduce_arity",
    "response_frequency_matrices",
    "result_to_csv",
    "result_to_json",
    "run_coverage_experiment",
    "run_size_experiment",
    "substream",
    "write_responses_csv",
]
