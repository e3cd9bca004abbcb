"""Semidefinite relaxation of multiphase optimal power flow on radial
networks, with rank-1 exactness certification and perturbation analysis."""

__version__ = "0.1.0"

from .network import (
    BusPhase,
    Line,
    MultiphaseNetwork,
    NetworkError,
    TopologyReport,
    assemble_bus_admittance,
    evaluate_injections,
    injection_matrices,
    validate_tree,
)
from .sdp import (
    InfeasibleError,
    LinearTraceConstraint,
    MaxIterationsError,
    NumericalFailureError,
    SdpError,
    SdpProblem,
    SdpSolution,
    UnboundedError,
    complementarity_residual,
    real_embedding,
    solve,
)
from .opf import CaseError, OpfCase, build_cost, build_relaxation, slack_equality_constraints
from .exactness import (
    ActivityFlags,
    AnalysisError,
    ConditionReport,
    CriticalSets,
    DualMatrixBundle,
    GInvertibilityReport,
    RankCertificate,
    assemble_dual_matrix,
    certify_rank1,
    check_conditions,
    check_G_invertibility,
    critical_sets,
    detect_active_sets,
    recover_voltages,
    slater_margin,
    support_and_connectivity,
)
from .perturbation import (
    A3ViolationError,
    PerturbationPlan,
    PerturbationReport,
    build_C1,
    check_multiplier_signs,
    default_schedule,
    run_perturbation_sweep,
)
from .caseio import (
    CaseFileError,
    RunReport,
    case_digest,
    generate_random_case,
    parse_case,
    parse_report,
    write_case,
    write_report,
)

__all__ = [name for name in dir() if not name.startswith("_")]
