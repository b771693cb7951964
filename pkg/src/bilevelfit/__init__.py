"""Bi-level parameter estimation for kinetic models.

Fits rate constants and nonlinear structural parameters (exponents,
activation energies, time delays) to trajectory data by solving an
integral-form least-squares problem: the linear rates are recovered
exactly by a constrained convex solve at every outer iterate, and the
nonlinear parameters move by a trust-region Newton method whose
derivatives come from differentiating the inner optimality conditions.
A thresholded refit loop on a candidate term library performs sparse
mechanism discovery on top of the same machinery.
"""

from .benchmarks import (
    CARBOXYLIC_FORWARD,
    CARBOXYLIC_REVERSE,
    CARBOXYLIC_STOICH,
    PROBLEM_NAMES,
    ExperimentSetup,
    ProblemSpec,
    ValidationReport,
    make_dataset,
    make_problem,
    problem_from_spec,
    refine_estimate,
    simulate_dde,
    simulate_ode,
    validate_estimate,
)
from .design import (
    DesignBuilder,
    DesignDerivative,
    IntegratedDesign,
    assemble_design,
    design_jvp,
)
from .discovery import (
    DiscoveryProblem,
    DiscoveryState,
    LibrarySpec,
    build_discovery_problem,
    stlsq_discover,
    term_index,
    term_label,
)
from .fields import (
    ArrheniusMonomialField,
    BasisField,
    DelayedMonomialField,
    EvalContext,
    InhibitionGateField,
    MonomialField,
    RationalField,
    SeparableField,
    TransportField,
)
from .innersolve import InnerSolution, solve_inner
from .interpolate import (
    InterpolantSet,
    QuadratureGrid,
    build_grid,
    cumulative_quadrature,
    fit_interpolants,
    query,
)
from .kktgrad import KktJvpResult, kkt_jvp, kkt_jvp_batch
from .modelfile import load_model_file
from .outer import (
    HESSIAN_MODES,
    OuterEvaluation,
    OuterOptions,
    optimize_outer,
    outer_eval,
)
from .problem import (
    ConstraintSet,
    ConvergenceFlag,
    ModelStructure,
    ParameterEstimate,
    Problem,
    Trajectory,
    ValidationError,
    validate_problem,
)
from .records import (
    ResultRecord,
    config_hash,
    read_trajectory_csv,
    write_trajectory_csv,
)

__version__ = "0.1.0"

__all__ = [
    "ArrheniusMonomialField",
    "BasisField",
    "CARBOXYLIC_FORWARD",
    "CARBOXYLIC_REVERSE",
    "CARBOXYLIC_STOICH",
    "ConstraintSet",
    "ConvergenceFlag",
    "DelayedMonomialField",
    "DesignBuilder",
    "DesignDerivative",
    "DiscoveryProblem",
    "DiscoveryState",
    "EvalContext",
    "ExperimentSetup",
    "HESSIAN_MODES",
    "InhibitionGateField",
    "InnerSolution",
    "IntegratedDesign",
    "InterpolantSet",
    "KktJvpResult",
    "LibrarySpec",
    "ModelStructure",
    "MonomialField",
    "OuterEvaluation",
    "OuterOptions",
    "PROBLEM_NAMES",
    "ParameterEstimate",
    "Problem",
    "ProblemSpec",
    "QuadratureGrid",
    "RationalField",
    "ResultRecord",
    "SeparableField",
    "Trajectory",
    "TransportField",
    "ValidationError",
    "ValidationReport",
    "assemble_design",
    "build_discovery_problem",
    "build_grid",
    "config_hash",
    "cumulative_quadrature",
    "design_jvp",
    "fit_interpolants",
    "kkt_jvp",
    "kkt_jvp_batch",
    "load_model_file",
    "make_dataset",
    "make_problem",
    "optimize_outer",
    "outer_eval",
    "problem_from_spec",
    "query",
    "read_trajectory_csv",
    "refine_estimate",
    "simulate_dde",
    "simulate_ode",
    "solve_inner",
    "stlsq_discover",
    "term_index",
    "term_label",
    "validate_estimate",
    "validate_problem",
    "write_trajectory_csv",
]
