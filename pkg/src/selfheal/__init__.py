"""Self-healing distributed optimization over directed graphs.

A simulator and certifier for a family of single-Laplacian first-order
methods that converge from arbitrary internal states, tolerate packet
loss via per-edge memory, and admit worst-case linear rate certificates
through small LMI feasibility problems.
"""

from .certify import (
    Certificate,
    CertificationError,
    bisect_rho,
    find_certificate,
    lower_bound,
    optimize_alpha,
    transient_factor,
    verify_certificate,
)
from .engine import (
    AlgorithmParams,
    DivergenceError,
    FixedPoint,
    FixedPointError,
    NetworkState,
    ParameterError,
    StepRecord,
    add_agent,
    construct_fixed_point,
    derive_params,
    drop_agent,
    make_params,
    perturb_state,
    step_alg1,
    step_gm,
    step_svl,
    swap_objective,
    uniform_state,
    verify_factorization,
    zero_state,
)
from .graph import (
    AssumptionReport,
    GraphError,
    LaplacianMatrix,
    Topology,
    build_laplacian,
    check_assumptions,
    complete_graph,
    disagreement_norm,
    ring_lattice,
    topology_from_text,
    topology_to_text,
)
from .objectives import (
    CustomObjective,
    LabeledDataset,
    LogisticObjective,
    ObjectiveError,
    ObjectiveModel,
    QuadraticObjective,
    SectorBounds,
    SolverError,
    aggregate_gradient,
    embed_polynomial,
    estimate_sector_bounds,
    load_dataset_csv,
    solve_centralized,
    two_cluster_dataset,
)
from .resilience import (
    BernoulliLoss,
    EdgeMemory,
    ForgettingConfig,
    MaskSchedule,
    apply_forgetting,
    step_alg2,
    step_svl_holdlast,
)
from .runner import (
    ScenarioError,
    certify_point,
    run_scenario,
    sweep_rates,
    sweep_to_csv,
    verify_invariants,
)
from .scenario import (
    RunReport,
    Scenario,
    load_scenario,
    scenario_from_yaml,
    scenario_to_yaml,
)

__version__ = "0.1.0"
