"""Relaxed stochastic optimal control toolkit.

Forward Monte Carlo simulation of controlled (jump-)diffusions, backward
least-squares regression for the adjoint processes, Hamiltonian-based
conditional-gradient optimization over measure-valued controls, and
chattering realization of relaxed optima by rapidly switching point controls.
"""

from .adjoint import (
    AdjointEnsemble,
    BasisSpec,
    Semimartingale,
    adjoint_pairing,
    duality_gap,
    sm_inner,
    sm_norm,
    solve_bsde,
    v_q,
)
from .bench import (
    BENCHMARK_NAMES,
    LQSpec,
    RiccatiSolution,
    benchmark_grid,
    benchmark_lq_spec,
    benchmark_partition,
    best_regular_open_loop,
    describe,
    lq_problem,
    lq_riccati_oracle,
    make_benchmark,
    nonconvex_weight_oracle,
)
from .control import (
    OBSERVATION_FEEDBACK,
    OPEN_LOOP,
    STATE_FEEDBACK,
    CellPartition,
    ControlGrid,
    ControlReport,
    RegularControl,
    RelaxedControl,
    constant_control,
    dirac_embed,
    mix,
    pair,
    refine_steps,
    validate,
)
from .errors import (
    BlowUp,
    DomainError,
    MissingPaths,
    NonFiniteCoefficient,
    NonPSD,
    RsmpError,
    ShapeMismatch,
    SingularRegression,
    UnknownBenchmark,
    ValueOffGrid,
)
from .forward import (
    NoiseEnsemble,
    PathEnsemble,
    cost,
    pathwise_cost,
    paths_to_csv,
    paths_to_csv_string,
    sample_noise,
    simulate,
    step_weights,
)
from .problem import (
    AssumptionReport,
    GaussianInitial,
    JumpSpec,
    Problem,
    averaged_diffusion,
    averaged_diffusion_x,
    averaged_drift,
    averaged_drift_x,
    averaged_jump,
    averaged_jump_x,
    averaged_running_cost,
    averaged_running_cost_x,
    fd_gradient,
    validate_assumptions,
)
from .smp import (
    INFO_FULL,
    INFO_PARTIAL,
    HamiltonianField,
    IterateRecord,
    OptimizationResult,
    OptimizeParams,
    hamiltonian,
    hamiltonian_field,
    optimize,
    pointwise_argmin,
    realize_regular,
    smp_gap,
)
from .variation import VariationEnsemble, gateaux, response_functional, simulate_variational

__version__ = "0.1.0"
