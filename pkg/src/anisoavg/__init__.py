"""Averaging of anisotropic diffusion along the flow of a divergence-free field.

Modules
-------
fields      vector and matrix fields, characteristic flow, brackets
averaging   orbit averages, the group G(s), the generator L and the averaged tensor
corrector   first-order corrector fields E, F
solver      finite element solvers for the stiff and the averaged problems
cli         study configurations and reports
"""

from .averaging import (
    HQProduct,
    MatrixFieldSample,
    OrbitGrid,
    WeightSpec,
    average_scalar,
    averaged_matrix_explicit,
    averaged_matrix_orbit,
    averaged_matrix_relaxation,
    generator_L,
    group_action,
    weighted_positive_part,
)
from .corrector import (
    CorrectorFields,
    FrameFields,
    compute_corrector_frame,
    corrector_field,
    verify_decomposition,
    zero_mean_antiderivative,
)
from .fields import (
    FlowMap,
    GaussianBump,
    MatrixFieldSpec,
    VectorFieldSpec,
    bracket_vm,
    bracket_vv,
    flow,
    flow_jacobian,
)
from .solver import (
    DiffusionOperator,
    Grid2D,
    SolverConfig,
    Trajectory,
    diagnostics_bound_check,
    solve_epsilon_problem,
    solve_limit_problem,
    step_explicit_cfl_demo,
)

__version__ = "0.1.0"
