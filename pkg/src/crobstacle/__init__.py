"""crobstacle: a nonconforming finite-element solver for the elliptic obstacle problem.

The package discretises the obstacle problem

    minimise  1/2 ||grad v||^2 - (f, v)   over  {v >= chi, v = g on the boundary}

with Crouzeix-Raviart elements, enforces the obstacle at element barycenters,
solves the discrete complementarity system with a primal-dual active-set
method, reconstructs a locally conservative dual flux, and drives adaptive
mesh refinement with a constant-free primal-dual error estimator.

Modules
-------
mesh        triangulations, structured generation, red / red-green-blue refinement
spaces      Crouzeix-Raviart, piecewise-constant and lowest-order flux fields,
            interpolation and quadrature
sparse      CSR matrices and direct / iterative linear solvers
assembly    stiffness and coupling matrices, data projection, oscillation terms
solver      primal-dual active set, penalty and brute-force reference solvers
duality     flux reconstruction, primal and dual energy functionals
estimator   a posteriori error estimator, error measures, convergence rates
adaptivity  marking strategies and the adaptive / uniform refinement loops
cli         benchmark definitions, experiment configs, command-line interface
"""

from .mesh import (
    Mesh,
    MeshError,
    Rectangle,
    LShape,
    build_structured,
    refine_red,
    refine_rgb,
    patches,
    mesh_stats,
    export_vtk,
)
from .spaces import (
    CrFunction,
    P0Function,
    P0VectorField,
    Rt0Function,
    SpaceError,
    VertexFunction,
    gradient_h,
    interp_av,
    interp_cr,
    interp_rt,
    project_p0,
    prolong_cr,
    prolong_p0,
    segment_rule,
    triangle_rule,
)
from .assembly import AssemblyError, ExactSolution, ProblemData, build_dofmap
from .solver import (
    SolverError,
    SolveOutcome,
    brute_force_solve,
    build_system,
    pdas_solve,
    penalized_solve,
)
from .duality import (
    DualField,
    DualityError,
    energy_dual_discrete,
    energy_primal_continuous,
    energy_primal_discrete,
    marini_flux,
)
from .estimator import (
    EstimatorBreakdown,
    EstimatorError,
    ErrorRecord,
    ExactErrors,
    aitken,
    eoc,
    estimate,
    exact_errors,
    postprocess_conforming,
    rho_reduced,
    write_error_history,
)
from .adaptivity import (
    AdaptivityError,
    AfemConfig,
    AfemHistory,
    AfemLevel,
    afem_run,
    doerfler_mark,
    dump_level_vtk,
)
from .benchmarks import BenchmarkDefinition, corner, get_benchmark, pyramid, ring

__version__ = "0.1.0"
