"""Numerical toolkit for two-marginal diffusion interpolation.

Pieces: uniform grids and tagged profiles (grids), a catalog of potentials
with the curvature-ratio operator (potentials), propagator kernels by closed
form, finite differences, or path sampling (kernels), the iterative factor
solver with slice movies and transition densities (bridge), ensemble
simulation of the steered diffusion (simulate), and closed-form reference
cases with structural diagnostics (cases).  The fkbridge console script
drives the lot.
"""

from .grids import (
    Grid,
    Profile,
    TimeGrid,
    integrate,
    l1_distance,
    make_uniform_grid,
    normalize,
    profile_from_csv,
    profile_to_csv,
)
from .potentials import (
    PotentialSpec,
    centrifugal_energy,
    centrifugal_potential,
    evaluate_potential,
    free_potential,
    gaussian_case_potential,
    harmonic_potential,
    moving_node_potential,
    nodal_case_potential,
    potential_from_drift,
    quantum_potential_from_density,
    tabulated_potential,
    time_reversed,
)
from .kernels import (
    KernelMatrix,
    McEstimate,
    assemble_kernel_legs,
    assemble_kernel_pde,
    chapman_kolmogorov_residual,
    default_step_count,
    harmonic_kernel,
    heat_kernel,
    kernel_from_function,
    kernel_row,
    load_kernel,
    mc_kernel_estimate,
    propagate_crank_nicolson,
    save_kernel,
)
from .bridge import (
    BridgeConvergenceError,
    BridgeProblem,
    BridgeSolution,
    TransitionDensity,
    drift_field,
    drift_field_tolerant,
    evolve_density,
    propagate_theta,
    solve_schrodinger_system,
    transition_density,
)
from .simulate import (
    PathEnsemble,
    PointMoments,
    TransitionMoments,
    empirical_density,
    load_ensemble,
    moments_from_paths,
    moments_from_transitions,
    save_ensemble,
    simulate_paths,
    write_slice_stats_csv,
)
from .cases import (
    Case,
    DegeneracyCheck,
    MovingNodeCheck,
    NodalDiagnostic,
    all_cases,
    centrifugal_case,
    degeneracy_block_check,
    gaussian_spread_case,
    moving_node_case,
    moving_node_consistency,
    nodal_contradiction_diagnostic,
    stable_node_case,
    stationary_harmonic_case,
)

__version__ = "1.0.0"
