"""Nonlinear multi-area frequency control with output-regulation controllers.

The package models a lossless multi-area power network (swing, voltage,
turbine-governor and consensus dynamics) driven by nonlinear exosystems that
generate the uncontrolled power injections, and provides two controllers: a
classical output-regulation law that zeroes the frequency deviations, and an
approximate optimal variant that additionally drives generation toward the
cost-minimizing dispatch by minimizing a quadrature penalty over the
exosystem attractor.
"""

from .approx import (ApproxController, ApproxSolution, PenaltyDomain, TrigBasis,
                     algorithm1_run, extended_output, penalty_eval, penalty_of_u,
                     solve_invariance_pde, tracking_error)
from .config import default_network_params, default_sim_settings, load_config, \
    write_default_config
from .exo import (ConstantBlock, ExoModel, RotationBlock, WindBlock,
                  build_constant_exo, build_scenario1_exo, build_scenario3_exo,
                  exo_equilibrium_check)
from .fitting import SinusoidBankParams, fit_sinusoid_bank, load_injection_csv
from .network import (CostModel, GridState, NetworkParams, dynamics_rhs, e_matrix,
                      generation_cost, incidence_from_edges, line_coupling,
                      optimal_dispatch, security_check, steady_state_solve)
from .regulator import (InternalModelRegulator, ManifoldPoint, SteppingRegulator,
                        classical_control, equivalent_control, hyperbolicity_check,
                        lie_relative_degree_check, manifold_evaluate,
                        solve_feasible_angles, zero_dynamics_rhs)
from .sim import SimConfig, SimTrace, inject_measurement_noise, integrate, \
    metrics_compute, run_scenario

__version__ = "0.1.0"
