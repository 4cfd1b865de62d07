"""Discrete-velocity solver for the steady Boltzmann half-space boundary
layer with a diffuse-reflection wall: truncated-slab transport sweeps, the
linearized hard-sphere operator with exact discrete conservation, the
far-field Maxwellian correction, and a Picard driver for the weakly nonlinear
problem."""

from .grid import GridConfigError, VelocityGrid, build_grid, interpolate, specular_map
from .gaussian import (MaxwellianContext, MomentFunctionals, WeightSpec,
                       WeightConfigError, build_context, maxwellian,
                       moment_functionals, verify_gaussian_moments, weight)
from .collision import (AssemblyError, CollisionQuadrature, LinearizedOperator,
                        SolverFailure, SphereRule, apply_L, apply_Q,
                        assemble_K, collision_frequency, gamma_bilinear,
                        kappas, make_sphere_rule, solve_Linv)
from .slab import (LinearSlabProblem, SlabField, SlabGrid, residual_norms,
                   solve_linear_slab, sweep)
from .farfield import (CompatibilityError, FarFieldState, MacroFields,
                       d_convergence_study, far_field_G, macro_moments,
                       reconstruct_macro_from_boundary, solve_phi_system,
                       subtract_gamma_mass)
from .nonlinear import (NonlinearProblem, SmallnessError, check_compatibility,
                        estimate_delta0, manifold_boundary, measure_delta,
                        solve_nonlinear)
from .diagnostics import (DecayFit, coercivity_estimate, conservation_report,
                          energy_dissipation_check, fit_decay_rate)
from .cases import (flux_zeroed_incoming, generic_farfield_data,
                    generic_nonlinear_data, manufactured_case, mms_convergence)
from .config import ConfigError, RunConfig, load_config, parse_config
from .report import SolveReport, VERSION

__version__ = VERSION
