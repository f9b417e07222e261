"""Small-noise large deviations for Ito processes with predictable coefficients."""

from .models import (CIR, DelayModel, Diffusion, Model, OrnsteinUhlenbeck, Schilder, Segment, TimeGrid,
                     builtin_zoo, check_growth, check_predictability, eval_dispersion, eval_drift, linear_delay)
from .simulate import (BrownianPath, Control, DivergenceError, StatePath, euler_maruyama, moment_bound_check,
                       moment_constant, sample_brownian, tightness_modulus)
from .skeleton import (PositivityCertificate, SkeletonSolution, growth_bound, positivity_floor, solve_skeleton,
                       weak_l2_continuity_probe)
from .action import (ActionSolution, PathFunctional, action_of_control, laplace_infimum, laplace_minimizer,
                     min_action, rate_explicit)
from .estimate import (EstimationReport, EstimationRow, EventSet, epsilon_sweep, importance_sampling,
                       mc_laplace, mc_probability)

__version__ = "0.1.0"

__all__ = [
    "CIR",
    "DelayModel",
    "Diffusion",
    "Model",
    "OrnsteinUhlenbeck",
    "Schilder",
    "Segment",
    "TimeGrid",
    "builtin_zoo",
    "check_growth",
    "check_predictability",
    "eval_dispersion",
    "eval_drift",
    "linear_delay",
    "BrownianPath",
    "Control",
    "DivergenceError",
    "StatePath",
    "euler_maruyama",
    "moment_bound_check",
    "moment_constant",
    "sample_brownian",
    "tightness_modulus",
    "PositivityCertificate",
    "SkeletonSolution",
    "growth_bound",
    "positivity_floor",
    "solve_skeleton",
    "weak_l2_continuity_probe",
    "ActionSolution",
    "PathFunctional",
    "action_of_control",
    "laplace_infimum",
    "laplace_minimizer",
    "min_action",
    "rate_explicit",
    "EstimationReport",
    "EstimationRow",
    "EventSet",
    "epsilon_sweep",
    "importance_sampling",
    "mc_laplace",
    "mc_probability",
]
