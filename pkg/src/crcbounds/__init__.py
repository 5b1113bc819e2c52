"""Population size bounds for capture-recapture data under weak dependence restrictions."""
from .loglinear import FitResult, ModelFormula, fit_hierarchy, fit_model, lincoln_petersen
from .moments import MomentSpec, build_g_highest, build_g_pairwise, build_moments, poisson_mean, poisson_variance
from .profile import PLConfig, invert_pl_ci, profile_lr
from .restrictions import (
    HighestOrder,
    IdentInterval,
    PairConstraint,
    Pairwise,
    check_feasibility,
    ident_interval,
    ident_interval_highest,
    ident_interval_pairwise,
    or_lower_bounds,
    parse_restriction,
)
from .results import CIResult
from .simulate import SimConfig, run_coverage
from .tables import ContingencyTable, load_table, parity_sets, pwid_table
from .tib import TestConfig, invert_ci, test_moment_inequalities

__version__ = "0.1.0"
