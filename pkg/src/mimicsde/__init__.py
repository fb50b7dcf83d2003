"""Degenerate half-space diffusions: simulation, mimicking, PDEs, and cross-checks.

The package is organized around one state space (the closed half-space
x_d >= 0, where the diffusion matrix x_d * a degenerates on the boundary) and
four ways of interrogating processes on it:

* :mod:`.sdesim` simulates the square-root-degenerate SDE and general Itô
  processes with nonnegativity-preserving Euler schemes;
* :mod:`.projection` estimates the conditional-expectation coefficients
  b = E[beta | X], x_d a = E[xi xi* | X] and rebuilds a Markov model whose
  fixed-time marginals should match the original process;
* :mod:`.pde` solves the associated Kolmogorov problems with no boundary data
  on the degenerate layer and checks the expectation/PDE duality;
* :mod:`.martingale` tests the compensated-process martingale property, the
  boundary Itô formula, and the restart (strong Markov) property.

:mod:`.geometry` supplies the cycloidal/parabolic distances and sampled
norm estimators shared by the validator in :mod:`.coeffs`.
"""

from .coeffs import (
    CoefficientModel,
    RegularityBudget,
    ValidationReport,
    apply_generator,
    heston_model,
    load_gridded_model,
    sqrt_factorize,
    strip_generator_term,
    validate_coefficients,
)
from .geometry import (
    HolderEstimate,
    Region,
    SpaceTimePoint,
    cycloidal_distance,
    holder_seminorm_estimate,
    parabolic_distance,
    weighted_sup_norm,
)
from .martingale import (
    AdaptedProbe,
    MartingaleReport,
    TestFunction,
    boundary_bump,
    ito_formula_residual,
    ito_residual_ladder,
    linear_function,
    martingale_increments,
    martingale_test,
    radial_bump,
    strong_markov_restart_test,
    time_weighted_xd,
)
from .pde import (
    DualityReport,
    Grid,
    PdeSolution,
    apriori_estimate_probe,
    duality_check,
    solve_cauchy,
    solve_terminal_value,
)
from .projection import (
    BinningSpec,
    MarginalComparison,
    MimickedCoefficients,
    build_mimicking_model,
    compare_marginals,
    estimate_mimicking_coefficients,
    load_mimicked,
    same_law_ks_quantile,
    save_mimicked,
)
from .sdesim import (
    ItoDriver,
    PathEnsemble,
    TimeGrid,
    ensemble_to_csv,
    model_driver,
    moment_bound_check,
    moment_growth_sweep,
    regime_switching_driver,
    simulate_ito_process,
    simulate_sde,
    support_check,
)

__version__ = "0.1.0"
