"""Robust BSDEs and second-order BSDEs on finite families of diffusion measures."""

from .bsde_solver import (
    BackwardSolution,
    BSDESolver,
    solve_bsde,
    verify_comparison,
    verify_stability,
    verify_tower,
)
from .errors import (
    BasisError,
    ConfigurationError,
    DecompositionViolationError,
    InvalidMatrixError,
    InvalidParametersError,
    PreconditionError,
    Robust2BSDEError,
    SimulationDivergedError,
    StepDivergenceError,
)
from .generators import (
    CLAIMS,
    GENERATORS,
    GeneratorSpec,
    TerminalClaim,
    affine_generator,
    butterfly,
    call,
    constant_claim,
    linear_pricing_generator,
    put,
    risk_premium,
    two_rate_generator,
    zero_generator,
)
from .hedging import (
    HedgeResult,
    MarketSpec,
    super_hedging_price,
    two_rate_price,
    verify_duality_lower_bound,
    verify_superhedge,
    verify_two_rate,
)
from .lattice import Lattice
from .market_paths import (
    ControlPolicy,
    ControlSet,
    DiffusionFamily,
    PathEnsemble,
    TimeGrid,
    simulate,
    uncertain_volatility_family,
)
from .pde_oracle import GOperator, PdeGrid, black_scholes, black_scholes_delta, solve_g_equation
from .regression import RegressionBasis
from .reports import Report
from .robust_2bsde import (
    RobustSolution,
    discounted_K_identity,
    extract_K,
    robust_value,
    verify_2bsde_comparison,
    verify_apriori_estimates,
    verify_dpp,
    verify_minimality,
    verify_representation,
    verify_sup_consistency,
)

__version__ = "0.1.0"
