"""Merger retrospectives: difference-in-differences, structural conduct/efficiency
estimation and synthetic GMM for panels of markets observed around a merger."""

from .classification import CarrierPresence, MarketLabel, classify_markets, load_presence
from .did import (
    DidSpec,
    Differencing,
    TrendMethod,
    TrendMode,
    aggregate_event_effects,
    did_first_difference_event_study,
    did_fixed_effects,
    did_with_trends,
    event_weights,
    percent_transform,
)
from .errors import (
    BootstrapError,
    EquilibriumError,
    IdentificationError,
    MergerRetroError,
    PanelError,
    WeightSolverError,
)
from .estimator import (
    EfficiencyMode,
    MomentSystem,
    StructuralDifferencing,
    StructuralEstimate,
    StructuralSpec,
    build_demand_moments,
    build_supply_moments,
    estimate_structural,
    first_stage_F,
    solve_linear_iv,
)
from .panel import PanelDataset, PanelSchema, TreatmentPlan, load_panel, treatment_indicator
from .report import EstimateReport
from .sgmm import BootstrapConfig, SgmmConfig, bootstrap_inference, estimate_synthetic_gmm, sdid_treatment_effect
from .simulator import DgpConfig, SelectionMode, default_params, run_monte_carlo, simulate_panel, truth
from .structural import (
    ConductParams,
    DemandParams,
    ModelParams,
    SupplyParams,
    delta_lambda,
    equilibrium,
    nuisance_slope,
    observational_twin,
    passthrough_price_effect,
    recover_conduct_two_regimes,
    reduced_form_price,
)
from .weights import WeightSet, residualize, solve_weights

__version__ = "0.1.0"
