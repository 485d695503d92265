//! Peer-to-peer energy trading on radial distribution feeders.
//!
//! The crate models an hourly trading interval on a radial AC feeder: a grid
//! model with per-unit normalization, a Newton-Raphson power flow, analytic
//! injection sensitivities linearized at the pre-trade operating point, peer
//! cost/utility models, two network-cost allocation policies (a uniform
//! volumetric rate and per-peer marginal-impact charges), and the iterative
//! price/ledger negotiation that couples them.

pub mod coordination;
pub mod market;
pub mod network;
pub mod powerflow;
pub mod scenario;
pub mod sensitivity;

pub use network::{BaseInjection, NetworkError, RadialNetwork};
pub use powerflow::{
    activation, solve_power_flow, BandSide, CostSchedule, FlowForm, GridState, NetworkCost,
    PowerFlowError, SolverOptions, Violations,
};
pub use coordination::{
    best_response, foc_residual, linearized_welfare, price_step, proximal_response,
    run_negotiation,
    social_optimum, verify_propositions, CoordinationError, LedgerMode, NegotiationConfig,
    NegotiationState, OptimumResult, Policy, PropositionReport,
};
pub use market::{
    allocate_causal, allocate_universal, buyer_utility, causal_unit_rates, market_surplus,
    peer_factors, seller_cost, AllocationBreakdown, MarketError, Peer, PeerFactors, PeerSet,
    RateSchedule, Role, TradeState,
};
pub use scenario::{
    run_scenarios, write_outputs, PolicyOutcome, ScenarioBundle, ScenarioConfig, ScenarioError,
};
pub use sensitivity::{SensitivityError, SensitivityTable};

pub mod synth;
