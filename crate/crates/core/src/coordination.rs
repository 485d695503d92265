//! Iterative price negotiation between trading peers with the grid operator
//! in the loop, plus the welfare-optimal benchmark it is measured against.
//!
//! Each round: every peer posts a damped best response to the going clearing
//! price plus its own network-cost rate, the price walks along the
//! demand-supply gap, the operator re-solves the grid at the delivered trade
//! point (the long side is scaled pro rata, so the grid only ever sees
//! matched quantities), and per-peer cost ledgers are updated under the
//! active policy. Fixed points of the loop are exact best responses at a
//! cleared market, so converged equilibria can be compared against the
//! projected-gradient optimum of the same linearized welfare.

use crate::market::{
    buyer_utility, causal_unit_rates, market_surplus, peer_factors, seller_cost,
    AllocationBreakdown, MarketError, Peer, PeerFactors, PeerSet, RateSchedule, Role, TradeState,
};
use crate::network::RadialNetwork;
use crate::powerflow::{
    activation, exact_network_cost, solve_power_flow, CostSchedule, FlowForm, GridState,
    NetworkCost, PowerFlowError, SolverOptions, Violations,
};
use crate::sensitivity::{SensitivityError, SensitivityTable};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

/// Traded volumes below this (MWh) are treated as zero when forming rates.
pub const VOLUME_FLOOR: f64 = 1e-9;
/// Relative standard deviation of total volume over the guard window that
/// counts as oscillation.
pub const OSCILLATION_RELATIVE_STD: f64 = 0.02;
/// Iterations per oscillation-guard window.
pub const OSCILLATION_WINDOW: usize = 50;
/// Step halvings the guard performs before giving up.
pub const OSCILLATION_MAX_HALVINGS: usize = 3;
/// Weight on freshly recomputed grid factors when the linearization is
/// refreshed mid-negotiation; the remainder stays on the factors in use, so
/// the rates track the traded point without jumping.
pub const RELINEARIZE_BLEND: f64 = 0.5;
/// A refreshed linearization is accepted as self-consistent when no peer's
/// loss rate would move by more than this many $/MWh.
pub const RATE_CONSISTENCY_TOL: f64 = 1e-3;
/// Safety margin the voltage-band duals steer for (p.u.), so cleared nodes
/// settle strictly inside their band instead of knife-edge on it.
pub const CLEARING_MARGIN_V: f64 = 1e-4;
/// Safety margin the loading duals steer for, as a fraction of the rating.
pub const CLEARING_MARGIN_S: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum CoordinationError {
    #[error("bad negotiation config: {0}")]
    Config(String),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(
        "negotiation oscillates: total volume kept swinging after {halvings} step halvings \
         ({iterations} iterations); inspect the attached history"
    )]
    Oscillation {
        iterations: usize,
        halvings: usize,
        history: Vec<IterationRecord>,
    },
    #[error("optimum search stalled: projected-gradient certificate {certificate:.3e} after {iterations} iterations")]
    OptimumStalled { certificate: f64, iterations: usize },
}

/// Network-cost treatment during negotiation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// No network charges at all.
    Base,
    /// One uniform $/MWh rate for every peer, recovering realized cost.
    Universal,
    /// Per-peer marginal-contribution rates from grid response factors.
    Causal,
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Policy::Base => "base",
            Policy::Universal => "universal",
            Policy::Causal => "causal",
        })
    }
}

/// How per-peer cost ledgers are carried between rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LedgerMode {
    /// Store $/MWh unit rates: band components by damped ascent, the loss
    /// component recomputed each round at its marginal value (signed).
    #[default]
    Rate,
    /// Store accumulated dollars, all floored at zero, converted to a rate by
    /// dividing by the peer's current volume. Kept for comparison; it
    /// overprices persistent components by construction.
    Accumulated,
}

#[derive(Debug, Clone)]
pub struct NegotiationConfig {
    /// Price step on the demand-supply gap.
    pub epsilon: f64,
    /// Damping factor for ledger/rate updates, in (0, 1].
    pub step_damping: f64,
    /// Weight of the proximal term in the buyers' bilateral response.
    pub proximal_weight: f64,
    pub tol_volume: f64,
    pub tol_price: f64,
    pub max_iterations: usize,
    /// Starting price; defaults to the roster's mean linear coefficient.
    pub initial_price: Option<f64>,
    pub flow_form: FlowForm,
    pub ledger_mode: LedgerMode,
    /// Refresh grid response factors at the traded point every this many
    /// iterations; 0 keeps the pre-trade linearization throughout.
    pub relinearize_every: usize,
}

impl Default for NegotiationConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            step_damping: 0.5,
            proximal_weight: 1.0,
            tol_volume: 1e-5,
            tol_price: 1e-5,
            max_iterations: 5000,
            initial_price: None,
            flow_form: FlowForm::BranchCurrent,
            ledger_mode: LedgerMode::Rate,
            relinearize_every: 0,
        }
    }
}

impl NegotiationConfig {
    fn validate(&self) -> Result<(), CoordinationError> {
        let bad = |msg: &str| Err(CoordinationError::Config(msg.into()));
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.step_damping > 0.0 && self.step_damping <= 1.0) {
            return bad("step_damping must lie in (0, 1]");
        }
        if !(self.proximal_weight > 0.0) {
            return bad("proximal_weight must be positive");
        }
        if !(self.tol_volume > 0.0 && self.tol_price > 0.0) {
            return bad("tolerances must be positive");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1");
        }
        Ok(())
    }
}

/// Per-peer cost ledgers; interpretation depends on the mode.
#[derive(Debug, Clone)]
pub struct Ledgers {
    pub mode: LedgerMode,
    /// Voltage-band component per peer.
    pub vc: Vec<f64>,
    /// Flow-band component per peer.
    pub fc: Vec<f64>,
    /// Loss component per peer.
    pub lc: Vec<f64>,
}

impl Ledgers {
    fn new(mode: LedgerMode, count: usize) -> Self {
        Self {
            mode,
            vc: vec![0.0; count],
            fc: vec![0.0; count],
            lc: vec![0.0; count],
        }
    }

    /// Effective $/MWh rate the peer's next response should internalize.
    pub fn unit_rate(&self, k: usize, volume: f64) -> f64 {
        let sum = self.vc[k] + self.fc[k] + self.lc[k];
        match self.mode {
            LedgerMode::Rate => sum,
            LedgerMode::Accumulated => {
                if volume > VOLUME_FLOOR {
                    sum / volume
                } else {
                    0.0
                }
            }
        }
    }

    /// Realized charges at the given volumes, split by driver: the rates the
    /// peers actually responded to, turned into dollars. In accumulated mode
    /// the ledger entries already are dollars.
    pub fn allocation(&self, volumes: &[f64]) -> AllocationBreakdown {
        let mut out = AllocationBreakdown::zeros(volumes.len());
        for (k, &p) in volumes.iter().enumerate() {
            match self.mode {
                LedgerMode::Rate => {
                    out.voltage[k] = self.vc[k] * p;
                    out.congestion[k] = self.fc[k] * p;
                    out.loss[k] = self.lc[k] * p;
                }
                LedgerMode::Accumulated => {
                    out.voltage[k] = self.vc[k];
                    out.congestion[k] = self.fc[k];
                    out.loss[k] = self.lc[k];
                }
            }
        }
        out
    }
}

/// Per-constraint dual prices carried by the causal policy: one ascent
/// variable per node band side and one per rated line. Each climbs on its
/// own signed excess and relaxes on margin, so it settles where its
/// constraint just clears; peer rates are assembled as dual times the peer's
/// marginal effect on that constraint, which prices harm and credits relief.
#[derive(Debug, Clone)]
pub struct BandDuals {
    /// Dual on each node's lower voltage band.
    pub v_low: Vec<f64>,
    /// Dual on each node's upper voltage band.
    pub v_high: Vec<f64>,
    /// Dual on each rated line's loading limit.
    pub flow: Vec<f64>,
}

impl BandDuals {
    fn new(nodes: usize, lines: usize) -> Self {
        Self {
            v_low: vec![0.0; nodes],
            v_high: vec![0.0; nodes],
            flow: vec![0.0; lines],
        }
    }

    /// One damped ascent step per constraint on its signed excess, steered
    /// toward the clearing margins.
    fn ascend(
        &mut self,
        net: &RadialNetwork,
        state: &GridState,
        schedule: &CostSchedule,
        eta: f64,
    ) {
        for (n, node) in net.nodes().iter().enumerate().skip(1) {
            let v = state.voltages[n].norm();
            self.v_low[n] = (self.v_low[n]
                + eta * schedule.voltage_price * (node.v_min + CLEARING_MARGIN_V - v))
                .max(0.0);
            self.v_high[n] = (self.v_high[n]
                + eta * schedule.voltage_price * (v - (node.v_max - CLEARING_MARGIN_V)))
                .max(0.0);
        }
        for (l, line) in net.lines().iter().enumerate() {
            if line.s_max.is_finite() {
                let target = line.s_max * (1.0 - CLEARING_MARGIN_S);
                self.flow[l] = (self.flow[l]
                    + eta * schedule.congestion_price * (state.flows[l].norm() - target))
                    .max(0.0);
            }
        }
    }

    /// Voltage-band component of peer k's rate: each dual weighted by how
    /// much one more traded MWh moves that banded voltage the wrong way.
    fn voltage_rate(&self, factors: &PeerFactors, k: usize) -> f64 {
        let mut rate = 0.0;
        for n in 0..self.v_low.len() {
            if self.v_low[n] > 0.0 {
                rate -= self.v_low[n] * factors.voltage[(n, k)];
            }
            if self.v_high[n] > 0.0 {
                rate += self.v_high[n] * factors.voltage[(n, k)];
            }
        }
        rate
    }

    /// Loading component of peer k's rate. A line with an active dual but no
    /// defined flow direction cannot be attributed, which is an error.
    fn congestion_rate(&self, factors: &PeerFactors, k: usize) -> Result<f64, MarketError> {
        let mut rate = 0.0;
        for l in 0..self.flow.len() {
            if self.flow[l] > 0.0 {
                if !factors.flow_defined[l] {
                    return Err(MarketError::UndefinedFlowFactor { line: l });
                }
                rate += self.flow[l] * factors.flow[(l, k)];
            }
        }
        Ok(rate)
    }
}

/// Uniform-rate components under the universal policy, $/MWh.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniversalRate {
    /// Damped tracker of realized loss cost per traded MWh (signed).
    pub loss: f64,
    /// Dual price on the worst voltage-band excess (non-negative): climbs
    /// while any node violates, relaxes while every node holds a margin, and
    /// is stationary exactly when the tightest node sits on its band.
    pub voltage: f64,
    /// Dual price on the worst relative line overload (non-negative), with
    /// the same climb/relax behaviour against the loading margins.
    pub congestion: f64,
}

impl UniversalRate {
    pub fn total(&self) -> f64 {
        self.loss + self.voltage + self.congestion
    }
}

/// Worst voltage-band excess over non-slack nodes, in p.u.: positive when
/// some node is outside its band, and minus the tightest margin otherwise.
fn worst_voltage_excess(net: &RadialNetwork, state: &GridState) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for (k, node) in net.nodes().iter().enumerate().skip(1) {
        let v = state.voltages[k].norm();
        worst = worst
            .max(node.v_min + CLEARING_MARGIN_V - v)
            .max(v - (node.v_max - CLEARING_MARGIN_V));
    }
    if worst.is_finite() {
        worst
    } else {
        0.0
    }
}

/// Worst relative line overload over rated lines: positive fraction of the
/// rating when some line is overloaded, and minus the tightest relative
/// margin otherwise. Unrated lines never constrain; with no rated line at
/// all the excess is a full negative margin, so the dual price relaxes.
fn worst_loading_excess(net: &RadialNetwork, state: &GridState) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for (l, line) in net.lines().iter().enumerate() {
        if line.s_max.is_finite() {
            let target = line.s_max * (1.0 - CLEARING_MARGIN_S);
            worst = worst.max((state.flows[l].norm() - target) / line.s_max);
        }
    }
    if worst.is_finite() {
        worst
    } else {
        -1.0
    }
}

/// One negotiation round as recorded in the history.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Posted volume per peer (roster order), MWh: the book before the long
    /// side is matched down, which is what the price walk responds to.
    pub volumes: Vec<f64>,
    /// Clearing price, $/MWh.
    pub price: f64,
    pub vc: Vec<f64>,
    pub fc: Vec<f64>,
    pub lc: Vec<f64>,
    /// Gains from trade net of exact network cost at this round's trades.
    pub welfare: f64,
    pub violation_count: usize,
    pub total_volume: f64,
}

/// Final state of one negotiation run, with the grid evaluation attached.
#[derive(Debug, Clone)]
pub struct NegotiationState {
    pub policy: Policy,
    /// Rounds executed.
    pub tau: usize,
    pub converged: bool,
    pub trade: TradeState,
    /// Delivered volume per peer (roster order), MWh.
    pub volumes: Vec<f64>,
    pub ledgers: Ledgers,
    /// Final price step (smaller than configured if the guard halved it).
    pub epsilon: f64,
    pub step_damping: f64,
    /// Effective $/MWh rate each peer faced in the final round.
    pub peer_rates: Vec<f64>,
    pub universal_rate: UniversalRate,
    /// Per-constraint dual prices carried by the causal policy.
    pub band_duals: BandDuals,
    pub history: Vec<IterationRecord>,
    pub base: GridState,
    pub grid: GridState,
    pub violations: Violations,
    pub cost: NetworkCost,
    /// Gains from trade before network costs.
    pub surplus: f64,
    /// Gains from trade net of exact network cost.
    pub welfare: f64,
    pub factors: PeerFactors,
}

// ---------------------------------------------------------------------------
// Scalar best responses and price dynamics
// ---------------------------------------------------------------------------

/// Volume maximizing one peer's round objective at a unit price plus a
/// $/MWh ledger rate, clamped to the peer's volume range. A negative
/// effective price means the peer is paid to trade more, so it takes its cap.
pub fn best_response(peer: &Peer, price: f64, ledger_rate: f64) -> f64 {
    let interior = match peer.role {
        Role::Seller => (price - ledger_rate - peer.beta) / (2.0 * peer.alpha),
        Role::Buyer => {
            if price + ledger_rate < 0.0 {
                return peer.p_max;
            }
            (peer.beta - price - ledger_rate) / (2.0 * peer.alpha)
        }
    };
    interior.clamp(peer.p_min, peer.p_max)
}

/// Move the clearing price along the excess demand, floored at zero.
pub fn price_step(price: f64, demand: f64, supply: f64, epsilon: f64) -> f64 {
    (price + epsilon * (demand - supply)).max(0.0)
}

/// One peer's damped response to the clearing price plus its $/MWh ledger
/// rate: the maximizer of the round payoff with a proximal anchor at the
/// previous volume, clamped to the peer's volume range. The anchor weight
/// scales with the peer's own curvature so damping is uniform across
/// heterogeneous peers, and it vanishes at a fixed point, where the response
/// equals the exact best response.
pub fn proximal_response(
    peer: &Peer,
    price: f64,
    ledger_rate: f64,
    previous: f64,
    proximal_weight: f64,
) -> f64 {
    let rho = proximal_weight * 2.0 * peer.alpha;
    let interior = match peer.role {
        Role::Seller => {
            (price - ledger_rate - peer.beta + rho * previous) / (2.0 * peer.alpha + rho)
        }
        Role::Buyer => {
            (peer.beta - price - ledger_rate + rho * previous) / (2.0 * peer.alpha + rho)
        }
    };
    interior.clamp(peer.p_min, peer.p_max)
}

// ---------------------------------------------------------------------------
// The negotiation loop
// ---------------------------------------------------------------------------

struct GridEvaluation {
    state: GridState,
    violations: Violations,
    cost: NetworkCost,
}

/// Solve the grid at the pre-trade point plus the current trades.
fn evaluate_grid(
    net: &RadialNetwork,
    base_injection: &[Complex64],
    base_state: &GridState,
    peers: &PeerSet,
    volumes: &[f64],
    schedule: &CostSchedule,
    warm: &[Complex64],
    options: &SolverOptions,
) -> Result<GridEvaluation, PowerFlowError> {
    let mut injections = base_injection.to_vec();
    for peer in peers.peers() {
        let sign = match peer.role {
            Role::Seller => 1.0,
            Role::Buyer => -1.0,
        };
        injections[peer.node] += Complex64::new(sign * volumes[peer.id] / net.base_mva, 0.0);
    }
    let state = solve_power_flow(net, &injections, Some(warm), options)?;
    let violations = activation(net, &state);
    let cost = exact_network_cost(net, base_state, &state, schedule);
    Ok(GridEvaluation {
        state,
        violations,
        cost,
    })
}

/// Violation-worsening pressure per peer: the signed sum of its band-rate
/// factors over the activated set, in $/MWh when scaled by the band price.
fn band_pressure(factors: &PeerFactors, violations: &Violations, k: usize) -> (f64, f64) {
    let mut v = 0.0;
    for &(node, side, _) in &violations.nodes {
        v += side.direction() * factors.voltage[(node, k)];
    }
    let mut s = 0.0;
    for &(line, side, _) in &violations.lines {
        s += side.direction() * factors.flow[(line, k)];
    }
    (v, s)
}

/// Damped update of the in-use grid factors toward freshly computed ones.
/// Lines whose flow direction is undefined at the fresh state keep their
/// previous column: an old direction beats no direction.
fn blend_factors(current: &mut PeerFactors, fresh: &PeerFactors, weight: f64) {
    let keep = 1.0 - weight;
    current.loss = &current.loss * keep + &fresh.loss * weight;
    current.voltage = &current.voltage * keep + &fresh.voltage * weight;
    for l in 0..current.flow_defined.len() {
        if !fresh.flow_defined[l] {
            continue;
        }
        for k in 0..current.flow.ncols() {
            current.flow[(l, k)] = if current.flow_defined[l] {
                keep * current.flow[(l, k)] + weight * fresh.flow[(l, k)]
            } else {
                fresh.flow[(l, k)]
            };
        }
        current.flow_defined[l] = true;
    }
}

/// Run the full negotiation under one policy. The grid is re-solved at every
/// round so band activation always reflects the current trades.
pub fn run_negotiation(
    net: &RadialNetwork,
    peers: &PeerSet,
    schedule: &CostSchedule,
    policy: Policy,
    config: &NegotiationConfig,
) -> Result<NegotiationState, CoordinationError> {
    config.validate()?;
    let seller_ids = peers.sellers().to_vec();
    let buyer_ids = peers.buyers().to_vec();
    let (s_count, b_count) = (seller_ids.len(), buyer_ids.len());
    let count = peers.len();

    let options = SolverOptions {
        flow_form: config.flow_form,
        ..SolverOptions::default()
    };
    let base_injection = net.base_injection().as_slice().to_vec();
    let base_state = solve_power_flow(net, &base_injection, None, &options)?;

    let mut probe_nodes: Vec<usize> = peers.peers().iter().map(|p| p.node).collect();
    probe_nodes.sort_unstable();
    probe_nodes.dedup();
    let table = SensitivityTable::compute(net, &base_state, &probe_nodes, config.flow_form)?;
    let mut factors = peer_factors(net, &table, peers)?;

    let initial_price = config.initial_price.unwrap_or_else(|| {
        peers.peers().iter().map(|p| p.beta).sum::<f64>() / count as f64
    });
    let mut price = initial_price.max(0.0);
    let mut ledgers = Ledgers::new(config.ledger_mode, count);
    let mut universal_rate = UniversalRate::default();
    let mut duals = BandDuals::new(net.node_count(), net.line_count());
    let mut volumes = vec![0.0; count];
    let mut delivered = vec![0.0; count];
    // Once a policy prices the bands it must also clear them: a settled
    // market that still violates a band is not accepted as converged.
    let requires_clean = policy != Policy::Base
        && (schedule.voltage_price > 0.0 || schedule.congestion_price > 0.0);

    let mut epsilon = config.epsilon;
    let mut halvings = 0usize;
    let mut last_refresh = 0usize;
    let mut warm = base_state.voltages.clone();
    let mut history: Vec<IterationRecord> = Vec::new();
    let mut converged = false;
    let mut evaluation: Option<GridEvaluation> = None;
    let mut tau = 0;

    while tau < config.max_iterations {
        tau += 1;
        let rate_of = |k: usize, vols: &[f64]| -> f64 {
            match policy {
                Policy::Base => 0.0,
                Policy::Universal => universal_rate.total(),
                Policy::Causal => ledgers.unit_rate(k, vols[k]),
            }
        };

        // Every peer posts a damped best response to the going price plus
        // its own ledger rate.
        let mut new_volumes = vec![0.0; count];
        for peer in peers.peers() {
            new_volumes[peer.id] = proximal_response(
                peer,
                price,
                rate_of(peer.id, &volumes),
                volumes[peer.id],
                config.proximal_weight,
            );
        }
        let supply: f64 = seller_ids.iter().map(|&sid| new_volumes[sid]).sum();
        let demand: f64 = buyer_ids.iter().map(|&bid| new_volumes[bid]).sum();
        let imbalance = demand - supply;

        // The clearing price walks along the excess demand.
        let new_price = price_step(price, demand, supply, epsilon);
        let price_change = (new_price - price).abs();
        price = new_price;

        let volume_change = volumes
            .iter()
            .zip(&new_volumes)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        volumes = new_volumes;

        // Only matched energy flows: the long side of the book is scaled
        // pro rata before the grid sees the trades, so mid-negotiation
        // imbalances never get dumped on the feeder as phantom injections.
        let matched = supply.min(demand);
        delivered.copy_from_slice(&volumes);
        if matched > VOLUME_FLOOR {
            let seller_share = matched / supply;
            let buyer_share = matched / demand;
            for &sid in &seller_ids {
                delivered[sid] *= seller_share;
            }
            for &bid in &buyer_ids {
                delivered[bid] *= buyer_share;
            }
        } else {
            delivered.iter_mut().for_each(|v| *v = 0.0);
        }

        // Operator evaluates the grid at the delivered trade point.
        let eval = evaluate_grid(
            net,
            &base_injection,
            &base_state,
            peers,
            &delivered,
            schedule,
            &warm,
            &options,
        )?;
        warm.copy_from_slice(&eval.state.voltages);

        // Ledger / rate updates under the active policy.
        let eta = config.step_damping;
        match policy {
            Policy::Base => {}
            Policy::Universal => {
                let total_volume: f64 = delivered.iter().sum();
                if total_volume > VOLUME_FLOOR {
                    universal_rate.loss = (1.0 - eta) * universal_rate.loss
                        + eta * eval.cost.loss_cost / total_volume;
                }
                // Band duals move on the signed worst excess, so they climb
                // while violated, relax while clear, and settle where the
                // tightest constraint just binds.
                universal_rate.voltage = (universal_rate.voltage
                    + eta * schedule.voltage_price * worst_voltage_excess(net, &eval.state))
                .max(0.0);
                universal_rate.congestion = (universal_rate.congestion
                    + eta * schedule.congestion_price * worst_loading_excess(net, &eval.state))
                .max(0.0);
            }
            Policy::Causal => match config.ledger_mode {
                LedgerMode::Rate => {
                    duals.ascend(net, &eval.state, schedule, eta);
                    for k in 0..count {
                        ledgers.vc[k] = duals.voltage_rate(&factors, k);
                        ledgers.fc[k] = duals.congestion_rate(&factors, k)?;
                        ledgers.lc[k] = 2.0 * schedule.loss_price * factors.loss[k];
                    }
                }
                LedgerMode::Accumulated => {
                    if !eval.violations.lines.is_empty() {
                        for &(line, _, _) in &eval.violations.lines {
                            if !factors.flow_defined[line] {
                                return Err(MarketError::UndefinedFlowFactor { line }.into());
                            }
                        }
                    }
                    for k in 0..count {
                        let (v_pressure, s_pressure) =
                            band_pressure(&factors, &eval.violations, k);
                        let p = delivered[k];
                        ledgers.vc[k] = (ledgers.vc[k]
                            + eta * schedule.voltage_price * v_pressure * p)
                            .max(0.0);
                        ledgers.fc[k] = (ledgers.fc[k]
                            + eta * schedule.congestion_price * s_pressure * p)
                            .max(0.0);
                        ledgers.lc[k] = (ledgers.lc[k]
                            + eta * 2.0 * schedule.loss_price * factors.loss[k] * p)
                            .max(0.0);
                    }
                }
            },
        }

        // Optional refresh of the linearization at the delivered point. Only
        // the causal policy prices through the factors, so only it tracks.
        // Fresh factors are blended in rather than swapped, which keeps the
        // induced rate moves small enough for the price walk to absorb.
        if policy == Policy::Causal
            && config.relinearize_every > 0
            && tau % config.relinearize_every == 0
        {
            let table =
                SensitivityTable::compute(net, &eval.state, &probe_nodes, config.flow_form)?;
            let fresh = peer_factors(net, &table, peers)?;
            blend_factors(&mut factors, &fresh, RELINEARIZE_BLEND);
            last_refresh = tau;
        }

        // Welfare is booked on delivered energy: cost of what was produced,
        // utility of what actually arrived.
        let welfare = {
            let mut surplus = 0.0;
            for &sid in &seller_ids {
                surplus -= seller_cost(peers.peer(sid), delivered[sid]);
            }
            for &bid in &buyer_ids {
                surplus += buyer_utility(peers.peer(bid), delivered[bid]);
            }
            surplus - eval.cost.total()
        };
        history.push(IterationRecord {
            iteration: tau,
            volumes: volumes.clone(),
            price,
            vc: ledgers.vc.clone(),
            fc: ledgers.fc.clone(),
            lc: ledgers.lc.clone(),
            welfare,
            violation_count: eval.violations.count(),
            total_volume: volumes.iter().sum(),
        });
        evaluation = Some(eval);

        // Stationary volumes and price alone are not enough: the market
        // must also have cleared, or a vanishing price step could freeze a
        // lopsided state and report it as settled.
        if tau > 1
            && volume_change <= config.tol_volume
            && price_change <= config.tol_price
            && imbalance.abs() <= count as f64 * config.tol_volume
            && (!requires_clean
                || evaluation
                    .as_ref()
                    .expect("just evaluated")
                    .violations
                    .count()
                    == 0)
        {
            // Under a moving linearization the settled point must also be
            // self-consistent: refresh the factors here and only stop once
            // the refreshed rates match the ones just responded to.
            if policy == Policy::Causal && config.relinearize_every > 0 {
                let state = &evaluation.as_ref().expect("just evaluated").state;
                let table =
                    SensitivityTable::compute(net, state, &probe_nodes, config.flow_form)?;
                let fresh = peer_factors(net, &table, peers)?;
                let drift = factors
                    .loss
                    .iter()
                    .zip(&fresh.loss)
                    .map(|(a, b)| 2.0 * schedule.loss_price * (a - b).abs())
                    .fold(0.0_f64, f64::max);
                blend_factors(&mut factors, &fresh, RELINEARIZE_BLEND);
                last_refresh = tau;
                if drift > RATE_CONSISTENCY_TOL {
                    continue;
                }
                // Re-express the ledger rates against the final factors so
                // the reported rates, duals, and factors form one consistent
                // snapshot (the adjustment is below the drift tolerance).
                if config.ledger_mode == LedgerMode::Rate {
                    for k in 0..count {
                        ledgers.vc[k] = duals.voltage_rate(&factors, k);
                        ledgers.fc[k] = duals.congestion_rate(&factors, k)?;
                        ledgers.lc[k] = 2.0 * schedule.loss_price * factors.loss[k];
                    }
                }
            }
            converged = true;
            break;
        }

        // Oscillation guard on the trailing window of total volume: large
        // swings mean the price step is unstable, so halve it, and give up
        // after a few attempts. Windows near a linearization refresh are
        // skipped: the deliberate rate jump produces a transient that the
        // guard must not read as instability.
        if tau >= 2 * OSCILLATION_WINDOW
            && tau % OSCILLATION_WINDOW == 0
            && tau - last_refresh >= 2 * OSCILLATION_WINDOW
        {
            let window: Vec<f64> = history[tau - OSCILLATION_WINDOW..]
                .iter()
                .map(|r| r.total_volume)
                .collect();
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            let var = window.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                / window.len() as f64;
            if mean > VOLUME_FLOOR && var.sqrt() / mean > OSCILLATION_RELATIVE_STD {
                if halvings >= OSCILLATION_MAX_HALVINGS {
                    return Err(CoordinationError::Oscillation {
                        iterations: tau,
                        halvings,
                        history,
                    });
                }
                halvings += 1;
                epsilon *= 0.5;
            }
        }
    }

    let evaluation = evaluation.expect("at least one iteration ran");
    let peer_rates: Vec<f64> = (0..count)
        .map(|k| match policy {
            Policy::Base => 0.0,
            Policy::Universal => universal_rate.total(),
            Policy::Causal => ledgers.unit_rate(k, delivered[k]),
        })
        .collect();
    // Pair volumes reconstructed pro rata from the delivered set — the same
    // trades the final grid evaluation saw: seller i supplies buyer j in
    // proportion to the buyer's share of total demand, reproducing each
    // peer's delivered volume exactly since the delivered book is balanced.
    let demand_total: f64 = buyer_ids.iter().map(|&bid| delivered[bid]).sum();
    let mut bilateral = DMatrix::zeros(s_count, b_count);
    if demand_total > VOLUME_FLOOR {
        for (i, &sid) in seller_ids.iter().enumerate() {
            for (j, &bid) in buyer_ids.iter().enumerate() {
                bilateral[(i, j)] = delivered[sid] * delivered[bid] / demand_total;
            }
        }
    }
    let trade = TradeState {
        volumes: bilateral,
        prices: DVector::from_element(s_count, price),
    };
    let surplus = market_surplus(peers, &trade);
    let welfare = surplus - evaluation.cost.total();

    Ok(NegotiationState {
        policy,
        tau,
        converged,
        trade,
        volumes: delivered,
        ledgers,
        epsilon,
        step_damping: config.step_damping,
        peer_rates,
        universal_rate,
        band_duals: duals,
        history,
        base: base_state,
        grid: evaluation.state,
        violations: evaluation.violations,
        cost: evaluation.cost,
        surplus,
        welfare,
        factors,
    })
}

// ---------------------------------------------------------------------------
// Welfare-optimal benchmark
// ---------------------------------------------------------------------------

/// Certificate threshold: the optimum is accepted when the projected
/// gradient step moves no coordinate more than this (per unit step).
pub const OPTIMUM_CERTIFICATE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct OptimumResult {
    /// Net volume per peer (roster order), MWh.
    pub volumes: Vec<f64>,
    /// Welfare under the linearized network costs.
    pub welfare: f64,
    pub iterations: usize,
    pub certificate: f64,
    /// The per-peer unit rates the objective charged (pre-trade activation).
    pub rates: RateSchedule,
}

/// Gains from trade at given net volumes, before network costs.
pub fn net_surplus(peers: &PeerSet, volumes: &[f64]) -> f64 {
    peers
        .peers()
        .iter()
        .map(|p| match p.role {
            Role::Seller => -seller_cost(p, volumes[p.id]),
            Role::Buyer => buyer_utility(p, volumes[p.id]),
        })
        .sum()
}

/// Welfare at given net volumes under fixed per-peer unit rates.
pub fn linearized_welfare(peers: &PeerSet, volumes: &[f64], rates: &RateSchedule) -> f64 {
    let charges: f64 = (0..peers.len()).map(|k| rates.total(k) * volumes[k]).sum();
    net_surplus(peers, volumes) - charges
}

/// Project onto the intersection of per-peer volume boxes and the
/// supply-equals-demand hyperplane, by alternating corrected projections.
fn project_feasible(peers: &PeerSet, point: &mut [f64]) {
    let count = point.len();
    let sign: Vec<f64> = peers
        .peers()
        .iter()
        .map(|p| match p.role {
            Role::Seller => 1.0,
            Role::Buyer => -1.0,
        })
        .collect();
    let mut box_correction = vec![0.0; count];
    let mut plane_correction = vec![0.0; count];
    for _ in 0..10_000 {
        let mut shift: f64 = 0.0;
        // Box projection with Dykstra correction.
        for k in 0..count {
            let peer = &peers.peers()[k];
            let y = point[k] + box_correction[k];
            let clamped = y.clamp(peer.p_min, peer.p_max);
            box_correction[k] = y - clamped;
            shift = shift.max((clamped - point[k]).abs());
            point[k] = clamped;
        }
        // Hyperplane projection with Dykstra correction.
        let imbalance: f64 = (0..count)
            .map(|k| sign[k] * (point[k] + plane_correction[k]))
            .sum();
        let step = imbalance / count as f64;
        for k in 0..count {
            let y = point[k] + plane_correction[k];
            let projected = y - step * sign[k];
            plane_correction[k] = y - projected;
            shift = shift.max((projected - point[k]).abs());
            point[k] = projected;
        }
        if shift < 1e-14 {
            break;
        }
    }
}

/// Maximize gains from trade minus linearized network costs over net volumes
/// (per-peer boxes, supply equal to demand) by projected gradient ascent.
/// Rates come from grid response factors at the pre-trade point, with band
/// terms active only where the pre-trade state already violates a band.
pub fn social_optimum(
    net: &RadialNetwork,
    peers: &PeerSet,
    schedule: &CostSchedule,
    factors: &PeerFactors,
) -> Result<OptimumResult, CoordinationError> {
    let options = SolverOptions::default();
    let base_injection = net.base_injection();
    let base_state = solve_power_flow(net, base_injection.as_slice(), None, &options)?;
    let base_violations = activation(net, &base_state);
    let rates = causal_unit_rates(factors, &base_violations, schedule)?;

    let count = peers.len();
    let lipschitz = peers
        .peers()
        .iter()
        .map(|p| 2.0 * p.alpha)
        .fold(0.0_f64, f64::max);
    let step = 1.0 / lipschitz;

    let mut volumes = vec![0.0; count];
    project_feasible(peers, &mut volumes);
    let gradient = |volumes: &[f64], out: &mut [f64]| {
        for (k, peer) in peers.peers().iter().enumerate() {
            let marginal = match peer.role {
                Role::Seller => -(2.0 * peer.alpha * volumes[k] + peer.beta),
                Role::Buyer => {
                    if volumes[k] < peer.saturation_volume() {
                        peer.beta - 2.0 * peer.alpha * volumes[k]
                    } else {
                        0.0
                    }
                }
            };
            out[k] = marginal - rates.total(k);
        }
    };

    let mut grad = vec![0.0; count];
    let mut certificate = f64::INFINITY;
    let max_iterations = 200_000;
    for iteration in 1..=max_iterations {
        gradient(&volumes, &mut grad);
        let mut trial: Vec<f64> = volumes
            .iter()
            .zip(&grad)
            .map(|(v, g)| v + step * g)
            .collect();
        project_feasible(peers, &mut trial);
        certificate = volumes
            .iter()
            .zip(&trial)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max)
            / step;
        volumes = trial;
        if certificate <= OPTIMUM_CERTIFICATE {
            let welfare = linearized_welfare(peers, &volumes, &rates);
            return Ok(OptimumResult {
                volumes,
                welfare,
                iterations: iteration,
                certificate,
                rates,
            });
        }
    }
    Err(CoordinationError::OptimumStalled {
        certificate,
        iterations: max_iterations,
    })
}

// ---------------------------------------------------------------------------
// Equilibrium claims
// ---------------------------------------------------------------------------

/// Numerical checks of the two equilibrium claims: the uniform-rate
/// equilibrium never beats the optimum (with equality under co-location),
/// and the causal equilibrium attains it.
#[derive(Debug, Clone)]
pub struct PropositionReport {
    pub optimum_welfare: f64,
    /// Universal equilibrium welfare under the optimum's linearized costs.
    pub universal_welfare: f64,
    /// Causal equilibrium welfare under the same costs.
    pub causal_welfare: f64,
    /// Universal result stays below the optimum (up to certificate slack).
    pub universal_bounded: bool,
    pub universal_gap: f64,
    /// |causal - optimum| / |optimum|.
    pub causal_relative_gap: f64,
    /// Largest first-order residual ($/MWh) of the universal equilibrium
    /// against its own uniform rate, over peers with interior volumes.
    pub universal_foc_residual: f64,
    /// Relative optimum gap of a two-node everyone-at-one-node market, where
    /// matched trades cancel on the wire and the uniform rate is exact.
    pub colocation_gap: f64,
}

fn interior(peer: &Peer, volume: f64, margin: f64) -> bool {
    volume > peer.p_min + margin && volume < peer.p_max - margin
}

/// Largest interior first-order residual of an equilibrium against per-peer
/// $/MWh network rates: sellers compare price minus rate to marginal cost,
/// buyers compare marginal benefit to each active purchase price plus rate.
pub fn foc_residual(peers: &PeerSet, state: &NegotiationState, rates: &[f64]) -> f64 {
    let margin = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, &sid) in peers.sellers().iter().enumerate() {
        let peer = peers.peer(sid);
        let p = state.volumes[sid];
        if interior(peer, p, margin) {
            let residual =
                state.trade.prices[i] - rates[sid] - (2.0 * peer.alpha * p + peer.beta);
            worst = worst.max(residual.abs());
        }
    }
    for (j, &bid) in peers.buyers().iter().enumerate() {
        let peer = peers.peer(bid);
        let q = state.volumes[bid];
        if interior(peer, q, margin) {
            let mu = peer.beta - 2.0 * peer.alpha * q.min(peer.saturation_volume());
            for i in 0..peers.sellers().len() {
                if state.trade.volumes[(i, j)] > 1e-6 {
                    worst = worst.max((mu - state.trade.prices[i] - rates[bid]).abs());
                }
            }
        }
    }
    worst
}

/// Build the degenerate single-node market: one grid node hosting both
/// sides, so matched trades change no injection at all.
fn colocation_instance() -> (RadialNetwork, PeerSet) {
    let net = RadialNetwork::parse(
        "[header]\nbase_mva 10.0\nbase_kv 12.66\nunits pu\n\
         [nodes]\n0 0.0 0.0\n1 0.02 0.01\n\
         [lines]\n0 0 1 0.05 0.03\n",
    )
    .expect("static network text is valid");
    let mk = |id, role, alpha: f64, beta: f64| Peer {
        id,
        role,
        node: 1,
        alpha,
        beta,
        gamma: if role == Role::Seller { 1.0 } else { 0.0 },
        p_min: 0.0,
        p_max: 4.0,
    };
    let peers = PeerSet::new(
        vec![
            mk(0, Role::Seller, 2.0, 8.0),
            mk(1, Role::Seller, 3.0, 10.0),
            mk(2, Role::Buyer, 4.0, 30.0),
            mk(3, Role::Buyer, 5.0, 26.0),
        ],
        2,
    )
    .expect("static roster is valid");
    (net, peers)
}

/// Relative optimum gap of the universal policy on the co-located market.
/// The equality is a fixed-point property, so the probe runs the negotiation
/// to a much tighter stop than a production run needs.
pub fn colocation_equality_gap(config: &NegotiationConfig) -> Result<f64, CoordinationError> {
    let (net, peers) = colocation_instance();
    let schedule = CostSchedule {
        loss_price: 60.0,
        voltage_price: 0.0,
        congestion_price: 0.0,
    };
    let mut probe = config.clone();
    probe.tol_volume = config.tol_volume.min(1e-9);
    probe.tol_price = config.tol_price.min(1e-9);
    probe.max_iterations = config.max_iterations.max(200_000);
    let state = run_negotiation(&net, &peers, &schedule, Policy::Universal, &probe)?;
    let optimum = social_optimum(&net, &peers, &schedule, &state.factors)?;
    let w_u = linearized_welfare(&peers, &state.volumes, &optimum.rates);
    Ok((optimum.welfare - w_u).abs() / optimum.welfare.abs().max(1e-9))
}

/// Compare converged universal and causal equilibria against the optimum of
/// the same linearized welfare, and run the degenerate equality case.
pub fn verify_propositions(
    peers: &PeerSet,
    universal: &NegotiationState,
    causal: &NegotiationState,
    optimum: &OptimumResult,
    config: &NegotiationConfig,
) -> Result<PropositionReport, CoordinationError> {
    let w_u = linearized_welfare(peers, &universal.volumes, &optimum.rates);
    let w_c = linearized_welfare(peers, &causal.volumes, &optimum.rates);
    let slack = 1e-6 * optimum.welfare.abs().max(1.0);
    Ok(PropositionReport {
        optimum_welfare: optimum.welfare,
        universal_welfare: w_u,
        causal_welfare: w_c,
        universal_bounded: w_u <= optimum.welfare + slack,
        universal_gap: optimum.welfare - w_u,
        causal_relative_gap: (w_c - optimum.welfare).abs()
            / optimum.welfare.abs().max(1e-9),
        universal_foc_residual: foc_residual(
            peers,
            universal,
            &vec![universal.universal_rate.total(); peers.len()],
        ),
        colocation_gap: colocation_equality_gap(config)?,
    })
}
