//! Scenario orchestration: load a feeder and a peer roster from files, run
//! the configured policy matrix, and export comparison tables plus
//! plot-ready per-peer, per-node, and per-iteration series.
//!
//! Configs are TOML with three sections: `[scenario]` (files, policies, id,
//! seed, output directory), `[costs]` (the $/p.u. and $/MWh prices), and
//! optional `[bands]` / `[negotiation]` overrides. Scenario id 1 is the
//! loss-only study: band prices are forced to zero so the market faces
//! marginal loss cost alone. Scenario id 2 prices all three drivers.
//!
//! Reruns with the same config produce byte-identical output files: every
//! table iterates fixed vectors in roster or index order and formats numbers
//! with a locale-independent 4-significant-digit rule.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::coordination::{
    run_negotiation, social_optimum, verify_propositions, CoordinationError, LedgerMode,
    NegotiationConfig, NegotiationState, Policy, PropositionReport,
};
use crate::market::{
    allocate_universal, peer_factors, AllocationBreakdown, MarketError, PeerSet, Role,
};
use crate::network::{NetworkError, RadialNetwork};
use crate::powerflow::{
    mean_loading_margin_pct, mean_voltage_margin, solve_power_flow, CostSchedule, FlowForm,
    PowerFlowError, SolverOptions,
};
use crate::sensitivity::{SensitivityError, SensitivityTable};

/// Peer volumes below this count as not trading when turning charges into
/// unit rates.
const RATE_VOLUME_FLOOR: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Toml {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error("{policy} policy: {source}")]
    Policy {
        policy: Policy,
        source: CoordinationError,
    },
    #[error(transparent)]
    Coordination(#[from] CoordinationError),
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Top-level scenario description, deserialized from TOML.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioSection,
    pub costs: CostsSection,
    #[serde(default)]
    pub bands: BandsSection,
    #[serde(default)]
    pub negotiation: NegotiationSection,
    /// SHA-256 of the config text this was parsed from (hex), for the run
    /// manifest. Empty when the config was built programmatically.
    #[serde(skip)]
    pub digest: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    /// 1 = loss-only study (band prices forced to zero), 2 = all drivers.
    pub id: u32,
    /// Feeder description file.
    pub network: PathBuf,
    /// Peer roster file.
    pub peers: PathBuf,
    /// Directory the output tables are written into.
    pub output_dir: PathBuf,
    /// Recorded in the manifest; the pipeline itself is deterministic.
    #[serde(default)]
    pub seed: u64,
    /// Policies to run, in output order.
    pub policies: Vec<Policy>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostsSection {
    /// $/MWh of marginal system loss.
    pub loss: f64,
    /// $/p.u. of voltage-band violation movement.
    #[serde(default)]
    pub voltage: f64,
    /// $/p.u. of flow-band violation movement.
    #[serde(default)]
    pub congestion: f64,
}

/// Optional global dead-band overrides; per-element bands come from the
/// network file.
#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandsSection {
    pub v_min: Option<f64>,
    pub v_max: Option<f64>,
    /// Multiplies every finite line rating.
    pub flow_limit_scale: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NegotiationSection {
    pub epsilon: f64,
    pub damping: f64,
    pub proximal_weight: f64,
    pub tol_volume: f64,
    pub tol_price: f64,
    pub max_iterations: usize,
    pub initial_price: Option<f64>,
    pub relinearize_every: usize,
    pub flow_form: FlowForm,
    pub ledger_mode: LedgerMode,
    /// Write per-iteration series files.
    pub trace: bool,
}

impl Default for NegotiationSection {
    fn default() -> Self {
        let base = NegotiationConfig::default();
        Self {
            epsilon: base.epsilon,
            damping: base.step_damping,
            proximal_weight: base.proximal_weight,
            tol_volume: base.tol_volume,
            tol_price: base.tol_price,
            max_iterations: base.max_iterations,
            initial_price: base.initial_price,
            relinearize_every: base.relinearize_every,
            flow_form: base.flow_form,
            ledger_mode: base.ledger_mode,
            trace: false,
        }
    }
}

impl ScenarioConfig {
    /// Parse a config from TOML text; relative paths resolve against
    /// `base_dir` (normally the config file's directory).
    pub fn from_str(text: &str, base_dir: &Path) -> Result<Self, ScenarioError> {
        let mut config: ScenarioConfig =
            toml::from_str(text).map_err(|source| ScenarioError::Toml {
                path: base_dir.to_path_buf(),
                source,
            })?;
        config.digest = hex_digest(text.as_bytes());
        let resolve = |p: &PathBuf| {
            if p.is_absolute() {
                p.clone()
            } else {
                base_dir.join(p)
            }
        };
        config.scenario.network = resolve(&config.scenario.network);
        config.scenario.peers = resolve(&config.scenario.peers);
        config.scenario.output_dir = resolve(&config.scenario.output_dir);
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base_dir = path.parent().unwrap_or_else(|| Path::new("."));
        let mut config = Self::from_str(&text, base_dir)?;
        // The digest covers the file text; re-resolving paths does not
        // change it.
        config.digest = hex_digest(text.as_bytes());
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |msg: String| Err(ScenarioError::Config(msg));
        if self.scenario.policies.is_empty() {
            return bad("policy list must not be empty".into());
        }
        for (i, p) in self.scenario.policies.iter().enumerate() {
            if self.scenario.policies[..i].contains(p) {
                return bad(format!("policy {p} listed twice"));
            }
        }
        if self.scenario.id == 0 {
            return bad("scenario id must be at least 1".into());
        }
        for (label, path) in [
            ("network", &self.scenario.network),
            ("peers", &self.scenario.peers),
        ] {
            if !path.is_file() {
                return bad(format!("{label} file {} does not exist", path.display()));
            }
        }
        for (label, value) in [
            ("loss", self.costs.loss),
            ("voltage", self.costs.voltage),
            ("congestion", self.costs.congestion),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return bad(format!("{label} price must be finite and non-negative"));
            }
        }
        if let (Some(lo), Some(hi)) = (self.bands.v_min, self.bands.v_max) {
            if !(lo > 0.0 && lo < hi) {
                return bad("voltage band override must satisfy 0 < v_min < v_max".into());
            }
        }
        if self.bands.v_min.is_some() != self.bands.v_max.is_some() {
            return bad("voltage band override needs both v_min and v_max".into());
        }
        Ok(())
    }

    /// Prices actually applied: the loss-only scenario (id 1) studies the
    /// market against marginal loss cost alone, so its band prices are
    /// forced to zero regardless of the config values.
    pub fn effective_schedule(&self) -> CostSchedule {
        if self.scenario.id == 1 {
            CostSchedule {
                loss_price: self.costs.loss,
                voltage_price: 0.0,
                congestion_price: 0.0,
            }
        } else {
            CostSchedule {
                loss_price: self.costs.loss,
                voltage_price: self.costs.voltage,
                congestion_price: self.costs.congestion,
            }
        }
    }

    pub fn negotiation_config(&self) -> NegotiationConfig {
        let n = &self.negotiation;
        NegotiationConfig {
            epsilon: n.epsilon,
            step_damping: n.damping,
            proximal_weight: n.proximal_weight,
            tol_volume: n.tol_volume,
            tol_price: n.tol_price,
            max_iterations: n.max_iterations,
            initial_price: n.initial_price,
            flow_form: n.flow_form,
            ledger_mode: n.ledger_mode,
            relinearize_every: n.relinearize_every,
        }
    }

    /// Load the feeder and apply any dead-band overrides.
    pub fn load_network(&self) -> Result<RadialNetwork, ScenarioError> {
        let mut net = RadialNetwork::from_file(&self.scenario.network)?;
        if let (Some(lo), Some(hi)) = (self.bands.v_min, self.bands.v_max) {
            net.set_voltage_band(lo, hi)?;
        }
        if let Some(scale) = self.bands.flow_limit_scale {
            net.scale_flow_limits(scale)?;
        }
        Ok(net)
    }

    pub fn load_peers(&self, node_count: usize) -> Result<PeerSet, ScenarioError> {
        Ok(PeerSet::from_file(&self.scenario.peers, node_count)?)
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(digest.len() * 2);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

// ---------------------------------------------------------------------------
// Running the policy matrix
// ---------------------------------------------------------------------------

/// One policy's converged (or marked non-converged) run plus its ex-post
/// charge split.
#[derive(Debug, Clone)]
pub struct PolicyOutcome {
    pub policy: Policy,
    pub state: NegotiationState,
    /// Realized charges per peer in dollars, split by driver. Signed for the
    /// per-peer policy (credits negative), pro-rata for the uniform one,
    /// zero when no charges apply.
    pub allocation: AllocationBreakdown,
}

/// Everything a scenario run produced; output files only format this.
#[derive(Debug, Clone)]
pub struct ScenarioBundle {
    pub scenario_id: u32,
    pub seed: u64,
    pub schedule: CostSchedule,
    pub negotiation: NegotiationConfig,
    pub trace: bool,
    pub net: RadialNetwork,
    pub peers: PeerSet,
    /// Config-order outcomes.
    pub outcomes: Vec<PolicyOutcome>,
    /// Present when both the uniform and per-peer policies were run.
    pub propositions: Option<PropositionReport>,
    pub config_digest: String,
}

impl ScenarioBundle {
    pub fn outcome(&self, policy: Policy) -> Option<&PolicyOutcome> {
        self.outcomes.iter().find(|o| o.policy == policy)
    }
}

/// Run every configured policy (in parallel) against the shared feeder and
/// roster, attach ex-post charge splits, and verify the welfare bounds when
/// both allocation policies are available.
pub fn run_scenarios(config: &ScenarioConfig) -> Result<ScenarioBundle, ScenarioError> {
    config.validate()?;
    let net = config.load_network()?;
    let peers = config.load_peers(net.node_count())?;
    let schedule = config.effective_schedule();
    let ncfg = config.negotiation_config();

    let states: Vec<NegotiationState> = config
        .scenario
        .policies
        .par_iter()
        .map(|&policy| {
            run_negotiation(&net, &peers, &schedule, policy, &ncfg)
                .map_err(|source| ScenarioError::Policy { policy, source })
        })
        .collect::<Result<_, _>>()?;

    let outcomes: Vec<PolicyOutcome> = config
        .scenario
        .policies
        .iter()
        .zip(states)
        .map(|(&policy, state)| {
            let allocation = match policy {
                Policy::Base => AllocationBreakdown::zeros(peers.len()),
                Policy::Universal => allocate_universal(
                    &state.volumes,
                    state.cost.voltage_cost,
                    state.cost.congestion_cost,
                    state.cost.loss_cost,
                ),
                // Charges are the rates the peers actually settled against,
                // not a re-pricing of whatever is violated at the end (the
                // settled grid is clean precisely because those rates bind).
                Policy::Causal => state.ledgers.allocation(&state.volumes),
            };
            Ok(PolicyOutcome {
                policy,
                state,
                allocation,
            })
        })
        .collect::<Result<_, ScenarioError>>()?;

    let propositions = match (
        outcomes.iter().find(|o| o.policy == Policy::Universal),
        outcomes.iter().find(|o| o.policy == Policy::Causal),
    ) {
        (Some(universal), Some(causal)) => {
            let base_state =
                solve_power_flow(&net, net.base_injection().as_slice(), None, &SolverOptions {
                    flow_form: ncfg.flow_form,
                    ..SolverOptions::default()
                })?;
            let mut probes: Vec<usize> = peers.peers().iter().map(|p| p.node).collect();
            probes.sort_unstable();
            probes.dedup();
            let table = SensitivityTable::compute(&net, &base_state, &probes, ncfg.flow_form)?;
            let factors = peer_factors(&net, &table, &peers)?;
            let optimum = social_optimum(&net, &peers, &schedule, &factors)?;
            Some(verify_propositions(
                &peers,
                &universal.state,
                &causal.state,
                &optimum,
                &ncfg,
            )?)
        }
        _ => None,
    };

    Ok(ScenarioBundle {
        scenario_id: config.scenario.id,
        seed: config.scenario.seed,
        schedule,
        negotiation: ncfg,
        trace: config.negotiation.trace,
        net,
        peers,
        outcomes,
        propositions,
        config_digest: config.digest.clone(),
    })
}

// ---------------------------------------------------------------------------
// Output formatting
// ---------------------------------------------------------------------------

/// Format with 4 significant digits: fixed-point within [1e-3, 1e4),
/// scientific outside, locale-independent.
pub fn format_sig(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    if x == 0.0 {
        return "0.000".into();
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-3..4).contains(&mag) {
        format!("{x:.3e}")
    } else {
        let decimals = (3 - mag) as usize;
        format!("{x:.decimals$}")
    }
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::Seller => "seller",
        Role::Buyer => "buyer",
    }
}

fn unit_rate(charge: f64, volume: f64) -> f64 {
    if volume > RATE_VOLUME_FLOOR {
        charge / volume
    } else {
        0.0
    }
}

fn write_file(dir: &Path, name: &str, text: &str) -> Result<PathBuf, ScenarioError> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|source| ScenarioError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

/// Render the whole bundle into the output directory. Returns the written
/// paths in a fixed order. Every number comes straight from the bundle.
pub fn write_outputs(
    bundle: &ScenarioBundle,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, ScenarioError> {
    fs::create_dir_all(out_dir).map_err(|source| ScenarioError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();

    written.push(write_file(out_dir, "summary.csv", &summary_csv(bundle))?);
    written.push(write_file(out_dir, "volumes.csv", &volumes_csv(bundle))?);
    written.push(write_file(
        out_dir,
        "unit_costs.csv",
        &unit_costs_csv(bundle),
    )?);
    written.push(write_file(
        out_dir,
        "node_voltages.csv",
        &node_voltages_csv(bundle),
    )?);
    written.push(write_file(
        out_dir,
        "line_loadings.csv",
        &line_loadings_csv(bundle),
    )?);
    if let Some(report) = &bundle.propositions {
        written.push(write_file(
            out_dir,
            "propositions.csv",
            &propositions_csv(report),
        )?);
    }
    if bundle.trace {
        for outcome in &bundle.outcomes {
            let name = format!("trace_{}.csv", outcome.policy);
            written.push(write_file(out_dir, &name, &trace_csv(bundle, outcome))?);
        }
    }
    written.push(write_file(out_dir, "manifest.toml", &manifest_toml(bundle))?);
    Ok(written)
}

fn summary_csv(bundle: &ScenarioBundle) -> String {
    let mut out = String::from(
        "policy,total_volume_mwh,welfare_usd,loss_mwh,mean_voltage_margin_pu,\
         mean_loading_margin_pct,violated_nodes,violated_lines,iterations,converged\n",
    );
    for outcome in &bundle.outcomes {
        let s = &outcome.state;
        let loss_mwh = bundle.net.to_mva(s.grid.loss);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            outcome.policy,
            format_sig(s.volumes.iter().sum::<f64>() / 2.0),
            format_sig(s.welfare),
            format_sig(loss_mwh),
            format_sig(mean_voltage_margin(&bundle.net, &s.grid)),
            format_sig(mean_loading_margin_pct(&bundle.net, &s.grid)),
            s.violations.nodes.len(),
            s.violations.lines.len(),
            s.tau,
            s.converged,
        ));
    }
    out
}

fn volumes_csv(bundle: &ScenarioBundle) -> String {
    let base = bundle.outcome(Policy::Base);
    let mut header = String::from("peer,role,node");
    for outcome in &bundle.outcomes {
        header.push_str(&format!(",{}_mwh", outcome.policy));
    }
    if base.is_some() {
        for outcome in &bundle.outcomes {
            if outcome.policy != Policy::Base {
                header.push_str(&format!(",{}_minus_base_mwh", outcome.policy));
            }
        }
    }
    let mut out = header;
    out.push('\n');
    for (k, peer) in bundle.peers.peers().iter().enumerate() {
        out.push_str(&format!("{},{},{}", peer.id, role_name(peer.role), peer.node));
        for outcome in &bundle.outcomes {
            out.push_str(&format!(",{}", format_sig(outcome.state.volumes[k])));
        }
        if let Some(base) = base {
            for outcome in &bundle.outcomes {
                if outcome.policy != Policy::Base {
                    let delta = outcome.state.volumes[k] - base.state.volumes[k];
                    out.push_str(&format!(",{}", format_sig(delta)));
                }
            }
        }
        out.push('\n');
    }
    out
}

fn unit_costs_csv(bundle: &ScenarioBundle) -> String {
    let mut header = String::from("peer,role,node");
    for outcome in &bundle.outcomes {
        for component in ["voltage", "congestion", "loss", "total"] {
            header.push_str(&format!(",{}_{}_usd_per_mwh", outcome.policy, component));
        }
    }
    let mut out = header;
    out.push('\n');
    for (k, peer) in bundle.peers.peers().iter().enumerate() {
        out.push_str(&format!("{},{},{}", peer.id, role_name(peer.role), peer.node));
        for outcome in &bundle.outcomes {
            let volume = outcome.state.volumes[k];
            let a = &outcome.allocation;
            for charge in [a.voltage[k], a.congestion[k], a.loss[k], a.charge(k)] {
                out.push_str(&format!(",{}", format_sig(unit_rate(charge, volume))));
            }
        }
        out.push('\n');
    }
    out
}

fn node_voltages_csv(bundle: &ScenarioBundle) -> String {
    let mut header = String::from("node,v_min,v_max,no_trade_pu");
    for outcome in &bundle.outcomes {
        header.push_str(&format!(",{}_pu", outcome.policy));
    }
    let mut out = header;
    out.push('\n');
    // Pre-trade solutions agree across outcomes; take the first.
    let pre = &bundle.outcomes[0].state.base;
    for (n, node) in bundle.net.nodes().iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{}",
            n,
            format_sig(node.v_min),
            format_sig(node.v_max),
            format_sig(pre.voltages[n].norm()),
        ));
        for outcome in &bundle.outcomes {
            out.push_str(&format!(
                ",{}",
                format_sig(outcome.state.grid.voltages[n].norm())
            ));
        }
        out.push('\n');
    }
    out
}

fn line_loadings_csv(bundle: &ScenarioBundle) -> String {
    let mut header = String::from("line,from,to,s_max_pu,no_trade_flow_pu,no_trade_loading_pct");
    for outcome in &bundle.outcomes {
        header.push_str(&format!(",{0}_flow_pu,{0}_loading_pct", outcome.policy));
    }
    let mut out = header;
    out.push('\n');
    let pre = &bundle.outcomes[0].state.base;
    let loading = |flow: f64, s_max: f64| -> String {
        if s_max.is_finite() && s_max > 0.0 {
            format_sig(100.0 * flow / s_max)
        } else {
            String::new()
        }
    };
    for (l, line) in bundle.net.lines().iter().enumerate() {
        let s_max = if line.s_max.is_finite() {
            format_sig(line.s_max)
        } else {
            String::new()
        };
        let pre_flow = pre.flows[l].norm();
        out.push_str(&format!(
            "{},{},{},{},{},{}",
            l,
            line.from,
            line.to,
            s_max,
            format_sig(pre_flow),
            loading(pre_flow, line.s_max),
        ));
        for outcome in &bundle.outcomes {
            let flow = outcome.state.grid.flows[l].norm();
            out.push_str(&format!(
                ",{},{}",
                format_sig(flow),
                loading(flow, line.s_max)
            ));
        }
        out.push('\n');
    }
    out
}

fn propositions_csv(report: &PropositionReport) -> String {
    let mut out = String::from("quantity,value\n");
    let rows: [(&str, String); 8] = [
        ("optimum_welfare_usd", format_sig(report.optimum_welfare)),
        ("universal_welfare_usd", format_sig(report.universal_welfare)),
        ("causal_welfare_usd", format_sig(report.causal_welfare)),
        ("universal_bounded", report.universal_bounded.to_string()),
        ("universal_gap_usd", format_sig(report.universal_gap)),
        (
            "causal_relative_gap",
            format_sig(report.causal_relative_gap),
        ),
        (
            "universal_foc_residual_usd_per_mwh",
            format_sig(report.universal_foc_residual),
        ),
        ("colocation_gap", format_sig(report.colocation_gap)),
    ];
    for (key, value) in rows {
        out.push_str(&format!("{key},{value}\n"));
    }
    out
}

fn trace_csv(bundle: &ScenarioBundle, outcome: &PolicyOutcome) -> String {
    let mut header = String::from("iteration,total_volume_mwh,welfare_usd,violations,price_usd_per_mwh");
    for peer in bundle.peers.peers() {
        header.push_str(&format!(",volume_p{}_mwh", peer.id));
    }
    let mut out = header;
    out.push('\n');
    for record in &outcome.state.history {
        out.push_str(&format!(
            "{},{},{},{},{}",
            record.iteration,
            format_sig(record.total_volume),
            format_sig(record.welfare),
            record.violation_count,
            format_sig(record.price),
        ));
        for volume in &record.volumes {
            out.push_str(&format!(",{}", format_sig(*volume)));
        }
        out.push('\n');
    }
    out
}

fn manifest_toml(bundle: &ScenarioBundle) -> String {
    let digest = if bundle.config_digest.is_empty() {
        "none"
    } else {
        &bundle.config_digest
    };
    let mut out = format!(
        "schema = \"peerflow-run/1\"\n\
         generator = \"peerflow {}\"\n\
         config_sha256 = \"{}\"\n\
         scenario_id = {}\n\
         seed = {}\n\
         loss_price = {}\n\
         voltage_price = {}\n\
         congestion_price = {}\n\
         flow_form = \"{}\"\n\
         ledger_mode = \"{}\"\n\
         epsilon = {}\n\
         damping = {}\n",
        env!("CARGO_PKG_VERSION"),
        digest,
        bundle.scenario_id,
        bundle.seed,
        format_sig(bundle.schedule.loss_price),
        format_sig(bundle.schedule.voltage_price),
        format_sig(bundle.schedule.congestion_price),
        match bundle.negotiation.flow_form {
            FlowForm::BranchCurrent => "branch-current",
            FlowForm::SendingEndOnly => "sending-end-only",
        },
        match bundle.negotiation.ledger_mode {
            LedgerMode::Rate => "rate",
            LedgerMode::Accumulated => "accumulated",
        },
        format_sig(bundle.negotiation.epsilon),
        format_sig(bundle.negotiation.step_damping),
    );
    for outcome in &bundle.outcomes {
        let s = &outcome.state;
        out.push_str(&format!(
            "\n[policy.{}]\nconverged = {}\niterations = {}\nfinal_epsilon = {}\n\
             total_volume_mwh = {}\nwelfare_usd = {}\nviolations = {}\n",
            outcome.policy,
            s.converged,
            s.tau,
            format_sig(s.epsilon),
            format_sig(s.volumes.iter().sum::<f64>() / 2.0),
            format_sig(s.welfare),
            s.violations.count(),
        ));
    }
    out
}
