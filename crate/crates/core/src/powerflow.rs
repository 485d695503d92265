//! AC power flow for radial feeders, solved by Newton-Raphson on the
//! rectangular voltage coordinates of every non-slack node.
//!
//! The mismatch for node n is `conj(v_n) * (Y v)_n - conj(s_n)`; its Jacobian
//! with respect to the stacked real/imaginary voltage components is the same
//! matrix the injection-sensitivity solve factorizes, so both share one
//! assembly routine.

use crate::network::RadialNetwork;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

/// Largest per-node complex power mismatch accepted as converged, in p.u.
pub const DEFAULT_TOLERANCE: f64 = 1e-10;
/// Newton iteration cap; radial feeders converge in a handful of steps.
pub const DEFAULT_MAX_ITERATIONS: usize = 50;

#[derive(Debug, Error)]
pub enum PowerFlowError {
    #[error("did not converge after {iterations} iterations (mismatch {mismatch:.3e})")]
    Diverged { iterations: usize, mismatch: f64 },
    #[error("Jacobian is singular at iteration {iteration}")]
    Singular { iteration: usize },
    #[error("injection vector has length {got}, network has {want} nodes")]
    BadLength { got: usize, want: usize },
}

/// Apparent-power flow expression evaluated at the sending (parent) end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowForm {
    /// Series-current flow `v_n * conj(v_n - v_m) * conj(y_l)`.
    #[default]
    BranchCurrent,
    /// Degenerate variant using only the sending-end voltage,
    /// `v_n * conj(v_n) * conj(y_l)`; kept for comparison runs.
    SendingEndOnly,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub slack_voltage: Complex64,
    pub flow_form: FlowForm,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_TOLERANCE,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            slack_voltage: Complex64::new(1.0, 0.0),
            flow_form: FlowForm::BranchCurrent,
        }
    }
}

/// Converged operating point. All quantities in p.u.
#[derive(Debug, Clone)]
pub struct GridState {
    pub voltages: Vec<Complex64>,
    /// Nodal injections; the slack entry is the balancing power actually
    /// drawn from or pushed into the slack, computed from the solution.
    pub injections: Vec<Complex64>,
    /// Sending-end complex flow per line.
    pub flows: Vec<Complex64>,
    /// Total active loss, from the conductance quadratic form.
    pub loss: f64,
    pub iterations: usize,
    pub mismatch: f64,
}

/// Unit prices applied to trading-induced network effects: active loss in
/// $/MWh, voltage- and flow-band violations in $ per p.u. of magnitude change.
#[derive(Debug, Clone, Copy, Default)]
pub struct CostSchedule {
    pub loss_price: f64,
    pub voltage_price: f64,
    pub congestion_price: f64,
}

/// Which side of a dead band a quantity escaped through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandSide {
    Below,
    Above,
}

impl BandSide {
    /// Sign of the change that worsens the violation.
    pub fn direction(self) -> f64 {
        match self {
            BandSide::Below => -1.0,
            BandSide::Above => 1.0,
        }
    }
}

/// Nodes and lines outside their bands at an operating point, with the
/// distance outside the band in p.u.
#[derive(Debug, Clone, Default)]
pub struct Violations {
    pub nodes: Vec<(usize, BandSide, f64)>,
    pub lines: Vec<(usize, BandSide, f64)>,
}

impl Violations {
    pub fn is_clear(&self) -> bool {
        self.nodes.is_empty() && self.lines.is_empty()
    }

    pub fn count(&self) -> usize {
        self.nodes.len() + self.lines.len()
    }

    /// Violation-cost factor for a node: the configured price when the node
    /// is outside its band, zero otherwise.
    pub fn node_price(&self, node: usize, schedule: &CostSchedule) -> f64 {
        if self.nodes.iter().any(|&(n, _, _)| n == node) {
            schedule.voltage_price
        } else {
            0.0
        }
    }

    pub fn line_price(&self, line: usize, schedule: &CostSchedule) -> f64 {
        if self.lines.iter().any(|&(l, _, _)| l == line) {
            schedule.congestion_price
        } else {
            0.0
        }
    }
}

/// Shared residual Jacobian: rows interleave Re/Im of each non-slack node
/// equation, columns interleave d/de and d/df of each non-slack voltage.
pub(crate) fn residual_jacobian(
    y: &DMatrix<Complex64>,
    voltages: &[Complex64],
    currents: &[Complex64],
) -> DMatrix<f64> {
    let n = voltages.len() - 1;
    let mut jac = DMatrix::zeros(2 * n, 2 * n);
    for a in 1..=n {
        let va_conj = voltages[a].conj();
        let ia = currents[a];
        for b in 1..=n {
            let step = va_conj * y[(a, b)];
            let (de, df) = if a == b {
                (step + ia, Complex64::new(0.0, 1.0) * (step - ia))
            } else {
                (step, Complex64::new(0.0, 1.0) * step)
            };
            jac[(2 * (a - 1), 2 * (b - 1))] = de.re;
            jac[(2 * (a - 1) + 1, 2 * (b - 1))] = de.im;
            jac[(2 * (a - 1), 2 * (b - 1) + 1)] = df.re;
            jac[(2 * (a - 1) + 1, 2 * (b - 1) + 1)] = df.im;
        }
    }
    jac
}

/// Solve the power flow for the given per-node complex injections (the slack
/// entry is ignored). `start` warm-starts the iteration; otherwise every node
/// begins at the slack voltage.
pub fn solve_power_flow(
    net: &RadialNetwork,
    injections: &[Complex64],
    start: Option<&[Complex64]>,
    options: &SolverOptions,
) -> Result<GridState, PowerFlowError> {
    let n_total = net.node_count();
    if injections.len() != n_total {
        return Err(PowerFlowError::BadLength {
            got: injections.len(),
            want: n_total,
        });
    }
    let y = net.admittance_matrix();
    let mut v: Vec<Complex64> = match start {
        Some(s) => {
            if s.len() != n_total {
                return Err(PowerFlowError::BadLength {
                    got: s.len(),
                    want: n_total,
                });
            }
            s.to_vec()
        }
        None => vec![options.slack_voltage; n_total],
    };
    v[0] = options.slack_voltage;

    let mut mismatch = f64::INFINITY;
    for iteration in 0..=options.max_iterations {
        let currents = nodal_currents(&y, &v);
        let residual: Vec<Complex64> = (1..n_total)
            .map(|n| v[n].conj() * currents[n] - injections[n].conj())
            .collect();
        mismatch = residual.iter().map(|r| r.norm()).fold(0.0, f64::max);
        if !mismatch.is_finite() {
            return Err(PowerFlowError::Diverged {
                iterations: iteration,
                mismatch,
            });
        }
        if mismatch <= options.tolerance {
            return Ok(finish_state(net, &y, v, injections, iteration, mismatch, options));
        }
        if iteration == options.max_iterations {
            break;
        }
        let jac = residual_jacobian(&y, &v, &currents);
        let mut rhs = DVector::zeros(2 * (n_total - 1));
        for (i, r) in residual.iter().enumerate() {
            rhs[2 * i] = -r.re;
            rhs[2 * i + 1] = -r.im;
        }
        let lu = jac.lu();
        let Some(step) = lu.solve(&rhs) else {
            return Err(PowerFlowError::Singular { iteration });
        };
        for i in 1..n_total {
            v[i] += Complex64::new(step[2 * (i - 1)], step[2 * (i - 1) + 1]);
        }
    }
    Err(PowerFlowError::Diverged {
        iterations: options.max_iterations,
        mismatch,
    })
}

fn nodal_currents(y: &DMatrix<Complex64>, v: &[Complex64]) -> Vec<Complex64> {
    let n = v.len();
    (0..n)
        .map(|a| (0..n).map(|b| y[(a, b)] * v[b]).sum())
        .collect()
}

fn finish_state(
    net: &RadialNetwork,
    y: &DMatrix<Complex64>,
    v: Vec<Complex64>,
    specified: &[Complex64],
    iterations: usize,
    mismatch: f64,
    options: &SolverOptions,
) -> GridState {
    let currents = nodal_currents(y, &v);
    // Non-slack entries keep the specified values; the slack entry is the
    // solved balancing power.
    let mut injections = specified.to_vec();
    injections[0] = v[0] * currents[0].conj();
    let flows = line_flows(net, &v, options.flow_form);
    let loss = system_loss(y, &v);
    GridState {
        voltages: v,
        injections,
        flows,
        loss,
        iterations,
        mismatch,
    }
}

/// Sending-end complex flow for every line at the given voltages.
pub fn line_flows(net: &RadialNetwork, voltages: &[Complex64], form: FlowForm) -> Vec<Complex64> {
    net.lines()
        .iter()
        .map(|l| {
            let vn = voltages[l.from];
            let ya = l.admittance().conj();
            match form {
                FlowForm::BranchCurrent => vn * (vn - voltages[l.to]).conj() * ya,
                FlowForm::SendingEndOnly => vn * vn.conj() * ya,
            }
        })
        .collect()
}

/// Total active loss via the conductance quadratic form
/// `sum_nm G_nm Re(v_n conj(v_m))`.
pub fn system_loss(y: &DMatrix<Complex64>, voltages: &[Complex64]) -> f64 {
    let n = voltages.len();
    let mut loss = 0.0;
    for a in 0..n {
        for b in 0..n {
            loss += y[(a, b)].re * (voltages[a] * voltages[b].conj()).re;
        }
    }
    loss
}

/// Classify every node and line of an operating point against its dead band.
pub fn activation(net: &RadialNetwork, state: &GridState) -> Violations {
    let mut v = Violations::default();
    for (n, node) in net.nodes().iter().enumerate() {
        let mag = state.voltages[n].norm();
        if mag < node.v_min {
            v.nodes.push((n, BandSide::Below, node.v_min - mag));
        } else if mag > node.v_max {
            v.nodes.push((n, BandSide::Above, mag - node.v_max));
        }
    }
    for (l, line) in net.lines().iter().enumerate() {
        let mag = state.flows[l].norm();
        if mag < line.s_min {
            v.lines.push((l, BandSide::Below, line.s_min - mag));
        } else if mag > line.s_max {
            v.lines.push((l, BandSide::Above, mag - line.s_max));
        }
    }
    v
}

/// Mean signed distance from each node voltage to the nearer band edge, in
/// p.u.; negative when any node sits outside its band.
pub fn mean_voltage_margin(net: &RadialNetwork, state: &GridState) -> f64 {
    let total: f64 = net
        .nodes()
        .iter()
        .enumerate()
        .map(|(n, node)| {
            let mag = state.voltages[n].norm();
            (mag - node.v_min).min(node.v_max - mag)
        })
        .sum();
    total / net.node_count() as f64
}

/// Mean line-loading headroom in percent of each line's upper flow bound;
/// unlimited lines count as fully unloaded.
pub fn mean_loading_margin_pct(net: &RadialNetwork, state: &GridState) -> f64 {
    let total: f64 = net
        .lines()
        .iter()
        .enumerate()
        .map(|(l, line)| {
            if line.s_max.is_finite() && line.s_max > 0.0 {
                (1.0 - state.flows[l].norm() / line.s_max) * 100.0
            } else {
                100.0
            }
        })
        .sum();
    total / net.line_count().max(1) as f64
}

/// Exact trading-induced network cost between a base point and a trade point:
/// violation terms accumulate the absolute magnitude change on nodes and
/// lines outside their bands at the trade point, the loss term prices the
/// change in MWh over the delivery hour.
#[derive(Debug, Clone, Copy, Default)]
pub struct NetworkCost {
    pub voltage_cost: f64,
    pub congestion_cost: f64,
    pub loss_cost: f64,
    /// Loss change in MWh, before pricing.
    pub loss_mwh: f64,
}

impl NetworkCost {
    pub fn total(&self) -> f64 {
        self.voltage_cost + self.congestion_cost + self.loss_cost
    }
}

pub fn exact_network_cost(
    net: &RadialNetwork,
    base: &GridState,
    traded: &GridState,
    schedule: &CostSchedule,
) -> NetworkCost {
    let violations = activation(net, traded);
    let voltage_cost: f64 = violations
        .nodes
        .iter()
        .map(|&(n, _, _)| (traded.voltages[n].norm() - base.voltages[n].norm()).abs())
        .sum::<f64>()
        * schedule.voltage_price;
    let congestion_cost: f64 = violations
        .lines
        .iter()
        .map(|&(l, _, _)| (traded.flows[l].norm() - base.flows[l].norm()).abs())
        .sum::<f64>()
        * schedule.congestion_price;
    let loss_mwh = net.to_mva(traded.loss - base.loss);
    NetworkCost {
        voltage_cost,
        congestion_cost,
        loss_cost: schedule.loss_price * loss_mwh,
        loss_mwh,
    }
}
