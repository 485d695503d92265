//! Analytic first-order response of a converged operating point to nodal
//! active-power perturbations.
//!
//! Differentiating the nodal power balance at a solved state turns the power
//! flow's own rectangular Jacobian into the coefficient matrix of one linear
//! system per probed node; the matrix is factorized once and reused for all
//! right-hand sides. The slack voltage is held fixed, so its derivative row
//! is identically zero. Magnitude and loss derivatives follow by the chain
//! rule from the complex voltage derivatives.

use crate::network::RadialNetwork;
use crate::powerflow::{line_flows, residual_jacobian, FlowForm, GridState};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use std::io::Write;
use thiserror::Error;

/// Below this apparent-flow magnitude (p.u.) the flow-magnitude derivative
/// is direction-dependent and reported as undefined rather than zero.
pub const ZERO_FLOW_THRESHOLD: f64 = 1e-9;
/// Voltage magnitudes below this are treated as degenerate operating points.
pub const DEGENERATE_VOLTAGE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SensitivityError {
    #[error("probe node {0} is the slack or out of range")]
    BadProbeNode(usize),
    #[error("voltage magnitude at node {node} is degenerate")]
    DegenerateVoltage { node: usize },
    #[error("sensitivity system is singular at this operating point")]
    Singular,
    #[error("flow magnitude on line {line} is below {ZERO_FLOW_THRESHOLD} p.u.; its magnitude derivative is undefined")]
    UndefinedFlow { line: usize },
}

/// First-order derivatives of the operating point with respect to the active
/// injection at each probed node, all in p.u. Row/line indices cover the
/// whole network; columns follow `probe_nodes` order.
#[derive(Debug, Clone)]
pub struct SensitivityTable {
    pub probe_nodes: Vec<usize>,
    /// Complex voltage derivative per node (rows) and probe (columns); the
    /// slack row is exactly zero.
    pub dv_dp: DMatrix<Complex64>,
    /// Voltage magnitude derivative per node and probe.
    pub dvmag_dp: DMatrix<f64>,
    /// Complex sending-end flow derivative per line and probe.
    pub dflow_dp: DMatrix<Complex64>,
    /// Flow magnitude derivative per line and probe; rows of zero-flow lines
    /// hold NaN and are flagged in `flow_defined`.
    pub dflowmag_dp: DMatrix<f64>,
    pub flow_defined: Vec<bool>,
    /// Total-loss derivative per probe.
    pub dloss_dp: DVector<f64>,
}

impl SensitivityTable {
    /// Assemble and solve the sensitivity system at a converged state.
    pub fn compute(
        net: &RadialNetwork,
        state: &GridState,
        probe_nodes: &[usize],
        flow_form: FlowForm,
    ) -> Result<Self, SensitivityError> {
        let n_total = net.node_count();
        let n = n_total - 1;
        for &k in probe_nodes {
            if k == 0 || k >= n_total {
                return Err(SensitivityError::BadProbeNode(k));
            }
        }
        for (node, v) in state.voltages.iter().enumerate() {
            if v.norm() < DEGENERATE_VOLTAGE {
                return Err(SensitivityError::DegenerateVoltage { node });
            }
        }

        let y = net.admittance_matrix();
        let v = &state.voltages;
        let currents: Vec<Complex64> = (0..n_total)
            .map(|a| (0..n_total).map(|b| y[(a, b)] * v[b]).sum())
            .collect();
        let jac = residual_jacobian(&y, v, &currents);
        let lu = jac.lu();

        // One unit right-hand side per probed node: the conjugated balance
        // equation of node k gains d(conj s_k)/dp_k = 1, everything else zero.
        let k_count = probe_nodes.len();
        let mut rhs = DMatrix::zeros(2 * n, k_count);
        for (col, &k) in probe_nodes.iter().enumerate() {
            rhs[(2 * (k - 1), col)] = 1.0;
        }
        let Some(solution) = lu.solve(&rhs) else {
            return Err(SensitivityError::Singular);
        };

        let mut dv_dp = DMatrix::from_element(n_total, k_count, Complex64::new(0.0, 0.0));
        for col in 0..k_count {
            for node in 1..n_total {
                dv_dp[(node, col)] = Complex64::new(
                    solution[(2 * (node - 1), col)],
                    solution[(2 * (node - 1) + 1, col)],
                );
            }
        }

        let mut dvmag_dp = DMatrix::zeros(n_total, k_count);
        for node in 0..n_total {
            let vm = v[node].norm();
            for col in 0..k_count {
                dvmag_dp[(node, col)] = (v[node].conj() * dv_dp[(node, col)]).re / vm;
            }
        }
        // The slack voltage is pinned; keep its rows free of rounding dust.
        for col in 0..k_count {
            dv_dp[(0, col)] = Complex64::new(0.0, 0.0);
            dvmag_dp[(0, col)] = 0.0;
        }

        let line_count = net.line_count();
        let mut dflow_dp = DMatrix::from_element(line_count, k_count, Complex64::new(0.0, 0.0));
        let mut dflowmag_dp = DMatrix::zeros(line_count, k_count);
        let mut flow_defined = vec![true; line_count];
        // Evaluate flows under this table's own form; the state may have been
        // solved with a different one.
        let flows = line_flows(net, v, flow_form);
        for (l, line) in net.lines().iter().enumerate() {
            let ya = line.admittance().conj();
            let (a, b) = (line.from, line.to);
            let s = flows[l];
            let s_mag = s.norm();
            if s_mag < ZERO_FLOW_THRESHOLD {
                flow_defined[l] = false;
            }
            for col in 0..k_count {
                let dva = dv_dp[(a, col)];
                let ds = match flow_form {
                    FlowForm::BranchCurrent => {
                        let dvb = dv_dp[(b, col)];
                        ya * (dva * (v[a] - v[b]).conj() + v[a] * (dva - dvb).conj())
                    }
                    FlowForm::SendingEndOnly => ya * 2.0 * (v[a].conj() * dva).re,
                };
                dflow_dp[(l, col)] = ds;
                dflowmag_dp[(l, col)] = if flow_defined[l] {
                    (s.conj() * ds).re / s_mag
                } else {
                    f64::NAN
                };
            }
        }

        // d(loss)/dp_k = 2 Re( sum_n conj(dv_n) * (G v)_n ).
        let gv: Vec<Complex64> = (0..n_total)
            .map(|a| {
                (0..n_total)
                    .map(|b| Complex64::new(y[(a, b)].re, 0.0) * v[b])
                    .sum()
            })
            .collect();
        let mut dloss_dp = DVector::zeros(k_count);
        for col in 0..k_count {
            let sum: Complex64 = (0..n_total)
                .map(|node| dv_dp[(node, col)].conj() * gv[node])
                .sum();
            dloss_dp[col] = 2.0 * sum.re;
        }

        Ok(Self {
            probe_nodes: probe_nodes.to_vec(),
            dv_dp,
            dvmag_dp,
            dflow_dp,
            dflowmag_dp,
            flow_defined,
            dloss_dp,
        })
    }

    /// Column position of a probed node.
    pub fn column_of(&self, node: usize) -> Option<usize> {
        self.probe_nodes.iter().position(|&k| k == node)
    }

    /// Per-node voltage-magnitude response factors (alias of `dvmag_dp`).
    pub fn voltage_factors(&self) -> &DMatrix<f64> {
        &self.dvmag_dp
    }

    /// Per-line flow-magnitude response factors; NaN rows are undefined.
    pub fn flow_factors(&self) -> &DMatrix<f64> {
        &self.dflowmag_dp
    }

    /// Per-probe loss response factors: half the loss derivative, the
    /// coefficient that multiplies `2 * loss_price * p` in allocations.
    pub fn loss_factors(&self) -> DVector<f64> {
        self.dloss_dp.map(|d| d / 2.0)
    }

    /// Predicted first-order change of voltage magnitudes, flow magnitudes,
    /// and loss for a per-probe active-power delta (p.u.).
    pub fn predict(&self, delta_p: &[f64]) -> (DVector<f64>, DVector<f64>, f64) {
        assert_eq!(delta_p.len(), self.probe_nodes.len());
        let d = DVector::from_column_slice(delta_p);
        let dv = &self.dvmag_dp * &d;
        let ds = &self.dflowmag_dp * &d;
        let dloss = self.dloss_dp.dot(&d);
        (dv, ds, dloss)
    }

    /// Write the table as CSV: one row per probed node, column groups for
    /// node voltage magnitudes, line flow magnitudes, and loss. Undefined
    /// flow entries are written as `undef`.
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        let nodes = self.dvmag_dp.nrows();
        let lines = self.dflowmag_dp.nrows();
        write!(out, "probe_node")?;
        for n in 0..nodes {
            write!(out, ",dvmag_n{n}")?;
        }
        for l in 0..lines {
            write!(out, ",dsmag_l{l}")?;
        }
        writeln!(out, ",dloss")?;
        for (col, &k) in self.probe_nodes.iter().enumerate() {
            write!(out, "{k}")?;
            for n in 0..nodes {
                write!(out, ",{:.9e}", self.dvmag_dp[(n, col)])?;
            }
            for l in 0..lines {
                if self.flow_defined[l] {
                    write!(out, ",{:.9e}", self.dflowmag_dp[(l, col)])?;
                } else {
                    write!(out, ",undef")?;
                }
            }
            writeln!(out, ",{:.9e}", self.dloss_dp[col])?;
        }
        Ok(())
    }
}
