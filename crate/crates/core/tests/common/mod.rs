//! Shared helpers for integration tests: an independent backward/forward
//! sweep solver used as a second opinion on the Newton path, and central
//! finite differences for checking analytic sensitivities.

use num_complex::Complex64;
use peerflow::network::RadialNetwork;
use peerflow::powerflow::{solve_power_flow, GridState, SolverOptions};
use std::path::PathBuf;

pub fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name)
}

/// Backward/forward sweep power flow for radial networks. Deliberately
/// avoids the admittance matrix and the Newton iteration: currents are
/// accumulated leaf-to-root, voltages propagated root-to-leaf.
pub fn sweep_solve(
    net: &RadialNetwork,
    injections: &[Complex64],
    tol: f64,
    max_iter: usize,
) -> Vec<Complex64> {
    let n = net.node_count();
    let parents = net.parents();
    let mut line_into: Vec<usize> = vec![usize::MAX; n];
    for (idx, line) in net.lines().iter().enumerate() {
        line_into[line.to] = idx;
    }
    // Breadth-first order guarantees parents precede children.
    let mut order = Vec::with_capacity(n);
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (c, p) in parents.iter().enumerate() {
        if let Some(p) = p {
            children[*p].push(c);
        }
    }
    let mut queue = std::collections::VecDeque::from([0usize]);
    while let Some(at) = queue.pop_front() {
        order.push(at);
        queue.extend(children[at].iter().copied());
    }
    assert_eq!(order.len(), n, "network must be connected");

    let mut v = vec![Complex64::new(1.0, 0.0); n];
    for _ in 0..max_iter {
        // Injected current per node at the present voltage guess.
        let mut subtree: Vec<Complex64> = (0..n).map(|k| (injections[k] / v[k]).conj()).collect();
        for &node in order.iter().rev() {
            if let Some(p) = parents[node] {
                let add = subtree[node];
                subtree[p] += add;
            }
        }
        let mut worst: f64 = 0.0;
        for &node in order.iter().skip(1) {
            let line = &net.lines()[line_into[node]];
            let z = Complex64::new(line.resistance, line.reactance);
            let updated = v[line.from] + z * subtree[node];
            worst = worst.max((updated - v[node]).norm());
            v[node] = updated;
        }
        if worst < tol {
            break;
        }
    }
    v
}

/// Active loss implied by the sweep solution, summed per line as r |i|^2.
pub fn sweep_loss(net: &RadialNetwork, voltages: &[Complex64]) -> f64 {
    net.lines()
        .iter()
        .map(|l| {
            let i = (voltages[l.from] - voltages[l.to]) * l.admittance();
            l.resistance * i.norm_sqr()
        })
        .sum()
}

/// Solve to a tight tolerance for finite-difference probing.
pub fn tight_solve(
    net: &RadialNetwork,
    injections: &[Complex64],
    warm: Option<&[Complex64]>,
) -> GridState {
    let options = SolverOptions {
        tolerance: 1e-12,
        ..SolverOptions::default()
    };
    solve_power_flow(net, injections, warm, &options).expect("probe solve must converge")
}
