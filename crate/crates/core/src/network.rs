//! Radial distribution network model: topology, impedances, loads, and
//! operating limits, normalized to per-unit on ingestion.
//!
//! Network files are delimited text with `#` comments and three sections:
//!
//! ```text
//! [header]
//! base_mva 10.0
//! base_kv  12.66
//! units    physical        # physical (MW/MVAr/ohm/MVA) or pu
//!
//! [nodes]
//! # index p_load q_load [v_min v_max]
//! 0 0.0 0.0
//! 1 0.1 0.06 0.95 1.05
//!
//! [lines]
//! # index from to r x [s_max [s_min]]
//! 0 0 1 0.0922 0.0470 10.0 0.0
//! ```
//!
//! Node 0 is always the slack node. Lines are re-oriented on load so that
//! `from` is the node nearer the slack; flows are reported at that end.

use num_complex::Complex64;
use std::path::Path;
use thiserror::Error;

/// Voltage band applied when a node row omits explicit limits, in p.u.
pub const DEFAULT_VOLTAGE_BAND: (f64, f64) = (0.95, 1.05);

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("topology: {0}")]
    Topology(String),
    #[error("line {index} has zero impedance")]
    ZeroImpedance { index: usize },
    #[error("invalid limits: {0}")]
    Limits(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One node of the feeder. Loads are consumption-positive, in p.u.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub p_load: f64,
    pub q_load: f64,
    pub v_min: f64,
    pub v_max: f64,
}

/// One branch of the feeder, oriented parent -> child. Impedance in p.u.,
/// apparent-power band `[s_min, s_max]` in p.u. (`s_max` may be infinite).
#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub resistance: f64,
    pub reactance: f64,
    pub s_max: f64,
    pub s_min: f64,
}

impl Line {
    /// Series admittance 1/(r + jx).
    pub fn admittance(&self) -> Complex64 {
        Complex64::new(1.0, 0.0) / Complex64::new(self.resistance, self.reactance)
    }
}

/// A validated radial feeder: connected, loop-free, slack at node 0.
#[derive(Debug, Clone)]
pub struct RadialNetwork {
    pub base_mva: f64,
    pub base_kv: f64,
    nodes: Vec<Node>,
    lines: Vec<Line>,
    parent: Vec<Option<usize>>,
}

/// Complex base-case injections per node, in p.u. Loads enter negative.
#[derive(Debug, Clone)]
pub struct BaseInjection {
    s: Vec<Complex64>,
}

impl BaseInjection {
    pub fn new(s: Vec<Complex64>) -> Self {
        Self { s }
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.s
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    /// Injections with an additional real-power delta per node (p.u.).
    pub fn with_delta(&self, delta_p: &[f64]) -> Vec<Complex64> {
        assert_eq!(delta_p.len(), self.s.len());
        self.s
            .iter()
            .zip(delta_p)
            .map(|(s, d)| s + Complex64::new(*d, 0.0))
            .collect()
    }
}

impl RadialNetwork {
    /// Build and validate a network from already-normalized parts.
    pub fn new(
        base_mva: f64,
        base_kv: f64,
        nodes: Vec<Node>,
        lines: Vec<Line>,
    ) -> Result<Self, NetworkError> {
        if base_mva <= 0.0 || base_kv <= 0.0 {
            return Err(NetworkError::Limits(
                "base power and voltage must be positive".into(),
            ));
        }
        if nodes.is_empty() {
            return Err(NetworkError::Topology("no nodes".into()));
        }
        for (i, n) in nodes.iter().enumerate() {
            if !(n.v_min > 0.0 && n.v_min <= n.v_max) {
                return Err(NetworkError::Limits(format!(
                    "node {i}: voltage band [{}, {}] is invalid",
                    n.v_min, n.v_max
                )));
            }
        }
        let n_total = nodes.len();
        if lines.len() + 1 != n_total {
            return Err(NetworkError::Topology(format!(
                "{} lines cannot span {} nodes radially",
                lines.len(),
                n_total
            )));
        }
        for (idx, l) in lines.iter().enumerate() {
            if l.from >= n_total || l.to >= n_total {
                return Err(NetworkError::Topology(format!(
                    "line {idx} references node out of range"
                )));
            }
            if l.from == l.to {
                return Err(NetworkError::Topology(format!("line {idx} is a self-loop")));
            }
            if l.resistance == 0.0 && l.reactance == 0.0 {
                return Err(NetworkError::ZeroImpedance { index: idx });
            }
            if l.s_min < 0.0 || l.s_min > l.s_max {
                return Err(NetworkError::Limits(format!(
                    "line {idx}: flow band [{}, {}] is invalid",
                    l.s_min, l.s_max
                )));
            }
        }
        // Union-find cycle check; with the edge count already pinned to
        // n_total - 1, an acyclic graph is necessarily a spanning tree.
        let mut root: Vec<usize> = (0..n_total).collect();
        fn find(root: &mut Vec<usize>, mut a: usize) -> usize {
            while root[a] != a {
                root[a] = root[root[a]];
                a = root[a];
            }
            a
        }
        for (idx, l) in lines.iter().enumerate() {
            let (ra, rb) = (find(&mut root, l.from), find(&mut root, l.to));
            if ra == rb {
                return Err(NetworkError::Topology(format!("line {idx} closes a loop")));
            }
            root[ra] = rb;
        }

        // Orient every line parent -> child by breadth-first search from the
        // slack, preserving file order and indices.
        let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_total];
        for (idx, l) in lines.iter().enumerate() {
            adjacency[l.from].push((l.to, idx));
            adjacency[l.to].push((l.from, idx));
        }
        let mut parent: Vec<Option<usize>> = vec![None; n_total];
        let mut seen = vec![false; n_total];
        let mut lines = lines;
        let mut queue = std::collections::VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(at) = queue.pop_front() {
            for &(next, idx) in &adjacency[at] {
                if !seen[next] {
                    seen[next] = true;
                    parent[next] = Some(at);
                    if lines[idx].from != at {
                        let l = &mut lines[idx];
                        std::mem::swap(&mut l.from, &mut l.to);
                    }
                    queue.push_back(next);
                }
            }
        }

        Ok(Self {
            base_mva,
            base_kv,
            nodes,
            lines,
            parent,
        })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, NetworkError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Parse the three-section network format described in the module docs.
    pub fn parse(text: &str) -> Result<Self, NetworkError> {
        #[derive(PartialEq, Clone, Copy)]
        enum Section {
            None,
            Header,
            Nodes,
            Lines,
        }
        let mut section = Section::None;
        let mut base_mva = None;
        let mut base_kv = None;
        let mut physical_units = true;
        let mut node_rows: Vec<(usize, Node)> = Vec::new();
        let mut line_rows: Vec<(usize, Line)> = Vec::new();

        let perr = |line: usize, msg: &str| NetworkError::Parse {
            line,
            msg: msg.to_string(),
        };

        for (lineno, raw) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            match content {
                "[header]" => {
                    section = Section::Header;
                    continue;
                }
                "[nodes]" => {
                    section = Section::Nodes;
                    continue;
                }
                "[lines]" => {
                    section = Section::Lines;
                    continue;
                }
                _ => {}
            }
            let fields: Vec<&str> = content.split_whitespace().collect();
            let num = |s: &str| -> Result<f64, NetworkError> {
                s.parse::<f64>()
                    .map_err(|_| perr(lineno, &format!("expected a number, found '{s}'")))
            };
            let idx = |s: &str| -> Result<usize, NetworkError> {
                s.parse::<usize>()
                    .map_err(|_| perr(lineno, &format!("expected an index, found '{s}'")))
            };
            match section {
                Section::None => return Err(perr(lineno, "data before any section marker")),
                Section::Header => {
                    if fields.len() != 2 {
                        return Err(perr(lineno, "header entries are 'key value'"));
                    }
                    match fields[0] {
                        "base_mva" => base_mva = Some(num(fields[1])?),
                        "base_kv" => base_kv = Some(num(fields[1])?),
                        "units" => match fields[1] {
                            "physical" => physical_units = true,
                            "pu" => physical_units = false,
                            other => {
                                return Err(perr(
                                    lineno,
                                    &format!("units must be 'physical' or 'pu', found '{other}'"),
                                ))
                            }
                        },
                        other => return Err(perr(lineno, &format!("unknown header key '{other}'"))),
                    }
                }
                Section::Nodes => {
                    if fields.len() != 3 && fields.len() != 5 {
                        return Err(perr(lineno, "node rows have 3 or 5 columns"));
                    }
                    let (v_min, v_max) = if fields.len() == 5 {
                        (num(fields[3])?, num(fields[4])?)
                    } else {
                        DEFAULT_VOLTAGE_BAND
                    };
                    node_rows.push((
                        idx(fields[0])?,
                        Node {
                            p_load: num(fields[1])?,
                            q_load: num(fields[2])?,
                            v_min,
                            v_max,
                        },
                    ));
                }
                Section::Lines => {
                    if !(5..=7).contains(&fields.len()) {
                        return Err(perr(lineno, "line rows have 5 to 7 columns"));
                    }
                    let s_max = if fields.len() >= 6 {
                        num(fields[5])?
                    } else {
                        f64::INFINITY
                    };
                    let s_min = if fields.len() == 7 { num(fields[6])? } else { 0.0 };
                    line_rows.push((
                        idx(fields[0])?,
                        Line {
                            from: idx(fields[1])?,
                            to: idx(fields[2])?,
                            resistance: num(fields[3])?,
                            reactance: num(fields[4])?,
                            s_max,
                            s_min,
                        },
                    ));
                }
            }
        }

        let base_mva = base_mva.ok_or_else(|| NetworkError::Limits("missing base_mva".into()))?;
        let base_kv = base_kv.ok_or_else(|| NetworkError::Limits("missing base_kv".into()))?;

        let mut nodes = Self::collect_indexed(node_rows, "node")?;
        let mut lines = Self::collect_indexed(line_rows, "line")?;

        if physical_units {
            let z_base = base_kv * base_kv / base_mva;
            for n in nodes.iter_mut() {
                n.p_load /= base_mva;
                n.q_load /= base_mva;
            }
            for l in &mut lines {
                l.resistance /= z_base;
                l.reactance /= z_base;
                l.s_max /= base_mva;
                l.s_min /= base_mva;
            }
        }

        Self::new(base_mva, base_kv, nodes, lines)
    }

    fn collect_indexed<T>(rows: Vec<(usize, T)>, what: &str) -> Result<Vec<T>, NetworkError> {
        let count = rows.len();
        let mut slots: Vec<Option<T>> = (0..count).map(|_| None).collect();
        for (idx, item) in rows {
            if idx >= count {
                return Err(NetworkError::Topology(format!(
                    "{what} index {idx} outside contiguous range 0..{count}"
                )));
            }
            if slots[idx].is_some() {
                return Err(NetworkError::Topology(format!("duplicate {what} index {idx}")));
            }
            slots[idx] = Some(item);
        }
        Ok(slots.into_iter().map(|s| s.unwrap()).collect())
    }

    /// Total node count including the slack.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn line_count(&self) -> usize {
        self.lines.len()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    /// Parent of each node in the slack-rooted tree (`None` for the slack).
    pub fn parents(&self) -> &[Option<usize>] {
        &self.parent
    }

    /// Dense nodal admittance matrix. Shunts and transformer taps are not
    /// modeled, so every row sums to zero.
    pub fn admittance_matrix(&self) -> nalgebra::DMatrix<Complex64> {
        let n = self.node_count();
        let mut y = nalgebra::DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
        for l in &self.lines {
            let ya = l.admittance();
            y[(l.from, l.to)] -= ya;
            y[(l.to, l.from)] -= ya;
            y[(l.from, l.from)] += ya;
            y[(l.to, l.to)] += ya;
        }
        y
    }

    /// Base-case complex injections: the negated nodal loads.
    pub fn base_injection(&self) -> BaseInjection {
        BaseInjection::new(
            self.nodes
                .iter()
                .map(|n| Complex64::new(-n.p_load, -n.q_load))
                .collect(),
        )
    }

    /// Convert a power quantity from p.u. to MW/MVA.
    pub fn to_mva(&self, pu: f64) -> f64 {
        pu * self.base_mva
    }

    /// Convert a power quantity from MW/MVA to p.u.
    pub fn to_pu(&self, mva: f64) -> f64 {
        mva / self.base_mva
    }

    /// Replace the voltage dead band on every non-slack node.
    pub fn set_voltage_band(&mut self, v_min: f64, v_max: f64) -> Result<(), NetworkError> {
        if !(v_min > 0.0 && v_min < v_max) {
            return Err(NetworkError::Limits(format!(
                "voltage band [{v_min}, {v_max}] must satisfy 0 < v_min < v_max"
            )));
        }
        for node in self.nodes.iter_mut().skip(1) {
            node.v_min = v_min;
            node.v_max = v_max;
        }
        Ok(())
    }

    /// Scale every finite upper flow bound by a positive factor.
    pub fn scale_flow_limits(&mut self, factor: f64) -> Result<(), NetworkError> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(NetworkError::Limits(format!(
                "flow limit scale {factor} must be a positive finite number"
            )));
        }
        for line in self.lines.iter_mut() {
            if line.s_max.is_finite() {
                line.s_max *= factor;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_node_text() -> &'static str {
        "[header]\n\
         base_mva 10.0\n\
         base_kv 12.66\n\
         units pu\n\
         [nodes]\n\
         0 0.0 0.0\n\
         1 0.01 0.006\n\
         [lines]\n\
         0 0 1 0.1 0.1 1.0 0.0\n"
    }

    #[test]
    fn parses_minimal_two_node_network() {
        let net = RadialNetwork::parse(two_node_text()).unwrap();
        assert_eq!(net.node_count(), 2);
        assert_eq!(net.line_count(), 1);
        assert_eq!(net.nodes()[1].p_load, 0.01);
        assert_eq!(net.nodes()[1].v_min, DEFAULT_VOLTAGE_BAND.0);
        assert_eq!(net.nodes()[1].v_max, DEFAULT_VOLTAGE_BAND.1);
        assert_eq!(net.parents()[1], Some(0));
    }

    #[test]
    fn single_line_admittance_matches_hand_value() {
        let net = RadialNetwork::parse(two_node_text()).unwrap();
        let y = net.admittance_matrix();
        // 1/(0.1 + 0.1j) = 5 - 5j, off-diagonal negated.
        let expect = Complex64::new(5.0, -5.0);
        assert!((y[(0, 1)] + expect).norm() < 1e-12);
        assert!((y[(0, 0)] - expect).norm() < 1e-12);
    }

    #[test]
    fn physical_units_normalize_to_per_unit() {
        let text = "[header]\n\
                    base_mva 10.0\n\
                    base_kv 12.66\n\
                    units physical\n\
                    [nodes]\n\
                    0 0.0 0.0\n\
                    1 0.1 0.06\n\
                    [lines]\n\
                    0 0 1 0.0922 0.0470 10.0 0.0\n";
        let net = RadialNetwork::parse(text).unwrap();
        let z_base = 12.66 * 12.66 / 10.0;
        assert!((net.nodes()[1].p_load - 0.01).abs() < 1e-15);
        assert!((net.lines()[0].resistance - 0.0922 / z_base).abs() < 1e-15);
        assert!((net.lines()[0].s_max - 1.0).abs() < 1e-15);
    }

    #[test]
    fn per_unit_conversions_round_trip() {
        let net = RadialNetwork::parse(two_node_text()).unwrap();
        let mut value = 0.123;
        for _ in 0..4 {
            value = net.to_pu(net.to_mva(value));
        }
        assert!((value - 0.123).abs() < 1e-12);
    }

    #[test]
    fn loop_closing_line_is_rejected() {
        let text = "[header]\n\
                    base_mva 10.0\n\
                    base_kv 12.66\n\
                    units pu\n\
                    [nodes]\n\
                    0 0.0 0.0\n\
                    1 0.01 0.0\n\
                    2 0.01 0.0\n\
                    [lines]\n\
                    0 0 1 0.1 0.1\n\
                    1 1 2 0.1 0.1\n";
        // Replace the chain line with a duplicate of line 0.
        let looped = text.replace("1 1 2 0.1 0.1", "1 1 0 0.2 0.2");
        let err = RadialNetwork::parse(&looped).unwrap_err();
        assert!(matches!(err, NetworkError::Topology(_)), "{err}");
        assert!(err.to_string().contains("loop"));
    }

    #[test]
    fn zero_impedance_line_is_rejected() {
        let text = two_node_text().replace("0 0 1 0.1 0.1 1.0 0.0", "0 0 1 0.0 0.0 1.0 0.0");
        let err = RadialNetwork::parse(&text).unwrap_err();
        assert!(matches!(err, NetworkError::ZeroImpedance { index: 0 }));
    }

    #[test]
    fn line_count_mismatch_is_rejected() {
        let text = "[header]\n\
                    base_mva 10.0\n\
                    base_kv 12.66\n\
                    units pu\n\
                    [nodes]\n\
                    0 0.0 0.0\n\
                    1 0.01 0.0\n\
                    2 0.01 0.0\n\
                    [lines]\n\
                    0 0 1 0.1 0.1\n";
        let err = RadialNetwork::parse(text).unwrap_err();
        assert!(matches!(err, NetworkError::Topology(_)));
    }

    #[test]
    fn lines_reorient_toward_children() {
        // Line written child -> parent must come back parent -> child.
        let text = "[header]\n\
                    base_mva 10.0\n\
                    base_kv 12.66\n\
                    units pu\n\
                    [nodes]\n\
                    0 0.0 0.0\n\
                    1 0.01 0.0\n\
                    2 0.01 0.0\n\
                    [lines]\n\
                    0 1 0 0.1 0.1\n\
                    1 2 1 0.1 0.1\n";
        let net = RadialNetwork::parse(text).unwrap();
        assert_eq!((net.lines()[0].from, net.lines()[0].to), (0, 1));
        assert_eq!((net.lines()[1].from, net.lines()[1].to), (1, 2));
        assert_eq!(net.parents()[2], Some(1));
    }

    #[test]
    fn admittance_rows_sum_to_zero() {
        let net = RadialNetwork::parse(two_node_text()).unwrap();
        let y = net.admittance_matrix();
        for i in 0..2 {
            let sum: Complex64 = (0..2).map(|j| y[(i, j)]).sum();
            assert!(sum.norm() < 1e-12);
        }
    }
}
