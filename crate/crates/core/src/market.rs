//! Market participants and network-cost allocation.
//!
//! Sellers carry a convex quadratic production cost and buyers a concave
//! quadratic benefit that saturates at its peak, so every participant has a
//! well-defined best response to a linear price. Two allocation policies
//! split realized network costs across participants: a pro-rata split of the
//! exact cost by traded volume, and a causality-based split that charges each
//! participant its marginal contribution to the active constraint set.

use crate::network::RadialNetwork;
use crate::powerflow::{CostSchedule, Violations};
use crate::sensitivity::SensitivityTable;
use nalgebra::{DMatrix, DVector};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("roster line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid roster: {0}")]
    Invalid(String),
    #[error("sensitivity table has no probe column for node {node}")]
    MissingProbe { node: usize },
    #[error("line {line} is at its flow limit but its flow-magnitude factor is undefined (zero base flow)")]
    UndefinedFlowFactor { line: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Seller,
    Buyer,
}

/// One market participant. Volumes are energy per trading interval (MWh),
/// prices in $/MWh; `alpha`/`beta`/`gamma` parameterize the quadratic cost
/// (sellers) or benefit (buyers).
#[derive(Debug, Clone)]
pub struct Peer {
    pub id: usize,
    pub role: Role,
    pub node: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub p_min: f64,
    pub p_max: f64,
}

impl Peer {
    /// Traded volume at which a buyer's benefit saturates.
    pub fn saturation_volume(&self) -> f64 {
        self.beta / (2.0 * self.alpha)
    }
}

/// Production cost of delivering `p` MWh.
pub fn seller_cost(peer: &Peer, p: f64) -> f64 {
    peer.alpha * p * p + peer.beta * p + peer.gamma
}

/// Marginal production cost at volume `p`.
pub fn seller_marginal_cost(peer: &Peer, p: f64) -> f64 {
    2.0 * peer.alpha * p + peer.beta
}

/// Benefit of consuming `p` MWh: a downward parabola up to its peak, flat
/// beyond it (extra energy is worthless, never harmful).
pub fn buyer_utility(peer: &Peer, p: f64) -> f64 {
    let knee = peer.saturation_volume();
    if p <= knee {
        peer.beta * p - peer.alpha * p * p
    } else {
        peer.beta * peer.beta / (4.0 * peer.alpha)
    }
}

/// Marginal benefit at volume `p`; zero past saturation.
pub fn buyer_marginal_utility(peer: &Peer, p: f64) -> f64 {
    let knee = peer.saturation_volume();
    if p < knee {
        peer.beta - 2.0 * peer.alpha * p
    } else {
        0.0
    }
}

/// Seller's trading profit at a given unit price, before network charges.
pub fn seller_profit(peer: &Peer, volume: f64, price: f64) -> f64 {
    price * volume - seller_cost(peer, volume)
}

/// The full participant roster, with sellers and buyers kept in roster order.
#[derive(Debug, Clone)]
pub struct PeerSet {
    peers: Vec<Peer>,
    sellers: Vec<usize>,
    buyers: Vec<usize>,
}

impl PeerSet {
    pub fn new(peers: Vec<Peer>, node_count: usize) -> Result<Self, MarketError> {
        let mut seen = vec![false; peers.len()];
        for p in &peers {
            if p.id >= peers.len() || seen[p.id] {
                return Err(MarketError::Invalid(format!(
                    "peer ids must be 0..{} without repeats (got {})",
                    peers.len(),
                    p.id
                )));
            }
            seen[p.id] = true;
            if p.node == 0 || p.node >= node_count {
                return Err(MarketError::Invalid(format!(
                    "peer {} sits at node {}, which is the source or out of range",
                    p.id, p.node
                )));
            }
            if !(p.alpha > 0.0) {
                return Err(MarketError::Invalid(format!(
                    "peer {} needs a strictly positive quadratic coefficient",
                    p.id
                )));
            }
            if p.beta < 0.0 || p.gamma < 0.0 {
                return Err(MarketError::Invalid(format!(
                    "peer {} has a negative linear or fixed coefficient",
                    p.id
                )));
            }
            if !(0.0 <= p.p_min && p.p_min <= p.p_max) {
                return Err(MarketError::Invalid(format!(
                    "peer {} has an empty or negative volume range",
                    p.id
                )));
            }
        }
        let mut ordered = peers;
        ordered.sort_by_key(|p| p.id);
        let sellers = ordered
            .iter()
            .filter(|p| p.role == Role::Seller)
            .map(|p| p.id)
            .collect::<Vec<_>>();
        let buyers = ordered
            .iter()
            .filter(|p| p.role == Role::Buyer)
            .map(|p| p.id)
            .collect::<Vec<_>>();
        if sellers.is_empty() || buyers.is_empty() {
            return Err(MarketError::Invalid(
                "need at least one seller and one buyer".into(),
            ));
        }
        Ok(Self {
            peers: ordered,
            sellers,
            buyers,
        })
    }

    /// Parse a roster file: `#` comments, then a header row
    /// `id,role,node,alpha,beta,gamma,p_min,p_max`, then one row per peer.
    pub fn parse(text: &str, node_count: usize) -> Result<Self, MarketError> {
        const HEADER: &str = "id,role,node,alpha,beta,gamma,p_min,p_max";
        let mut peers = Vec::new();
        let mut header_seen = false;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !header_seen {
                if line != HEADER {
                    return Err(MarketError::Parse {
                        line: idx + 1,
                        msg: format!("expected header `{HEADER}`"),
                    });
                }
                header_seen = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 8 {
                return Err(MarketError::Parse {
                    line: idx + 1,
                    msg: format!("expected 8 fields, got {}", fields.len()),
                });
            }
            let num = |f: &str, what: &str| -> Result<f64, MarketError> {
                f.parse().map_err(|_| MarketError::Parse {
                    line: idx + 1,
                    msg: format!("bad {what} `{f}`"),
                })
            };
            let role = match fields[1] {
                "seller" => Role::Seller,
                "buyer" => Role::Buyer,
                other => {
                    return Err(MarketError::Parse {
                        line: idx + 1,
                        msg: format!("role must be seller|buyer, got `{other}`"),
                    })
                }
            };
            peers.push(Peer {
                id: num(fields[0], "id")? as usize,
                role,
                node: num(fields[2], "node")? as usize,
                alpha: num(fields[3], "alpha")?,
                beta: num(fields[4], "beta")?,
                gamma: num(fields[5], "gamma")?,
                p_min: num(fields[6], "p_min")?,
                p_max: num(fields[7], "p_max")?,
            });
        }
        if !header_seen {
            return Err(MarketError::Parse {
                line: 0,
                msg: "roster is empty".into(),
            });
        }
        Self::new(peers, node_count)
    }

    pub fn from_file(path: impl AsRef<Path>, node_count: usize) -> Result<Self, MarketError> {
        Self::parse(&std::fs::read_to_string(path)?, node_count)
    }

    pub fn peers(&self) -> &[Peer] {
        &self.peers
    }
    pub fn len(&self) -> usize {
        self.peers.len()
    }
    pub fn is_empty(&self) -> bool {
        self.peers.is_empty()
    }
    /// Peer ids of sellers, in roster order.
    pub fn sellers(&self) -> &[usize] {
        &self.sellers
    }
    /// Peer ids of buyers, in roster order.
    pub fn buyers(&self) -> &[usize] {
        &self.buyers
    }
    pub fn peer(&self, id: usize) -> &Peer {
        &self.peers[id]
    }
    /// Sum of per-interval volume caps on each side, as a feasibility bound.
    pub fn side_capacity(&self) -> (f64, f64) {
        let cap = |ids: &[usize]| ids.iter().map(|&i| self.peers[i].p_max).sum();
        (cap(&self.sellers), cap(&self.buyers))
    }
}

/// Bilateral trades: `volumes[(i, j)]` is MWh sold by the i-th seller to the
/// j-th buyer (both within-role indices), plus one unit price per seller.
#[derive(Debug, Clone)]
pub struct TradeState {
    pub volumes: DMatrix<f64>,
    pub prices: DVector<f64>,
}

impl TradeState {
    pub fn flat(seller_count: usize, buyer_count: usize, price: f64) -> Self {
        Self {
            volumes: DMatrix::zeros(seller_count, buyer_count),
            prices: DVector::from_element(seller_count, price),
        }
    }

    pub fn seller_volume(&self, i: usize) -> f64 {
        self.volumes.row(i).sum()
    }
    pub fn buyer_volume(&self, j: usize) -> f64 {
        self.volumes.column(j).sum()
    }
    pub fn total_volume(&self) -> f64 {
        self.volumes.sum()
    }

    /// Per-peer traded volume in roster order (sellers then buyers follow
    /// the peer set's id order, not interleaved).
    pub fn peer_volumes(&self, peers: &PeerSet) -> Vec<f64> {
        peers
            .peers()
            .iter()
            .map(|p| match p.role {
                Role::Seller => {
                    let i = peers.sellers().iter().position(|&s| s == p.id).unwrap();
                    self.seller_volume(i)
                }
                Role::Buyer => {
                    let j = peers.buyers().iter().position(|&b| b == p.id).unwrap();
                    self.buyer_volume(j)
                }
            })
            .collect()
    }

    /// What buyer j pays its sellers in total.
    pub fn buyer_payment(&self, j: usize) -> f64 {
        (0..self.volumes.nrows())
            .map(|i| self.prices[i] * self.volumes[(i, j)])
            .sum()
    }
}

/// Total gains from trade: aggregate buyer benefit minus aggregate seller
/// cost. Peer-to-peer payments cancel in the sum, so prices don't appear.
pub fn market_surplus(peers: &PeerSet, trades: &TradeState) -> f64 {
    let mut surplus = 0.0;
    for (i, &sid) in peers.sellers().iter().enumerate() {
        surplus -= seller_cost(peers.peer(sid), trades.seller_volume(i));
    }
    for (j, &bid) in peers.buyers().iter().enumerate() {
        surplus += buyer_utility(peers.peer(bid), trades.buyer_volume(j));
    }
    surplus
}

/// Grid response factors mapped into per-peer trade space: column k gives the
/// derivative of each voltage magnitude (p.u.), flow magnitude (p.u.), and
/// system loss (MWh) with respect to one more MWh traded by peer k. Seller
/// volume raises that node's injection; buyer volume lowers it.
#[derive(Debug, Clone)]
pub struct PeerFactors {
    pub voltage: DMatrix<f64>,
    pub flow: DMatrix<f64>,
    pub flow_defined: Vec<bool>,
    pub loss: DVector<f64>,
}

pub fn peer_factors(
    net: &RadialNetwork,
    table: &SensitivityTable,
    peers: &PeerSet,
) -> Result<PeerFactors, MarketError> {
    let nodes = table.dvmag_dp.nrows();
    let lines = table.dflowmag_dp.nrows();
    let count = peers.len();
    let mut voltage = DMatrix::zeros(nodes, count);
    let mut flow = DMatrix::zeros(lines, count);
    let mut loss = DVector::zeros(count);
    for peer in peers.peers() {
        let col = table
            .column_of(peer.node)
            .ok_or(MarketError::MissingProbe { node: peer.node })?;
        let sign = match peer.role {
            Role::Seller => 1.0,
            Role::Buyer => -1.0,
        };
        // Trade volumes are MWh; grid derivatives are per p.u. injection.
        let scale = sign / net.base_mva;
        for n in 0..nodes {
            voltage[(n, peer.id)] = scale * table.dvmag_dp[(n, col)];
        }
        for l in 0..lines {
            flow[(l, peer.id)] = scale * table.dflowmag_dp[(l, col)];
        }
        // Loss per MWh traded is dimensionless, so only the sign applies.
        loss[peer.id] = sign * table.dloss_dp[col] / 2.0;
    }
    Ok(PeerFactors {
        voltage,
        flow,
        flow_defined: table.flow_defined.clone(),
        loss,
    })
}

/// Per-peer network charges split into their three drivers, in $.
#[derive(Debug, Clone)]
pub struct AllocationBreakdown {
    pub voltage: Vec<f64>,
    pub congestion: Vec<f64>,
    pub loss: Vec<f64>,
}

impl AllocationBreakdown {
    pub fn zeros(count: usize) -> Self {
        Self {
            voltage: vec![0.0; count],
            congestion: vec![0.0; count],
            loss: vec![0.0; count],
        }
    }

    pub fn charge(&self, k: usize) -> f64 {
        self.voltage[k] + self.congestion[k] + self.loss[k]
    }

    pub fn charges(&self) -> Vec<f64> {
        (0..self.voltage.len()).map(|k| self.charge(k)).collect()
    }

    pub fn total(&self) -> f64 {
        self.charges().iter().sum()
    }

    /// $/MWh unit rate per peer; zero where the peer traded nothing.
    pub fn rates(&self, volumes: &[f64]) -> Vec<f64> {
        volumes
            .iter()
            .enumerate()
            .map(|(k, &p)| if p > 0.0 { self.charge(k) / p } else { 0.0 })
            .collect()
    }
}

/// Split exact realized network costs pro rata by traded volume. Every peer
/// pays the same blended $/MWh rate regardless of location.
pub fn allocate_universal(
    volumes: &[f64],
    voltage_cost: f64,
    congestion_cost: f64,
    loss_cost: f64,
) -> AllocationBreakdown {
    let total_volume: f64 = volumes.iter().sum();
    let mut out = AllocationBreakdown::zeros(volumes.len());
    if total_volume <= 0.0 {
        return out;
    }
    for (k, &p) in volumes.iter().enumerate() {
        let share = p / total_volume;
        out.voltage[k] = voltage_cost * share;
        out.congestion[k] = congestion_cost * share;
        out.loss[k] = loss_cost * share;
    }
    out
}

/// Per-peer unit rates in $/MWh, split by driver. Negative entries are
/// credits.
#[derive(Debug, Clone)]
pub struct RateSchedule {
    pub voltage: Vec<f64>,
    pub congestion: Vec<f64>,
    pub loss: Vec<f64>,
}

impl RateSchedule {
    pub fn zeros(count: usize) -> Self {
        Self {
            voltage: vec![0.0; count],
            congestion: vec![0.0; count],
            loss: vec![0.0; count],
        }
    }

    /// Combined $/MWh rate for peer k.
    pub fn total(&self, k: usize) -> f64 {
        self.voltage[k] + self.congestion[k] + self.loss[k]
    }

    /// Turn rates into charges for the given traded volumes.
    pub fn apply(&self, volumes: &[f64]) -> AllocationBreakdown {
        let mut out = AllocationBreakdown::zeros(volumes.len());
        for (k, &p) in volumes.iter().enumerate() {
            out.voltage[k] = self.voltage[k] * p;
            out.congestion[k] = self.congestion[k] * p;
            out.loss[k] = self.loss[k] * p;
        }
        out
    }
}

/// Marginal-contribution unit rates: band prices weight each peer's push in
/// the violation-worsening direction at every constrained node/line, and
/// losses are priced at their marginal cost. Mitigating peers get negative
/// rates.
pub fn causal_unit_rates(
    factors: &PeerFactors,
    violations: &Violations,
    schedule: &CostSchedule,
) -> Result<RateSchedule, MarketError> {
    let count = factors.loss.len();
    let mut rates = RateSchedule::zeros(count);
    for &(line, _, _) in &violations.lines {
        if !factors.flow_defined[line] {
            return Err(MarketError::UndefinedFlowFactor { line });
        }
    }
    for k in 0..count {
        let mut v_rate = 0.0;
        for &(node, side, _) in &violations.nodes {
            v_rate += side.direction() * factors.voltage[(node, k)];
        }
        let mut s_rate = 0.0;
        for &(line, side, _) in &violations.lines {
            s_rate += side.direction() * factors.flow[(line, k)];
        }
        rates.voltage[k] = schedule.voltage_price * v_rate;
        rates.congestion[k] = schedule.congestion_price * s_rate;
        rates.loss[k] = 2.0 * schedule.loss_price * factors.loss[k];
    }
    Ok(rates)
}

/// Charge each peer its first-order contribution to the given activation
/// set; see [`causal_unit_rates`]. Peers that relieve a violation earn a
/// credit (negative charge); only the loss term applies when nothing is
/// constrained. This prices a fixed snapshot — the welfare benchmark uses it
/// with the pre-trade activation. Realized charges out of a negotiation come
/// from the ledgers instead, which carry the rates peers settled against.
pub fn allocate_causal(
    factors: &PeerFactors,
    violations: &Violations,
    schedule: &CostSchedule,
    volumes: &[f64],
) -> Result<AllocationBreakdown, MarketError> {
    Ok(causal_unit_rates(factors, violations, schedule)?.apply(volumes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::powerflow::BandSide;

    const EPS: f64 = 1e-12;

    fn peer(id: usize, role: Role, node: usize, alpha: f64, beta: f64) -> Peer {
        Peer {
            id,
            role,
            node,
            alpha,
            beta,
            gamma: if role == Role::Seller { 2.0 } else { 0.0 },
            p_min: 0.0,
            p_max: 5.0,
        }
    }

    fn small_set() -> PeerSet {
        PeerSet::new(
            vec![
                peer(0, Role::Seller, 1, 2.0, 10.0),
                peer(1, Role::Buyer, 2, 4.0, 40.0),
                peer(2, Role::Buyer, 3, 5.0, 30.0),
            ],
            5,
        )
        .unwrap()
    }

    #[test]
    fn quadratic_curves_have_hand_checked_values() {
        let s = peer(0, Role::Seller, 1, 2.0, 10.0);
        assert!((seller_cost(&s, 3.0) - (18.0 + 30.0 + 2.0)).abs() < EPS);
        assert!((seller_marginal_cost(&s, 3.0) - 22.0).abs() < EPS);
        assert!((seller_profit(&s, 3.0, 25.0) - (75.0 - 50.0)).abs() < EPS);

        let b = peer(1, Role::Buyer, 2, 4.0, 40.0);
        assert!((b.saturation_volume() - 5.0).abs() < EPS);
        assert!((buyer_utility(&b, 2.0) - (80.0 - 16.0)).abs() < EPS);
        assert!((buyer_marginal_utility(&b, 2.0) - 24.0).abs() < EPS);
    }

    #[test]
    fn buyer_utility_saturates_smoothly() {
        let b = peer(1, Role::Buyer, 2, 4.0, 40.0);
        let knee = b.saturation_volume();
        let peak = b.beta * b.beta / (4.0 * b.alpha);
        assert!((buyer_utility(&b, knee) - peak).abs() < EPS);
        assert!((buyer_utility(&b, knee + 3.0) - peak).abs() < EPS);
        // Marginal benefit reaches zero exactly at the knee.
        assert!(buyer_marginal_utility(&b, knee - 1e-9) > 0.0);
        assert_eq!(buyer_marginal_utility(&b, knee + 1e-9), 0.0);
    }

    #[test]
    fn roster_parses_and_orders_sides() {
        let text = "\
# test roster
id,role,node,alpha,beta,gamma,p_min,p_max
0,seller,1,2.0,10.0,2.0,0.0,5.0
1,buyer,2,4.0,40.0,0.0,0.0,5.0
2,buyer,3,5.0,30.0,0.0,0.0,5.0
";
        let set = PeerSet::parse(text, 5).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.sellers(), &[0]);
        assert_eq!(set.buyers(), &[1, 2]);
        assert_eq!(set.peer(2).node, 3);
        assert!((set.side_capacity().1 - 10.0).abs() < EPS);
    }

    #[test]
    fn roster_rejects_bad_rows() {
        let header = "id,role,node,alpha,beta,gamma,p_min,p_max\n";
        let cases = [
            ("0,seller,0,2.0,10.0,0.0,0.0,5.0\n1,buyer,2,4.0,40.0,0.0,0.0,5.0", "source"),
            ("0,seller,1,0.0,10.0,0.0,0.0,5.0\n1,buyer,2,4.0,40.0,0.0,0.0,5.0", "quadratic"),
            ("0,seller,1,2.0,10.0,0.0,3.0,1.0\n1,buyer,2,4.0,40.0,0.0,0.0,5.0", "range"),
            ("0,seller,1,2.0,10.0,0.0,0.0,5.0\n0,buyer,2,4.0,40.0,0.0,0.0,5.0", "repeat"),
            ("0,seller,1,2.0,10.0,0.0,0.0,5.0", "buyer"),
        ];
        for (rows, _why) in cases {
            let text = format!("{header}{rows}\n");
            assert!(PeerSet::parse(&text, 5).is_err(), "should reject: {rows}");
        }
        assert!(PeerSet::parse("0,seller,1,2,10,0,0,5\n", 5).is_err(), "missing header");
    }

    #[test]
    fn surplus_sums_benefit_minus_cost() {
        let set = small_set();
        let mut trades = TradeState::flat(1, 2, 20.0);
        trades.volumes[(0, 0)] = 2.0;
        trades.volumes[(0, 1)] = 1.0;
        // Seller cost at 3 MWh: 2*9 + 10*3 + 2 = 50. Buyer benefits:
        // 40*2 - 4*4 = 64 and 30*1 - 5 = 25.
        assert!((market_surplus(&set, &trades) - (64.0 + 25.0 - 50.0)).abs() < EPS);
        assert!((trades.seller_volume(0) - 3.0).abs() < EPS);
        assert!((trades.buyer_payment(0) - 40.0).abs() < EPS);
        let vols = trades.peer_volumes(&set);
        assert_eq!(vols, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn pro_rata_split_balances_budget_exactly() {
        let volumes = [3.0, 2.0, 1.0];
        let alloc = allocate_universal(&volumes, 12.0, 6.0, 18.0);
        assert!((alloc.total() - 36.0).abs() < EPS);
        assert!((alloc.charge(0) - 18.0).abs() < EPS);
        assert!((alloc.charge(2) - 6.0).abs() < EPS);
        // Everyone sees the same blended unit rate.
        let rates = alloc.rates(&volumes);
        assert!((rates[0] - rates[2]).abs() < EPS);
        // Zero market volume allocates nothing.
        assert_eq!(allocate_universal(&[0.0, 0.0], 5.0, 5.0, 5.0).total(), 0.0);
    }

    #[test]
    fn causal_split_charges_aggravators_and_credits_mitigators() {
        // Two peers, one undervoltage node (index 1) and one overloaded line.
        let factors = PeerFactors {
            voltage: DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.004, -0.003]),
            flow: DMatrix::from_row_slice(1, 2, &[0.02, 0.05]),
            flow_defined: vec![true],
            loss: DVector::from_column_slice(&[-0.01, 0.03]),
        };
        let violations = Violations {
            nodes: vec![(1, BandSide::Below, 0.01)],
            lines: vec![(0, BandSide::Above, 0.1)],
        };
        let schedule = CostSchedule {
            loss_price: 50.0,
            voltage_price: 1000.0,
            congestion_price: 200.0,
        };
        let volumes = [2.0, 1.0];
        let alloc = allocate_causal(&factors, &violations, &schedule, &volumes).unwrap();

        // Peer 0 raises the sagging voltage: credit of 1000 * 0.004 * 2.
        assert!((alloc.voltage[0] - (-8.0)).abs() < EPS);
        // Peer 1 drags it further down: pays 1000 * 0.003 * 1.
        assert!((alloc.voltage[1] - 3.0).abs() < EPS);
        // Both push more flow through the overloaded line: both pay.
        assert!((alloc.congestion[0] - 8.0).abs() < EPS);
        assert!((alloc.congestion[1] - 10.0).abs() < EPS);
        // Loss charges at marginal cost, signed.
        assert!((alloc.loss[0] - (-2.0)).abs() < EPS);
        assert!((alloc.loss[1] - 3.0).abs() < EPS);
    }

    #[test]
    fn causal_split_requires_defined_factors_on_active_lines() {
        let factors = PeerFactors {
            voltage: DMatrix::zeros(1, 1),
            flow: DMatrix::from_element(1, 1, f64::NAN),
            flow_defined: vec![false],
            loss: DVector::zeros(1),
        };
        let violations = Violations {
            nodes: vec![],
            lines: vec![(0, BandSide::Above, 0.1)],
        };
        let schedule = CostSchedule {
            loss_price: 0.0,
            voltage_price: 0.0,
            congestion_price: 1.0,
        };
        let err = allocate_causal(&factors, &violations, &schedule, &[1.0]).unwrap_err();
        assert!(matches!(err, MarketError::UndefinedFlowFactor { line: 0 }));

        // The same factors are fine when that line is inside its band.
        let clear = Violations {
            nodes: vec![],
            lines: vec![],
        };
        assert!(allocate_causal(&factors, &clear, &schedule, &[1.0]).is_ok());
    }

    #[test]
    fn loss_only_causal_charge_matches_marginal_cost() {
        let factors = PeerFactors {
            voltage: DMatrix::zeros(1, 2),
            flow: DMatrix::zeros(0, 2),
            flow_defined: vec![],
            loss: DVector::from_column_slice(&[0.025, -0.01]),
        };
        let clear = Violations {
            nodes: vec![],
            lines: vec![],
        };
        let schedule = CostSchedule {
            loss_price: 80.0,
            voltage_price: 500.0,
            congestion_price: 500.0,
        };
        let alloc = allocate_causal(&factors, &clear, &schedule, &[2.0, 3.0]).unwrap();
        assert!((alloc.loss[0] - 2.0 * 80.0 * 0.025 * 2.0).abs() < EPS);
        assert!((alloc.loss[1] - 2.0 * 80.0 * (-0.01) * 3.0).abs() < EPS);
        assert_eq!(alloc.voltage[0], 0.0);
        assert_eq!(alloc.congestion[0], 0.0);
    }
}
