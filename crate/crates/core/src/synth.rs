//! Random trading instances for property checks: small radial grids with
//! random impedances and loads, plus rosters of random convex participants,
//! all drawn from a seeded generator so every batch is reproducible.

use crate::market::{Peer, PeerSet, Role};
use crate::network::{Line, Node, RadialNetwork, DEFAULT_VOLTAGE_BAND};
use crate::powerflow::{solve_power_flow, CostSchedule, SolverOptions};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Bounds used when drawing a random instance.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub node_range: (usize, usize),
    pub seller_range: (usize, usize),
    pub buyer_range: (usize, usize),
    /// Pin one seller next to the source and one at the deepest node, so
    /// loss sensitivities differ materially across the selling side.
    pub spread_sellers: bool,
    pub loss_price_range: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            node_range: (4, 15),
            seller_range: (2, 4),
            buyer_range: (2, 5),
            spread_sellers: false,
            loss_price_range: (30.0, 120.0),
        }
    }
}

/// One generated market: grid, roster, and a loss-only cost schedule.
#[derive(Debug)]
pub struct SynthInstance {
    pub net: RadialNetwork,
    pub peers: PeerSet,
    pub schedule: CostSchedule,
}

/// Depth of each node in the tree (source at zero).
fn depths(parents: &[usize]) -> Vec<usize> {
    let mut depth = vec![0usize; parents.len() + 1];
    for (child, &parent) in parents.iter().enumerate() {
        depth[child + 1] = depth[parent] + 1;
    }
    depth
}

fn random_network(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> (RadialNetwork, Vec<usize>) {
    let n = rng.gen_range(cfg.node_range.0..=cfg.node_range.1);
    let parents: Vec<usize> = (1..n).map(|k| rng.gen_range(0..k)).collect();
    let (v_min, v_max) = DEFAULT_VOLTAGE_BAND;
    let nodes: Vec<Node> = (0..n)
        .map(|k| {
            let p = if k == 0 { 0.0 } else { rng.gen_range(0.0..0.04) };
            Node {
                p_load: p,
                q_load: p * rng.gen_range(0.2..0.5),
                v_min,
                v_max,
            }
        })
        .collect();
    let lines: Vec<Line> = parents
        .iter()
        .enumerate()
        .map(|(child, &parent)| Line {
            from: parent,
            to: child + 1,
            resistance: rng.gen_range(0.01..0.06),
            reactance: rng.gen_range(0.01..0.05),
            s_max: f64::INFINITY,
            s_min: 0.0,
        })
        .collect();
    let net = RadialNetwork::new(10.0, 12.66, nodes, lines).expect("generated tree is radial");
    (net, parents)
}

fn random_peers(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    node_count: usize,
    parents: &[usize],
) -> PeerSet {
    let s_count = rng.gen_range(cfg.seller_range.0..=cfg.seller_range.1);
    let b_count = rng.gen_range(cfg.buyer_range.0..=cfg.buyer_range.1);
    let random_node = |rng: &mut ChaCha8Rng| rng.gen_range(1..node_count);

    let mut peers = Vec::new();
    for id in 0..s_count {
        let node = if cfg.spread_sellers && id == 0 {
            // A child of the source: the electrically nearest position.
            parents
                .iter()
                .position(|&p| p == 0)
                .map(|child| child + 1)
                .unwrap_or(1)
        } else if cfg.spread_sellers && id == 1 {
            let depth = depths(parents);
            (1..node_count).max_by_key(|&k| depth[k]).unwrap_or(1)
        } else {
            random_node(rng)
        };
        peers.push(Peer {
            id,
            role: Role::Seller,
            node,
            alpha: rng.gen_range(3.0..8.0),
            beta: rng.gen_range(6.0..12.0),
            gamma: rng.gen_range(0.0..2.0),
            p_min: 0.0,
            p_max: 8.0,
        });
    }
    for j in 0..b_count {
        peers.push(Peer {
            id: s_count + j,
            role: Role::Buyer,
            node: random_node(rng),
            alpha: rng.gen_range(5.0..10.0),
            beta: rng.gen_range(16.0..24.0),
            gamma: 0.0,
            p_min: 0.0,
            p_max: 8.0,
        });
    }
    PeerSet::new(peers, node_count).expect("generated roster is valid")
}

/// Draw one instance, retrying until its pre-trade power flow solves to a
/// healthy operating point.
pub fn random_instance(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> SynthInstance {
    for _ in 0..100 {
        let (net, parents) = random_network(rng, cfg);
        let base = net.base_injection();
        let Ok(state) = solve_power_flow(&net, base.as_slice(), None, &SolverOptions::default())
        else {
            continue;
        };
        let healthy = state
            .voltages
            .iter()
            .all(|v| (0.85..=1.15).contains(&v.norm()));
        if !healthy {
            continue;
        }
        let peers = random_peers(rng, cfg, net.node_count(), &parents);
        let schedule = CostSchedule {
            loss_price: rng.gen_range(cfg.loss_price_range.0..cfg.loss_price_range.1),
            voltage_price: 0.0,
            congestion_price: 0.0,
        };
        return SynthInstance {
            net,
            peers,
            schedule,
        };
    }
    panic!("could not draw a solvable instance in 100 attempts");
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn instances_are_valid_and_reproducible() {
        let cfg = SynthConfig::default();
        let draw = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            random_instance(&mut rng, &cfg)
        };
        let a = draw(7);
        let b = draw(7);
        assert_eq!(a.net.node_count(), b.net.node_count());
        assert_eq!(a.peers.len(), b.peers.len());
        assert_eq!(a.schedule.loss_price, b.schedule.loss_price);
        for (pa, pb) in a.peers.peers().iter().zip(b.peers.peers()) {
            assert_eq!(pa.node, pb.node);
            assert_eq!(pa.alpha, pb.alpha);
        }
        let c = draw(8);
        let differs = a.net.node_count() != c.net.node_count()
            || a.schedule.loss_price != c.schedule.loss_price;
        assert!(differs, "different seeds should draw different instances");
    }

    #[test]
    fn spread_option_separates_seller_depths() {
        let cfg = SynthConfig {
            spread_sellers: true,
            node_range: (8, 15),
            ..SynthConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let instance = random_instance(&mut rng, &cfg);
        let sellers = instance.peers.sellers();
        let n0 = instance.peers.peer(sellers[0]).node;
        let n1 = instance.peers.peer(sellers[1]).node;
        assert_ne!(n0, n1, "spread sellers should sit at distinct nodes");
    }

    #[test]
    fn batches_cover_the_configured_ranges() {
        let cfg = SynthConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let instance = random_instance(&mut rng, &cfg);
            let n = instance.net.node_count();
            assert!((cfg.node_range.0..=cfg.node_range.1).contains(&n));
            assert!(!instance.peers.sellers().is_empty());
            assert!(!instance.peers.buyers().is_empty());
            assert_eq!(instance.schedule.voltage_price, 0.0);
        }
    }
}
