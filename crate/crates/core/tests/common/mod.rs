#![allow(dead_code)]

use cachesub_core::demand::{CpDemand, DemandModel};
use cachesub_core::net::{AnoId, Capacity, Node, NodeId, TreeNetwork};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small capacity-limited instance: a central office with elastic prices,
/// one or two operators with sunk leaves and priced intermediates, and one or
/// two providers. Contents times nodes stays within the exhaustive limit.
pub fn toy_instance(seed: u64) -> (TreeNetwork, DemandModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = vec![Node::root(rng.random_range(0.5..3.0), 4.0)];
    let anos = rng.random_range(1..=2);
    let mut leaves = Vec::new();
    for a in 0..anos {
        let cap = |rng: &mut ChaCha8Rng| Capacity::Finite(rng.random_range(1..=2) as f64);
        if rng.random_bool(0.5) || anos == 2 {
            nodes.push(Node::child(NodeId(0), AnoId(a), 0.0, 0.0).with_caps(cap(&mut rng), Capacity::Unbounded));
            leaves.push(nodes.len() - 1);
        } else {
            nodes.push(Node::child(NodeId(0), AnoId(a), rng.random_range(0.2..1.5), 0.0));
            let i = nodes.len() - 1;
            for _ in 0..2 {
                nodes.push(Node::child(NodeId(i), AnoId(a), 0.0, 0.0).with_caps(cap(&mut rng), Capacity::Unbounded));
                leaves.push(nodes.len() - 1);
            }
        }
    }
    let n = nodes.len();
    let max_contents = 20 / n;
    let cps = if max_contents >= 4 { rng.random_range(1..=2) } else { 1 };
    let per_cp = (max_contents / cps).clamp(1, 3);
    let mut cp_demand = Vec::new();
    let mut leaf_load = vec![0.0; n];
    for _ in 0..cps {
        let mut rows = Vec::new();
        for f in 0..per_cp {
            for &l in &leaves {
                if rng.random_bool(0.8) {
                    let r: f64 = rng.random_range(0.1..2.0);
                    leaf_load[l] += r;
                    rows.push((NodeId(l), f, r));
                }
            }
        }
        cp_demand.push(rows);
    }
    for &l in &leaves {
        if rng.random_bool(0.6) && leaf_load[l] > 0.0 {
            let b = leaf_load[l] * rng.random_range(0.3..1.1);
            nodes[l].uplink_cap = Capacity::Finite(b);
        }
    }
    let net = TreeNetwork::new(nodes).unwrap();
    let cps = cp_demand.iter().map(|rows| CpDemand::explicit(&net, per_cp, rows).unwrap()).collect();
    (net, DemandModel::new(1.0, cps).unwrap())
}
