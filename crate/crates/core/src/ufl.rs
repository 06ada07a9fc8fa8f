//! Optimal placement of a single content on a tree (uncapacitated facility
//! location), solved by dynamic programming over the nearest open ancestor.
//!
//! The content source sits above the root and is always available: a leaf
//! with no open node on its path pays every link up to and including the
//! root uplink.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demand::CpDemand;
use crate::error::{invalid, Error, Result};
use crate::net::{NodeId, TreeNetwork};
use crate::opt::placement::{ContentPlacement, CpPlacement};
use crate::CpId;

/// Where a node's demand for a content is served from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Server {
    Node(NodeId),
    Origin,
}

/// Cost per unit of demand from each node to every possible server above it.
///
/// For node `n` at depth `d`, slot 0 is the origin and slot `j + 1` is the
/// ancestor at depth `j < d`. Sums are accumulated from the root downwards so
/// every consumer sees identical values.
#[derive(Debug, Clone)]
pub struct RouteTable {
    offsets: Vec<usize>,
    cost: Vec<f64>,
}

impl RouteTable {
    pub fn new(net: &TreeNetwork, link_cost: &[f64]) -> Self {
        let n = net.len();
        let mut offsets = vec![0; n + 1];
        for i in 0..n {
            offsets[i + 1] = offsets[i] + net.depth(NodeId(i)) + 1;
        }
        let mut cost = vec![0.0; offsets[n]];
        for &v in net.bfs_order() {
            let d = net.depth(v);
            let o = offsets[v.0];
            match net.parent(v) {
                None => cost[o] = link_cost[v.0],
                Some(p) => {
                    let po = offsets[p.0];
                    for j in 0..d {
                        cost[o + j] = link_cost[v.0] + cost[po + j];
                    }
                    cost[o + d] = link_cost[v.0];
                }
            }
        }
        RouteTable { offsets, cost }
    }

    /// Unit cost from `n` to the server in slot `j`.
    #[inline]
    pub fn get(&self, n: NodeId, j: usize) -> f64 {
        self.cost[self.offsets[n.0] + j]
    }

    fn slots(&self) -> usize {
        self.cost.len()
    }
}

/// One single-content placement problem.
#[derive(Debug, Clone)]
pub struct UflInstance<'a> {
    pub net: &'a TreeNetwork,
    /// Cost of storing the content at each node.
    pub open_cost: Vec<f64>,
    /// Per-unit price of each node's uplink (the root's is the transit price).
    pub link_cost: Vec<f64>,
    /// Demand per node; normally non-zero only at leaves.
    pub demand: Vec<f64>,
}

impl<'a> UflInstance<'a> {
    /// Instance with the network's own prices: storage `s_n * file_size`, links `b_n`.
    pub fn from_network(net: &'a TreeNetwork, file_size_gb: f64, demand: Vec<f64>) -> Self {
        UflInstance {
            net,
            open_cost: net.nodes().iter().map(|x| x.storage_price * file_size_gb).collect(),
            link_cost: net.nodes().iter().map(|x| x.uplink_price).collect(),
            demand,
        }
    }

    fn check(&self) -> Result<()> {
        let n = self.net.len();
        if self.open_cost.len() != n || self.link_cost.len() != n || self.demand.len() != n {
            return Err(invalid("cost and demand vectors must have one entry per node"));
        }
        if self.open_cost.iter().any(|c| c.is_nan() || *c < 0.0) {
            return Err(invalid("open costs must be >= 0"));
        }
        if self.link_cost.iter().chain(&self.demand).any(|c| !c.is_finite() || *c < 0.0) {
            return Err(invalid("link costs and demands must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UflSolution {
    /// Open nodes in increasing id order.
    pub open_nodes: Vec<NodeId>,
    /// Server of every node with positive demand.
    pub serving: Vec<(NodeId, Server)>,
    pub cost: f64,
}

/// Nearest open node on the path from `n` to the root, `n` included.
pub fn nearest_open(net: &TreeNetwork, open: &[bool], n: NodeId) -> Server {
    net.path_to_root(n).find(|m| open[m.0]).map(Server::Node).unwrap_or(Server::Origin)
}

fn server_slot(net: &TreeNetwork, s: Server) -> usize {
    match s {
        Server::Origin => 0,
        Server::Node(m) => net.depth(m) + 1,
    }
}

/// Cost of an open set with every node served by its nearest open ancestor.
///
/// Open costs are added in node order, then routing costs in node order.
pub fn evaluate_open_set(inst: &UflInstance<'_>, routes: &RouteTable, open: &[bool]) -> f64 {
    let net = inst.net;
    let mut cost = 0.0;
    for (i, &o) in open.iter().enumerate() {
        if o {
            cost += inst.open_cost[i];
        }
    }
    for n in net.ids() {
        let d = inst.demand[n.0];
        if d > 0.0 && !open[n.0] {
            let slot = server_slot(net, nearest_open(net, open, n));
            cost += d * routes.get(n, slot);
        }
    }
    cost
}

fn solution_from_mask(inst: &UflInstance<'_>, routes: &RouteTable, open: &[bool]) -> UflSolution {
    let net = inst.net;
    let open_nodes = net.ids().filter(|n| open[n.0]).collect();
    let serving = net.ids().filter(|n| inst.demand[n.0] > 0.0).map(|n| (n, nearest_open(net, open, n))).collect();
    UflSolution { open_nodes, serving, cost: evaluate_open_set(inst, routes, open) }
}

/// Reusable dynamic-programming workspace for one network.
///
/// State of a node is the slot of its nearest open strict ancestor (or the
/// origin). A node opens only when that is strictly cheaper, so ties resolve
/// towards fewer caches.
#[derive(Debug, Clone)]
pub struct UflWorkspace {
    best: Vec<f64>,
    opened: Vec<bool>,
    acc: Vec<f64>,
    stack: Vec<(NodeId, usize)>,
}

impl UflWorkspace {
    pub fn new(net: &TreeNetwork, routes: &RouteTable) -> Self {
        UflWorkspace {
            best: vec![0.0; routes.slots()],
            opened: vec![false; routes.slots()],
            acc: vec![0.0; net.max_depth() + 2],
            stack: Vec::new(),
        }
    }

    /// Solves one content and writes its open nodes (increasing id) to `out`.
    /// Returns the optimal cost as accumulated by the recursion.
    pub fn solve(
        &mut self,
        net: &TreeNetwork,
        routes: &RouteTable,
        open_cost: &[f64],
        demand: &[f64],
        out: &mut Vec<NodeId>,
    ) -> f64 {
        for &v in net.bfs_order().iter().rev() {
            let d = net.depth(v);
            let acc = &mut self.acc[..d + 2];
            acc.iter_mut().for_each(|x| *x = 0.0);
            for &c in net.children(v) {
                let co = routes.offsets[c.0];
                for (j, a) in acc.iter_mut().enumerate() {
                    *a += self.best[co + j];
                }
            }
            let open_val = open_cost[v.0] + acc[d + 1];
            let o = routes.offsets[v.0];
            let dv = demand[v.0];
            for j in 0..=d {
                let stay = if dv > 0.0 { dv * routes.cost[o + j] } else { 0.0 } + acc[j];
                if open_val < stay {
                    self.best[o + j] = open_val;
                    self.opened[o + j] = true;
                } else {
                    self.best[o + j] = stay;
                    self.opened[o + j] = false;
                }
            }
        }
        out.clear();
        self.stack.clear();
        self.stack.push((NodeId::ROOT, 0));
        while let Some((v, j)) = self.stack.pop() {
            let open = self.opened[routes.offsets[v.0] + j];
            if open {
                out.push(v);
            }
            let cj = if open { net.depth(v) + 1 } else { j };
            for &c in net.children(v) {
                self.stack.push((c, cj));
            }
        }
        out.sort_unstable();
        self.best[routes.offsets[0]]
    }
}

/// Optimal placement of one content.
pub fn solve_ufl(inst: &UflInstance<'_>) -> Result<UflSolution> {
    inst.check()?;
    let routes = RouteTable::new(inst.net, &inst.link_cost);
    let mut ws = UflWorkspace::new(inst.net, &routes);
    let mut open_nodes = Vec::new();
    ws.solve(inst.net, &routes, &inst.open_cost, &inst.demand, &mut open_nodes);
    let mut mask = vec![false; inst.net.len()];
    for n in &open_nodes {
        mask[n.0] = true;
    }
    Ok(solution_from_mask(inst, &routes, &mask))
}

pub const BRUTE_FORCE_MAX_NODES: usize = 20;

/// Exhaustive search over all `2^N` open sets. Refuses more than 20 nodes.
pub fn brute_force_ufl(inst: &UflInstance<'_>) -> Result<UflSolution> {
    inst.check()?;
    let n = inst.net.len();
    if n > BRUTE_FORCE_MAX_NODES {
        return Err(Error::TooLarge { size: n, limit: BRUTE_FORCE_MAX_NODES });
    }
    let routes = RouteTable::new(inst.net, &inst.link_cost);
    let mut best: Option<(f64, u32)> = None;
    let mut mask = vec![false; n];
    for bits in 0u32..(1u32 << n) {
        for (i, m) in mask.iter_mut().enumerate() {
            *m = bits >> i & 1 == 1;
        }
        let c = evaluate_open_set(inst, &routes, &mask);
        let better = match best {
            None => true,
            Some((bc, bb)) => c < bc || (c == bc && bits.count_ones() < bb.count_ones()),
        };
        if better {
            best = Some((c, bits));
        }
    }
    let (_, bits) = best.expect("at least the empty set");
    for (i, m) in mask.iter_mut().enumerate() {
        *m = bits >> i & 1 == 1;
    }
    Ok(solution_from_mask(inst, &routes, &mask))
}

/// Per-content prices seen by a provider: storage cost per file at each node
/// and per-unit link prices (fixed plus shadow).
#[derive(Debug, Clone)]
pub struct UflPrices {
    pub open_cost: Vec<f64>,
    pub link_cost: Vec<f64>,
}

impl UflPrices {
    pub fn fixed(net: &TreeNetwork, file_size_gb: f64) -> Self {
        UflPrices {
            open_cost: net.nodes().iter().map(|x| x.storage_price * file_size_gb).collect(),
            link_cost: net.nodes().iter().map(|x| x.uplink_price).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaceOptions {
    /// Stop once a more popular content has been refused at every node. Only
    /// sound when all leaves rank contents identically.
    pub early_stop: bool,
}

const CHUNK: usize = 256;

/// Solves every content of one provider independently.
pub fn place_catalog(
    net: &TreeNetwork,
    demand: &CpDemand,
    cp: CpId,
    prices: &UflPrices,
    opts: PlaceOptions,
) -> CpPlacement {
    let routes = RouteTable::new(net, &prices.link_cost);
    let files = demand.files();
    let contents = if opts.early_stop {
        place_with_early_stop(net, demand, &routes, prices)
    } else {
        let chunks: Vec<std::ops::Range<usize>> =
            (0..files).step_by(CHUNK).map(|s| s..(s + CHUNK).min(files)).collect();
        chunks
            .par_iter()
            .map(|r| {
                let mut ws = UflWorkspace::new(net, &routes);
                let mut dem = vec![0.0; net.len()];
                let mut open = Vec::new();
                r.clone()
                    .map(|f| {
                        demand.fill_file_demand(f, net.leaves(), &mut dem);
                        ws.solve(net, &routes, &prices.open_cost, &dem, &mut open);
                        ContentPlacement::nearest(open.clone())
                    })
                    .collect::<Vec<_>>()
            })
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    };
    CpPlacement { cp, contents }
}

fn place_with_early_stop(
    net: &TreeNetwork,
    demand: &CpDemand,
    routes: &RouteTable,
    prices: &UflPrices,
) -> Vec<ContentPlacement> {
    let files = demand.files();
    let leaves = net.leaves();
    let totals: Vec<f64> = (0..files).map(|f| demand.file_total(f, leaves)).collect();
    let mut order: Vec<usize> = (0..files).collect();
    order.sort_by(|&a, &b| totals[b].total_cmp(&totals[a]).then(a.cmp(&b)));

    let mut out = vec![ContentPlacement::default(); files];
    let mut ws = UflWorkspace::new(net, routes);
    let mut dem = vec![0.0; net.len()];
    let mut sub = vec![0.0; net.len()];
    let mut open = Vec::new();
    let mut is_open = vec![false; net.len()];
    // Largest local demand of a content refused at each node so far.
    let mut refused = vec![f64::NEG_INFINITY; net.len()];
    for &f in &order {
        demand.fill_file_demand(f, leaves, &mut dem);
        for &v in net.bfs_order().iter().rev() {
            sub[v.0] = dem[v.0] + net.children(v).iter().map(|c| sub[c.0]).sum::<f64>();
        }
        if net.ids().all(|n| sub[n.0] <= refused[n.0]) {
            break;
        }
        ws.solve(net, routes, &prices.open_cost, &dem, &mut open);
        is_open.iter_mut().for_each(|x| *x = false);
        for n in &open {
            is_open[n.0] = true;
        }
        for n in net.ids() {
            if !is_open[n.0] && sub[n.0] > refused[n.0] {
                refused[n.0] = sub[n.0];
            }
        }
        out[f] = ContentPlacement::nearest(open.clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{AnoId, Node};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seven() -> TreeNetwork {
        // 0 -> {1, 2}; 1 -> {3, 4}; 2 -> {5, 6}
        let mut nodes = vec![Node::root(0.0, 4.0)];
        for p in [0, 0, 1, 1, 2, 2] {
            nodes.push(Node::child(NodeId(p), AnoId(0), 0.0, 1.0));
        }
        TreeNetwork::new(nodes).unwrap()
    }

    #[test]
    fn free_storage_opens_every_demand_leaf() {
        let net = seven();
        let demand = vec![0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 3.0];
        let inst = UflInstance {
            net: &net,
            open_cost: vec![0.0; 7],
            link_cost: vec![4.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
            demand,
        };
        let s = solve_ufl(&inst).unwrap();
        assert_eq!(s.open_nodes, vec![NodeId(3), NodeId(4), NodeId(6)]);
        assert_eq!(s.cost, 0.0);
    }

    #[test]
    fn prohibitive_storage_opens_nothing() {
        let net = seven();
        let demand = vec![0.0, 0.0, 0.0, 1.0, 2.0, 0.5, 3.0];
        let inst = UflInstance {
            net: &net,
            open_cost: vec![1e6; 7],
            link_cost: net.nodes().iter().map(|x| x.uplink_price).collect(),
            demand: demand.clone(),
        };
        let s = solve_ufl(&inst).unwrap();
        assert!(s.open_nodes.is_empty());
        let expect: f64 = net.ids().map(|n| demand[n.0] * net.path_price(n).unwrap()).sum();
        assert_eq!(s.cost, expect);
        assert!(s.serving.iter().all(|(_, srv)| *srv == Server::Origin));
    }

    #[test]
    fn mixed_costs_match_brute_force() {
        let net = seven();
        let inst = UflInstance {
            net: &net,
            open_cost: vec![3.0, 2.5, 1.75, 1.0, 4.0, 0.5, 2.0],
            link_cost: vec![4.0, 1.5, 0.5, 0.25, 1.0, 2.0, 0.75],
            demand: vec![0.0, 0.0, 0.0, 2.0, 1.0, 0.5, 3.0],
        };
        let dp = solve_ufl(&inst).unwrap();
        let bf = brute_force_ufl(&inst).unwrap();
        assert_eq!(dp.cost, bf.cost);
    }

    #[test]
    fn single_node_threshold() {
        let net = TreeNetwork::new(vec![Node::root(0.0, 4.0)]).unwrap();
        for (lambda, open) in [(1.0, true), (0.5, false), (0.25, false)] {
            let inst = UflInstance { net: &net, open_cost: vec![2.0], link_cost: vec![4.0], demand: vec![lambda] };
            let s = brute_force_ufl(&inst).unwrap();
            assert_eq!(!s.open_nodes.is_empty(), open, "lambda {lambda}");
            assert_eq!(solve_ufl(&inst).unwrap().open_nodes, s.open_nodes);
        }
    }

    #[test]
    fn empty_demand_and_size_limit() {
        let net = seven();
        let inst = UflInstance::from_network(&net, 1.0, vec![0.0; 7]);
        let s = brute_force_ufl(&inst).unwrap();
        assert!(s.open_nodes.is_empty() && s.cost == 0.0);

        let mut nodes = vec![Node::root(0.0, 1.0)];
        for _ in 0..21 {
            nodes.push(Node::child(NodeId(0), AnoId(0), 0.0, 1.0));
        }
        let big = TreeNetwork::new(nodes).unwrap();
        let inst = UflInstance::from_network(&big, 1.0, vec![0.0; 22]);
        assert!(matches!(brute_force_ufl(&inst), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn rejects_bad_instances() {
        let net = seven();
        let mut inst = UflInstance::from_network(&net, 1.0, vec![0.0; 7]);
        inst.demand[3] = -1.0;
        assert!(solve_ufl(&inst).is_err());
        inst.demand.pop();
        assert!(solve_ufl(&inst).is_err());
    }

    #[test]
    fn random_ten_node_trees_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.random_range(1..=10);
            let mut nodes = vec![Node::root(0.0, rng.random_range(0.0..5.0))];
            for i in 1..n {
                let p = rng.random_range(0..i);
                nodes.push(Node::child(NodeId(p), AnoId(0), 0.0, rng.random_range(0.0..3.0)));
            }
            // Fix ownership for nodes under intermediate parents.
            let net = TreeNetwork::new(nodes).unwrap();
            let inst = UflInstance {
                net: &net,
                open_cost: (0..n).map(|_| rng.random_range(0.0..6.0)).collect(),
                link_cost: net.nodes().iter().map(|x| x.uplink_price).collect(),
                demand: (0..n).map(|i| if net.is_leaf(NodeId(i)) { rng.random_range(0.0..4.0) } else { 0.0 }).collect(),
            };
            let dp = solve_ufl(&inst).unwrap();
            let bf = brute_force_ufl(&inst).unwrap();
            assert!((dp.cost - bf.cost).abs() <= 1e-12 * bf.cost.max(1.0), "{} vs {}", dp.cost, bf.cost);
        }
    }
}
