//! Placements and the per-provider aggregates exchanged during optimization.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demand::{CpDemand, DemandModel};
use crate::error::{Error, Result};
use crate::net::{AnoId, CpId, NodeId, TreeNetwork};
use crate::numeric::CompensatedSum;
use crate::ufl::Server;

/// Where one content is stored and how leaves reach it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContentPlacement {
    /// Nodes holding a copy, increasing id.
    pub stored: Vec<NodeId>,
    /// Explicit server per leaf. `None` means every leaf uses its nearest
    /// copy; leaves missing from an explicit list fetch from the origin.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routes: Option<Vec<(NodeId, Server)>>,
}

impl ContentPlacement {
    pub fn nearest(mut stored: Vec<NodeId>) -> Self {
        stored.sort_unstable();
        stored.dedup();
        ContentPlacement { stored, routes: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpPlacement {
    pub cp: CpId,
    /// One entry per content of the provider's catalog.
    pub contents: Vec<ContentPlacement>,
}

impl CpPlacement {
    pub fn empty(cp: CpId, files: usize) -> Self {
        CpPlacement { cp, contents: vec![ContentPlacement::default(); files] }
    }

    /// Stored `(node, file)` pairs in file order.
    pub fn stored_pairs(&self) -> impl Iterator<Item = (NodeId, usize)> + '_ {
        self.contents.iter().enumerate().flat_map(|(f, c)| c.stored.iter().map(move |&n| (n, f)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub cps: Vec<CpPlacement>,
}

impl Placement {
    pub fn empty(demand: &DemandModel) -> Self {
        Placement { cps: demand.cp_ids().map(|k| CpPlacement::empty(k, demand.cp(k).files())).collect() }
    }
}

/// What a provider reveals about its placement: per-node totals, never
/// per-content demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpSummary {
    pub cp: CpId,
    /// Number of stored contents per node.
    pub slots: Vec<u64>,
    /// Traffic left on each node's uplink (Mb/s); the root entry is transit.
    pub residual: Vec<f64>,
    /// Traffic originating below each node without any cache (Mb/s).
    pub offered: Vec<f64>,
    /// Transit traffic caused by each ANO's leaves.
    pub transit_by_ano: Vec<f64>,
    /// Demand of each ANO's leaves.
    pub offered_by_ano: Vec<f64>,
    /// Each ANO's share of the central-office storage cost.
    pub zeta: Vec<f64>,
}

impl CpSummary {
    pub fn storage_gb(&self, n: NodeId, file_size_gb: f64) -> f64 {
        self.slots[n.0] as f64 * file_size_gb
    }
}

fn check_placement(net: &TreeNetwork, demand: &CpDemand, p: &CpPlacement) -> Result<()> {
    if p.contents.len() != demand.files() {
        return Err(Error::InvalidPlacement(format!(
            "{} has {} contents but the placement lists {}",
            p.cp,
            demand.files(),
            p.contents.len()
        )));
    }
    for (f, c) in p.contents.iter().enumerate() {
        if let Some(n) = c.stored.iter().find(|n| !net.contains(**n)) {
            return Err(Error::InvalidPlacement(format!("{} file {f}: unknown node {n}", p.cp)));
        }
        if c.stored.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidPlacement(format!(
                "{} file {f}: stored nodes must be strictly increasing",
                p.cp
            )));
        }
        if let Some(routes) = &c.routes {
            let mut seen = std::collections::BTreeSet::new();
            for &(l, s) in routes {
                if !net.contains(l) || !net.is_leaf(l) {
                    return Err(Error::InvalidPlacement(format!("{} file {f}: {l} is not a leaf", p.cp)));
                }
                if !seen.insert(l) {
                    return Err(Error::InvalidPlacement(format!("{} file {f}: {l} is served more than once", p.cp)));
                }
                if let Server::Node(m) = s {
                    if c.stored.binary_search(&m).is_err() {
                        return Err(Error::InvalidPlacement(format!(
                            "{} file {f}: {l} routed to {m}, which does not store it",
                            p.cp
                        )));
                    }
                    if !net.path_to_root(l).any(|x| x == m) {
                        return Err(Error::InvalidPlacement(format!(
                            "{} file {f}: {m} is not on the path of {l}",
                            p.cp
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Server of leaf `l` for content `c`.
pub(crate) fn server_of(net: &TreeNetwork, c: &ContentPlacement, stored: &[bool], l: NodeId) -> Server {
    match &c.routes {
        None => net.path_to_root(l).find(|m| stored[m.0]).map(Server::Node).unwrap_or(Server::Origin),
        Some(r) => r.iter().find(|(x, _)| *x == l).map(|&(_, s)| s).unwrap_or(Server::Origin),
    }
}

/// Traffic without any cache, per node.
pub fn offered_traffic(net: &TreeNetwork, demand: &CpDemand) -> Vec<f64> {
    let mut offered = vec![0.0; net.len()];
    for &v in net.bfs_order().iter().rev() {
        let own = if net.is_leaf(v) { demand.leaf_total(v) } else { 0.0 };
        offered[v.0] = own + net.children(v).iter().map(|c| offered[c.0]).sum::<f64>();
    }
    offered
}

/// Running totals over contents; merged in content order.
#[derive(Debug, Clone)]
pub(crate) struct SummaryAcc {
    slots: Vec<u64>,
    residual: Vec<CompensatedSum>,
    transit: Vec<CompensatedSum>,
    zeta_num: Vec<CompensatedSum>,
    co_files: u64,
}

impl SummaryAcc {
    pub(crate) fn new(net: &TreeNetwork) -> Self {
        SummaryAcc {
            slots: vec![0; net.len()],
            residual: vec![CompensatedSum::new(); net.len()],
            transit: vec![CompensatedSum::new(); net.ano_count()],
            zeta_num: vec![CompensatedSum::new(); net.ano_count()],
            co_files: 0,
        }
    }

    /// Adds one content given its per-node uplink traffic and its per-ANO
    /// demand served by a root copy or sent to the origin.
    fn add(&mut self, net: &TreeNetwork, stored: &[NodeId], s: &ContentScratch, at_root: bool) {
        let up = &s.up;
        for n in stored {
            self.slots[n.0] += 1;
        }
        for (acc, &u) in self.residual.iter_mut().zip(up) {
            if u != 0.0 {
                acc.add(u);
            }
        }
        if at_root {
            self.co_files += 1;
            let total: f64 = s.served_by_ano.iter().sum();
            let k = net.ano_count();
            for (a, acc) in self.zeta_num.iter_mut().enumerate() {
                acc.add(if total > 0.0 { s.served_by_ano[a] / total } else { 1.0 / k as f64 });
            }
        }
        for (acc, &t) in self.transit.iter_mut().zip(&s.transit_by_ano) {
            if t != 0.0 {
                acc.add(t);
            }
        }
    }

    /// Combines a later block of contents into this one.
    pub(crate) fn merge(&mut self, other: &SummaryAcc) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            *a += b;
        }
        for (a, b) in self.residual.iter_mut().zip(&other.residual) {
            a.add(b.value());
        }
        for (a, b) in self.transit.iter_mut().zip(&other.transit) {
            a.add(b.value());
        }
        for (a, b) in self.zeta_num.iter_mut().zip(&other.zeta_num) {
            a.add(b.value());
        }
        self.co_files += other.co_files;
    }

    pub(crate) fn finish(&self, net: &TreeNetwork, demand: &CpDemand, cp: CpId) -> CpSummary {
        let offered = offered_traffic(net, demand);
        let offered_by_ano =
            (0..net.ano_count()).map(|a| net.ano_leaves(AnoId(a)).map(|l| demand.leaf_total(l)).sum()).collect();
        let zeta = if self.co_files > 0 {
            self.zeta_num.iter().map(|z| z.value() / self.co_files as f64).collect()
        } else {
            vec![0.0; net.ano_count()]
        };
        CpSummary {
            cp,
            slots: self.slots.clone(),
            residual: self.residual.iter().map(CompensatedSum::value).collect(),
            offered,
            transit_by_ano: self.transit.iter().map(CompensatedSum::value).collect(),
            offered_by_ano,
            zeta,
        }
    }
}

/// Reusable per-content buffers.
#[derive(Debug, Clone)]
pub(crate) struct ContentScratch {
    pub dem: Vec<f64>,
    pub up: Vec<f64>,
    pub stored: Vec<bool>,
    pub served_by_ano: Vec<f64>,
    pub transit_by_ano: Vec<f64>,
}

impl ContentScratch {
    pub(crate) fn new(net: &TreeNetwork) -> Self {
        ContentScratch {
            dem: vec![0.0; net.len()],
            up: vec![0.0; net.len()],
            stored: vec![false; net.len()],
            served_by_ano: vec![0.0; net.ano_count()],
            transit_by_ano: vec![0.0; net.ano_count()],
        }
    }
}

/// Accumulates content `f` placed as `c`.
pub(crate) fn account_content(
    net: &TreeNetwork,
    demand: &CpDemand,
    f: usize,
    c: &ContentPlacement,
    s: &mut ContentScratch,
    acc: &mut SummaryAcc,
) {
    demand.fill_file_demand(f, net.leaves(), &mut s.dem);
    s.stored.iter_mut().for_each(|x| *x = false);
    for n in &c.stored {
        s.stored[n.0] = true;
    }
    s.served_by_ano.iter_mut().for_each(|x| *x = 0.0);
    s.transit_by_ano.iter_mut().for_each(|x| *x = 0.0);
    let root_stored = s.stored[0];
    match &c.routes {
        None => {
            for &v in net.bfs_order().iter().rev() {
                let below: f64 = net.children(v).iter().map(|ch| s.up[ch.0]).sum();
                s.up[v.0] = if s.stored[v.0] { 0.0 } else { s.dem[v.0] + below };
            }
            let into_root = if root_stored { &mut s.served_by_ano } else { &mut s.transit_by_ano };
            for &ch in net.children(NodeId::ROOT) {
                if let Some(a) = net.ano_of(ch) {
                    into_root[a.0] += s.up[ch.0];
                }
            }
        }
        Some(_) => {
            s.up.iter_mut().for_each(|x| *x = 0.0);
            for &l in net.leaves() {
                let d = s.dem[l.0];
                if d == 0.0 {
                    continue;
                }
                let srv = server_of(net, c, &s.stored, l);
                for m in net.path_to_root(l) {
                    if srv == Server::Node(m) {
                        break;
                    }
                    s.up[m.0] += d;
                }
                if let Some(a) = net.ano_of(l) {
                    match srv {
                        Server::Origin => s.transit_by_ano[a.0] += d,
                        Server::Node(m) if m == NodeId::ROOT => s.served_by_ano[a.0] += d,
                        Server::Node(_) => {}
                    }
                }
            }
        }
    }
    acc.add(net, &c.stored, s, root_stored);
}

/// Aggregates of one provider's placement.
pub fn summarize(net: &TreeNetwork, demand: &CpDemand, p: &CpPlacement) -> Result<CpSummary> {
    check_placement(net, demand, p)?;
    Ok(summarize_unchecked(net, demand, p))
}

const CHUNK: usize = 512;

/// Contents are accumulated in fixed-size blocks merged in order, so the
/// result does not depend on the number of worker threads.
pub(crate) fn summarize_unchecked(net: &TreeNetwork, demand: &CpDemand, p: &CpPlacement) -> CpSummary {
    let blocks: Vec<SummaryAcc> = p
        .contents
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(b, chunk)| {
            let mut acc = SummaryAcc::new(net);
            let mut s = ContentScratch::new(net);
            for (i, c) in chunk.iter().enumerate() {
                account_content(net, demand, b * CHUNK + i, c, &mut s, &mut acc);
            }
            acc
        })
        .collect();
    let mut acc = SummaryAcc::new(net);
    for b in &blocks {
        acc.merge(b);
    }
    acc.finish(net, demand, p.cp)
}

/// Savings against a network without caches, at the network's own prices,
/// summed leaf by leaf and content by content.
pub fn utility(net: &TreeNetwork, demand: &DemandModel, placement: &Placement) -> Result<f64> {
    let fs = demand.file_size_gb;
    let mut total = CompensatedSum::new();
    let mut stored = vec![false; net.len()];
    let mut dem = vec![0.0; net.len()];
    for cp in &placement.cps {
        let d = demand.cps.get(cp.cp.0).ok_or_else(|| Error::InvalidPlacement(format!("unknown {}", cp.cp)))?;
        check_placement(net, d, cp)?;
        for (f, c) in cp.contents.iter().enumerate() {
            stored.iter_mut().for_each(|x| *x = false);
            for n in &c.stored {
                stored[n.0] = true;
                total.add(-net.node(*n).storage_price * fs);
            }
            d.fill_file_demand(f, net.leaves(), &mut dem);
            for &l in net.leaves() {
                if dem[l.0] > 0.0 {
                    if let Server::Node(m) = server_of(net, c, &stored, l) {
                        total.add(dem[l.0] * net.path_price(m)?);
                    }
                }
            }
        }
    }
    Ok(total.value())
}

/// Utility computed from provider summaries.
pub fn utility_from_summaries(net: &TreeNetwork, file_size_gb: f64, reports: &[CpSummary]) -> f64 {
    let mut total = CompensatedSum::new();
    for r in reports {
        for n in net.ids() {
            let node = net.node(n);
            total.add(node.uplink_price * (r.offered[n.0] - r.residual[n.0]));
            total.add(-node.storage_price * file_size_gb * r.slots[n.0] as f64);
        }
    }
    total.value()
}

/// Utility attributed to each ANO: the savings on its own links, its share of
/// transit savings, minus its storage and its share of central-office
/// storage.
pub fn utility_by_ano(net: &TreeNetwork, file_size_gb: f64, reports: &[CpSummary]) -> Vec<f64> {
    let root = net.node(NodeId::ROOT);
    (0..net.ano_count())
        .map(|a| {
            let mut u = CompensatedSum::new();
            for r in reports {
                u.add(root.uplink_price * (r.offered_by_ano[a] - r.transit_by_ano[a]));
                u.add(-r.zeta[a] * r.slots[0] as f64 * file_size_gb * root.storage_price);
                for n in net.ano_nodes(AnoId(a)) {
                    let node = net.node(n);
                    u.add(node.uplink_price * (r.offered[n.0] - r.residual[n.0]));
                    u.add(-node.storage_price * file_size_gb * r.slots[n.0] as f64);
                }
            }
            u.value()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Node;

    fn star() -> TreeNetwork {
        // root with one leaf per ANO
        TreeNetwork::new(vec![
            Node::root(0.03, 4.0),
            Node::child(NodeId(0), AnoId(0), 0.0, 0.0),
            Node::child(NodeId(0), AnoId(1), 0.0, 0.0),
        ])
        .unwrap()
    }

    fn demand(net: &TreeNetwork) -> DemandModel {
        let d = CpDemand::explicit(net, 2, &[(NodeId(1), 0, 3.0), (NodeId(2), 0, 1.0), (NodeId(2), 1, 2.0)]).unwrap();
        DemandModel::new(1.0, vec![d]).unwrap()
    }

    #[test]
    fn empty_placement_is_worth_nothing() {
        let net = star();
        let d = demand(&net);
        assert_eq!(utility(&net, &d, &Placement::empty(&d)).unwrap(), 0.0);
    }

    #[test]
    fn single_content_at_the_root() {
        let net = star();
        let d = demand(&net);
        let mut p = Placement::empty(&d);
        p.cps[0].contents[0] = ContentPlacement::nearest(vec![NodeId(0)]);
        let u = utility(&net, &d, &p).unwrap();
        assert_eq!(u, 4.0 * 4.0 - 0.03);
        let s = summarize(&net, d.cp(CpId(0)), &p.cps[0]).unwrap();
        assert_eq!(s.zeta, vec![0.75, 0.25]);
        assert_eq!(s.transit_by_ano, vec![0.0, 2.0]);
        assert_eq!(s.residual[0], 2.0);
        let by_ano = utility_by_ano(&net, 1.0, std::slice::from_ref(&s));
        assert!((by_ano.iter().sum::<f64>() - u).abs() < 1e-12);
        assert!((utility_from_summaries(&net, 1.0, &[s]) - u).abs() < 1e-12);
    }

    #[test]
    fn explicit_routes_are_validated() {
        let net = star();
        let d = demand(&net);
        let mut p = Placement::empty(&d);
        p.cps[0].contents[1] =
            ContentPlacement { stored: vec![], routes: Some(vec![(NodeId(2), Server::Node(NodeId(0)))]) };
        assert!(matches!(utility(&net, &d, &p), Err(Error::InvalidPlacement(_))));
        p.cps[0].contents[1] =
            ContentPlacement { stored: vec![NodeId(1)], routes: Some(vec![(NodeId(2), Server::Node(NodeId(1)))]) };
        assert!(utility(&net, &d, &p).is_err());
    }

    #[test]
    fn explicit_origin_route_ignores_copy() {
        let net = star();
        let d = demand(&net);
        let mut p = Placement::empty(&d);
        p.cps[0].contents[0] = ContentPlacement {
            stored: vec![NodeId(0)],
            routes: Some(vec![(NodeId(1), Server::Node(NodeId(0))), (NodeId(2), Server::Origin)]),
        };
        let u = utility(&net, &d, &p).unwrap();
        assert_eq!(u, 3.0 * 4.0 - 0.03);
        let s = summarize(&net, d.cp(CpId(0)), &p.cps[0]).unwrap();
        assert_eq!(s.zeta, vec![1.0, 0.0]);
        assert_eq!(s.transit_by_ano, vec![0.0, 3.0]);
        assert!((utility_from_summaries(&net, 1.0, &[s]) - u).abs() < 1e-12);
    }

    #[test]
    fn unused_root_copy_is_split_equally() {
        let net = star();
        let d = demand(&net);
        let mut p = Placement::empty(&d);
        p.cps[0].contents[1] = ContentPlacement::nearest(vec![NodeId(0), NodeId(2)]);
        let s = summarize(&net, d.cp(CpId(0)), &p.cps[0]).unwrap();
        assert_eq!(s.zeta, vec![0.5, 0.5]);
    }
}
