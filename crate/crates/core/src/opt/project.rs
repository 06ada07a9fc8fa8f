//! Turning an infeasible iterate into a feasible placement.
//!
//! The orchestrator splits every finite storage among providers. Each
//! provider reports the least traffic it can leave on each capacity-limited
//! link within its storage share; links are then split so every provider
//! gets at least that much. Each provider repairs its own placement against
//! its quota using only its private demand. Quotas sum to at most the
//! capacity, so the union of repaired placements is feasible.

use serde::{Deserialize, Serialize};

use crate::demand::{CpDemand, DemandModel};
use crate::error::{Error, Result};
use crate::net::{NodeId, TreeNetwork};
use crate::numeric::apportion;

use super::duals::{slot_capacity, Usage};
use super::placement::{
    summarize, summarize_unchecked, utility_from_summaries, ContentPlacement, CpPlacement, CpSummary, Placement,
};

/// Storage share of one provider, in whole contents, per node.
pub type SlotQuota = Vec<Option<u64>>;

/// One provider's share of every finite resource.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpQuota {
    pub slots: SlotQuota,
    pub bandwidth: Vec<Option<f64>>,
}

/// Exact capacity check: whole contents against whole-content capacity, and
/// summed traffic against link capacity with no tolerance.
pub fn is_feasible(net: &TreeNetwork, file_size_gb: f64, usage: &Usage) -> bool {
    net.ids().all(|n| {
        let node = net.node(n);
        let s_ok = node.storage_cap.finite().is_none_or(|s| usage.slots[n.0] <= slot_capacity(s, file_size_gb));
        let b_ok = node.uplink_cap.finite().is_none_or(|b| usage.traffic[n.0] <= b);
        s_ok && b_ok
    })
}

pub fn reports_feasible(net: &TreeNetwork, file_size_gb: f64, reports: &[CpSummary]) -> bool {
    is_feasible(net, file_size_gb, &Usage::of(net, reports))
}

// Keeps the summed bandwidth quotas strictly inside the capacity.
const QUOTA_MARGIN: f64 = 1.0 - 1e-12;

/// Splits each finite storage in whole contents by largest remainder of
/// `weights[k][n]`.
pub fn split_storage(net: &TreeNetwork, file_size_gb: f64, weights: &[Vec<f64>]) -> Vec<SlotQuota> {
    let mut out = vec![vec![None; net.len()]; weights.len()];
    for n in net.ids() {
        if let Some(s) = net.node(n).storage_cap.finite() {
            let cap = slot_capacity(s, file_size_gb);
            let w: Vec<f64> = weights.iter().map(|r| r[n.0]).collect();
            for (q, share) in out.iter_mut().zip(apportion(cap, &w)) {
                q[n.0] = Some(share);
            }
        }
    }
    out
}

/// Splits each finite link: provider `k` gets `least[k][n]` plus a part of
/// the slack proportional to `weights[k][n]` (equal parts if all are zero).
///
/// `None` when the least traffic alone overloads some link.
pub fn split_bandwidth(
    net: &TreeNetwork,
    slots: &[SlotQuota],
    least: &[Vec<Option<f64>>],
    weights: &[Vec<f64>],
) -> Option<Vec<CpQuota>> {
    let k = slots.len();
    let mut out: Vec<CpQuota> =
        slots.iter().map(|s| CpQuota { slots: s.clone(), bandwidth: vec![None; net.len()] }).collect();
    for n in net.ids() {
        let Some(b) = net.node(n).uplink_cap.finite() else { continue };
        let floor: Vec<f64> = least.iter().map(|r| r[n.0].unwrap_or(0.0)).collect();
        let need: f64 = floor.iter().sum();
        if need > b {
            return None;
        }
        let slack = (b - need) * QUOTA_MARGIN;
        let w: Vec<f64> = weights.iter().map(|r| r[n.0]).collect();
        let wsum: f64 = w.iter().sum();
        for (i, q) in out.iter_mut().enumerate() {
            let part = if wsum > 0.0 { w[i] / wsum } else { 1.0 / k as f64 };
            q.bandwidth[n.0] = Some(floor[i] + slack * part);
        }
    }
    Some(out)
}

/// Quotas for a single round. Storage is split by current use or, failing
/// that, by offered traffic; links by what each provider can reach and then
/// by current traffic. `None` if neither split leaves room on every link.
pub fn fair_quotas(
    net: &TreeNetwork,
    demand: &DemandModel,
    placement: &Placement,
    reports: &[CpSummary],
) -> Option<Vec<CpQuota>> {
    let fs = demand.file_size_gb;
    let used: Vec<Vec<f64>> = reports.iter().map(|r| r.slots.iter().map(|&x| x as f64).collect()).collect();
    let offered: Vec<Vec<f64>> = reports.iter().map(|r| r.offered.clone()).collect();
    let traffic: Vec<Vec<f64>> = reports.iter().map(|r| r.residual.clone()).collect();
    [used, offered].iter().find_map(|w| {
        let slots = split_storage(net, fs, w);
        let least: Vec<Vec<Option<f64>>> =
            placement.cps.iter().zip(&slots).map(|(p, q)| least_traffic(net, demand.cp(p.cp), p, q)).collect();
        split_bandwidth(net, &slots, &least, &traffic)
    })
}

/// Dense per-content state of one provider's placement with nearest routing.
#[derive(Debug, Clone)]
struct RepairState<'a> {
    net: &'a TreeNetwork,
    n: usize,
    /// Traffic for content `f` arriving at node `n` from below, own demand included.
    inc: Vec<f64>,
    stored: Vec<bool>,
    /// Uplink traffic per node.
    lam: Vec<f64>,
    count: Vec<u64>,
}

impl<'a> RepairState<'a> {
    fn new(net: &'a TreeNetwork, demand: &CpDemand, p: &CpPlacement) -> Self {
        let n = net.len();
        let files = p.contents.len();
        let mut st = RepairState {
            net,
            n,
            inc: vec![0.0; files * n],
            stored: vec![false; files * n],
            lam: vec![0.0; n],
            count: vec![0; n],
        };
        let mut dem = vec![0.0; n];
        for (f, c) in p.contents.iter().enumerate() {
            for m in &c.stored {
                st.stored[f * n + m.0] = true;
                st.count[m.0] += 1;
            }
            demand.fill_file_demand(f, net.leaves(), &mut dem);
            for &v in net.bfs_order().iter().rev() {
                let below: f64 = net.children(v).iter().map(|c| st.res(f, *c)).sum();
                st.inc[f * n + v.0] = dem[v.0] + below;
            }
            for v in 0..n {
                st.lam[v] += st.res(f, NodeId(v));
            }
        }
        st
    }

    fn files(&self) -> usize {
        self.inc.len() / self.n.max(1)
    }

    #[inline]
    fn inc(&self, f: usize, v: NodeId) -> f64 {
        self.inc[f * self.n + v.0]
    }

    #[inline]
    fn is_stored(&self, f: usize, v: NodeId) -> bool {
        self.stored[f * self.n + v.0]
    }

    #[inline]
    fn res(&self, f: usize, v: NodeId) -> f64 {
        if self.is_stored(f, v) {
            0.0
        } else {
            self.inc(f, v)
        }
    }

    fn propagate(&mut self, f: usize, from: Option<NodeId>, delta: f64) {
        let mut cur = from;
        while let Some(m) = cur {
            self.inc[f * self.n + m.0] += delta;
            if self.is_stored(f, m) {
                break;
            }
            self.lam[m.0] += delta;
            cur = self.net.parent(m);
        }
    }

    fn store(&mut self, f: usize, v: NodeId) {
        debug_assert!(!self.is_stored(f, v));
        let d = self.inc(f, v);
        self.stored[f * self.n + v.0] = true;
        self.count[v.0] += 1;
        self.lam[v.0] -= d;
        self.propagate(f, self.net.parent(v), -d);
    }

    fn evict(&mut self, f: usize, v: NodeId) {
        debug_assert!(self.is_stored(f, v));
        let d = self.inc(f, v);
        self.stored[f * self.n + v.0] = false;
        self.count[v.0] -= 1;
        self.lam[v.0] += d;
        self.propagate(f, self.net.parent(v), d);
    }

    fn stored_at(&self, v: NodeId) -> Vec<usize> {
        (0..self.files()).filter(|&f| self.is_stored(f, v)).collect()
    }

    /// Fixed price per unit of traffic from `v` up to the nearest copy strictly
    /// above it, root uplink included when there is none.
    fn cost_above(&self, f: usize, v: NodeId) -> f64 {
        let mut c = 0.0;
        let mut cur = Some(v);
        while let Some(m) = cur {
            c += self.net.node(m).uplink_price;
            cur = self.net.parent(m);
            if let Some(p) = cur {
                if self.is_stored(f, p) {
                    break;
                }
            }
        }
        c
    }

    /// Utility change of storing `f` at `v` (or lost by evicting it).
    fn value(&self, f: usize, v: NodeId, file_size_gb: f64) -> f64 {
        self.inc(f, v) * self.cost_above(f, v) - self.net.node(v).storage_price * file_size_gb
    }

    fn nearest_copy_above(&self, f: usize, v: NodeId) -> Option<NodeId> {
        let mut cur = self.net.parent(v);
        while let Some(m) = cur {
            if self.is_stored(f, m) {
                return Some(m);
            }
            cur = self.net.parent(m);
        }
        None
    }

    /// Utility change of storing `f` at `v`, counting the saving from dropping
    /// a copy above that would no longer pay for itself.
    fn gain(&self, f: usize, v: NodeId, file_size_gb: f64) -> f64 {
        let base = self.value(f, v, file_size_gb);
        let Some(u) = self.nearest_copy_above(f, v) else { return base };
        let after =
            (self.inc(f, u) - self.inc(f, v)) * self.cost_above(f, u) - self.net.node(u).storage_price * file_size_gb;
        base + (-after).max(0.0)
    }

    /// Utility lost by evicting `f` from `v`, net of the best new copy that
    /// would then pay for itself between `v` and the next copy above.
    fn loss(&self, f: usize, v: NodeId, quota: &CpQuota, file_size_gb: f64) -> f64 {
        let base = self.value(f, v, file_size_gb);
        let d = self.inc(f, v);
        let mut best = 0.0_f64;
        let mut cur = self.net.parent(v);
        while let Some(w) = cur {
            if self.is_stored(f, w) {
                break;
            }
            if self.has_room(w, quota) {
                let g = (self.inc(f, w) + d) * self.cost_above(f, w) - self.net.node(w).storage_price * file_size_gb;
                best = best.max(g);
            }
            cur = self.net.parent(w);
        }
        base - best
    }

    fn path_within(&self, v: NodeId, quota: &CpQuota) -> bool {
        self.net.path_to_root(v).all(|m| quota.bandwidth[m.0].is_none_or(|q| self.lam[m.0] <= q))
    }

    fn has_room(&self, v: NodeId, quota: &CpQuota) -> bool {
        quota.slots[v.0].is_none_or(|q| self.count[v.0] < q)
    }

    fn into_placement(self, cp: crate::CpId) -> CpPlacement {
        let files = self.files();
        let contents = (0..files)
            .map(|f| {
                let stored = (0..self.n).filter(|&v| self.stored[f * self.n + v]).map(NodeId).collect();
                ContentPlacement { stored, routes: None }
            })
            .collect();
        CpPlacement { cp, contents }
    }
}

fn evict_overflow(st: &mut RepairState, slots: &SlotQuota) {
    // Drop the copies absorbing the least traffic.
    for &v in st.net.bfs_order() {
        let Some(q) = slots[v.0] else { continue };
        if st.count[v.0] <= q {
            continue;
        }
        let mut held = st.stored_at(v);
        held.sort_by(|&a, &b| st.inc(a, v).total_cmp(&st.inc(b, v)).then(b.cmp(&a)));
        let excess = (st.count[v.0] - q) as usize;
        for &f in &held[..excess] {
            st.evict(f, v);
        }
    }
}

fn tighten(st: &mut RepairState, slots: &SlotQuota) {
    let net = st.net;
    for &v in net.bfs_order().iter().rev() {
        if !net.node(v).uplink_cap.is_finite() && slots[v.0].is_none() {
            continue;
        }
        let mut want: Vec<usize> = (0..st.files()).filter(|&f| st.inc(f, v) > 0.0).collect();
        want.sort_by(|&a, &b| st.inc(b, v).total_cmp(&st.inc(a, v)).then(a.cmp(&b)));
        if let Some(q) = slots[v.0] {
            want.truncate(q as usize);
        }
        let mut keep = vec![false; st.files()];
        for &f in &want {
            keep[f] = true;
        }
        for f in st.stored_at(v) {
            if !keep[f] {
                st.evict(f, v);
            }
        }
        for f in want {
            if !st.is_stored(f, v) {
                st.store(f, v);
            }
        }
    }
}

/// The placement left by [`Repairer::tight_placement`] for a fresh placement.
pub fn tight_placement(
    net: &TreeNetwork,
    demand: &CpDemand,
    placement: &CpPlacement,
    slots: &SlotQuota,
) -> CpPlacement {
    Repairer::new(net, demand, 0.0, placement).tight_placement(slots)
}

/// See [`Repairer::least_traffic`].
pub fn least_traffic(
    net: &TreeNetwork,
    demand: &CpDemand,
    placement: &CpPlacement,
    slots: &SlotQuota,
) -> Vec<Option<f64>> {
    Repairer::new(net, demand, 0.0, placement).least_traffic(slots)
}

/// Greedy link repair: cache the heaviest crossing contents at the link's
/// lower end, swapping out lighter copies when full.
fn fix_links(st: &mut RepairState, quota: &CpQuota) -> std::result::Result<(), NodeId> {
    let net = st.net;
    let files = st.files();
    for &v in net.bfs_order().iter().rev() {
        let Some(bq) = quota.bandwidth[v.0] else { continue };
        if st.lam[v.0] <= bq {
            continue;
        }
        let mut cand: Vec<usize> = (0..files).filter(|&f| !st.is_stored(f, v) && st.inc(f, v) > 0.0).collect();
        cand.sort_by(|&a, &b| st.inc(b, v).total_cmp(&st.inc(a, v)).then(a.cmp(&b)));
        let mut held = st.stored_at(v);
        held.sort_by(|&a, &b| st.inc(a, v).total_cmp(&st.inc(b, v)).then(b.cmp(&a)));
        let (mut ci, mut hi) = (0, 0);
        while st.lam[v.0] > bq {
            let Some(&f) = cand.get(ci) else { return Err(v) };
            ci += 1;
            if st.has_room(v, quota) {
                st.store(f, v);
            } else if hi < held.len() && st.inc(held[hi], v) < st.inc(f, v) {
                st.evict(held[hi], v);
                hi += 1;
                st.store(f, v);
            } else {
                return Err(v);
            }
        }
    }
    Ok(())
}

const IMPROVE_PASSES: usize = 8;

/// Spare quota: add profitable copies, then swap while it pays.
fn fill_and_swap(st: &mut RepairState, quota: &CpQuota, file_size_gb: f64) -> bool {
    let net = st.net;
    let mut changed = false;
    for &v in net.bfs_order().iter().rev() {
        let mut cand: Vec<(f64, usize)> = (0..st.files())
            .filter(|&f| !st.is_stored(f, v))
            .map(|f| (st.gain(f, v, file_size_gb), f))
            .filter(|&(x, _)| x > 0.0)
            .collect();
        if cand.is_empty() {
            continue;
        }
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut ci = 0;
        while ci < cand.len() && st.has_room(v, quota) {
            st.store(cand[ci].1, v);
            changed = true;
            ci += 1;
        }
        if ci == cand.len() || quota.slots[v.0].is_none() {
            continue;
        }
        let mut held: Vec<(f64, usize)> =
            st.stored_at(v).into_iter().map(|f| (st.loss(f, v, quota, file_size_gb), f)).collect();
        held.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
        for &(gain, f) in &cand[ci..] {
            let Some(&(loss, g)) = held.first() else { break };
            if gain <= loss {
                break;
            }
            st.evict(g, v);
            st.store(f, v);
            if !st.path_within(v, quota) {
                st.evict(f, v);
                st.store(g, v);
                break;
            }
            changed = true;
            held.remove(0);
        }
    }
    changed
}

/// Evicts copies that cost more than they save.
fn drop_unprofitable(st: &mut RepairState, quota: &CpQuota, file_size_gb: f64) -> bool {
    let net = st.net;
    let mut changed = false;
    for &v in net.bfs_order() {
        if net.node(v).storage_price <= 0.0 {
            continue;
        }
        for f in st.stored_at(v) {
            if st.value(f, v, file_size_gb) < 0.0 {
                st.evict(f, v);
                if st.path_within(v, quota) {
                    changed = true;
                } else {
                    st.store(f, v);
                }
            }
        }
    }
    changed
}

/// See [`Repairer::repair`].
pub fn repair_cp(
    net: &TreeNetwork,
    demand: &CpDemand,
    file_size_gb: f64,
    placement: &CpPlacement,
    quota: &CpQuota,
) -> std::result::Result<CpPlacement, NodeId> {
    Repairer::new(net, demand, file_size_gb, placement).repair(quota)
}

/// Repairs of one provider's placement against several quotas, sharing the
/// work that depends only on the placement.
#[derive(Debug, Clone)]
pub struct Repairer<'a> {
    net: &'a TreeNetwork,
    demand: &'a CpDemand,
    file_size_gb: f64,
    cp: crate::CpId,
    base: RepairState<'a>,
    tight: Vec<(SlotQuota, RepairState<'a>)>,
}

impl<'a> Repairer<'a> {
    pub fn new(net: &'a TreeNetwork, demand: &'a CpDemand, file_size_gb: f64, placement: &CpPlacement) -> Self {
        Repairer {
            net,
            demand,
            file_size_gb,
            cp: placement.cp,
            base: RepairState::new(net, demand, placement),
            tight: Vec::new(),
        }
    }

    fn tight(&mut self, slots: &SlotQuota) -> &RepairState<'a> {
        let i = match self.tight.iter().position(|(s, _)| s == slots) {
            Some(i) => i,
            None => {
                let mut st = self.base.clone();
                evict_overflow(&mut st, slots);
                tighten(&mut st, slots);
                self.tight.push((slots.clone(), st));
                self.tight.len() - 1
            }
        };
        &self.tight[i].1
    }

    /// Within the storage share, with the least traffic this heuristic
    /// reaches on every capacity-limited link: bottom-up, each capped node
    /// keeps exactly the contents with the most traffic arriving there.
    pub fn tight_placement(&mut self, slots: &SlotQuota) -> CpPlacement {
        let cp = self.cp;
        self.tight(slots).clone().into_placement(cp)
    }

    /// Residual traffic of the tight placement on every capacity-limited link.
    pub fn least_traffic(&mut self, slots: &SlotQuota) -> Vec<Option<f64>> {
        let (net, demand) = (self.net, self.demand);
        let s = summarize_unchecked(net, demand, &self.tight_placement(slots));
        net.ids().map(|n| net.node(n).uplink_cap.is_finite().then_some(s.residual[n.0])).collect()
    }

    /// Brings the placement within `quota`, then spends any spare quota on
    /// contents that increase utility at fixed prices.
    ///
    /// Local search runs from two starts, the greedy link repair of the
    /// placement and the tight placement, and the better result is kept.
    /// Fails with the first node whose bandwidth quota is below what the
    /// tight placement leaves.
    pub fn repair(&mut self, quota: &CpQuota) -> std::result::Result<CpPlacement, NodeId> {
        let (net, demand, fs) = (self.net, self.demand, self.file_size_gb);
        let tight = self.tight(&quota.slots).clone();
        if let Some(v) = net.ids().find(|v| quota.bandwidth[v.0].is_some_and(|q| tight.lam[v.0] > q)) {
            return Err(v);
        }
        let mut starts = vec![tight];
        let mut st = self.base.clone();
        evict_overflow(&mut st, &quota.slots);
        if fix_links(&mut st, quota).is_ok() {
            starts.push(st);
        }
        let mut best: Option<(f64, CpPlacement)> = None;
        for mut st in starts {
            // A copy made or dropped at one node changes what the others are
            // worth, so the local moves repeat until none pays.
            for _ in 0..IMPROVE_PASSES {
                let mut changed = fill_and_swap(&mut st, quota, fs);
                changed |= drop_unprofitable(&mut st, quota, fs);
                if !changed {
                    break;
                }
            }
            let p = st.into_placement(self.cp);
            let u = utility_from_summaries(net, fs, &[summarize_unchecked(net, demand, &p)]);
            if best.as_ref().is_none_or(|(b, _)| u > *b) {
                best = Some((u, p));
            }
        }
        Ok(best.expect("at least one start").1)
    }
}

/// Repairs every provider against quotas from [`fair_quotas`] and checks
/// the union.
pub fn project_to_feasible(net: &TreeNetwork, demand: &DemandModel, placement: &Placement) -> Result<Placement> {
    let fs = demand.file_size_gb;
    let summaries = |p: &Placement| -> Result<Vec<CpSummary>> {
        p.cps.iter().map(|c| summarize(net, demand.cp(c.cp), c)).collect()
    };
    let reports = summaries(placement)?;
    if reports_feasible(net, fs, &reports) {
        return Ok(placement.clone());
    }
    let first_overload = |reports: &[CpSummary]| {
        let usage = Usage::of(net, reports);
        net.ids()
            .find(|n| net.node(*n).uplink_cap.finite().is_some_and(|b| usage.traffic[n.0] > b))
            .unwrap_or(NodeId::ROOT)
    };
    let Some(quotas) = fair_quotas(net, demand, placement, &reports) else {
        return Err(Error::InfeasibleScenario { node: first_overload(&reports) });
    };
    let mut out = Vec::with_capacity(placement.cps.len());
    for (p, q) in placement.cps.iter().zip(&quotas) {
        let fixed = repair_cp(net, demand.cp(p.cp), fs, p, q).map_err(|node| Error::InfeasibleScenario { node })?;
        out.push(fixed);
    }
    let repaired = Placement { cps: out };
    let reports = summaries(&repaired)?;
    if !reports_feasible(net, fs, &reports) {
        return Err(Error::InfeasibleScenario { node: first_overload(&reports) });
    }
    Ok(repaired)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{AnoId, Capacity, Node};
    use crate::opt::placement::utility;
    use crate::CpId;

    fn leaf_capped(slots: f64) -> TreeNetwork {
        TreeNetwork::new(vec![
            Node::root(0.03, 4.0),
            Node::child(NodeId(0), AnoId(0), 0.0, 0.0).with_caps(Capacity::Finite(slots), Capacity::Unbounded),
        ])
        .unwrap()
    }

    #[test]
    fn feasible_placement_is_unchanged() {
        let net = leaf_capped(1.0);
        let d = DemandModel::new(
            1.0,
            vec![CpDemand::explicit(&net, 2, &[(NodeId(1), 0, 3.0), (NodeId(1), 1, 1.0)]).unwrap()],
        )
        .unwrap();
        let mut p = Placement::empty(&d);
        p.cps[0].contents[0] = ContentPlacement::nearest(vec![NodeId(1)]);
        assert_eq!(project_to_feasible(&net, &d, &p).unwrap(), p);
    }

    #[test]
    fn overflow_evicts_less_useful_file() {
        let net = leaf_capped(1.0);
        let d = DemandModel::new(
            1.0,
            vec![CpDemand::explicit(&net, 2, &[(NodeId(1), 0, 3.0), (NodeId(1), 1, 1.0)]).unwrap()],
        )
        .unwrap();
        let mut p = Placement::empty(&d);
        p.cps[0].contents[0] = ContentPlacement::nearest(vec![NodeId(1)]);
        p.cps[0].contents[1] = ContentPlacement::nearest(vec![NodeId(1)]);
        let q = project_to_feasible(&net, &d, &p).unwrap();
        assert_eq!(q.cps[0].contents[0].stored, vec![NodeId(1)]);
        // File 1 is worth caching at the root once evicted from the leaf.
        assert_eq!(q.cps[0].contents[1].stored, vec![NodeId(0)]);
        assert!(utility(&net, &d, &q).unwrap() <= utility(&net, &d, &p).unwrap());
    }

    #[test]
    fn link_overflow_is_cached_away() {
        let net = TreeNetwork::new(vec![
            Node::root(0.03, 4.0),
            Node::child(NodeId(0), AnoId(0), 0.0, 0.0).with_caps(Capacity::Finite(1.0), Capacity::Finite(2.0)),
        ])
        .unwrap();
        let d = DemandModel::new(
            1.0,
            vec![CpDemand::explicit(&net, 2, &[(NodeId(1), 0, 3.0), (NodeId(1), 1, 1.0)]).unwrap()],
        )
        .unwrap();
        let p = Placement::empty(&d);
        let q = project_to_feasible(&net, &d, &p).unwrap();
        assert_eq!(q.cps[0].contents[0].stored, vec![NodeId(1)]);
    }

    #[test]
    fn impossible_link_reports_node() {
        let net = TreeNetwork::new(vec![
            Node::root(0.03, 4.0),
            Node::child(NodeId(0), AnoId(0), 0.0, 0.0).with_caps(Capacity::Finite(1.0), Capacity::Finite(0.5)),
        ])
        .unwrap();
        let d = DemandModel::new(
            1.0,
            vec![CpDemand::explicit(&net, 2, &[(NodeId(1), 0, 3.0), (NodeId(1), 1, 1.0)]).unwrap()],
        )
        .unwrap();
        let err = project_to_feasible(&net, &d, &Placement::empty(&d)).unwrap_err();
        assert!(matches!(err, Error::InfeasibleScenario { node } if node == NodeId(1)));
    }

    #[test]
    fn storage_split_respects_capacity() {
        let net = leaf_capped(3.0);
        let q = split_storage(&net, 1.0, &[vec![0.0, 4.0], vec![0.0, 2.0]]);
        assert_eq!(q[0][1].unwrap() + q[1][1].unwrap(), 3);
        assert_eq!(q[0][1], Some(2));
        assert_eq!(q[0][0], None);
        let q = split_storage(&net, 1.0, &[vec![0.0, 1.0], vec![0.0, 0.0]]);
        assert_eq!(q[0][1], Some(3));
    }

    #[test]
    fn bandwidth_split_covers_least_traffic() {
        let net = TreeNetwork::new(vec![
            Node::root(0.03, 4.0),
            Node::child(NodeId(0), AnoId(0), 0.0, 0.0).with_caps(Capacity::Finite(2.0), Capacity::Finite(3.0)),
        ])
        .unwrap();
        let slots = vec![vec![None, Some(1)], vec![None, Some(1)]];
        let q = split_bandwidth(
            &net,
            &slots,
            &[vec![None, Some(1.0)], vec![None, Some(0.5)]],
            &[vec![0.0; 2], vec![0.0; 2]],
        )
        .unwrap();
        assert_eq!(q[0].bandwidth[0], None);
        let (a, b) = (q[0].bandwidth[1].unwrap(), q[1].bandwidth[1].unwrap());
        assert!(a >= 1.0 && b >= 0.5 && a + b <= 3.0);
        assert!((a - 1.75).abs() < 1e-9);
        assert!(split_bandwidth(
            &net,
            &slots,
            &[vec![None, Some(2.0)], vec![None, Some(1.5)]],
            &[vec![0.0; 2], vec![0.0; 2]]
        )
        .is_none());
    }

    #[test]
    fn two_providers_share_a_small_leaf() {
        // Proportional shares would leave the first provider short of bandwidth;
        // least-traffic shares do not.
        let net = TreeNetwork::new(vec![
            Node::root(1.9, 4.0),
            Node::child(NodeId(0), AnoId(0), 0.0, 0.0).with_caps(Capacity::Finite(2.0), Capacity::Finite(2.886)),
        ])
        .unwrap();
        let l = NodeId(1);
        let d = DemandModel::new(
            1.0,
            vec![
                CpDemand::explicit(&net, 3, &[(l, 0, 1.24), (l, 1, 0.9), (l, 2, 0.66)]).unwrap(),
                CpDemand::explicit(&net, 3, &[(l, 0, 0.35), (l, 1, 0.1), (l, 2, 0.15)]).unwrap(),
            ],
        )
        .unwrap();
        let mut p = Placement::empty(&d);
        for c in &mut p.cps {
            for f in &mut c.contents {
                *f = ContentPlacement::nearest(vec![l]);
            }
        }
        let q = project_to_feasible(&net, &d, &p).unwrap();
        let r: Vec<CpSummary> = q.cps.iter().map(|c| summarize(&net, d.cp(c.cp), c).unwrap()).collect();
        assert!(reports_feasible(&net, 1.0, &r));
    }

    #[test]
    fn tight_placement_keeps_heaviest() {
        let net = TreeNetwork::new(vec![
            Node::root(0.03, 4.0),
            Node::child(NodeId(0), AnoId(0), 0.0, 0.0).with_caps(Capacity::Finite(1.0), Capacity::Finite(9.0)),
        ])
        .unwrap();
        let d = CpDemand::explicit(&net, 2, &[(NodeId(1), 0, 3.0), (NodeId(1), 1, 1.0)]).unwrap();
        let p = CpPlacement::empty(CpId(0), 2);
        let t = tight_placement(&net, &d, &p, &vec![None, Some(1)]);
        assert_eq!(t.contents[0].stored, vec![NodeId(1)]);
        assert!(t.contents[1].stored.is_empty());
        assert_eq!(least_traffic(&net, &d, &p, &vec![None, Some(1)]), vec![None, Some(1.0)]);
    }
}
