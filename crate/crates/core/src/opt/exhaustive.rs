//! Exhaustive solution of small capacity-limited placement problems.
//!
//! Serving a leaf from anything but its nearest copy only adds traffic, so
//! enumerating storage decisions with nearest routing covers every optimum.

use crate::demand::DemandModel;
use crate::error::{Error, Result};
use crate::net::{NodeId, TreeNetwork};

use super::duals::slot_capacity;
use super::placement::{ContentPlacement, CpPlacement, Placement};

pub const EXHAUSTIVE_MAX_BITS: usize = 22;

/// Best feasible placement and its utility, or `None` if nothing is feasible.
pub fn exhaustive_optimum(net: &TreeNetwork, demand: &DemandModel) -> Result<Option<(f64, Placement)>> {
    let n = net.len();
    let fs = demand.file_size_gb;
    let contents: Vec<(usize, usize)> =
        demand.cp_ids().flat_map(|k| (0..demand.cp(k).files()).map(move |f| (k.0, f))).collect();
    let bits = contents.len() * n;
    if bits > EXHAUSTIVE_MAX_BITS {
        return Err(Error::TooLarge { size: bits, limit: EXHAUSTIVE_MAX_BITS });
    }
    let dem: Vec<Vec<f64>> = contents
        .iter()
        .map(|&(k, f)| {
            let mut d = vec![0.0; n];
            demand.cps[k].fill_file_demand(f, net.leaves(), &mut d);
            d
        })
        .collect();
    let slot_cap: Vec<Option<u64>> =
        net.nodes().iter().map(|x| x.storage_cap.finite().map(|s| slot_capacity(s, fs))).collect();
    let mut slots = vec![0u64; n];
    let mut traffic = vec![0.0; n];
    let mut up = vec![0.0; n];
    let mut best: Option<(f64, u64)> = None;
    for mask in 0u64..(1u64 << bits) {
        slots.iter_mut().for_each(|x| *x = 0);
        traffic.iter_mut().for_each(|x| *x = 0.0);
        let mut u = 0.0;
        for (c, d) in dem.iter().enumerate() {
            let stored = |v: NodeId| mask >> (c * n + v.0) & 1 == 1;
            for &v in net.bfs_order().iter().rev() {
                let below: f64 = net.children(v).iter().map(|ch| up[ch.0]).sum();
                let arriving = d[v.0] + below;
                let node = net.node(v);
                if stored(v) {
                    slots[v.0] += 1;
                    u -= node.storage_price * fs;
                    up[v.0] = 0.0;
                } else {
                    up[v.0] = arriving;
                }
            }
            for v in net.ids() {
                traffic[v.0] += up[v.0];
            }
            let mut offered = vec![0.0; n];
            for &v in net.bfs_order().iter().rev() {
                offered[v.0] = d[v.0] + net.children(v).iter().map(|ch| offered[ch.0]).sum::<f64>();
                u += net.node(v).uplink_price * (offered[v.0] - up[v.0]);
            }
        }
        let feasible = net.ids().all(|v| {
            let node = net.node(v);
            slot_cap[v.0].is_none_or(|c| slots[v.0] <= c) && node.uplink_cap.finite().is_none_or(|b| traffic[v.0] <= b)
        });
        if feasible && best.is_none_or(|(b, _)| u > b) {
            best = Some((u, mask));
        }
    }
    Ok(best.map(|(u, mask)| {
        let mut cps: Vec<CpPlacement> = demand.cp_ids().map(|k| CpPlacement::empty(k, demand.cp(k).files())).collect();
        for (c, &(k, f)) in contents.iter().enumerate() {
            let stored = (0..n).filter(|v| mask >> (c * n + v) & 1 == 1).map(NodeId).collect();
            cps[k].contents[f] = ContentPlacement::nearest(stored);
        }
        (u, Placement { cps })
    }))
}
