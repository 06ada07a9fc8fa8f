//! End-of-day payments between access operators and providers.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::net::{AnoId, CpId, NodeId, TreeNetwork};
use crate::numeric::CompensatedSum;

use super::duals::Duals;
use super::placement::CpSummary;

/// Measured peak traffic per provider. Defaults to the forecast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasuredTraffic {
    /// `leaf[k][n]`: demand of provider `k` at leaf `n` (zero elsewhere).
    pub leaf: Vec<Vec<f64>>,
    /// `residual[k][n]`: traffic left on the uplink of node `n`.
    pub residual: Vec<Vec<f64>>,
    /// `transit[k][a]`: transit traffic caused by ANO `a`.
    pub transit: Vec<Vec<f64>>,
}

impl MeasuredTraffic {
    /// Echo of what the providers forecast in their reports.
    pub fn forecast(net: &TreeNetwork, reports: &[CpSummary]) -> Self {
        MeasuredTraffic {
            leaf: reports
                .iter()
                .map(|r| net.ids().map(|n| if net.is_leaf(n) { r.offered[n.0] } else { 0.0 }).collect())
                .collect(),
            residual: reports.iter().map(|r| r.residual.clone()).collect(),
            transit: reports.iter().map(|r| r.transit_by_ano.clone()).collect(),
        }
    }

    fn check(&self, net: &TreeNetwork, cps: usize) -> Result<()> {
        if self.leaf.len() != cps || self.residual.len() != cps || self.transit.len() != cps {
            return Err(invalid("measured traffic needs one row per provider"));
        }
        let shapes = self.leaf.iter().chain(&self.residual).all(|r| r.len() == net.len())
            && self.transit.iter().all(|r| r.len() == net.ano_count());
        if !shapes {
            return Err(invalid("measured traffic rows have the wrong length"));
        }
        let all = self.leaf.iter().chain(&self.residual).chain(&self.transit).flatten();
        if all.clone().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(invalid("measured traffic must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettlementRow {
    pub ano: AnoId,
    pub cp: CpId,
    pub share: f64,
    /// Saving of the ANO attributable to this provider's caches.
    pub saving: f64,
    pub subsidy: f64,
    /// Paid by the ANO for the provider's storage at its own elastic nodes.
    pub storage_payment: f64,
    /// ANO's share of the provider's central-office storage.
    pub co_storage_payment: f64,
    /// Paid by the ANO for the provider's remaining transit.
    pub transit_payment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settlement {
    pub rows: Vec<SettlementRow>,
}

impl Settlement {
    pub fn subsidy(&self, a: AnoId, k: CpId) -> Option<f64> {
        self.rows.iter().find(|r| r.ano == a && r.cp == k).map(|r| r.subsidy)
    }

    pub fn cp_total(&self, k: CpId) -> f64 {
        self.rows.iter().filter(|r| r.cp == k).map(|r| r.subsidy).sum()
    }
}

/// Subsidy of ANO `a` to provider `k`:
///
/// `r_ak * [ sum_l T_lk P(l) - sum_n L_nk (b_n + beta_n) - L_0ak b_0
///           - sum_n C_nk (s_n + sigma_n) - zeta_ak C_0k s_0 ]`
///
/// where `l` ranges over the ANO's leaves, `n` over its nodes, `P(l)` is the
/// price of the path from `l` to the origin at `b + beta`, and `C` is in GB.
/// With zero prices on capacity-limited resources this is the familiar
/// shadow-price form.
pub fn settle(
    net: &TreeNetwork,
    file_size_gb: f64,
    reports: &[CpSummary],
    measured: &MeasuredTraffic,
    shares: &[Vec<f64>],
    duals: &Duals,
) -> Result<Settlement> {
    measured.check(net, reports.len())?;
    duals.check(net)?;
    if shares.len() != net.ano_count() || shares.iter().any(|r| r.len() != reports.len()) {
        return Err(invalid("shares need one row per ANO and one column per provider"));
    }
    if shares.iter().flatten().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(invalid("shares must lie in [0, 1]"));
    }
    let link = |n: NodeId| net.node(n).uplink_price + duals.beta_at(n);
    let mut path = vec![0.0; net.len()];
    for &v in net.bfs_order() {
        path[v.0] = link(v) + net.parent(v).map_or(0.0, |p| path[p.0]);
    }
    let root = net.node(NodeId::ROOT);
    let mut rows = Vec::new();
    for a in (0..net.ano_count()).map(AnoId) {
        for (k, r) in reports.iter().enumerate() {
            let mut bracket = CompensatedSum::new();
            for l in net.ano_leaves(a) {
                bracket.add(measured.leaf[k][l.0] * path[l.0]);
            }
            let mut storage = CompensatedSum::new();
            for n in net.ano_nodes(a) {
                bracket.add(-measured.residual[k][n.0] * link(n));
                let gb = r.slots[n.0] as f64 * file_size_gb;
                bracket.add(-gb * (net.node(n).storage_price + duals.sigma_at(n)));
                storage.add(gb * net.node(n).storage_price);
            }
            let transit = measured.transit[k][a.0] * root.uplink_price;
            let co = r.zeta[a.0] * r.slots[0] as f64 * file_size_gb * root.storage_price;
            bracket.add(-transit);
            bracket.add(-co);
            let share = shares[a.0][k];
            let saving = bracket.value();
            rows.push(SettlementRow {
                ano: a,
                cp: r.cp,
                share,
                saving,
                subsidy: share * saving,
                storage_payment: storage.value(),
                co_storage_payment: co,
                transit_payment: transit,
            });
        }
    }
    Ok(Settlement { rows })
}
