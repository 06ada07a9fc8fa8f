//! Shadow prices of the capacity-limited resources and the dual function.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::net::{AnoId, Capacity, NodeId, TreeNetwork};
use crate::numeric::CompensatedSum;
use crate::ufl::UflPrices;

use super::placement::{utility_from_summaries, CpSummary};

/// Shadow prices. Resources with unbounded capacity have no entry (`None`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Duals {
    /// $/(Mb/s)/month per uplink.
    pub beta: Vec<Option<f64>>,
    /// $/GB/month per storage.
    pub sigma: Vec<Option<f64>>,
}

impl Duals {
    /// Zero prices on every finite resource.
    pub fn zero(net: &TreeNetwork) -> Self {
        let pick = |c: Capacity| c.is_finite().then_some(0.0);
        Duals {
            beta: net.nodes().iter().map(|n| pick(n.uplink_cap)).collect(),
            sigma: net.nodes().iter().map(|n| pick(n.storage_cap)).collect(),
        }
    }

    pub fn beta_at(&self, n: NodeId) -> f64 {
        self.beta[n.0].unwrap_or(0.0)
    }

    pub fn sigma_at(&self, n: NodeId) -> f64 {
        self.sigma[n.0].unwrap_or(0.0)
    }

    pub fn check(&self, net: &TreeNetwork) -> Result<()> {
        if self.beta.len() != net.len() || self.sigma.len() != net.len() {
            return Err(invalid("duals need one entry per node"));
        }
        let all = self.beta.iter().chain(&self.sigma).flatten();
        if all.clone().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(invalid("shadow prices must be finite and >= 0"));
        }
        Ok(())
    }

    /// Copies this ANO's entries from `other`.
    pub fn adopt(&mut self, net: &TreeNetwork, a: AnoId, other: &Duals) {
        for n in net.ano_nodes(a) {
            self.beta[n.0] = other.beta[n.0];
            self.sigma[n.0] = other.sigma[n.0];
        }
    }

    /// Per-content prices a provider sees: storage `(s + sigma) * size`,
    /// links `b + beta`.
    pub fn ufl_prices(&self, net: &TreeNetwork, file_size_gb: f64) -> UflPrices {
        UflPrices {
            open_cost: net.ids().map(|n| (net.node(n).storage_price + self.sigma_at(n)) * file_size_gb).collect(),
            link_cost: net.ids().map(|n| net.node(n).uplink_price + self.beta_at(n)).collect(),
        }
    }
}

/// Whole contents that fit in a storage capacity. A small relative tolerance
/// absorbs decimal capacities such as 2 GB of 1 MB files.
pub fn slot_capacity(cap_gb: f64, file_size_gb: f64) -> u64 {
    let x = cap_gb / file_size_gb;
    (x * (1.0 + 1e-12)).floor() as u64
}

/// Total usage of every resource over all providers, summed in report order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    pub slots: Vec<u64>,
    pub traffic: Vec<f64>,
}

impl Usage {
    pub fn of(net: &TreeNetwork, reports: &[CpSummary]) -> Self {
        let mut slots = vec![0u64; net.len()];
        let mut traffic = vec![0.0; net.len()];
        for r in reports {
            for n in 0..net.len() {
                slots[n] += r.slots[n];
                traffic[n] += r.residual[n];
            }
        }
        Usage { slots, traffic }
    }
}

/// Subgradient of the dual function: usage minus capacity on finite resources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subgradient {
    pub bandwidth: Vec<Option<f64>>,
    pub storage: Vec<Option<f64>>,
}

impl Subgradient {
    pub fn new(net: &TreeNetwork, file_size_gb: f64, usage: &Usage) -> Self {
        Subgradient {
            bandwidth: net.ids().map(|n| net.node(n).uplink_cap.finite().map(|b| usage.traffic[n.0] - b)).collect(),
            storage: net
                .ids()
                .map(|n| net.node(n).storage_cap.finite().map(|s| usage.slots[n.0] as f64 * file_size_gb - s))
                .collect(),
        }
    }

    pub fn norm_sq(&self) -> f64 {
        let mut acc = CompensatedSum::new();
        for g in self.bandwidth.iter().chain(&self.storage).flatten() {
            acc.add(g * g);
        }
        acc.value()
    }
}

/// `L = U - sum sigma (used - S) - sum beta (used - B)` over finite resources.
pub fn lagrangian(net: &TreeNetwork, file_size_gb: f64, reports: &[CpSummary], duals: &Duals) -> Result<f64> {
    duals.check(net)?;
    let grad = Subgradient::new(net, file_size_gb, &Usage::of(net, reports));
    let mut l = CompensatedSum::new();
    l.add(utility_from_summaries(net, file_size_gb, reports));
    for n in 0..net.len() {
        if let (Some(b), Some(g)) = (duals.beta[n], grad.bandwidth[n]) {
            l.add(-b * g);
        }
        if let (Some(s), Some(g)) = (duals.sigma[n], grad.storage[n]) {
            l.add(-s * g);
        }
    }
    Ok(l.value())
}

/// Projected subgradient step on the nodes owned by ANO `a`.
pub fn dual_update(net: &TreeNetwork, a: AnoId, grad: &Subgradient, duals: &Duals, step: f64) -> Result<Duals> {
    if !(step.is_finite() && step >= 0.0) {
        return Err(invalid("step must be finite and >= 0"));
    }
    let mut out = duals.clone();
    for n in net.ano_nodes(a) {
        if let (Some(b), Some(g)) = (duals.beta[n.0], grad.bandwidth[n.0]) {
            out.beta[n.0] = Some((b + step * g).max(0.0));
        }
        if let (Some(s), Some(g)) = (duals.sigma[n.0], grad.storage[n.0]) {
            out.sigma[n.0] = Some((s + step * g).max(0.0));
        }
    }
    Ok(out)
}

/// `gamma * |L - LB| / |grad|^2`; `None` when the subgradient vanishes.
pub fn polyak_step(gamma: f64, l_now: f64, lb: f64, norm_sq: f64) -> Option<f64> {
    (norm_sq > 0.0).then(|| gamma * (l_now - lb).abs() / norm_sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Node;

    fn capped() -> TreeNetwork {
        TreeNetwork::new(vec![
            Node::root(0.03, 4.0),
            Node::child(NodeId(0), AnoId(0), 0.0, 0.0).with_caps(Capacity::Finite(2.0), Capacity::Finite(10.0)),
            Node::child(NodeId(0), AnoId(0), 0.0, 0.0),
        ])
        .unwrap()
    }

    fn report(slots: Vec<u64>, residual: Vec<f64>) -> CpSummary {
        CpSummary {
            cp: crate::CpId(0),
            offered: residual.clone(),
            slots,
            residual,
            transit_by_ano: vec![0.0],
            offered_by_ano: vec![0.0],
            zeta: vec![0.0],
        }
    }

    #[test]
    fn step_examples() {
        assert_eq!(polyak_step(1.0, 10.0, 10.0, 4.0), Some(0.0));
        assert_eq!(polyak_step(0.0, 20.0, 10.0, 4.0), Some(0.0));
        assert_eq!(polyak_step(1.0, 20.0, 10.0, 4.0), Some(2.5));
        assert_eq!(polyak_step(1.0, 20.0, 10.0, 0.0), None);
    }

    #[test]
    fn unbounded_resources_carry_no_price() {
        let net = capped();
        let d = Duals::zero(&net);
        assert_eq!(d.beta, vec![None, Some(0.0), None]);
        assert_eq!(d.sigma, vec![None, Some(0.0), None]);
    }

    #[test]
    fn violated_storage_raises_sigma() {
        let net = capped();
        let u = Usage::of(&net, &[report(vec![0, 3, 0], vec![0.0, 5.0, 0.0])]);
        let g = Subgradient::new(&net, 1.0, &u);
        assert_eq!(g.storage[1], Some(1.0));
        assert_eq!(g.bandwidth[1], Some(-5.0));
        let d = dual_update(&net, AnoId(0), &g, &Duals::zero(&net), 0.5).unwrap();
        assert_eq!(d.sigma[1], Some(0.5));
        assert_eq!(d.beta[1], Some(0.0));
        assert_eq!(d.beta[2], None);
    }

    #[test]
    fn lagrangian_with_zero_duals_is_utility() {
        let net = capped();
        let r = report(vec![0, 3, 0], vec![1.0, 5.0, 0.0]);
        let l = lagrangian(&net, 1.0, std::slice::from_ref(&r), &Duals::zero(&net)).unwrap();
        assert_eq!(l, utility_from_summaries(&net, 1.0, std::slice::from_ref(&r)));
        let mut bad = Duals::zero(&net);
        bad.beta[1] = Some(-1.0);
        assert!(lagrangian(&net, 1.0, &[r], &bad).is_err());
    }

    #[test]
    fn slot_capacity_absorbs_decimal_noise() {
        assert_eq!(slot_capacity(2.0, 0.001), 2000);
        assert_eq!(slot_capacity(0.2, 0.001), 200);
        assert_eq!(slot_capacity(0.0015, 0.001), 1);
    }
}
