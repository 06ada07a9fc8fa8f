//! The subgradient iteration, split into the parts each party runs.
//!
//! [`CpAgent`] holds one provider's private demand, [`Orchestrator`] holds
//! the bounds and the step state. Both [`orchestrate`] and the message-based
//! protocol drive the same objects, so their results agree bit for bit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demand::{CpDemand, DemandModel};
use crate::error::{invalid, Result};
use crate::net::{AnoId, CpId, TreeNetwork};
use crate::ufl::{place_catalog, PlaceOptions};

use super::duals::{dual_update, lagrangian, polyak_step, Duals, Subgradient, Usage};
use super::placement::{summarize_unchecked, utility_from_summaries, CpPlacement, CpSummary, Placement};
use super::project::{is_feasible, split_bandwidth, split_storage, CpQuota, Repairer, SlotQuota};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlgoParams {
    /// Initial Polyak scale.
    pub gamma: f64,
    /// Halve `gamma` after this many iterations without an upper-bound improvement.
    pub gamma_patience: usize,
    /// Absolute gap tolerance; `None` means `1e-3` times the initial upper bound.
    pub eps: Option<f64>,
    /// The loop runs while the iteration counter, starting at 1, is below this.
    pub tau_max: usize,
    pub early_stop: bool,
    /// Repair every iterate against proportional quotas.
    pub project: bool,
}

impl Default for AlgoParams {
    fn default() -> Self {
        AlgoParams { gamma: 1.0, gamma_patience: 10, eps: None, tau_max: 500, early_stop: false, project: true }
    }
}

impl AlgoParams {
    pub fn check(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(invalid("gamma must be >= 0"));
        }
        if self.gamma_patience == 0 {
            return Err(invalid("gamma_patience must be >= 1"));
        }
        if let Some(e) = self.eps {
            if !(e.is_finite() && e >= 0.0) {
                return Err(invalid("eps must be >= 0"));
            }
        }
        if self.tau_max < 2 {
            return Err(invalid("tau_max must be >= 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StopReason {
    Converged,
    MaxIterations,
    ZeroSubgradient,
    MissingReport { cp: CpId },
    ProtocolViolation { detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    MaxIterations,
    NoFeasibleFound,
    Aborted,
}

/// Which placement of the current iteration the providers should keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Retain {
    Raw,
    /// The repair against the given candidate split.
    Repaired {
        candidate: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub tau: usize,
    pub lb: f64,
    pub ub: f64,
    pub lagrangian: f64,
    pub utility: f64,
    pub feasible: bool,
    pub repaired_utility: Option<f64>,
    pub step: Option<f64>,
    pub gamma: f64,
    /// Prices in force during this iteration.
    pub beta: Vec<Option<f64>>,
    pub sigma: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub status: Status,
    pub stop: StopReason,
    pub iterations: usize,
    pub lb: f64,
    pub ub: f64,
    pub eps: f64,
    /// Iteration that produced the best feasible placement.
    pub best_tau: Option<usize>,
    pub best_placement: Option<Placement>,
    pub best_reports: Option<Vec<CpSummary>>,
    /// Prices in force during the last iteration.
    pub final_duals: Duals,
    pub trace: Vec<TraceRow>,
}

/// A provider: private demand plus the placements it is holding.
#[derive(Debug, Clone)]
pub struct CpAgent<'a> {
    net: &'a TreeNetwork,
    demand: &'a CpDemand,
    pub cp: CpId,
    file_size_gb: f64,
    opts: PlaceOptions,
    raw: Option<(CpPlacement, CpSummary)>,
    repairer: Option<Repairer<'a>>,
    repaired: Vec<Option<(CpPlacement, CpSummary)>>,
    best: Option<(CpPlacement, CpSummary)>,
}

impl<'a> CpAgent<'a> {
    pub fn new(net: &'a TreeNetwork, demand: &'a DemandModel, cp: CpId, opts: PlaceOptions) -> Self {
        CpAgent {
            net,
            demand: demand.cp(cp),
            cp,
            file_size_gb: demand.file_size_gb,
            opts,
            raw: None,
            repairer: None,
            repaired: Vec::new(),
            best: None,
        }
    }

    /// Best response to the announced prices.
    pub fn primal(&mut self, duals: &Duals) -> CpSummary {
        let (p, s) = primal_update(self.net, self.demand, self.cp, self.file_size_gb, duals, self.opts);
        self.raw = Some((p, s.clone()));
        self.repairer = None;
        self.repaired.clear();
        s
    }

    /// Least traffic reachable on each capacity-limited link within each
    /// candidate storage split.
    pub fn least_traffic(&mut self, splits: &[SlotQuota]) -> Vec<Vec<Option<f64>>> {
        let r = self.repairer();
        splits.iter().map(|q| r.least_traffic(q)).collect()
    }

    fn repairer(&mut self) -> &mut Repairer<'a> {
        let (net, demand, fs) = (self.net, self.demand, self.file_size_gb);
        let (raw, _) = self.raw.as_ref().expect("projection follows a primal update");
        self.repairer.get_or_insert_with(|| Repairer::new(net, demand, fs, raw))
    }

    /// Repairs the latest response against each candidate quota; `None`
    /// where no quota was given or it cannot be met.
    pub fn repair(&mut self, quotas: &[Option<CpQuota>]) -> Vec<Option<CpSummary>> {
        let (net, demand) = (self.net, self.demand);
        let r = self.repairer();
        let repaired = quotas
            .iter()
            .map(|q| {
                let fixed = r.repair(q.as_ref()?).ok()?;
                let s = summarize_unchecked(net, demand, &fixed);
                Some((fixed, s))
            })
            .collect();
        self.repaired = repaired;
        self.repaired.iter().map(|r| r.as_ref().map(|(_, s)| s.clone())).collect()
    }

    pub fn retain(&mut self, which: Retain) {
        let kept = match which {
            Retain::Raw => self.raw.clone(),
            Retain::Repaired { candidate } => self.repaired.get(candidate).cloned().flatten(),
        };
        self.best = Some(kept.expect("retained placement exists"));
    }

    pub fn best(&self) -> Option<&(CpPlacement, CpSummary)> {
        self.best.as_ref()
    }
}

/// One provider's optimal placement at the given prices and its summary.
pub fn primal_update(
    net: &TreeNetwork,
    demand: &CpDemand,
    cp: CpId,
    file_size_gb: f64,
    duals: &Duals,
    opts: PlaceOptions,
) -> (CpPlacement, CpSummary) {
    let prices = duals.ufl_prices(net, file_size_gb);
    let p = place_catalog(net, demand, cp, &prices, opts);
    let s = summarize_unchecked(net, demand, &p);
    (p, s)
}

/// What the orchestrator tells everyone at the end of an iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub retain: Option<Retain>,
    pub lb: f64,
    pub ub: f64,
    pub next: Next,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Next {
    Step { delta: f64 },
    Stop { reason: StopReason },
}

/// Bounds, step size and stopping. Sees only provider summaries.
#[derive(Debug, Clone)]
pub struct Orchestrator<'a> {
    net: &'a TreeNetwork,
    file_size_gb: f64,
    params: AlgoParams,
    pub tau: usize,
    pub lb: f64,
    pub ub: f64,
    pub gamma: f64,
    eps: Option<f64>,
    stall: usize,
    best_tau: Option<usize>,
    trace: Vec<TraceRow>,
    raw: Option<Vec<CpSummary>>,
    /// `[cp][candidate]`.
    repaired: Option<Vec<Vec<Option<CpSummary>>>>,
    /// `[candidate][cp]`.
    splits: Vec<Vec<SlotQuota>>,
    /// Iteration-weighted running mean of each provider's storage use.
    mean_slots: Vec<Vec<f64>>,
    mean_weight: f64,
    duals: Option<Duals>,
    best_reports: Option<Vec<CpSummary>>,
}

impl<'a> Orchestrator<'a> {
    pub fn new(net: &'a TreeNetwork, file_size_gb: f64, params: AlgoParams) -> Self {
        Orchestrator {
            net,
            file_size_gb,
            params,
            tau: 1,
            lb: 0.0,
            ub: f64::INFINITY,
            gamma: params.gamma,
            eps: params.eps,
            stall: 0,
            best_tau: None,
            trace: Vec::new(),
            raw: None,
            repaired: None,
            splits: Vec::new(),
            mean_slots: Vec::new(),
            mean_weight: 0.0,
            duals: None,
            best_reports: None,
        }
    }

    fn has_finite_resources(&self) -> bool {
        self.net.nodes().iter().any(|n| n.storage_cap.is_finite() || n.uplink_cap.is_finite())
    }

    /// Takes the providers' best responses; returns candidate storage splits,
    /// `[cp][candidate]`, when a repair round should follow.
    pub fn on_primal(&mut self, reports: Vec<CpSummary>, duals: &Duals) -> Result<Option<Vec<Vec<SlotQuota>>>> {
        if self.trace.is_empty() && self.ub.is_infinite() {
            // Everything delivered from the origin at full path price.
            let ub0 = utility_no_cache_cost(self.net, &reports);
            self.ub = ub0;
            self.eps.get_or_insert(1e-3 * ub0);
        }
        let l = lagrangian(self.net, self.file_size_gb, &reports, duals)?;
        if l < self.ub {
            self.ub = l;
            self.stall = 0;
        } else {
            self.stall += 1;
            if self.stall >= self.params.gamma_patience {
                self.gamma /= 2.0;
                self.stall = 0;
            }
        }
        let u = utility_from_summaries(self.net, self.file_size_gb, &reports);
        let feasible = is_feasible(self.net, self.file_size_gb, &Usage::of(self.net, &reports));
        self.trace.push(TraceRow {
            tau: self.tau,
            lb: self.lb,
            ub: self.ub,
            lagrangian: l,
            utility: u,
            feasible,
            repaired_utility: None,
            step: None,
            gamma: self.gamma,
            beta: duals.beta.clone(),
            sigma: duals.sigma.clone(),
        });
        self.update_mean(&reports);
        self.splits.clear();
        if self.params.project && self.has_finite_resources() {
            self.splits = self.candidate_splits(&reports);
        }
        let out = (!self.splits.is_empty()).then(|| transpose(&self.splits));
        self.raw = Some(reports);
        self.repaired = None;
        self.duals = Some(duals.clone());
        Ok(out)
    }

    fn update_mean(&mut self, reports: &[CpSummary]) {
        let w = self.tau as f64;
        self.mean_weight += w;
        let t = w / self.mean_weight;
        if self.mean_slots.len() != reports.len() {
            self.mean_slots = vec![vec![0.0; self.net.len()]; reports.len()];
        }
        for (m, r) in self.mean_slots.iter_mut().zip(reports) {
            for (x, &u) in m.iter_mut().zip(&r.slots) {
                *x += (u as f64 - *x) * t;
            }
        }
    }

    /// Storage splits to try: by current use, by the running mean, by offered
    /// traffic, and by the best feasible placement so far. Duplicates are
    /// dropped.
    fn candidate_splits(&self, reports: &[CpSummary]) -> Vec<Vec<SlotQuota>> {
        let as_f64 = |r: &[CpSummary]| -> Vec<Vec<f64>> {
            r.iter().map(|x| x.slots.iter().map(|&u| u as f64).collect()).collect()
        };
        let offered = reports.iter().map(|r| r.offered.clone()).collect();
        let mut weights = vec![as_f64(reports), self.mean_slots.clone(), offered];
        if let Some(best) = &self.best_reports {
            weights.push(as_f64(best));
        }
        let mut out: Vec<Vec<SlotQuota>> = Vec::new();
        for w in weights {
            let split = split_storage(self.net, self.file_size_gb, &w);
            if !out.contains(&split) {
                out.push(split);
            }
        }
        out
    }

    /// Takes each provider's least reachable traffic per candidate,
    /// `[cp][candidate]`, and returns the full quotas in the same layout.
    pub fn on_least_traffic(&mut self, least: &[Vec<Vec<Option<f64>>>]) -> Vec<Vec<Option<CpQuota>>> {
        let raw = self.raw.as_ref().expect("follows on_primal");
        let traffic: Vec<Vec<f64>> = raw.iter().map(|r| r.residual.clone()).collect();
        let per_cand: Vec<Vec<Option<CpQuota>>> = self
            .splits
            .iter()
            .enumerate()
            .map(|(c, split)| {
                let l: Vec<Vec<Option<f64>>> = least.iter().map(|row| row[c].clone()).collect();
                match split_bandwidth(self.net, split, &l, &traffic) {
                    Some(q) => q.into_iter().map(Some).collect(),
                    None => vec![None; split.len()],
                }
            })
            .collect();
        transpose(&per_cand)
    }

    /// Takes the repaired summaries, `[cp][candidate]`, or `None` if some
    /// provider did not answer.
    pub fn on_repair(&mut self, reports: Option<Vec<Vec<Option<CpSummary>>>>) {
        self.repaired = reports;
    }

    /// Updates the lower bound and decides whether to continue.
    pub fn conclude(&mut self) -> Decision {
        let raw = self.raw.take().expect("conclude follows on_primal");
        let row = self.trace.last_mut().expect("row for this iteration");
        let mut best: Option<(f64, Retain)> = row.feasible.then_some((row.utility, Retain::Raw));
        let mut cands: Vec<Option<Vec<CpSummary>>> = Vec::new();
        if let Some(rep) = &self.repaired {
            let n = rep.first().map_or(0, Vec::len);
            for c in 0..n {
                let set: Option<Vec<CpSummary>> = rep.iter().map(|row| row.get(c).cloned().flatten()).collect();
                let set = set.filter(|r| is_feasible(self.net, self.file_size_gb, &Usage::of(self.net, r)));
                if let Some(r) = &set {
                    let u = utility_from_summaries(self.net, self.file_size_gb, r);
                    row.repaired_utility = Some(row.repaired_utility.map_or(u, |x: f64| x.max(u)));
                    if best.is_none_or(|(b, _)| u > b) {
                        best = Some((u, Retain::Repaired { candidate: c }));
                    }
                }
                cands.push(set);
            }
        }
        let mut retain = None;
        if let Some((u, which)) = best {
            if u > self.lb || (self.best_tau.is_none() && u >= self.lb) {
                self.lb = self.lb.max(u);
                self.best_tau = Some(self.tau);
                retain = Some(which);
                self.best_reports = Some(match which {
                    Retain::Raw => raw.clone(),
                    Retain::Repaired { candidate } => cands[candidate].clone().expect("checked above"),
                });
            }
        }
        row.lb = self.lb;
        let eps = self.eps.unwrap_or(0.0);
        let next = if self.ub - self.lb <= eps {
            Next::Stop { reason: StopReason::Converged }
        } else {
            let grad = Subgradient::new(self.net, self.file_size_gb, &Usage::of(self.net, &raw));
            match polyak_step(self.gamma, row.lagrangian, self.lb, grad.norm_sq()) {
                None => Next::Stop { reason: StopReason::ZeroSubgradient },
                Some(delta) if self.tau + 1 < self.params.tau_max => {
                    row.step = Some(delta);
                    Next::Step { delta }
                }
                Some(_) => Next::Stop { reason: StopReason::MaxIterations },
            }
        };
        if matches!(next, Next::Step { .. }) {
            self.tau += 1;
        }
        Decision { retain, lb: self.lb, ub: self.ub, next }
    }

    pub fn finish(self, stop: StopReason, best_placement: Option<Placement>, final_duals: Duals) -> OptimizationResult {
        let status = match &stop {
            StopReason::MissingReport { .. } | StopReason::ProtocolViolation { .. } => Status::Aborted,
            _ if self.best_tau.is_none() => Status::NoFeasibleFound,
            StopReason::MaxIterations => Status::MaxIterations,
            StopReason::Converged | StopReason::ZeroSubgradient => Status::Converged,
        };
        OptimizationResult {
            status,
            stop,
            iterations: self.trace.len(),
            lb: self.lb,
            ub: self.ub,
            eps: self.eps.unwrap_or(0.0),
            best_tau: self.best_tau,
            best_placement,
            best_reports: self.best_reports,
            final_duals,
            trace: self.trace,
        }
    }

    pub fn last_duals(&self) -> Option<&Duals> {
        self.duals.as_ref()
    }
}

/// `sum_l T_l b_{l+}` over all providers: the cost of serving everything
/// from the origin, and the initial upper bound.
fn utility_no_cache_cost(net: &TreeNetwork, reports: &[CpSummary]) -> f64 {
    let mut s = crate::numeric::CompensatedSum::new();
    for r in reports {
        for n in net.ids() {
            s.add(net.node(n).uplink_price * r.offered[n.0]);
        }
    }
    s.value()
}

/// Checks the preconditions shared by every driver of the iteration.
pub fn check_problem(net: &TreeNetwork, demand: &DemandModel, params: &AlgoParams) -> Result<()> {
    params.check()?;
    let root = net.node(crate::NodeId::ROOT);
    if root.storage_cap.is_finite() || root.uplink_cap.is_finite() {
        return Err(invalid("central-office storage and transit must be unbounded"));
    }
    if demand.cps.is_empty() {
        return Err(invalid("need at least one content provider"));
    }
    Ok(())
}

/// Runs the whole iteration in one process.
pub fn orchestrate(net: &TreeNetwork, demand: &DemandModel, params: &AlgoParams) -> Result<OptimizationResult> {
    check_problem(net, demand, params)?;
    let opts = PlaceOptions { early_stop: params.early_stop };
    let mut cps: Vec<CpAgent> = demand.cp_ids().map(|k| CpAgent::new(net, demand, k, opts)).collect();
    let mut orch = Orchestrator::new(net, demand.file_size_gb, *params);
    let mut duals = Duals::zero(net);
    let stop = loop {
        let reports: Vec<CpSummary> = cps.par_iter_mut().map(|c| c.primal(&duals)).collect();
        let usage = Usage::of(net, &reports);
        if let Some(splits) = orch.on_primal(reports, &duals)? {
            let least: Vec<_> = cps.par_iter_mut().zip(&splits).map(|(c, s)| c.least_traffic(s)).collect();
            let quotas = orch.on_least_traffic(&least);
            let fixed: Vec<_> = cps.par_iter_mut().zip(&quotas).map(|(c, q)| c.repair(q)).collect();
            orch.on_repair(Some(fixed));
        }
        let d = orch.conclude();
        if let Some(which) = d.retain {
            cps.iter_mut().for_each(|c| c.retain(which));
        }
        match d.next {
            Next::Stop { reason } => break reason,
            Next::Step { delta } => {
                let grad = Subgradient::new(net, demand.file_size_gb, &usage);
                let mut next = duals.clone();
                for a in (0..net.ano_count()).map(AnoId) {
                    next.adopt(net, a, &dual_update(net, a, &grad, &duals, delta)?);
                }
                duals = next;
            }
        }
    };
    let best = collect_best(&cps);
    let final_duals = orch.last_duals().cloned().unwrap_or_else(|| Duals::zero(net));
    Ok(orch.finish(stop, best, final_duals))
}

fn transpose<T: Clone>(m: &[Vec<T>]) -> Vec<Vec<T>> {
    let cols = m.first().map_or(0, Vec::len);
    (0..cols).map(|j| m.iter().map(|row| row[j].clone()).collect()).collect()
}

pub(crate) fn collect_best(cps: &[CpAgent]) -> Option<Placement> {
    cps.iter().map(|c| c.best().map(|(p, _)| p.clone())).collect::<Option<Vec<_>>>().map(|cps| Placement { cps })
}
