//! Message-passing run of the decomposition.
//!
//! Providers, access operators, the orchestrator and the caches are separate
//! agents that only talk through an in-process bus. Messages sent in one
//! round are delivered together at the next barrier, sorted by sender and
//! receiver, so transcripts do not depend on scheduling. The agents drive the
//! same [`CpAgent`] and [`Orchestrator`] objects as [`orchestrate`], which
//! makes the two results identical.
//!
//! [`orchestrate`]: crate::opt::orchestrate

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demand::DemandModel;
use crate::error::{Error, Result};
use crate::net::{AnoId, CpId, NodeId, TreeNetwork};
use crate::opt::engine::{check_problem, collect_best};
use crate::opt::{
    dual_update, AlgoParams, CpAgent, CpQuota, CpSummary, Duals, Next, OptimizationResult, Orchestrator, Retain,
    SlotQuota, StopReason, Subgradient, Usage,
};
use crate::ufl::PlaceOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Orchestrator,
    Ano,
    Cp,
    Cache,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Party {
    pub role: Role,
    pub id: usize,
}

impl Party {
    pub const ORCHESTRATOR: Party = Party { role: Role::Orchestrator, id: 0 };

    pub fn ano(a: AnoId) -> Self {
        Party { role: Role::Ano, id: a.0 }
    }

    pub fn cp(k: CpId) -> Self {
        Party { role: Role::Cp, id: k.0 }
    }

    pub fn cache(n: NodeId) -> Self {
        Party { role: Role::Cache, id: n.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceEntry {
    pub node: NodeId,
    pub beta: Option<f64>,
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeUsage {
    pub node: NodeId,
    pub slots: u64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    /// An operator's prices for its own nodes.
    PricesAnnounce {
        ano: AnoId,
        prices: Vec<PriceEntry>,
    },
    /// A provider's full summary, for the orchestrator.
    PrimalReport {
        summary: CpSummary,
    },
    /// The part of a provider's summary on one operator's nodes.
    PrimalSlice {
        cp: CpId,
        ano: AnoId,
        nodes: Vec<NodeUsage>,
    },
    /// Candidate storage shares for one provider.
    StorageSplit {
        candidates: Vec<SlotQuota>,
    },
    /// Least traffic per capacity-limited link under each candidate.
    LeastTraffic {
        candidates: Vec<Vec<Option<f64>>>,
    },
    ProjectionQuota {
        candidates: Vec<Option<CpQuota>>,
    },
    RepairReport {
        candidates: Vec<Option<CpSummary>>,
    },
    StepAnnounce {
        delta: f64,
        lb: f64,
        ub: f64,
        retain: Option<Retain>,
    },
    Stop {
        reason: StopReason,
        lb: f64,
        ub: f64,
        retain: Option<Retain>,
    },
    /// Contents a provider keeps at one cache.
    PlaceContent {
        cp: CpId,
        node: NodeId,
        files: Vec<u32>,
    },
    /// Per-content demand. Only an instrumented leaky provider sends this.
    FileDemand {
        cp: CpId,
        file: u32,
        leaf: NodeId,
        rate: f64,
    },
}

impl Message {
    /// Whether the payload reveals demand for individual contents.
    pub fn carries_file_demand(&self) -> bool {
        matches!(self, Message::FileDemand { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub id: u64,
    /// Bus round in which the message was delivered.
    pub round: u64,
    /// Iteration of the prices the message belongs to.
    pub tau: usize,
    pub from: Party,
    pub to: Party,
    pub msg: Message,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "entry", rename_all = "snake_case")]
pub enum TranscriptEntry {
    Message(Envelope),
    Error { round: u64, party: Party, detail: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn messages(&self) -> impl Iterator<Item = &Envelope> {
        self.entries.iter().filter_map(|e| match e {
            TranscriptEntry::Message(m) => Some(m),
            TranscriptEntry::Error { .. } => None,
        })
    }

    /// One JSON record per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.entries {
            writeln!(w, "{}", serde_json::to_string(e)?)?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::InvalidArgument(format!("transcript line {}: {e}", i + 1)))
            })
            .collect::<Result<_>>()?;
        Ok(Transcript { entries })
    }
}

/// Misbehaviour to inject into a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fault {
    /// The provider goes silent from iteration `from_tau` on.
    DropCp { cp: CpId, from_tau: usize },
    /// At iteration `tau` the provider tags its report with the previous iteration.
    StaleReport { cp: CpId, tau: usize },
    /// The provider also sends its per-content demand to every operator.
    LeakyCp { cp: CpId },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRun {
    pub result: OptimizationResult,
    pub transcript: Transcript,
}

struct Bus {
    round: u64,
    next_id: u64,
    outbox: Vec<(usize, Party, Party, Message)>,
    transcript: Transcript,
}

impl Bus {
    fn send(&mut self, tau: usize, from: Party, to: Party, msg: Message) {
        self.outbox.push((tau, from, to, msg));
    }

    fn error(&mut self, party: Party, detail: String) {
        self.transcript.entries.push(TranscriptEntry::Error { round: self.round, party, detail });
    }

    /// Barrier: delivers everything sent since the last one.
    fn deliver(&mut self) -> Vec<Envelope> {
        self.round += 1;
        let mut out = std::mem::take(&mut self.outbox);
        // Stable sort keeps the send order within one sender and receiver.
        out.sort_by_key(|(_, from, to, _)| (*from, *to));
        let delivered: Vec<Envelope> = out
            .into_iter()
            .map(|(tau, from, to, msg)| {
                self.next_id += 1;
                Envelope { id: self.next_id, round: self.round, tau, from, to, msg }
            })
            .collect();
        self.transcript.entries.extend(delivered.iter().cloned().map(TranscriptEntry::Message));
        delivered
    }
}

fn inbox(mail: &[Envelope], to: Party) -> impl Iterator<Item = &Envelope> {
    mail.iter().filter(move |e| e.to == to)
}

/// An operator: owns and updates the prices of its nodes.
struct AnoAgent<'a> {
    net: &'a TreeNetwork,
    a: AnoId,
    file_size_gb: f64,
    duals: Duals,
}

impl AnoAgent<'_> {
    fn announce(&self, bus: &mut Bus, tau: usize, cps: usize) {
        let prices: Vec<PriceEntry> = self
            .net
            .ano_nodes(self.a)
            .map(|n| PriceEntry { node: n, beta: self.duals.beta[n.0], sigma: self.duals.sigma[n.0] })
            .collect();
        let me = Party::ano(self.a);
        bus.send(tau, me, Party::ORCHESTRATOR, Message::PricesAnnounce { ano: self.a, prices: prices.clone() });
        for k in 0..cps {
            bus.send(tau, me, Party::cp(CpId(k)), Message::PricesAnnounce { ano: self.a, prices: prices.clone() });
        }
    }

    /// Usage of its own nodes summed over providers in id order, zero elsewhere.
    fn usage(&self, slices: &[&Envelope]) -> Usage {
        let mut usage = Usage { slots: vec![0; self.net.len()], traffic: vec![0.0; self.net.len()] };
        for e in slices {
            if let Message::PrimalSlice { nodes, .. } = &e.msg {
                for u in nodes {
                    usage.slots[u.node.0] += u.slots;
                    usage.traffic[u.node.0] += u.residual;
                }
            }
        }
        usage
    }

    fn step(&mut self, usage: &Usage, delta: f64) -> Result<()> {
        let grad = Subgradient::new(self.net, self.file_size_gb, usage);
        self.duals = dual_update(self.net, self.a, &grad, &self.duals, delta)?;
        Ok(())
    }
}

fn assemble_duals(net: &TreeNetwork, announcements: &[&Envelope]) -> Duals {
    let mut d = Duals::zero(net);
    for e in announcements {
        if let Message::PricesAnnounce { prices, .. } = &e.msg {
            for p in prices {
                d.beta[p.node.0] = p.beta;
                d.sigma[p.node.0] = p.sigma;
            }
        }
    }
    d
}

fn slice(net: &TreeNetwork, s: &CpSummary, a: AnoId) -> Vec<NodeUsage> {
    net.ano_nodes(a).map(|n| NodeUsage { node: n, slots: s.slots[n.0], residual: s.residual[n.0] }).collect()
}

struct CpSide<'a> {
    agent: CpAgent<'a>,
    silent_from: Option<usize>,
    stale_at: Option<usize>,
    leaky: bool,
}

impl CpSide<'_> {
    fn silent(&self, tau: usize) -> bool {
        self.silent_from.is_some_and(|t| tau >= t)
    }
}

/// Collects one message per provider in id order, or names the first
/// missing or out-of-iteration sender.
fn gather<'m, T>(
    mail: &'m [Envelope],
    cps: usize,
    tau: usize,
    pick: impl Fn(&'m Message) -> Option<T>,
) -> std::result::Result<Vec<T>, StopReason> {
    let mut by_cp: BTreeMap<usize, (usize, T)> = BTreeMap::new();
    for e in inbox(mail, Party::ORCHESTRATOR) {
        if e.from.role == Role::Cp {
            if let Some(x) = pick(&e.msg) {
                by_cp.insert(e.from.id, (e.tau, x));
            }
        }
    }
    let mut out = Vec::with_capacity(cps);
    for k in 0..cps {
        match by_cp.remove(&k) {
            None => return Err(StopReason::MissingReport { cp: CpId(k) }),
            Some((t, _)) if t != tau => {
                return Err(StopReason::ProtocolViolation {
                    detail: format!("provider {k} answered iteration {t} during iteration {tau}"),
                })
            }
            Some((_, x)) => out.push(x),
        }
    }
    Ok(out)
}

/// Runs the iteration as message-passing agents.
pub fn run_protocol(
    net: &TreeNetwork,
    demand: &DemandModel,
    params: &AlgoParams,
    faults: &[Fault],
) -> Result<ProtocolRun> {
    check_problem(net, demand, params)?;
    let fs = demand.file_size_gb;
    let ncp = demand.cps.len();
    let opts = PlaceOptions { early_stop: params.early_stop };
    let mut cps: Vec<CpSide> = demand
        .cp_ids()
        .map(|k| CpSide {
            agent: CpAgent::new(net, demand, k, opts),
            silent_from: faults.iter().find_map(|f| match f {
                Fault::DropCp { cp, from_tau } if *cp == k => Some(*from_tau),
                _ => None,
            }),
            stale_at: faults.iter().find_map(|f| match f {
                Fault::StaleReport { cp, tau } if *cp == k => Some(*tau),
                _ => None,
            }),
            leaky: faults.iter().any(|f| matches!(f, Fault::LeakyCp { cp } if *cp == k)),
        })
        .collect();
    let mut anos: Vec<AnoAgent> = (0..net.ano_count())
        .map(|a| AnoAgent { net, a: AnoId(a), file_size_gb: fs, duals: Duals::zero(net) })
        .collect();
    let mut orch = Orchestrator::new(net, fs, *params);
    let mut bus = Bus { round: 0, next_id: 0, outbox: Vec::new(), transcript: Transcript::default() };
    let o = Party::ORCHESTRATOR;

    let mut tau = 1;
    let stop = 'run: loop {
        // Prices.
        for ano in &anos {
            ano.announce(&mut bus, tau, ncp);
        }
        let mail = bus.deliver();

        // Best responses.
        let duals_at_cp: Vec<Duals> =
            (0..ncp).map(|k| assemble_duals(net, &inbox(&mail, Party::cp(CpId(k))).collect::<Vec<_>>())).collect();
        let reports: Vec<Option<CpSummary>> =
            cps.par_iter_mut().zip(&duals_at_cp).map(|(c, d)| (!c.silent(tau)).then(|| c.agent.primal(d))).collect();
        for (k, (c, r)) in cps.iter().zip(reports).enumerate() {
            let Some(summary) = r else { continue };
            let me = Party::cp(CpId(k));
            let tag = if c.stale_at == Some(tau) { tau - 1 } else { tau };
            for a in (0..net.ano_count()).map(AnoId) {
                let nodes = slice(net, &summary, a);
                bus.send(tag, me, Party::ano(a), Message::PrimalSlice { cp: CpId(k), ano: a, nodes });
                if c.leaky {
                    leak(net, demand, CpId(k), a, tau, &mut bus);
                }
            }
            bus.send(tag, me, o, Message::PrimalReport { summary });
        }
        let mail_prices = mail;
        let mail = bus.deliver();

        let duals = assemble_duals(net, &inbox(&mail_prices, o).collect::<Vec<_>>());
        let reports = match gather(&mail, ncp, tau, |m| match m {
            Message::PrimalReport { summary } => Some(summary.clone()),
            _ => None,
        }) {
            Ok(r) => r,
            Err(reason) => break 'run abort(&mut bus, reason, &orch, tau, ncp, net),
        };
        let slices_mail = mail;

        // Projection.
        if let Some(splits) = orch.on_primal(reports, &duals)? {
            for (k, s) in splits.into_iter().enumerate() {
                bus.send(tau, o, Party::cp(CpId(k)), Message::StorageSplit { candidates: s });
            }
            let mail = bus.deliver();
            let least: Vec<Option<Vec<Vec<Option<f64>>>>> = cps
                .par_iter_mut()
                .enumerate()
                .map(|(k, c)| {
                    if c.silent(tau) {
                        return None;
                    }
                    inbox(&mail, Party::cp(CpId(k))).find_map(|e| match &e.msg {
                        Message::StorageSplit { candidates } => Some(c.agent.least_traffic(candidates)),
                        _ => None,
                    })
                })
                .collect();
            for (k, l) in least.into_iter().enumerate() {
                if let Some(candidates) = l {
                    bus.send(tau, Party::cp(CpId(k)), o, Message::LeastTraffic { candidates });
                }
            }
            let mail = bus.deliver();
            let least = match gather(&mail, ncp, tau, |m| match m {
                Message::LeastTraffic { candidates } => Some(candidates.clone()),
                _ => None,
            }) {
                Ok(l) => l,
                Err(reason) => break 'run abort(&mut bus, reason, &orch, tau, ncp, net),
            };
            for (k, q) in orch.on_least_traffic(&least).into_iter().enumerate() {
                bus.send(tau, o, Party::cp(CpId(k)), Message::ProjectionQuota { candidates: q });
            }
            let mail = bus.deliver();
            let fixed: Vec<Option<Vec<Option<CpSummary>>>> = cps
                .par_iter_mut()
                .enumerate()
                .map(|(k, c)| {
                    if c.silent(tau) {
                        return None;
                    }
                    let q = inbox(&mail, Party::cp(CpId(k))).find_map(|e| match &e.msg {
                        Message::ProjectionQuota { candidates } => Some(candidates),
                        _ => None,
                    })?;
                    Some(c.agent.repair(q))
                })
                .collect();
            for (k, f) in fixed.into_iter().enumerate() {
                if let Some(candidates) = f {
                    bus.send(tau, Party::cp(CpId(k)), o, Message::RepairReport { candidates });
                }
            }
            let mail = bus.deliver();
            match gather(&mail, ncp, tau, |m| match m {
                Message::RepairReport { candidates } => Some(candidates.clone()),
                _ => None,
            }) {
                Ok(r) => orch.on_repair(Some(r)),
                Err(reason) => break 'run abort(&mut bus, reason, &orch, tau, ncp, net),
            }
        }

        // Bounds and step.
        let d = orch.conclude();
        let msg = match &d.next {
            Next::Step { delta } => Message::StepAnnounce { delta: *delta, lb: d.lb, ub: d.ub, retain: d.retain },
            Next::Stop { reason } => Message::Stop { reason: reason.clone(), lb: d.lb, ub: d.ub, retain: d.retain },
        };
        broadcast(&mut bus, tau, net, ncp, msg);
        let mail = bus.deliver();
        for (k, c) in cps.iter_mut().enumerate() {
            for e in inbox(&mail, Party::cp(CpId(k))) {
                if let Message::StepAnnounce { retain: Some(w), .. } | Message::Stop { retain: Some(w), .. } = &e.msg {
                    c.agent.retain(*w);
                }
            }
        }
        match d.next {
            Next::Stop { reason } => break reason,
            Next::Step { delta } => {
                for ano in &mut anos {
                    let me = Party::ano(ano.a);
                    let slices: Vec<&Envelope> = inbox(&slices_mail, me).collect();
                    let usage = ano.usage(&slices);
                    ano.step(&usage, delta)?;
                }
                tau += 1;
            }
        }
    };

    // Final placements go to the caches.
    for (k, c) in cps.iter().enumerate() {
        if c.silent(tau) {
            continue;
        }
        let Some((p, _)) = c.agent.best() else { continue };
        let mut at: BTreeMap<NodeId, Vec<u32>> = BTreeMap::new();
        for (f, content) in p.contents.iter().enumerate() {
            for n in &content.stored {
                at.entry(*n).or_default().push(f as u32);
            }
        }
        for (node, files) in at {
            bus.send(tau, Party::cp(CpId(k)), Party::cache(node), Message::PlaceContent { cp: CpId(k), node, files });
        }
    }
    bus.deliver();

    let agents: Vec<CpAgent> = cps.into_iter().map(|c| c.agent).collect();
    let best = collect_best(&agents);
    let final_duals = orch.last_duals().cloned().unwrap_or_else(|| Duals::zero(net));
    Ok(ProtocolRun { result: orch.finish(stop, best, final_duals), transcript: bus.transcript })
}

fn broadcast(bus: &mut Bus, tau: usize, net: &TreeNetwork, ncp: usize, msg: Message) {
    for a in 0..net.ano_count() {
        bus.send(tau, Party::ORCHESTRATOR, Party::ano(AnoId(a)), msg.clone());
    }
    for k in 0..ncp {
        bus.send(tau, Party::ORCHESTRATOR, Party::cp(CpId(k)), msg.clone());
    }
}

fn abort(
    bus: &mut Bus,
    reason: StopReason,
    orch: &Orchestrator,
    tau: usize,
    ncp: usize,
    net: &TreeNetwork,
) -> StopReason {
    bus.error(Party::ORCHESTRATOR, format!("{reason:?}"));
    let msg = Message::Stop { reason: reason.clone(), lb: orch.lb, ub: orch.ub, retain: None };
    broadcast(bus, tau, net, ncp, msg);
    bus.deliver();
    reason
}

fn leak(net: &TreeNetwork, demand: &DemandModel, k: CpId, a: AnoId, tau: usize, bus: &mut Bus) {
    let d = demand.cp(k);
    let mut row = vec![0.0; net.len()];
    for f in 0..d.files() {
        d.fill_file_demand(f, net.leaves(), &mut row);
        for l in net.ano_leaves(a) {
            if row[l.0] > 0.0 {
                let msg = Message::FileDemand { cp: k, file: f as u32, leaf: l, rate: row[l.0] };
                bus.send(tau, Party::cp(k), Party::ano(a), msg);
            }
        }
    }
}

/// A message that reveals per-content demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leak {
    pub message_id: u64,
    pub from: Party,
    pub to: Party,
}

/// Checks that no message carries per-content demand. Placement
/// instructions to caches name contents but are not demand, so they pass.
pub fn audit_privacy(transcript: &Transcript) -> std::result::Result<(), Vec<Leak>> {
    let leaks: Vec<Leak> = transcript
        .messages()
        .filter(|e| e.msg.carries_file_demand())
        .map(|e| Leak { message_id: e.id, from: e.from, to: e.to })
        .collect();
    if leaks.is_empty() {
        Ok(())
    } else {
        Err(leaks)
    }
}
