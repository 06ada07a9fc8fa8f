//! `cachesub`: experiment runner for cache placement and subsidy scenarios.

mod failure;
mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use cachesub_core::coalition::verification_error_experiment;
use cachesub_core::net::{Capacity, CpId, NodeId, TreeNetwork};
use cachesub_core::opt::{
    orchestrate, settle, CpSummary, Duals, MeasuredTraffic, OptimizationResult, Placement, Settlement, Status,
    StopReason, TraceRow,
};
use cachesub_core::protocol::{audit_privacy, run_protocol, Fault, Leak};
use cachesub_core::scenario::Scenario;
use cachesub_core::tradeoff::savings_curve;
use cachesub_core::ufl::{solve_ufl, Server, UflInstance};

use failure::{Failure, Kind};
use output::{Cell, Format, Meta, Sink, Table};

/// Worker threads for parallel sections; defaults to all cores.
const WORKERS_ENV: &str = "CACHESUB_WORKERS";

#[derive(Parser)]
#[command(name = "cachesub", version, about = "Cache placement, value sharing and subsidy experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Subcommand)]
enum Cmd {
    /// Savings of the tier configurations over a grid of cost factors.
    Tradeoff(Common),
    /// Difference between the zeta- and eta-based subsidies.
    CoalitionVerify {
        #[command(flatten)]
        common: Common,
        /// Also dump the per-seed ledgers.
        #[arg(long)]
        ledger: bool,
    },
    /// Capacity-constrained placement, with a sweep if the scenario has one.
    Optimize(Common),
    /// Recomputes settlements from a placement dump.
    Settle {
        #[command(flatten)]
        common: Common,
        /// `placement.json` written by `optimize`.
        #[arg(long)]
        placement: PathBuf,
        /// Measured traffic (JSON); defaults to the forecast in the dump.
        #[arg(long)]
        measured: Option<PathBuf>,
    },
    /// Runs the optimization as message-passing agents and audits the transcript.
    ProtocolSim {
        #[command(flatten)]
        common: Common,
        /// Provider that stops answering.
        #[arg(long)]
        drop_cp: Option<usize>,
        /// First iteration the dropped provider misses.
        #[arg(long, default_value_t = 1)]
        drop_from: usize,
    },
    /// Optimal placement of one content, ignoring capacities.
    Ufl {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        cp: usize,
        #[arg(long, default_value_t = 0)]
        file: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => return report(&Failure::new(Kind::InvalidInput, e.render().to_string().trim_end())),
    };
    if let Err(f) = configure_workers() {
        return report(&f);
    }
    match run(cli.cmd) {
        Ok(written) => {
            for p in written {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(f) => report(&f),
    }
}

fn report(f: &Failure) -> ExitCode {
    let body = serde_json::json!({ "error": f });
    eprintln!("{}", serde_json::to_string(&body).unwrap_or_else(|_| f.message.clone()));
    ExitCode::from(f.exit_code() as u8)
}

fn configure_workers() -> Result<(), Failure> {
    let Ok(v) = std::env::var(WORKERS_ENV) else { return Ok(()) };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Failure::new(Kind::InvalidInput, format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))
    })?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(Failure::io)
}

fn run(cmd: Cmd) -> Result<Vec<PathBuf>, Failure> {
    match cmd {
        Cmd::Tradeoff(c) => tradeoff(&c),
        Cmd::CoalitionVerify { common, ledger } => coalition_verify(&common, ledger),
        Cmd::Optimize(c) => optimize(&c),
        Cmd::Settle { common, placement, measured } => settle_cmd(&common, &placement, measured.as_deref()),
        Cmd::ProtocolSim { common, drop_cp, drop_from } => protocol_sim(&common, drop_cp, drop_from),
        Cmd::Ufl { common, cp, file } => ufl(&common, cp, file),
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::io_at(path, e))
}

fn load(c: &Common) -> Result<(Scenario, Sink), Failure> {
    let text = read(&c.scenario)?;
    let mut s = Scenario::parse(&text).map_err(|d| Failure::schema(&c.scenario, d))?;
    if let Some(seed) = c.seed {
        s = s.with_seed(seed);
    }
    let sink = Sink::new(&c.out, c.format, Meta::new(&text, s.seed))?;
    Ok((s, sink))
}

fn tradeoff(c: &Common) -> Result<Vec<PathBuf>, Failure> {
    let (s, mut sink) = load(c)?;
    let (p, gammas) = s.tradeoff()?;
    let rows = savings_curve(&p, &gammas)?;
    let mut t = Table::new([
        "gamma",
        "subset",
        "saving_fraction",
        "C1",
        "C2",
        "C3",
        "total_cost",
        "baseline_cost",
        "degenerate",
    ]);
    for r in rows {
        let x = &r.solution;
        t.push(vec![
            r.gamma.into(),
            r.subset.into(),
            x.saving_fraction.into(),
            x.sizes[0].into(),
            x.sizes[1].into(),
            x.sizes[2].into(),
            x.total_cost.into(),
            x.baseline_cost.into(),
            x.degenerate.into(),
        ]);
    }
    sink.table("tradeoff", &t)?;
    Ok(sink.written)
}

fn coalition_verify(c: &Common, ledger: bool) -> Result<Vec<PathBuf>, Failure> {
    let (s, mut sink) = load(c)?;
    let p = s.coalition()?;
    let rep = verification_error_experiment(&p)?;
    let anos = p.demand.len();
    let mut cols = vec!["r1".to_string()];
    cols.extend((1..=anos).map(|a| format!("err{a}")));
    cols.push("err_tot".into());
    let mut t = Table::new(cols);
    for r in &rep.rows {
        let mut row = vec![Cell::from(r.r1)];
        row.extend(r.err.iter().map(|&e| Cell::from(e)));
        row.push(r.err_tot.into());
        t.push(row);
    }
    sink.table("coalition_errors", &t)?;
    if ledger {
        sink.document("coalition_ledger", &rep.seeds)?;
    }
    Ok(sink.written)
}

/// Everything `settle` needs from an optimization run.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PlacementDump {
    status: Status,
    stop: StopReason,
    iterations: usize,
    lb: f64,
    ub: f64,
    best_tau: Option<usize>,
    placement: Option<Placement>,
    duals: Duals,
    reports: Option<Vec<CpSummary>>,
}

impl PlacementDump {
    fn of(r: &OptimizationResult) -> Self {
        PlacementDump {
            status: r.status,
            stop: r.stop.clone(),
            iterations: r.iterations,
            lb: r.lb,
            ub: r.ub,
            best_tau: r.best_tau,
            placement: r.best_placement.clone(),
            duals: r.final_duals.clone(),
            reports: r.best_reports.clone(),
        }
    }
}

#[derive(Deserialize)]
struct Wrapped<T> {
    data: T,
}

fn trace_table(trace: &[TraceRow]) -> Table {
    let first = trace.first();
    let beta: Vec<usize> = first.map_or(vec![], |r| (0..r.beta.len()).filter(|&n| r.beta[n].is_some()).collect());
    let sigma: Vec<usize> = first.map_or(vec![], |r| (0..r.sigma.len()).filter(|&n| r.sigma[n].is_some()).collect());
    let mut cols: Vec<String> =
        ["tau", "lb", "ub", "delta", "lagrangian", "utility", "feasible", "repaired_utility", "gamma"]
            .map(String::from)
            .to_vec();
    cols.extend(beta.iter().map(|n| format!("beta_{n}")));
    cols.extend(sigma.iter().map(|n| format!("sigma_{n}")));
    let mut t = Table::new(cols);
    for r in trace {
        let mut row: Vec<Cell> = vec![
            r.tau.into(),
            r.lb.into(),
            r.ub.into(),
            r.step.into(),
            r.lagrangian.into(),
            r.utility.into(),
            r.feasible.into(),
            r.repaired_utility.into(),
            r.gamma.into(),
        ];
        row.extend(beta.iter().map(|&n| Cell::from(r.beta[n])));
        row.extend(sigma.iter().map(|&n| Cell::from(r.sigma[n])));
        t.push(row);
    }
    t
}

fn settlement_table(s: &Settlement) -> Table {
    let mut t = Table::new([
        "ano",
        "cp",
        "share",
        "saving",
        "subsidy",
        "storage_payment",
        "co_storage_payment",
        "transit_payment",
    ]);
    for r in &s.rows {
        t.push(vec![
            r.ano.0.into(),
            r.cp.0.into(),
            r.share.into(),
            r.saving.into(),
            r.subsidy.into(),
            r.storage_payment.into(),
            r.co_storage_payment.into(),
            r.transit_payment.into(),
        ]);
    }
    t
}

fn settle_forecast(s: &Scenario, net: &TreeNetwork, r: &OptimizationResult) -> Result<Option<Settlement>, Failure> {
    let (Some(_), Some(reports)) = (&s.shares, &r.best_reports) else { return Ok(None) };
    let fs = s.network.as_ref().map_or(0.0, |n| n.file_size_gb);
    let measured = MeasuredTraffic::forecast(net, reports);
    Ok(Some(settle(net, fs, reports, &measured, &s.shares()?, &r.final_duals)?))
}

fn write_run(
    sink: &mut Sink,
    s: &Scenario,
    net: &TreeNetwork,
    r: &OptimizationResult,
) -> Result<Option<Settlement>, Failure> {
    sink.table("trace", &trace_table(&r.trace))?;
    sink.document("placement", &PlacementDump::of(r))?;
    let settlement = settle_forecast(s, net, r)?;
    if let Some(st) = &settlement {
        sink.table("settlement", &settlement_table(st))?;
    }
    Ok(settlement)
}

fn cap_cell(c: Option<Capacity>) -> Cell {
    match c {
        None => Cell::Empty,
        Some(Capacity::Unbounded) => "unbounded".into(),
        Some(Capacity::Finite(x)) => x.into(),
    }
}

fn no_feasible(r: &OptimizationResult) -> Failure {
    Failure::new(
        Kind::Infeasible,
        format!("no feasible placement found within {} iterations (upper bound {})", r.iterations, r.ub),
    )
}

fn optimize(c: &Common) -> Result<Vec<PathBuf>, Failure> {
    let (s, mut sink) = load(c)?;
    let params = s.algo();
    let points = s.sweep_networks()?;
    let runs: Vec<Result<OptimizationResult, Failure>> = points
        .par_iter()
        .map(|(_, net)| {
            let demand = s.demand(net)?;
            Ok(orchestrate(net, &demand, &params)?)
        })
        .collect();
    if s.sweep.is_none() {
        let (_, net) = &points[0];
        let r = runs.into_iter().next().expect("one point")?;
        write_run(&mut sink, &s, net, &r)?;
        if r.status == Status::NoFeasibleFound {
            return Err(no_feasible(&r));
        }
        return Ok(sink.written);
    }
    let cps = s.demand.as_ref().map_or(0, |d| d.cp.len());
    let mut cols: Vec<String> =
        ["point", "intermediate_uplink_mbps", "status", "iterations", "lb", "ub", "beta_intermediate_mean"]
            .map(String::from)
            .to_vec();
    cols.extend((0..cps).map(|k| format!("subsidy_cp{k}")));
    let mut summary = Table::new(cols);
    for (i, ((cap, net), r)) in points.iter().zip(runs).enumerate() {
        let r = r?;
        let mut sub = sink.sub(&format!("point_{i:02}"))?;
        let st = write_run(&mut sub, &s, net, &r)?;
        sink.written.append(&mut sub.written);
        let betas: Vec<f64> =
            net.ids().filter(|&n| net.is_intermediate(n)).filter_map(|n| r.final_duals.beta[n.0]).collect();
        let mean = (!betas.is_empty()).then(|| betas.iter().sum::<f64>() / betas.len() as f64);
        let mut row = vec![
            i.into(),
            cap_cell(*cap),
            Cell::from(serde_json::to_value(r.status).ok().and_then(|v| v.as_str().map(String::from))),
            r.iterations.into(),
            r.lb.into(),
            r.ub.into(),
            mean.into(),
        ];
        row.extend((0..cps).map(|k| Cell::from(st.as_ref().map(|st| st.cp_total(CpId(k))))));
        summary.push(row);
    }
    sink.table("sweep", &summary)?;
    Ok(sink.written)
}

fn settle_cmd(c: &Common, placement: &Path, measured: Option<&Path>) -> Result<Vec<PathBuf>, Failure> {
    let (s, mut sink) = load(c)?;
    let net = s.network()?;
    let dump: Wrapped<PlacementDump> = serde_json::from_str(&read(placement)?)
        .map_err(|e| Failure::new(Kind::InvalidInput, format!("placement dump: {e}")).at(placement))?;
    let reports = dump
        .data
        .reports
        .ok_or_else(|| Failure::new(Kind::InvalidInput, "placement dump holds no feasible placement").at(placement))?;
    let measured = match measured {
        Some(p) => serde_json::from_str(&read(p)?)
            .map_err(|e| Failure::new(Kind::InvalidInput, format!("measured traffic: {e}")).at(p))?,
        None => MeasuredTraffic::forecast(&net, &reports),
    };
    let fs = s.network.as_ref().map_or(0.0, |n| n.file_size_gb);
    let st = settle(&net, fs, &reports, &measured, &s.shares()?, &dump.data.duals)?;
    sink.table("settlement", &settlement_table(&st))?;
    Ok(sink.written)
}

#[derive(Serialize)]
struct Audit<'a> {
    ok: bool,
    leaks: &'a [Leak],
}

fn protocol_sim(c: &Common, drop_cp: Option<usize>, drop_from: usize) -> Result<Vec<PathBuf>, Failure> {
    let (s, mut sink) = load(c)?;
    let net = s.network()?;
    let demand = s.demand(&net)?;
    let faults: Vec<Fault> = drop_cp.map(|k| Fault::DropCp { cp: CpId(k), from_tau: drop_from }).into_iter().collect();
    let run = run_protocol(&net, &demand, &s.algo(), &faults)?;
    let mut buf = Vec::new();
    run.transcript.write_jsonl(&mut buf)?;
    sink.file("transcript.jsonl", &String::from_utf8_lossy(&buf))?;
    let leaks = audit_privacy(&run.transcript).err().unwrap_or_default();
    sink.document("audit", &Audit { ok: leaks.is_empty(), leaks: &leaks })?;
    write_run(&mut sink, &s, &net, &run.result)?;
    Ok(sink.written)
}

fn ufl(c: &Common, cp: usize, file: usize) -> Result<Vec<PathBuf>, Failure> {
    let (s, mut sink) = load(c)?;
    let net = s.network()?;
    let demand = s.demand(&net)?;
    if cp >= demand.cps.len() {
        return Err(Failure::new(Kind::InvalidInput, format!("no provider {cp}")));
    }
    let d = demand.cp(CpId(cp));
    if file >= d.files() {
        return Err(Failure::new(Kind::InvalidInput, format!("provider {cp} has no content {file}")));
    }
    let mut dem = vec![0.0; net.len()];
    d.fill_file_demand(file, net.leaves(), &mut dem);
    let inst = UflInstance::from_network(&net, demand.file_size_gb, dem);
    let sol = solve_ufl(&inst)?;
    match c.format {
        Format::Json => sink.document("ufl", &sol)?,
        Format::Csv => {
            let open: Vec<String> = sol.open_nodes.iter().map(|n| n.0.to_string()).collect();
            let mut text = format!(
                "provider {cp}, content {file}\nopen: {}\ncost: {}\nserving:\n",
                if open.is_empty() { "none".to_string() } else { open.join(" ") },
                output::sig9(sol.cost)
            );
            for (n, srv) in &sol.serving {
                if !net.is_leaf(*n) {
                    continue;
                }
                let from = match srv {
                    Server::Node(NodeId(m)) => format!("node {m}"),
                    Server::Origin => "origin".into(),
                };
                text.push_str(&format!("  leaf {} <- {from}\n", n.0));
            }
            print!("{text}");
            sink.file("ufl.txt", &text)?;
        }
    }
    Ok(sink.written)
}
