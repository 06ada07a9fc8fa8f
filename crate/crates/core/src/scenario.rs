//! Versioned TOML scenario files.
//!
//! Physical quantities (prices, capacities, demand, sizes) have no defaults;
//! algorithm settings default to [`AlgoParams::default`]. Errors carry the
//! dotted field path and, where it can be found, the line and column.
//!
//! ```toml
//! version = 1
//! seed = 7
//!
//! [network]
//! file_size_gb = 0.001
//!
//! [network.symmetric]
//! anos = 2
//! e1 = 5            # leaves per intermediate node
//! e2 = 10           # intermediate nodes per ANO
//! root = { storage_price = 0.03, uplink_price = 4.0 }
//! intermediate = { storage_price = 0.03, uplink_price = 0.0, uplink_cap_mbps = 200.0 }
//! leaf = { storage_price = 0.0, uplink_price = 0.0, storage_cap_gb = 2.0, uplink_cap_mbps = 15.0 }
//!
//! [[demand.cp]]
//! kind = "zipf"
//! files = 10000
//! alpha = 0.8
//! per_ano_mbps = [500.0, 500.0]
//!
//! [shares]
//! r = [[0.5], [0.5]]   # one row per ANO, one column per provider
//! ```

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::coalition::VerificationParams;
use crate::demand::{CpDemand, DemandModel};
use crate::net::{
    build_symmetric_3tier, AnoId, Capacity, Node, NodeId, SymmetricParams, TierSpec, TreeNetwork, Violation,
};
use crate::opt::AlgoParams;
use crate::tradeoff::TierParams;

pub const SCHEMA_VERSION: u32 = 1;

/// One problem found in a scenario file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    /// Dotted path such as `network.nodes[3].parent`; empty for syntax errors.
    pub field: String,
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(l) = self.line {
            write!(f, "line {l}")?;
            if let Some(c) = self.column {
                write!(f, ", column {c}")?;
            }
            write!(f, ": ")?;
        }
        if !self.field.is_empty() {
            write!(f, "{}: ", self.field)?;
        }
        write!(f, "{}", self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    pub network: Option<NetworkSpec>,
    pub demand: Option<DemandSpec>,
    pub shares: Option<SharesSpec>,
    #[serde(default)]
    pub algorithm: AlgorithmSpec,
    pub sweep: Option<SweepSpec>,
    pub tradeoff: Option<TradeoffSpec>,
    pub coalition: Option<CoalitionSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub file_size_gb: f64,
    pub nodes: Option<Vec<NodeSpec>>,
    pub symmetric: Option<SymmetricSpec>,
}

/// A node of an explicit network. Node 0 is the central office and has
/// neither `parent` nor `ano`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub parent: Option<usize>,
    pub ano: Option<usize>,
    pub storage_price: f64,
    pub uplink_price: f64,
    #[serde(default)]
    pub storage_cap_gb: Capacity,
    #[serde(default)]
    pub uplink_cap_mbps: Capacity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierSpecToml {
    pub storage_price: f64,
    pub uplink_price: f64,
    #[serde(default)]
    pub storage_cap_gb: Capacity,
    #[serde(default)]
    pub uplink_cap_mbps: Capacity,
}

impl From<TierSpecToml> for TierSpec {
    fn from(t: TierSpecToml) -> Self {
        TierSpec {
            storage_price: t.storage_price,
            uplink_price: t.uplink_price,
            storage_cap: t.storage_cap_gb,
            uplink_cap: t.uplink_cap_mbps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SymmetricSpec {
    pub anos: usize,
    /// Leaves per intermediate node.
    pub e1: usize,
    /// Intermediate nodes per ANO.
    pub e2: usize,
    pub root: TierSpecToml,
    pub intermediate: TierSpecToml,
    pub leaf: TierSpecToml,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandSpec {
    pub cp: Vec<CpSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CpSpec {
    /// Zipf popularity, each ANO's total split evenly over its leaves.
    Zipf {
        files: usize,
        alpha: f64,
        per_ano_mbps: Vec<f64>,
        #[serde(default)]
        permute_per_ano: bool,
        /// Ranking seed; defaults to the scenario seed plus the provider index.
        seed: Option<u64>,
    },
    /// `[leaf, file, rate]` rows.
    Explicit { files: usize, rows: Vec<(usize, usize, f64)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharesSpec {
    /// `r[a][k]`: fraction of ANO `a`'s savings paid to provider `k`.
    pub r: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgorithmSpec {
    pub gamma: f64,
    pub gamma_patience: usize,
    pub eps: Option<f64>,
    pub tau_max: usize,
    pub early_stop: bool,
    pub project: bool,
}

impl Default for AlgorithmSpec {
    fn default() -> Self {
        let d = AlgoParams::default();
        AlgorithmSpec {
            gamma: d.gamma,
            gamma_patience: d.gamma_patience,
            eps: d.eps,
            tau_max: d.tau_max,
            early_stop: d.early_stop,
            project: d.project,
        }
    }
}

impl From<AlgorithmSpec> for AlgoParams {
    fn from(a: AlgorithmSpec) -> Self {
        AlgoParams {
            gamma: a.gamma,
            gamma_patience: a.gamma_patience,
            eps: a.eps,
            tau_max: a.tau_max,
            early_stop: a.early_stop,
            project: a.project,
        }
    }
}

/// Capacity grid for repeated optimization runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Uplink capacity applied to every intermediate node (neither root nor leaf).
    pub intermediate_uplink_mbps: Vec<Capacity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TradeoffSpec {
    pub e1: usize,
    pub e2: usize,
    pub catalog_gb: f64,
    pub alpha: f64,
    pub storage_price: [f64; 3],
    pub bandwidth_price: [f64; 3],
    pub gammas: Option<Vec<f64>>,
    pub gamma_grid: Option<GammaGrid>,
}

/// `points` values spaced evenly in log scale from `from` to `to`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaGrid {
    pub from: f64,
    pub to: f64,
    pub points: usize,
}

impl GammaGrid {
    pub fn values(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.from];
        }
        let (a, b) = (self.from.ln(), self.to.ln());
        (0..self.points).map(|i| (a + (b - a) * i as f64 / (self.points - 1) as f64).exp()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoalitionSpec {
    pub files: usize,
    pub alpha: f64,
    pub demand: Vec<f64>,
    /// Per content.
    pub storage_price: f64,
    pub bandwidth_price: f64,
    pub other_shares: Vec<f64>,
    pub r1_grid: Vec<f64>,
    /// Ranking seeds; defaults to ten seeds starting at the scenario seed.
    pub seeds: Option<Vec<u64>>,
}

type Problems = Vec<(String, String)>;

impl Scenario {
    /// Parses and validates. Every problem found is reported.
    pub fn parse(text: &str) -> Result<Self, Vec<Diagnostic>> {
        let s: Scenario = toml::from_str(text).map_err(|e| vec![syntax(text, &e)])?;
        if s.version != SCHEMA_VERSION {
            return Err(vec![locate(
                text,
                "version",
                format!("unsupported schema version {}, expected {SCHEMA_VERSION}", s.version),
            )]);
        }
        let problems = s.problems();
        if problems.is_empty() {
            Ok(s)
        } else {
            Err(problems.into_iter().map(|(f, m)| locate(text, &f, m)).collect())
        }
    }

    /// Replaces the scenario seed, as `--seed` does.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn problems(&self) -> Problems {
        let mut out = Problems::new();
        let net = match &self.network {
            Some(n) => check_network(n, &mut out),
            None => None,
        };
        if let (Some(d), Some(net)) = (&self.demand, &net) {
            check_demand(d, net, &mut out);
        }
        if let Some(sh) = &self.shares {
            let anos = net.as_ref().map(|n| n.ano_count());
            let cps = self.demand.as_ref().map(|d| d.cp.len());
            check_shares(sh, anos, cps, &mut out);
        }
        if let Err(e) = AlgoParams::from(self.algorithm).check() {
            out.push(("algorithm".into(), strip(e.to_string())));
        }
        if let Some(sw) = &self.sweep {
            if sw.intermediate_uplink_mbps.is_empty() {
                out.push(("sweep.intermediate_uplink_mbps".into(), "grid must not be empty".into()));
            }
            for (i, c) in sw.intermediate_uplink_mbps.iter().enumerate() {
                if let Some(v) = c.finite() {
                    if !(v.is_finite() && v > 0.0) {
                        out.push((format!("sweep.intermediate_uplink_mbps[{i}]"), "capacity must be > 0".into()));
                    }
                }
            }
        }
        if let Some(t) = &self.tradeoff {
            check_tradeoff(t, &mut out);
        }
        if let Some(c) = &self.coalition {
            check_coalition(c, &mut out);
        }
        out
    }

    pub fn network(&self) -> crate::Result<TreeNetwork> {
        let spec = self.network.as_ref().ok_or_else(|| missing("network"))?;
        build_network(spec)
    }

    pub fn demand(&self, net: &TreeNetwork) -> crate::Result<DemandModel> {
        let spec = self.demand.as_ref().ok_or_else(|| missing("demand"))?;
        let fs = self.network.as_ref().ok_or_else(|| missing("network"))?.file_size_gb;
        let cps = spec
            .cp
            .iter()
            .enumerate()
            .map(|(k, c)| build_cp(c, net, self.seed.wrapping_add(k as u64)))
            .collect::<crate::Result<_>>()?;
        DemandModel::new(fs, cps)
    }

    pub fn algo(&self) -> AlgoParams {
        self.algorithm.into()
    }

    /// `r[a][k]`.
    pub fn shares(&self) -> crate::Result<Vec<Vec<f64>>> {
        Ok(self.shares.as_ref().ok_or_else(|| missing("shares"))?.r.clone())
    }

    pub fn tradeoff(&self) -> crate::Result<(TierParams, Vec<f64>)> {
        let t = self.tradeoff.as_ref().ok_or_else(|| missing("tradeoff"))?;
        let p = TierParams {
            e1: t.e1,
            e2: t.e2,
            total_demand: 1.0,
            catalog_gb: t.catalog_gb,
            alpha: t.alpha,
            storage_price: t.storage_price,
            bandwidth_price: t.bandwidth_price,
        };
        Ok((p, gammas(t)))
    }

    pub fn coalition(&self) -> crate::Result<VerificationParams> {
        let c = self.coalition.as_ref().ok_or_else(|| missing("coalition"))?;
        Ok(VerificationParams {
            files: c.files,
            alpha: c.alpha,
            demand: c.demand.clone(),
            storage_price: c.storage_price,
            bandwidth_price: c.bandwidth_price,
            other_shares: c.other_shares.clone(),
            r1_grid: c.r1_grid.clone(),
            seeds: c.seeds.clone().unwrap_or_else(|| (0..10).map(|i| self.seed.wrapping_add(i)).collect()),
        })
    }

    /// Networks of the capacity sweep, or just the base network without one.
    pub fn sweep_networks(&self) -> crate::Result<Vec<(Option<Capacity>, TreeNetwork)>> {
        let base = self.network()?;
        let Some(sw) = &self.sweep else { return Ok(vec![(None, base)]) };
        sw.intermediate_uplink_mbps
            .iter()
            .map(|&cap| {
                let nodes = base
                    .nodes()
                    .iter()
                    .enumerate()
                    .map(|(i, n)| {
                        let mut n = n.clone();
                        if i != 0 && !base.is_leaf(NodeId(i)) {
                            n.uplink_cap = cap;
                        }
                        n
                    })
                    .collect();
                Ok((Some(cap), TreeNetwork::new(nodes)?))
            })
            .collect()
    }
}

fn missing(section: &str) -> crate::Error {
    crate::Error::Scenario(format!("scenario has no [{section}] section"))
}

fn strip(msg: String) -> String {
    msg.strip_prefix("invalid argument: ").map(str::to_string).unwrap_or(msg)
}

fn gammas(t: &TradeoffSpec) -> Vec<f64> {
    match (&t.gammas, &t.gamma_grid) {
        (Some(g), _) => g.clone(),
        (None, Some(grid)) => grid.values(),
        (None, None) => Vec::new(),
    }
}

fn build_network(spec: &NetworkSpec) -> crate::Result<TreeNetwork> {
    match (&spec.nodes, &spec.symmetric) {
        (Some(nodes), None) => TreeNetwork::new(
            nodes
                .iter()
                .map(|n| Node {
                    parent: n.parent.map(NodeId),
                    storage_price: n.storage_price,
                    uplink_price: n.uplink_price,
                    storage_cap: n.storage_cap_gb,
                    uplink_cap: n.uplink_cap_mbps,
                    ano: n.ano.map(AnoId),
                })
                .collect(),
        ),
        (None, Some(s)) => build_symmetric_3tier(
            s.e1,
            s.e2,
            &SymmetricParams {
                anos: s.anos,
                leaf: s.leaf.into(),
                intermediate: s.intermediate.into(),
                root: s.root.into(),
            },
        ),
        _ => Err(crate::Error::Scenario("network needs exactly one of `nodes` and `symmetric`".into())),
    }
}

fn violation_field(v: &Violation) -> String {
    let node = |n: &NodeId, f: &str| format!("network.nodes[{}].{f}", n.0);
    match v {
        Violation::Empty => "network.nodes".into(),
        Violation::RootHasParent => "network.nodes[0].parent".into(),
        Violation::RootOwned => "network.nodes[0].ano".into(),
        Violation::MissingParent(n) | Violation::NotATree(n) => node(n, "parent"),
        Violation::UnknownParent { node: n, .. } => node(n, "parent"),
        Violation::BadPrice { node: n, field, .. } => node(n, field),
        Violation::BadCapacity { node: n, field, .. } => {
            node(n, if *field == "storage_cap" { "storage_cap_gb" } else { "uplink_cap_mbps" })
        }
        Violation::MissingOwner(n) => node(n, "ano"),
        Violation::OwnershipNotSubtreeConsistent { node: n, .. } => node(n, "ano"),
        Violation::AnoIdGap(_) => "network.nodes".into(),
    }
}

fn check_network(n: &NetworkSpec, out: &mut Problems) -> Option<TreeNetwork> {
    if !(n.file_size_gb.is_finite() && n.file_size_gb > 0.0) {
        out.push(("network.file_size_gb".into(), "must be > 0".into()));
    }
    match (&n.nodes, &n.symmetric) {
        (Some(_), Some(_)) | (None, None) => {
            out.push(("network".into(), "give exactly one of `nodes` and `symmetric`".into()));
            None
        }
        (Some(_), None) => match build_network(n) {
            Ok(net) => Some(net),
            Err(crate::Error::InvalidNetwork(vs)) => {
                out.extend(vs.iter().map(|v| (violation_field(v), v.to_string())));
                None
            }
            Err(e) => {
                out.push(("network.nodes".into(), strip(e.to_string())));
                None
            }
        },
        (None, Some(_)) => match build_network(n) {
            Ok(net) => Some(net),
            Err(crate::Error::InvalidNetwork(vs)) => {
                out.extend(vs.iter().map(|v| ("network.symmetric".into(), v.to_string())));
                None
            }
            Err(e) => {
                out.push(("network.symmetric".into(), strip(e.to_string())));
                None
            }
        },
    }
}

fn check_demand(d: &DemandSpec, net: &TreeNetwork, out: &mut Problems) {
    if d.cp.is_empty() {
        out.push(("demand.cp".into(), "need at least one provider".into()));
    }
    for (k, c) in d.cp.iter().enumerate() {
        let at = |f: &str| format!("demand.cp[{k}].{f}");
        match c {
            CpSpec::Zipf { files, alpha, per_ano_mbps, .. } => {
                if *files == 0 {
                    out.push((at("files"), "must be >= 1".into()));
                }
                if !(alpha.is_finite() && *alpha >= 0.0) {
                    out.push((at("alpha"), "must be >= 0".into()));
                }
                if per_ano_mbps.len() != net.ano_count() {
                    out.push((
                        at("per_ano_mbps"),
                        format!("needs one entry per ANO ({}), got {}", net.ano_count(), per_ano_mbps.len()),
                    ));
                }
                for (a, t) in per_ano_mbps.iter().enumerate() {
                    if !(t.is_finite() && *t >= 0.0) {
                        out.push((format!("demand.cp[{k}].per_ano_mbps[{a}]"), "must be >= 0".into()));
                    }
                }
            }
            CpSpec::Explicit { files, rows } => {
                for (i, &(leaf, f, rate)) in rows.iter().enumerate() {
                    let row = format!("demand.cp[{k}].rows[{i}]");
                    if leaf >= net.len() || !net.is_leaf(NodeId(leaf)) {
                        out.push((row, format!("node {leaf} is not a leaf")));
                    } else if f >= *files {
                        out.push((row, format!("file {f} outside catalog of {files}")));
                    } else if !(rate.is_finite() && rate >= 0.0) {
                        out.push((row, "rate must be >= 0".into()));
                    }
                }
            }
        }
    }
}

fn check_shares(sh: &SharesSpec, anos: Option<usize>, cps: Option<usize>, out: &mut Problems) {
    if let Some(a) = anos {
        if sh.r.len() != a {
            out.push(("shares.r".into(), format!("needs one row per ANO ({a}), got {}", sh.r.len())));
        }
    }
    for (a, row) in sh.r.iter().enumerate() {
        if let Some(k) = cps {
            if row.len() != k {
                out.push((format!("shares.r[{a}]"), format!("needs one entry per provider ({k}), got {}", row.len())));
            }
        }
        if row.iter().any(|x| !(0.0..=1.0).contains(x)) {
            out.push((format!("shares.r[{a}]"), "shares must lie in [0, 1]".into()));
        }
    }
}

fn check_tradeoff(t: &TradeoffSpec, out: &mut Problems) {
    if t.e1 == 0 || t.e2 == 0 {
        out.push(("tradeoff".into(), "fanouts e1 and e2 must be >= 1".into()));
    }
    if !(t.catalog_gb.is_finite() && t.catalog_gb > 0.0) {
        out.push(("tradeoff.catalog_gb".into(), "must be > 0".into()));
    }
    if !(0.0..1.0).contains(&t.alpha) {
        out.push(("tradeoff.alpha".into(), "must lie in [0, 1)".into()));
    }
    if t.storage_price[0] <= 0.0 || t.bandwidth_price[0] <= 0.0 {
        out.push(("tradeoff".into(), "tier-1 prices must be > 0 to define the cost factor".into()));
    }
    match (&t.gammas, &t.gamma_grid) {
        (Some(_), Some(_)) | (None, None) => {
            out.push(("tradeoff".into(), "give exactly one of `gammas` and `gamma_grid`".into()));
        }
        (None, Some(g)) => {
            if !(g.from > 0.0 && g.to > 0.0 && g.points >= 1) {
                out.push(("tradeoff.gamma_grid".into(), "needs from, to > 0 and points >= 1".into()));
            }
        }
        (Some(gs), None) => {
            if gs.is_empty() || gs.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
                out.push(("tradeoff.gammas".into(), "needs at least one value, all > 0".into()));
            }
        }
    }
}

fn check_coalition(c: &CoalitionSpec, out: &mut Problems) {
    if c.demand.is_empty() {
        out.push(("coalition.demand".into(), "need at least one ANO".into()));
    }
    if c.other_shares.len() + 1 != c.demand.len() {
        out.push(("coalition.other_shares".into(), "needs one entry per ANO after the first".into()));
    }
    if c.r1_grid.is_empty() {
        out.push(("coalition.r1_grid".into(), "must not be empty".into()));
    }
    if c.files == 0 {
        out.push(("coalition.files".into(), "must be >= 1".into()));
    }
    if !(c.storage_price > 0.0 && c.bandwidth_price > 0.0) {
        out.push(("coalition".into(), "prices must be > 0".into()));
    }
}

fn build_cp(c: &CpSpec, net: &TreeNetwork, default_seed: u64) -> crate::Result<CpDemand> {
    match c {
        CpSpec::Zipf { files, alpha, per_ano_mbps, permute_per_ano, seed } => {
            let totals: BTreeMap<AnoId, f64> = per_ano_mbps.iter().enumerate().map(|(a, t)| (AnoId(a), *t)).collect();
            CpDemand::synthesize_zipf(net, *files, &totals, *alpha, *permute_per_ano, seed.unwrap_or(default_seed))
        }
        CpSpec::Explicit { files, rows } => {
            let rows: Vec<(NodeId, usize, f64)> = rows.iter().map(|&(l, f, r)| (NodeId(l), f, r)).collect();
            CpDemand::explicit(net, *files, &rows)
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    (line, col)
}

fn syntax(text: &str, e: &toml::de::Error) -> Diagnostic {
    let (line, column) = match e.span() {
        Some(s) => {
            let (l, c) = line_col(text, s.start);
            (Some(l), Some(c))
        }
        None => (None, None),
    };
    Diagnostic { field: String::new(), line, column, message: e.message().to_string() }
}

/// Best-effort source position of a dotted field path.
fn locate(text: &str, field: &str, message: String) -> Diagnostic {
    let pos = find_field(text, field);
    let (line, column) = match pos {
        Some(off) => {
            let (l, c) = line_col(text, off);
            (Some(l), Some(c))
        }
        None => (None, None),
    };
    Diagnostic { field: field.to_string(), line, column, message }
}

fn find_field(text: &str, field: &str) -> Option<usize> {
    // Segments like `nodes[3]` address the fourth `[[...nodes]]` table.
    let mut table = String::new();
    let mut start = 0usize;
    let mut end = text.len();
    let mut best = None;
    for seg in field.split('.') {
        let (name, index) = match seg.find('[') {
            Some(i) => (&seg[..i], seg[i + 1..seg.len() - 1].parse::<usize>().ok()),
            None => (seg, None),
        };
        let path = if table.is_empty() { name.to_string() } else { format!("{table}.{name}") };
        let region = &text[start..end];
        if let Some(i) = index {
            let header = format!("[[{path}]]");
            let hits: Vec<usize> = region.match_indices(&header).map(|(o, _)| start + o).collect();
            if let Some(&h) = hits.get(i) {
                start = h;
                end = hits.get(i + 1).copied().unwrap_or(end);
                best = Some(h);
                table = path;
                continue;
            }
        }
        let header = format!("[{path}]");
        if let Some(o) = region.find(&header) {
            start += o;
            best = Some(start);
            table = path;
            continue;
        }
        // A key inside the current region.
        let mut off = 0;
        let found = region.lines().find_map(|l| {
            let here = off;
            off += l.len() + 1;
            let t = l.trim_start();
            let key = t.split('=').next().unwrap_or("").trim();
            (t.contains('=') && key == name).then(|| here + (l.len() - t.len()))
        });
        match found {
            Some(o) => {
                best = Some(start + o);
                start += o;
            }
            None => break,
        }
        table = path;
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
version = 1
seed = 3

[network]
file_size_gb = 1.0

[[network.nodes]]
storage_price = 1.0
uplink_price = 4.0

[[network.nodes]]
parent = 0
ano = 0
storage_price = 0.0
uplink_price = 0.0
storage_cap_gb = 1.0
uplink_cap_mbps = 2.5

[[demand.cp]]
kind = "explicit"
files = 2
rows = [[1, 0, 2.0], [1, 1, 0.5]]

[[demand.cp]]
kind = "zipf"
files = 4
alpha = 0.8
per_ano_mbps = [3.0]

[shares]
r = [[0.5, 0.5]]

[algorithm]
tau_max = 50
"#;

    #[test]
    fn small_scenario_builds() {
        let s = Scenario::parse(SMALL).unwrap();
        let net = s.network().unwrap();
        assert_eq!(net.len(), 2);
        let d = s.demand(&net).unwrap();
        assert_eq!(d.cps.len(), 2);
        assert_eq!(d.cps[1].files(), 4);
        assert_eq!(s.algo().tau_max, 50);
        assert_eq!(s.algo().gamma, 1.0);
        assert_eq!(s.shares().unwrap(), vec![vec![0.5, 0.5]]);
    }

    #[test]
    fn syntax_error_has_position() {
        let bad = SMALL.replace("tau_max = 50", "tau_max = = 50");
        let e = Scenario::parse(&bad).unwrap_err();
        assert_eq!(e.len(), 1);
        let line = bad.lines().position(|l| l.contains("= = 50")).unwrap() + 1;
        assert_eq!(e[0].line, Some(line));
    }

    #[test]
    fn unknown_field_is_rejected() {
        let bad = SMALL.replace("tau_max = 50", "tau_maxx = 50");
        let e = Scenario::parse(&bad).unwrap_err();
        assert!(e[0].message.contains("tau_maxx"), "{e:?}");
        assert!(e[0].line.is_some());
    }

    #[test]
    fn missing_physical_quantity_is_an_error() {
        let bad = SMALL.replacen("uplink_price = 4.0\n", "", 1);
        let e = Scenario::parse(&bad).unwrap_err();
        assert!(e[0].message.contains("uplink_price"), "{e:?}");
    }

    #[test]
    fn semantic_errors_name_the_field_and_line() {
        let bad = SMALL.replace("parent = 0", "parent = 7");
        let e = Scenario::parse(&bad).unwrap_err();
        assert_eq!(e[0].field, "network.nodes[1].parent");
        let line = bad.lines().position(|l| l.contains("parent = 7")).unwrap() + 1;
        assert_eq!(e[0].line, Some(line));

        let bad = SMALL.replace("r = [[0.5, 0.5]]", "r = [[0.5]]");
        let e = Scenario::parse(&bad).unwrap_err();
        assert_eq!(e[0].field, "shares.r[0]");

        let bad = SMALL.replace("[1, 1, 0.5]", "[0, 1, 0.5]");
        let e = Scenario::parse(&bad).unwrap_err();
        assert_eq!(e[0].field, "demand.cp[0].rows[1]");
        assert!(e[0].message.contains("not a leaf"));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let e = Scenario::parse(&SMALL.replace("version = 1", "version = 2")).unwrap_err();
        assert_eq!(e[0].field, "version");
        assert_eq!(e[0].line, Some(2));
    }

    #[test]
    fn gamma_grid_is_log_spaced() {
        let g = GammaGrid { from: 0.1, to: 1000.0, points: 5 }.values();
        assert_eq!(g.len(), 5);
        assert!((g[1] - 1.0).abs() < 1e-12 && (g[4] - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn symmetric_network_and_sweep() {
        let text = r#"
version = 1
[network]
file_size_gb = 0.001
[network.symmetric]
anos = 2
e1 = 2
e2 = 3
root = { storage_price = 0.03, uplink_price = 4.0 }
intermediate = { storage_price = 0.03, uplink_price = 0.0 }
leaf = { storage_price = 0.0, uplink_price = 0.0, storage_cap_gb = 2.0, uplink_cap_mbps = 15.0 }
[sweep]
intermediate_uplink_mbps = [10.0, "unbounded"]
"#;
        let s = Scenario::parse(text).unwrap();
        let nets = s.sweep_networks().unwrap();
        assert_eq!(nets.len(), 2);
        let (_, n0) = &nets[0];
        assert_eq!(n0.len(), 1 + 2 * 3 * 3);
        assert_eq!(n0.node(NodeId(1)).uplink_cap, Capacity::Finite(10.0));
        assert_eq!(n0.node(NodeId(n0.len() - 1)).uplink_cap, Capacity::Finite(15.0));
        assert_eq!(nets[1].1.node(NodeId(1)).uplink_cap, Capacity::Unbounded);
    }
}
