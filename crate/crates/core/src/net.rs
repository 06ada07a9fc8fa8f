//! Tree-shaped access network: topology, prices, capacities and ownership.
//!
//! Units are fixed across the crate: traffic in Mb/s of busy-hour demand,
//! storage in GB and money in $ per month.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnoId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CpId(pub usize);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);

    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl fmt::Display for AnoId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ano{}", self.0)
    }
}

impl fmt::Display for CpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cp{}", self.0)
    }
}

/// Storage (GB) or bandwidth (Mb/s) limit of a resource.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Capacity {
    Finite(f64),
    #[default]
    Unbounded,
}

impl Capacity {
    pub fn is_finite(self) -> bool {
        matches!(self, Capacity::Finite(_))
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            Capacity::Finite(v) => Some(v),
            Capacity::Unbounded => None,
        }
    }
}

// Serialized as a number or the string "unbounded".
impl Serialize for Capacity {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Capacity::Finite(v) => s.serialize_f64(*v),
            Capacity::Unbounded => s.serialize_str("unbounded"),
        }
    }
}

impl<'de> Deserialize<'de> for Capacity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(v) => Ok(Capacity::Finite(v as f64)),
            Raw::Num(v) => Ok(Capacity::Finite(v)),
            Raw::Str(s) if s == "unbounded" => Ok(Capacity::Unbounded),
            Raw::Str(s) => {
                Err(serde::de::Error::custom(format!("capacity must be a number or \"unbounded\", got {s:?}")))
            }
        }
    }
}

/// One node of the tree together with its uplink (the link towards its parent,
/// or towards the content source for the root).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub parent: Option<NodeId>,
    /// $/GB/month.
    pub storage_price: f64,
    /// $/(Mb/s)/month for the uplink.
    pub uplink_price: f64,
    #[serde(default)]
    pub storage_cap: Capacity,
    #[serde(default)]
    pub uplink_cap: Capacity,
    #[serde(default)]
    pub ano: Option<AnoId>,
}

impl Node {
    pub fn root(storage_price: f64, transit_price: f64) -> Self {
        Node {
            parent: None,
            storage_price,
            uplink_price: transit_price,
            storage_cap: Capacity::Unbounded,
            uplink_cap: Capacity::Unbounded,
            ano: None,
        }
    }

    pub fn child(parent: NodeId, ano: AnoId, storage_price: f64, uplink_price: f64) -> Self {
        Node {
            parent: Some(parent),
            storage_price,
            uplink_price,
            storage_cap: Capacity::Unbounded,
            uplink_cap: Capacity::Unbounded,
            ano: Some(ano),
        }
    }

    pub fn with_caps(mut self, storage: Capacity, uplink: Capacity) -> Self {
        self.storage_cap = storage;
        self.uplink_cap = uplink;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Empty,
    RootHasParent,
    MissingParent(NodeId),
    UnknownParent { node: NodeId, parent: NodeId },
    NotATree(NodeId),
    BadPrice { node: NodeId, field: &'static str, value: f64 },
    BadCapacity { node: NodeId, field: &'static str, value: f64 },
    RootOwned,
    MissingOwner(NodeId),
    OwnershipNotSubtreeConsistent { node: NodeId, owner: AnoId, parent_owner: AnoId },
    AnoIdGap(AnoId),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "network has no nodes"),
            Violation::RootHasParent => write!(f, "node 0 must be the root"),
            Violation::MissingParent(n) => write!(f, "{n}: non-root node without parent"),
            Violation::UnknownParent { node, parent } => {
                write!(f, "{node}: parent {parent} does not exist")
            }
            Violation::NotATree(n) => write!(f, "{n}: not a tree (parent chain does not reach the root)"),
            Violation::BadPrice { node, field, value } => {
                write!(f, "{node}: {field} must be finite and >= 0, got {value}")
            }
            Violation::BadCapacity { node, field, value } => {
                write!(f, "{node}: {field} must be > 0 or unbounded, got {value}")
            }
            Violation::RootOwned => write!(f, "root must not be owned by an ANO"),
            Violation::MissingOwner(n) => write!(f, "{n}: non-root node has no owning ANO"),
            Violation::OwnershipNotSubtreeConsistent { node, owner, parent_owner } => {
                write!(f, "{node}: ownership not subtree-consistent ({owner} under {parent_owner})")
            }
            Violation::AnoIdGap(a) => write!(f, "{a} owns no node but higher ANO ids do"),
        }
    }
}

/// Checks every structural invariant of a node list and returns all violations.
pub fn validate_nodes(nodes: &[Node]) -> Vec<Violation> {
    let mut out = Vec::new();
    if nodes.is_empty() {
        out.push(Violation::Empty);
        return out;
    }
    let n = nodes.len();
    if nodes[0].parent.is_some() {
        out.push(Violation::RootHasParent);
    }
    let mut parent_ok = vec![true; n];
    for (i, node) in nodes.iter().enumerate().skip(1) {
        match node.parent {
            None => {
                out.push(Violation::MissingParent(NodeId(i)));
                parent_ok[i] = false;
            }
            Some(p) if p.0 >= n => {
                out.push(Violation::UnknownParent { node: NodeId(i), parent: p });
                parent_ok[i] = false;
            }
            Some(_) => {}
        }
    }
    // 0 = unknown, 1 = reaches root, 2 = does not.
    let mut reach = vec![0u8; n];
    reach[0] = if nodes[0].parent.is_none() { 1 } else { 2 };
    for start in 1..n {
        if reach[start] != 0 {
            continue;
        }
        let mut path = Vec::new();
        let mut cur = start;
        let verdict = loop {
            if reach[cur] != 0 {
                break reach[cur];
            }
            if !parent_ok[cur] || path.len() > n {
                break 2;
            }
            path.push(cur);
            cur = nodes[cur].parent.map(|p| p.0).unwrap_or(cur);
            if path.contains(&cur) {
                break 2;
            }
        };
        for p in path {
            reach[p] = verdict;
        }
    }
    for (i, r) in reach.iter().enumerate().skip(1) {
        if *r == 2 && parent_ok[i] {
            out.push(Violation::NotATree(NodeId(i)));
        }
    }
    for (i, node) in nodes.iter().enumerate() {
        let id = NodeId(i);
        for (field, v) in [("storage_price", node.storage_price), ("uplink_price", node.uplink_price)] {
            if !(v.is_finite() && v >= 0.0) {
                out.push(Violation::BadPrice { node: id, field, value: v });
            }
        }
        for (field, c) in [("storage_cap", node.storage_cap), ("uplink_cap", node.uplink_cap)] {
            if let Capacity::Finite(v) = c {
                if !(v.is_finite() && v > 0.0) {
                    out.push(Violation::BadCapacity { node: id, field, value: v });
                }
            }
        }
    }
    if nodes[0].ano.is_some() {
        out.push(Violation::RootOwned);
    }
    let mut max_ano = None;
    for (i, node) in nodes.iter().enumerate().skip(1) {
        let Some(owner) = node.ano else {
            out.push(Violation::MissingOwner(NodeId(i)));
            continue;
        };
        max_ano = max_ano.max(Some(owner.0));
        if let Some(p) = node.parent.filter(|p| p.0 < n && p.0 != 0) {
            if let Some(parent_owner) = nodes[p.0].ano {
                if parent_owner != owner {
                    out.push(Violation::OwnershipNotSubtreeConsistent { node: NodeId(i), owner, parent_owner });
                }
            }
        }
    }
    if let Some(max) = max_ano {
        let mut seen = vec![false; max + 1];
        for node in nodes.iter().skip(1) {
            if let Some(a) = node.ano {
                seen[a.0] = true;
            }
        }
        for (a, s) in seen.iter().enumerate() {
            if !s {
                out.push(Violation::AnoIdGap(AnoId(a)));
            }
        }
    }
    out
}

/// A validated rooted tree. Immutable after construction.
#[derive(Debug, Clone)]
pub struct TreeNetwork {
    nodes: Vec<Node>,
    children: Vec<Vec<NodeId>>,
    depth: Vec<usize>,
    /// Breadth-first order, root first.
    order: Vec<NodeId>,
    leaves: Vec<NodeId>,
    path_price: Vec<f64>,
    n_anos: usize,
}

impl TreeNetwork {
    pub fn new(nodes: Vec<Node>) -> Result<Self> {
        let violations = validate_nodes(&nodes);
        if !violations.is_empty() {
            return Err(Error::InvalidNetwork(violations));
        }
        let n = nodes.len();
        let mut children = vec![Vec::new(); n];
        for (i, node) in nodes.iter().enumerate().skip(1) {
            let p = node.parent.expect("validated");
            children[p.0].push(NodeId(i));
        }
        let mut order = Vec::with_capacity(n);
        let mut depth = vec![0; n];
        let mut path_price = vec![0.0; n];
        order.push(NodeId::ROOT);
        path_price[0] = nodes[0].uplink_price;
        let mut head = 0;
        while head < order.len() {
            let u = order[head];
            head += 1;
            for &c in &children[u.0] {
                depth[c.0] = depth[u.0] + 1;
                path_price[c.0] = nodes[c.0].uplink_price + path_price[u.0];
                order.push(c);
            }
        }
        let leaves = (0..n).filter(|&i| children[i].is_empty()).map(NodeId).collect();
        let n_anos = nodes.iter().filter_map(|x| x.ano).map(|a| a.0 + 1).max().unwrap_or(0);
        Ok(TreeNetwork { nodes, children, depth, order, leaves, path_price, n_anos })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, n: NodeId) -> &Node {
        &self.nodes[n.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn contains(&self, n: NodeId) -> bool {
        n.0 < self.nodes.len()
    }

    pub fn parent(&self, n: NodeId) -> Option<NodeId> {
        self.nodes[n.0].parent
    }

    pub fn children(&self, n: NodeId) -> &[NodeId] {
        &self.children[n.0]
    }

    pub fn depth(&self, n: NodeId) -> usize {
        self.depth[n.0]
    }

    pub fn max_depth(&self) -> usize {
        self.depth.iter().copied().max().unwrap_or(0)
    }

    /// Root-first breadth-first order; reverse it for bottom-up passes.
    pub fn bfs_order(&self) -> &[NodeId] {
        &self.order
    }

    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    pub fn is_leaf(&self, n: NodeId) -> bool {
        self.children[n.0].is_empty()
    }

    /// Non-root, non-leaf nodes.
    pub fn is_intermediate(&self, n: NodeId) -> bool {
        n != NodeId::ROOT && !self.is_leaf(n)
    }

    pub fn ano_count(&self) -> usize {
        self.n_anos
    }

    pub fn ano_of(&self, n: NodeId) -> Option<AnoId> {
        self.nodes[n.0].ano
    }

    pub fn ano_nodes(&self, a: AnoId) -> impl Iterator<Item = NodeId> + '_ {
        self.ids().filter(move |&n| self.nodes[n.0].ano == Some(a))
    }

    pub fn ano_leaves(&self, a: AnoId) -> impl Iterator<Item = NodeId> + '_ {
        self.leaves.iter().copied().filter(move |&n| self.nodes[n.0].ano == Some(a))
    }

    /// Path from `n` up to and including the root.
    pub fn path_to_root(&self, n: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        let mut cur = Some(n);
        std::iter::from_fn(move || {
            let out = cur?;
            cur = self.nodes[out.0].parent;
            Some(out)
        })
    }

    /// Price per Mb/s of every link from `n` to the content source, root uplink included.
    pub fn path_price(&self, n: NodeId) -> Result<f64> {
        if !self.contains(n) {
            return Err(invalid(format!("unknown node {n}")));
        }
        Ok(self.path_price[n.0])
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate_nodes(&self.nodes)
    }
}

/// Uniform prices and capacities applied to one tier of a symmetric tree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierSpec {
    pub storage_price: f64,
    pub uplink_price: f64,
    #[serde(default)]
    pub storage_cap: Capacity,
    #[serde(default)]
    pub uplink_cap: Capacity,
}

impl TierSpec {
    pub fn priced(storage_price: f64, uplink_price: f64) -> Self {
        TierSpec { storage_price, uplink_price, storage_cap: Capacity::Unbounded, uplink_cap: Capacity::Unbounded }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SymmetricParams {
    /// Number of ANOs; each owns `e2` intermediate nodes under the root.
    #[serde(default = "one")]
    pub anos: usize,
    pub leaf: TierSpec,
    pub intermediate: TierSpec,
    pub root: TierSpec,
}

fn one() -> usize {
    1
}

/// Root, `e2` intermediate nodes per ANO and `e1` leaves under each intermediate node.
///
/// Node order: root, all intermediates (ANO-major), then leaves grouped by parent.
pub fn build_symmetric_3tier(e1: usize, e2: usize, p: &SymmetricParams) -> Result<TreeNetwork> {
    if e1 == 0 || e2 == 0 || p.anos == 0 {
        return Err(invalid("fanouts and ANO count must be >= 1"));
    }
    let mut nodes = Vec::with_capacity(1 + p.anos * e2 * (1 + e1));
    nodes.push(Node {
        parent: None,
        storage_price: p.root.storage_price,
        uplink_price: p.root.uplink_price,
        storage_cap: p.root.storage_cap,
        uplink_cap: p.root.uplink_cap,
        ano: None,
    });
    let tier_node = |t: &TierSpec, parent: usize, a: usize| Node {
        parent: Some(NodeId(parent)),
        storage_price: t.storage_price,
        uplink_price: t.uplink_price,
        storage_cap: t.storage_cap,
        uplink_cap: t.uplink_cap,
        ano: Some(AnoId(a)),
    };
    for a in 0..p.anos {
        for _ in 0..e2 {
            nodes.push(tier_node(&p.intermediate, 0, a));
        }
    }
    for i in 0..p.anos * e2 {
        let a = i / e2;
        for _ in 0..e1 {
            nodes.push(tier_node(&p.leaf, 1 + i, a));
        }
    }
    TreeNetwork::new(nodes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(prices: [f64; 3]) -> TreeNetwork {
        TreeNetwork::new(vec![
            Node::root(0.03, prices[2]),
            Node::child(NodeId(0), AnoId(0), 0.03, prices[1]),
            Node::child(NodeId(1), AnoId(0), 0.0, prices[0]),
        ])
        .unwrap()
    }

    #[test]
    fn path_price_examples() {
        let net = TreeNetwork::new(vec![Node::root(0.0, 4.0)]).unwrap();
        assert_eq!(net.path_price(NodeId(0)).unwrap(), 4.0);
        assert_eq!(chain([0.0, 0.0, 4.0]).path_price(NodeId(2)).unwrap(), 4.0);
        assert_eq!(chain([1.0, 2.0, 4.0]).path_price(NodeId(2)).unwrap(), 7.0);
        assert!(chain([1.0, 2.0, 4.0]).path_price(NodeId(9)).is_err());
    }

    #[test]
    fn path_price_recursion() {
        let net = chain([1.5, 2.25, 4.0]);
        for n in net.ids().skip(1) {
            let p = net.parent(n).unwrap();
            let lhs = net.path_price(n).unwrap();
            let rhs = net.node(n).uplink_price + net.path_price(p).unwrap();
            assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn validate_ok_and_cycle() {
        let ok = vec![
            Node::root(0.0, 4.0),
            Node::child(NodeId(0), AnoId(0), 0.0, 0.0),
            Node::child(NodeId(0), AnoId(0), 0.0, 0.0),
        ];
        assert!(validate_nodes(&ok).is_empty());

        let mut cyc = ok.clone();
        cyc.push(Node::child(NodeId(4), AnoId(0), 0.0, 0.0));
        cyc.push(Node::child(NodeId(3), AnoId(0), 0.0, 0.0));
        let v = validate_nodes(&cyc);
        assert!(v.iter().any(|x| matches!(x, Violation::NotATree(_))), "{v:?}");
        assert!(v.iter().any(|x| x.to_string().contains("not a tree")));
    }

    #[test]
    fn validate_ownership() {
        let nodes = vec![
            Node::root(0.0, 4.0),
            Node::child(NodeId(0), AnoId(1), 0.0, 0.0),
            Node::child(NodeId(0), AnoId(0), 0.0, 0.0),
            Node::child(NodeId(1), AnoId(0), 0.0, 0.0),
        ];
        let v = validate_nodes(&nodes);
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].to_string().contains("ownership not subtree-consistent"));
    }

    #[test]
    fn validate_prices_caps_and_gaps() {
        let nodes = vec![
            Node::root(-1.0, 4.0),
            Node::child(NodeId(0), AnoId(2), 0.0, f64::NAN).with_caps(Capacity::Finite(0.0), Capacity::Unbounded),
        ];
        let v = validate_nodes(&nodes);
        assert!(v.iter().any(|x| matches!(x, Violation::BadPrice { field: "storage_price", .. })));
        assert!(v.iter().any(|x| matches!(x, Violation::BadPrice { field: "uplink_price", .. })));
        assert!(v.iter().any(|x| matches!(x, Violation::BadCapacity { .. })));
        assert!(v.iter().any(|x| matches!(x, Violation::AnoIdGap(AnoId(0)))));
        assert!(TreeNetwork::new(nodes).is_err());
    }

    #[test]
    fn symmetric_sizes() {
        let p = SymmetricParams {
            anos: 1,
            leaf: TierSpec::priced(0.03, 4.0),
            intermediate: TierSpec::priced(0.03, 4.0),
            root: TierSpec::priced(0.03, 4.0),
        };
        let net = build_symmetric_3tier(100, 10, &p).unwrap();
        assert_eq!(net.len(), 1 + 10 + 1000);
        assert_eq!(net.leaves().len(), 1000);
        assert!(net.leaves().iter().all(|&l| net.depth(l) == 2));
        assert!(net.validate().is_empty());
        assert_eq!(build_symmetric_3tier(10, 100, &p).unwrap().len(), 1 + 100 + 1000);
        assert_eq!(build_symmetric_3tier(1, 1, &p).unwrap().len(), 3);
        assert!(build_symmetric_3tier(0, 1, &p).is_err());

        let two = SymmetricParams { anos: 2, ..p };
        let net = build_symmetric_3tier(3, 2, &two).unwrap();
        assert_eq!(net.ano_count(), 2);
        assert_eq!(net.ano_leaves(AnoId(1)).count(), 6);
    }

    #[test]
    fn capacity_serde() {
        #[derive(Deserialize, Serialize)]
        struct W {
            c: Capacity,
        }
        let w: W = toml::from_str("c = \"unbounded\"").unwrap();
        assert_eq!(w.c, Capacity::Unbounded);
        let w: W = toml::from_str("c = 15").unwrap();
        assert_eq!(w.c, Capacity::Finite(15.0));
        let w: W = toml::from_str("c = 0.5").unwrap();
        assert_eq!(w.c, Capacity::Finite(0.5));
        assert!(toml::from_str::<W>("c = \"lots\"").is_err());
    }
}
