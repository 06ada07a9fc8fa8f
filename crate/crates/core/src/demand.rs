//! Content popularity and per-leaf demand.
//!
//! Synthetic Zipf demand is stored implicitly (weights, per-leaf totals and
//! per-ANO rankings) and materialized one content at a time.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::net::{AnoId, CpId, NodeId, TreeNetwork};
use crate::numeric::{csum, CompensatedSum};

/// Normalized Zipf weights `q_f = f^-alpha / H`, most popular first.
pub fn zipf_weights(files: usize, alpha: f64) -> Result<Vec<f64>> {
    if files == 0 {
        return Err(invalid("catalog must contain at least one file"));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(invalid(format!("zipf exponent must be >= 0, got {alpha}")));
    }
    let mut w: Vec<f64> = (1..=files).map(|f| (f as f64).powf(-alpha)).collect();
    // Summing from the tail keeps the compensated sum well conditioned.
    let h = csum(w.iter().rev().copied());
    for x in &mut w {
        *x /= h;
    }
    Ok(w)
}

/// Hit probability of an ideal cache holding the `c` most popular files.
pub fn hit_prob_exact(weights: &[f64], c: usize) -> Result<f64> {
    if c > weights.len() {
        return Err(invalid(format!("cache of {c} files exceeds catalog of {}", weights.len())));
    }
    if c == weights.len() {
        return Ok(1.0_f64.min(csum(weights.iter().copied())));
    }
    let sorted = weights.windows(2).all(|p| p[0] >= p[1]);
    if sorted {
        Ok(csum(weights[..c].iter().copied()))
    } else {
        let mut w = weights.to_vec();
        w.sort_by(|a, b| b.total_cmp(a));
        Ok(csum(w[..c].iter().copied()))
    }
}

/// Continuous approximation `min(1, (C/F)^(1-alpha))` with sizes in GB.
pub fn hit_prob_continuous(cache_gb: f64, catalog_gb: f64, alpha: f64) -> Result<f64> {
    if !(catalog_gb > 0.0) {
        return Err(invalid("catalog volume must be > 0"));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(invalid(format!("alpha must lie in [0, 1), got {alpha}")));
    }
    if !(cache_gb >= 0.0) {
        return Err(invalid("cache size must be >= 0"));
    }
    Ok((cache_gb / catalog_gb).powf(1.0 - alpha).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    pub cp: CpId,
    pub files: usize,
}

/// Uniform permutation of `0..files` by a Durstenfeld shuffle: for `i` from
/// `files - 1` down to 1, swap position `i` with `j = random_range(0..=i)`.
pub fn random_ranking(files: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut p: Vec<u32> = (0..files as u32).collect();
    for i in (1..files).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    p
}

/// Demand of one content provider over its catalog.
#[derive(Debug, Clone)]
pub enum CpDemand {
    /// Per file, the `(leaf, rate)` pairs with positive demand.
    Explicit { files: usize, rows: Vec<Vec<(NodeId, f64)>>, leaf_totals: Vec<f64> },
    /// Leaf `l` of ANO `a` requests file `f` at `leaf_rate[l] * weights[rank[a][f]]`.
    Zipf {
        alpha: f64,
        weights: Arc<[f64]>,
        leaf_rate: Vec<f64>,
        leaf_ano: Vec<Option<AnoId>>,
        /// `None` means identity ranking.
        ranks: Vec<Option<Arc<[u32]>>>,
    },
}

impl CpDemand {
    /// Builds explicit demand from `(leaf, file, rate)` rows; repeated keys add up.
    pub fn explicit(net: &TreeNetwork, files: usize, rows: &[(NodeId, usize, f64)]) -> Result<Self> {
        let mut per_file: Vec<BTreeMap<NodeId, f64>> = vec![BTreeMap::new(); files];
        for &(leaf, f, rate) in rows {
            if !net.contains(leaf) || !net.is_leaf(leaf) {
                return Err(invalid(format!("demand row names {leaf}, which is not a leaf")));
            }
            if f >= files {
                return Err(invalid(format!("file {f} outside catalog of {files}")));
            }
            if !(rate.is_finite() && rate >= 0.0) {
                return Err(invalid(format!("demand rate must be finite and >= 0, got {rate}")));
            }
            *per_file[f].entry(leaf).or_insert(0.0) += rate;
        }
        let rows: Vec<Vec<(NodeId, f64)>> =
            per_file.into_iter().map(|m| m.into_iter().filter(|&(_, r)| r > 0.0).collect()).collect();
        let mut acc = vec![CompensatedSum::new(); net.len()];
        for row in &rows {
            for &(l, r) in row {
                acc[l.0].add(r);
            }
        }
        let leaf_totals = acc.iter().map(|s| s.value()).collect();
        Ok(CpDemand::Explicit { files, rows, leaf_totals })
    }

    /// Zipf demand with each ANO's total split uniformly over its leaves.
    ///
    /// With `permute_per_ano`, ANO 0 keeps the natural ranking and every other
    /// ANO gets a uniformly random permutation of it. Permutations come from a
    /// ChaCha8 stream seeded with `seed_from_u64(seed)`, drawn for ANOs 1, 2, ...
    /// in order by a Durstenfeld shuffle: for `i` from `F-1` down to 1, swap
    /// position `i` with `j = random_range(0..=i)`.
    pub fn synthesize_zipf(
        net: &TreeNetwork,
        files: usize,
        per_ano_totals: &BTreeMap<AnoId, f64>,
        alpha: f64,
        permute_per_ano: bool,
        seed: u64,
    ) -> Result<Self> {
        let weights: Arc<[f64]> = zipf_weights(files, alpha)?.into();
        if files > u32::MAX as usize {
            return Err(invalid("catalog too large"));
        }
        for (&a, &t) in per_ano_totals {
            if a.0 >= net.ano_count() {
                return Err(invalid(format!("unknown {a}")));
            }
            if !(t.is_finite() && t >= 0.0) {
                return Err(invalid(format!("{a}: total demand must be >= 0, got {t}")));
            }
        }
        let mut leaf_rate = vec![0.0; net.len()];
        let mut leaf_ano = vec![None; net.len()];
        for a in (0..net.ano_count()).map(AnoId) {
            let leaves: Vec<NodeId> = net.ano_leaves(a).collect();
            let total = per_ano_totals.get(&a).copied().unwrap_or(0.0);
            for &l in &leaves {
                leaf_rate[l.0] = total / leaves.len() as f64;
                leaf_ano[l.0] = Some(a);
            }
        }
        // A single-node network: the root is the only leaf and belongs to no ANO.
        let mut ranks = vec![None; net.ano_count()];
        if permute_per_ano {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for slot in ranks.iter_mut().skip(1) {
                *slot = Some(random_ranking(files, &mut rng).into());
            }
        }
        Ok(CpDemand::Zipf { alpha, weights, leaf_rate, leaf_ano, ranks })
    }

    pub fn files(&self) -> usize {
        match self {
            CpDemand::Explicit { files, .. } => *files,
            CpDemand::Zipf { weights, .. } => weights.len(),
        }
    }

    /// `T_l^k`: total demand of this provider at node `n` (zero off the leaves).
    pub fn leaf_total(&self, n: NodeId) -> f64 {
        match self {
            CpDemand::Explicit { leaf_totals, .. } => leaf_totals.get(n.0).copied().unwrap_or(0.0),
            CpDemand::Zipf { leaf_rate, .. } => leaf_rate.get(n.0).copied().unwrap_or(0.0),
        }
    }

    fn zipf_rank(ranks: &[Option<Arc<[u32]>>], ano: Option<AnoId>, f: usize) -> usize {
        match ano.and_then(|a| ranks.get(a.0)).and_then(|r| r.as_ref()) {
            Some(r) => r[f] as usize,
            None => f,
        }
    }

    /// `lambda_l^f`.
    pub fn rate(&self, leaf: NodeId, f: usize) -> f64 {
        match self {
            CpDemand::Explicit { rows, .. } => rows[f].iter().find(|(l, _)| *l == leaf).map(|&(_, r)| r).unwrap_or(0.0),
            CpDemand::Zipf { weights, leaf_rate, leaf_ano, ranks, .. } => {
                let base = leaf_rate.get(leaf.0).copied().unwrap_or(0.0);
                if base == 0.0 {
                    return 0.0;
                }
                base * weights[Self::zipf_rank(ranks, leaf_ano[leaf.0], f)]
            }
        }
    }

    /// Writes per-node demand for file `f` into `out` (length = node count).
    pub fn fill_file_demand(&self, f: usize, leaves: &[NodeId], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        match self {
            CpDemand::Explicit { rows, .. } => {
                for &(l, r) in &rows[f] {
                    out[l.0] = r;
                }
            }
            CpDemand::Zipf { weights, leaf_rate, leaf_ano, ranks, .. } => {
                for &l in leaves {
                    let base = leaf_rate[l.0];
                    if base > 0.0 {
                        out[l.0] = base * weights[Self::zipf_rank(ranks, leaf_ano[l.0], f)];
                    }
                }
            }
        }
    }

    /// Aggregate demand for file `f` over all leaves.
    pub fn file_total(&self, f: usize, leaves: &[NodeId]) -> f64 {
        match self {
            CpDemand::Explicit { rows, .. } => csum(rows[f].iter().map(|&(_, r)| r)),
            _ => csum(leaves.iter().map(|&l| self.rate(l, f))),
        }
    }

    /// True when every leaf ranks the contents identically (demand vectors are
    /// proportional across contents).
    pub fn is_leaf_homogeneous(&self) -> bool {
        match self {
            CpDemand::Zipf { ranks, .. } => ranks.iter().all(|r| r.is_none()),
            CpDemand::Explicit { .. } => false,
        }
    }
}

/// Demand of every provider plus the network-wide content size.
#[derive(Debug, Clone)]
pub struct DemandModel {
    /// GB per file.
    pub file_size_gb: f64,
    pub cps: Vec<CpDemand>,
}

impl DemandModel {
    pub fn new(file_size_gb: f64, cps: Vec<CpDemand>) -> Result<Self> {
        if !(file_size_gb.is_finite() && file_size_gb > 0.0) {
            return Err(invalid("file size must be > 0"));
        }
        Ok(DemandModel { file_size_gb, cps })
    }

    pub fn cp(&self, k: CpId) -> &CpDemand {
        &self.cps[k.0]
    }

    pub fn cp_ids(&self) -> impl Iterator<Item = CpId> {
        (0..self.cps.len()).map(CpId)
    }
}

/// Single-provider convenience wrapper around [`CpDemand::synthesize_zipf`].
pub fn synthesize_zipf_demand(
    net: &TreeNetwork,
    catalog: Catalog,
    file_size_gb: f64,
    per_ano_totals: &BTreeMap<AnoId, f64>,
    alpha: f64,
    permute_per_ano: bool,
    seed: u64,
) -> Result<DemandModel> {
    let cp = CpDemand::synthesize_zipf(net, catalog.files, per_ano_totals, alpha, permute_per_ano, seed)?;
    DemandModel::new(file_size_gb, vec![cp])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_symmetric_3tier, SymmetricParams, TierSpec};

    fn two_ano_net() -> TreeNetwork {
        let t = TierSpec::priced(0.0, 0.0);
        build_symmetric_3tier(4, 2, &SymmetricParams { anos: 2, leaf: t, intermediate: t, root: t }).unwrap()
    }

    #[test]
    fn zipf_small_cases() {
        let w = zipf_weights(2, 1.0).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 1.0 / 3.0).abs() < 1e-15);
        let w = zipf_weights(3, 0.0).unwrap();
        assert!(w.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        assert!(zipf_weights(0, 0.8).is_err());
        assert!(zipf_weights(3, -0.1).is_err());
    }

    #[test]
    fn hit_prob_edges() {
        let w = zipf_weights(2, 1.0).unwrap();
        assert_eq!(hit_prob_exact(&w, 0).unwrap(), 0.0);
        assert!((hit_prob_exact(&w, 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((hit_prob_exact(&w, 2).unwrap() - 1.0).abs() < 1e-15);
        assert!(hit_prob_exact(&w, 3).is_err());
        assert!((hit_prob_exact(&[0.2, 0.5, 0.3], 1).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn hit_prob_continuous_cases() {
        assert_eq!(hit_prob_continuous(10.0, 10.0, 0.8).unwrap(), 1.0);
        assert_eq!(hit_prob_continuous(0.0, 10.0, 0.8).unwrap(), 0.0);
        let v = hit_prob_continuous(0.1, 10.0, 0.8).unwrap();
        assert!((v - 0.398107170553497).abs() < 1e-12);
        assert!(hit_prob_continuous(1.0, 0.0, 0.8).is_err());
        assert!(hit_prob_continuous(1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn zipf_demand_preserves_totals() {
        let net = two_ano_net();
        let totals = BTreeMap::from([(AnoId(0), 160.0), (AnoId(1), 80.0)]);
        let d = CpDemand::synthesize_zipf(&net, 1000, &totals, 0.8, true, 7).unwrap();
        for (a, t) in [(AnoId(0), 160.0), (AnoId(1), 80.0)] {
            let got = csum(net.ano_leaves(a).flat_map(|l| (0..1000).map(move |f| (l, f))).map(|(l, f)| d.rate(l, f)));
            assert!((got - t).abs() <= 1e-9 * t, "{a}: {got}");
        }
        let bad = BTreeMap::from([(AnoId(5), 1.0)]);
        assert!(CpDemand::synthesize_zipf(&net, 10, &bad, 0.8, false, 0).is_err());
    }

    #[test]
    fn zipf_demand_is_deterministic() {
        let net = two_ano_net();
        let totals = BTreeMap::from([(AnoId(0), 1.0), (AnoId(1), 1.0)]);
        let a = CpDemand::synthesize_zipf(&net, 500, &totals, 0.8, true, 42).unwrap();
        let b = CpDemand::synthesize_zipf(&net, 500, &totals, 0.8, true, 42).unwrap();
        let c = CpDemand::synthesize_zipf(&net, 500, &totals, 0.8, true, 43).unwrap();
        let leaf = net.ano_leaves(AnoId(1)).next().unwrap();
        let va: Vec<u64> = (0..500).map(|f| a.rate(leaf, f).to_bits()).collect();
        let vb: Vec<u64> = (0..500).map(|f| b.rate(leaf, f).to_bits()).collect();
        let vc: Vec<u64> = (0..500).map(|f| c.rate(leaf, f).to_bits()).collect();
        assert_eq!(va, vb);
        assert_ne!(va, vc);
    }

    #[test]
    fn unpermuted_demand_follows_zipf_order() {
        let net = two_ano_net();
        let totals = BTreeMap::from([(AnoId(0), 3.0), (AnoId(1), 1.0)]);
        let d = CpDemand::synthesize_zipf(&net, 200, &totals, 0.8, false, 1).unwrap();
        assert!(d.is_leaf_homogeneous());
        let agg: Vec<f64> = (0..200).map(|f| d.file_total(f, net.leaves())).collect();
        assert!(agg.windows(2).all(|p| p[0] >= p[1]));
    }

    #[test]
    fn explicit_rows() {
        let net = two_ano_net();
        let l = net.leaves()[0];
        let d = CpDemand::explicit(&net, 3, &[(l, 0, 1.0), (l, 2, 0.5), (l, 0, 0.25)]).unwrap();
        assert_eq!(d.rate(l, 0), 1.25);
        assert_eq!(d.leaf_total(l), 1.75);
        assert!(CpDemand::explicit(&net, 3, &[(NodeId(0), 0, 1.0)]).is_err());
        assert!(CpDemand::explicit(&net, 3, &[(l, 3, 1.0)]).is_err());
        assert!(CpDemand::explicit(&net, 3, &[(l, 0, -1.0)]).is_err());
    }
}
