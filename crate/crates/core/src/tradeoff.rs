//! Memory-for-bandwidth tradeoff in the symmetric three-tier tree.
//!
//! Tier 1 holds the leaves (`e1 * e2` of them), tier 2 the `e2` intermediate
//! nodes and tier 3 the root. Catalog and cache sizes are continuous (GB) and
//! the hit ratio is `h(C) = min(1, (C/F)^(1-alpha))`. Tier `i` caches the next
//! `C_i` most popular bytes, so in cumulative sizes `X_1 = C_1`,
//! `X_2 = C_1 + C_2`, `X_3 = C_1 + C_2 + C_3` the monthly cost
//!
//! ```text
//! e1 e2 C1 s1 + e2 C2 s2 + C3 s3 + T [(1-h(X1)) b1 + (1-h(X2)) b2 + (1-h(X3)) b3]
//! ```
//!
//! separates into one convex term per `X_i` with storage coefficient
//! `e2 (e1 s1 - s2)`, `e2 s2 - s3`, `s3` respectively. Each term has the closed
//! form minimizer `F min{1, ((1-alpha) T b_i / (F coef_i))^(1/alpha)}`. Disabled
//! tiers tie neighbouring `X` together, and when the minimizers come out
//! decreasing the offending blocks are pooled and re-solved as one term.

use serde::{Deserialize, Serialize};

use crate::demand::hit_prob_continuous;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierParams {
    pub e1: usize,
    pub e2: usize,
    /// Total busy-hour demand `T`, Mb/s.
    pub total_demand: f64,
    /// Catalog volume `F`, GB.
    pub catalog_gb: f64,
    pub alpha: f64,
    /// `s^(1..3)`, $/GB/month.
    pub storage_price: [f64; 3],
    /// `b^(1..3)`, $/(Mb/s)/month; `b^(3)` is the transit price into the root.
    pub bandwidth_price: [f64; 3],
}

impl TierParams {
    /// The parameter set of the three-tier evaluation: every `b = 4`, every
    /// `s = 0.03`, Zipf(0.8), with `T` chosen so that `T b / (F s) = gamma`.
    pub fn uniform(e1: usize, e2: usize, gamma: f64, catalog_gb: f64) -> Self {
        let (b, s) = (4.0, 0.03);
        TierParams {
            e1,
            e2,
            total_demand: gamma * catalog_gb * s / b,
            catalog_gb,
            alpha: 0.8,
            storage_price: [s; 3],
            bandwidth_price: [b; 3],
        }
    }

    /// Cost factor `T b1 / (F s1)`.
    pub fn gamma(&self) -> f64 {
        self.total_demand * self.bandwidth_price[0] / (self.catalog_gb * self.storage_price[0])
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.total_demand = gamma * self.catalog_gb * self.storage_price[0] / self.bandwidth_price[0];
        self
    }

    fn check(&self) -> Result<()> {
        if self.e1 == 0 || self.e2 == 0 {
            return Err(invalid("fanouts must be >= 1"));
        }
        if !(self.total_demand > 0.0 && self.catalog_gb > 0.0) {
            return Err(invalid("T and F must be > 0"));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(invalid("alpha must lie in [0, 1)"));
        }
        let prices = self.storage_price.iter().chain(&self.bandwidth_price);
        if prices.clone().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(invalid("prices must be finite and >= 0"));
        }
        Ok(())
    }

    /// Storage coefficients of the cumulative sizes `X_1, X_2, X_3`.
    fn coefficients(&self) -> [f64; 3] {
        let [s1, s2, s3] = self.storage_price;
        let (e1, e2) = (self.e1 as f64, self.e2 as f64);
        [e2 * (e1 * s1 - s2), e2 * s2 - s3, s3]
    }

    /// Monthly cost of tier sizes `c` (GB).
    pub fn cost(&self, c: [f64; 3]) -> f64 {
        let [s1, s2, s3] = self.storage_price;
        let [b1, b2, b3] = self.bandwidth_price;
        let (e1, e2) = (self.e1 as f64, self.e2 as f64);
        let h = |x: f64| (x.max(0.0) / self.catalog_gb).powf(1.0 - self.alpha).min(1.0);
        let (x1, x2, x3) = (c[0], c[0] + c[1], c[0] + c[1] + c[2]);
        e1 * e2 * c[0] * s1
            + e2 * c[1] * s2
            + c[2] * s3
            + self.total_demand * ((1.0 - h(x1)) * b1 + (1.0 - h(x2)) * b2 + (1.0 - h(x3)) * b3)
    }

    /// Cost without any cache.
    pub fn baseline_cost(&self) -> f64 {
        self.total_demand * self.bandwidth_price.iter().sum::<f64>()
    }
}

/// Which tiers may hold a cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TierSet(pub [bool; 3]);

impl TierSet {
    pub const ALL: TierSet = TierSet([true, true, true]);
    pub const T1: TierSet = TierSet([true, false, false]);
    pub const T12: TierSet = TierSet([true, true, false]);
    pub const T13: TierSet = TierSet([true, false, true]);

    /// The four configurations compared in the savings curves.
    pub const CURVES: [TierSet; 4] = [TierSet::T1, TierSet::T12, TierSet::T13, TierSet::ALL];

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&b| b)
    }

    pub fn label(&self) -> String {
        let tiers: Vec<String> = (0..3).filter(|&i| self.0[i]).map(|i| (i + 1).to_string()).collect();
        tiers.join("+")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierSolution {
    /// Per-tier cache size `C_1, C_2, C_3` in GB (0 for disabled tiers).
    pub sizes: [f64; 3],
    pub total_cost: f64,
    pub baseline_cost: f64,
    pub saving_fraction: f64,
    /// Some raw storage coefficient was <= 0, so the unpooled closed form would
    /// not apply; the pooled solution is still optimal.
    pub degenerate: bool,
}

struct Block {
    coef: f64,
    weight: f64,
    pinned: bool,
    len: usize,
    x: f64,
}

fn block_minimizer(p: &TierParams, coef: f64, weight: f64, pinned: bool) -> f64 {
    let f = p.catalog_gb;
    let t = p.total_demand;
    if pinned {
        return 0.0;
    }
    if weight <= 0.0 {
        return if coef >= 0.0 { 0.0 } else { f };
    }
    if coef <= 0.0 {
        return f;
    }
    if p.alpha == 0.0 {
        // Linear hit ratio: all or nothing.
        return if t * weight / f > coef { f } else { 0.0 };
    }
    let ratio = (1.0 - p.alpha) * t * weight / (f * coef);
    f * ratio.powf(1.0 / p.alpha).min(1.0)
}

/// Optimal cache sizes with only the tiers in `enabled` allowed to cache.
pub fn solve_tiers(p: &TierParams, enabled: TierSet) -> Result<TierSolution> {
    p.check()?;
    if enabled.is_empty() {
        return Err(invalid("at least one tier must be enabled"));
    }
    let coef = p.coefficients();
    let mut stack: Vec<Block> = Vec::with_capacity(3);
    for i in 0..3 {
        let merge_prev = i > 0 && !enabled.0[i];
        if merge_prev {
            let b = stack.last_mut().expect("tier 1 always opens a block");
            b.coef += coef[i];
            b.weight += p.bandwidth_price[i];
            b.len += 1;
            b.x = block_minimizer(p, b.coef, b.weight, b.pinned);
        } else {
            let pinned = i == 0 && !enabled.0[0];
            let x = block_minimizer(p, coef[i], p.bandwidth_price[i], pinned);
            stack.push(Block { coef: coef[i], weight: p.bandwidth_price[i], pinned, len: 1, x });
        }
        // Pool adjacent blocks whose minimizers violate X_1 <= X_2 <= X_3.
        while stack.len() >= 2 && stack[stack.len() - 2].x > stack[stack.len() - 1].x {
            let top = stack.pop().unwrap();
            let b = stack.last_mut().unwrap();
            b.coef += top.coef;
            b.weight += top.weight;
            b.pinned |= top.pinned;
            b.len += top.len;
            b.x = block_minimizer(p, b.coef, b.weight, b.pinned);
        }
    }
    let mut cum = [0.0; 3];
    let mut i = 0;
    for b in &stack {
        for _ in 0..b.len {
            cum[i] = b.x;
            i += 1;
        }
    }
    let sizes = [cum[0], cum[1] - cum[0], cum[2] - cum[1]];
    let degenerate = (0..3).any(|i| enabled.0[i] && coef[i] <= 0.0);
    let total_cost = p.cost(sizes);
    let baseline_cost = p.baseline_cost();
    let saving_fraction = if baseline_cost > 0.0 { (1.0 - total_cost / baseline_cost).max(0.0) } else { 0.0 };
    Ok(TierSolution { sizes, total_cost, baseline_cost, saving_fraction, degenerate })
}

/// Optimal sizes with caches allowed at all three tiers.
pub fn optimal_tier_sizes(p: &TierParams) -> Result<TierSolution> {
    solve_tiers(p, TierSet::ALL)
}

/// Optimal sizes when only a strict, non-empty subset of tiers may cache.
pub fn optimal_subset_tiers(p: &TierParams, enabled: TierSet) -> Result<TierSolution> {
    if enabled == TierSet::ALL {
        return Err(invalid("use optimal_tier_sizes for the full tier set"));
    }
    solve_tiers(p, enabled)
}

/// Hit ratio at cumulative size `x`, exposed for reporting.
pub fn tier_hit_ratio(p: &TierParams, x: f64) -> Result<f64> {
    hit_prob_continuous(x, p.catalog_gb, p.alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub gamma: f64,
    pub subset: String,
    pub solution: TierSolution,
}

/// Savings of the four tier configurations at each cost factor. `T` is reset
/// per point so that `T b1 / (F s1) = gamma`; everything else stays fixed.
pub fn savings_curve(p: &TierParams, gammas: &[f64]) -> Result<Vec<CurveRow>> {
    if p.storage_price[0] <= 0.0 || p.bandwidth_price[0] <= 0.0 {
        return Err(invalid("cost factor needs positive tier-1 prices"));
    }
    let mut rows = Vec::with_capacity(gammas.len() * 4);
    for &g in gammas {
        if !(g.is_finite() && g > 0.0) {
            return Err(invalid(format!("cost factor must be > 0, got {g}")));
        }
        let q = p.with_gamma(g);
        for set in TierSet::CURVES {
            rows.push(CurveRow { gamma: g, subset: set.label(), solution: solve_tiers(&q, set)? });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_point_saves_over_seventy_percent() {
        let p = TierParams::uniform(100, 10, 0.0, 1e4);
        let p = TierParams { total_demand: 1e4, ..p };
        assert!((p.gamma() - 133.333).abs() < 1e-3);
        let s = optimal_tier_sizes(&p).unwrap();
        assert!(s.saving_fraction > 0.70, "{s:?}");
        let x1 = 1e4 * ((0.2_f64 * 1e4 * 4.0) / (1e4 * 10.0 * (100.0 * 0.03 - 0.03))).powf(1.25);
        assert!((s.sizes[0] - x1).abs() < 1e-9 * x1);
        assert!(!s.degenerate);
        assert!((s.sizes.iter().sum::<f64>() - 1e4).abs() < 1e-6);
    }

    #[test]
    fn free_bandwidth_means_no_cache() {
        let mut p = TierParams::uniform(100, 10, 133.0, 1e4);
        p.total_demand = 1e4;
        p.bandwidth_price = [0.0; 3];
        let s = optimal_tier_sizes(&p).unwrap();
        assert_eq!(s.sizes, [0.0; 3]);
        assert_eq!(s.saving_fraction, 0.0);
    }

    #[test]
    fn tiny_bandwidth_price_tier1_only() {
        let mut p = TierParams::uniform(100, 10, 133.0, 1e4);
        p.bandwidth_price = [1e-9; 3];
        let s = optimal_subset_tiers(&p, TierSet::T1).unwrap();
        assert!(s.sizes[0] < 1e-9 * p.catalog_gb && s.saving_fraction < 1e-2, "{s:?}");
        assert!(optimal_subset_tiers(&p, TierSet([false; 3])).is_err());
    }

    #[test]
    fn degenerate_pricing_is_flagged_and_pooled() {
        let mut p = TierParams::uniform(10, 10, 50.0, 1e4);
        p.storage_price = [0.001, 0.03, 0.03];
        let s = optimal_tier_sizes(&p).unwrap();
        assert!(s.degenerate);
        let cum = [s.sizes[0], s.sizes[0] + s.sizes[1], s.sizes.iter().sum::<f64>()];
        assert!(cum[0] <= cum[1] && cum[1] <= cum[2] && cum[2] <= p.catalog_gb + 1e-9);
        assert!(s.sizes.iter().all(|&c| c >= 0.0));
    }

    #[test]
    fn curve_is_monotone_in_gamma() {
        let p = TierParams::uniform(100, 10, 1.0, 1e4);
        let gammas: Vec<f64> = (0..25).map(|i| 10f64.powf(-1.0 + i as f64 * 4.0 / 24.0)).collect();
        let rows = savings_curve(&p, &gammas).unwrap();
        for set in TierSet::CURVES {
            let s: Vec<f64> =
                rows.iter().filter(|r| r.subset == set.label()).map(|r| r.solution.saving_fraction).collect();
            assert!(s.windows(2).all(|w| w[1] >= w[0] - 1e-12), "{}: {s:?}", set.label());
        }
        assert!(savings_curve(&p, &[0.0]).is_err());
        let tiny = savings_curve(&p, &[1e-9]).unwrap();
        assert!(tiny.iter().all(|r| r.solution.saving_fraction < 1e-2), "{tiny:?}");
    }
}
