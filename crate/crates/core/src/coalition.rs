//! Sharing a provider's central-office cache among the access operators that
//! use it.
//!
//! Prices here are per content: `s` per stored file and `b` per unit of
//! demand removed from transit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demand::{random_ranking, zipf_weights};
use crate::error::{invalid, Error, Result};
use crate::net::AnoId;
use crate::numeric::{csum, CompensatedSum};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoGameInstance {
    pub anos: Vec<AnoId>,
    /// `demand[i][f]`: demand of `anos[i]` for file `f`.
    pub demand: Vec<Vec<f64>>,
    pub storage_price: f64,
    pub bandwidth_price: f64,
    /// Subsidy fraction `r_a` of each ANO, aligned with `anos`.
    pub shares: Vec<f64>,
}

impl CoGameInstance {
    pub fn new(demand: Vec<Vec<f64>>, storage_price: f64, bandwidth_price: f64, shares: Vec<f64>) -> Result<Self> {
        let g = CoGameInstance {
            anos: (0..demand.len()).map(AnoId).collect(),
            demand,
            storage_price,
            bandwidth_price,
            shares,
        };
        g.check()?;
        Ok(g)
    }

    pub fn check(&self) -> Result<()> {
        if self.demand.len() != self.anos.len() || self.shares.len() != self.anos.len() {
            return Err(invalid("demand and shares need one entry per ANO"));
        }
        let files = self.files();
        if self.demand.iter().any(|d| d.len() != files) {
            return Err(invalid("every ANO needs demand for the whole catalog"));
        }
        if self.demand.iter().flatten().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(invalid("demand must be finite and >= 0"));
        }
        if !(self.storage_price.is_finite() && self.storage_price >= 0.0) {
            return Err(invalid("storage price must be >= 0"));
        }
        if !(self.bandwidth_price.is_finite() && self.bandwidth_price > 0.0) {
            return Err(invalid("bandwidth price must be > 0"));
        }
        if self.shares.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(invalid("shares must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn files(&self) -> usize {
        self.demand.first().map_or(0, Vec::len)
    }

    /// Sub-coalition made of the ANOs at the given positions.
    pub fn restrict(&self, members: &[usize]) -> CoGameInstance {
        CoGameInstance {
            anos: members.iter().map(|&i| self.anos[i]).collect(),
            demand: members.iter().map(|&i| self.demand[i].clone()).collect(),
            storage_price: self.storage_price,
            bandwidth_price: self.bandwidth_price,
            shares: members.iter().map(|&i| self.shares[i]).collect(),
        }
    }

    fn aggregate(&self, f: usize) -> f64 {
        self.demand.iter().map(|d| d[f]).sum()
    }

    /// Total demand `T_a` of each ANO.
    pub fn totals(&self) -> Vec<f64> {
        self.demand.iter().map(|d| csum(d.iter().copied())).collect()
    }
}

/// Value split of one cached set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueLedger {
    pub cached_set: Vec<usize>,
    pub total_saving: f64,
    pub phi: Vec<f64>,
    /// `eta_shares[a][i]` is the share of ANO `a` in `cached_set[i]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_shares: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zeta_shares: Option<Vec<f64>>,
    /// `r_a * phi_a` per ANO.
    pub subsidies: Vec<f64>,
    pub subsidy_total: f64,
}

/// Files whose aggregate demand strictly exceeds `s / b`.
pub fn optimal_set(g: &CoGameInstance) -> Result<Vec<usize>> {
    if !(g.bandwidth_price > 0.0) {
        return Err(invalid("bandwidth price must be > 0"));
    }
    let threshold = g.storage_price / g.bandwidth_price;
    Ok((0..g.files()).filter(|&f| g.aggregate(f) > threshold).collect())
}

/// `E(C) = sum over cached f of (b * sum_a lambda_a^f - s)`.
pub fn savings(g: &CoGameInstance, cached: &[usize]) -> f64 {
    csum(cached.iter().map(|&f| g.aggregate(f) * g.bandwidth_price - g.storage_price))
}

fn subsidies(g: &CoGameInstance, phi: &[f64]) -> (Vec<f64>, f64) {
    let subs: Vec<f64> = phi.iter().zip(&g.shares).map(|(p, r)| p * r).collect();
    let total = csum(subs.iter().copied());
    (subs, total)
}

/// Per-file demand-proportional split of the storage cost.
pub fn eta_distribution(g: &CoGameInstance, cached: &[usize]) -> Result<ValueLedger> {
    let n = g.anos.len();
    let mut eta = vec![Vec::with_capacity(cached.len()); n];
    let mut phi = vec![CompensatedSum::new(); n];
    for &f in cached {
        let tot = g.aggregate(f);
        if !(tot > 0.0) {
            return Err(invalid(format!("cached file {f} has no demand")));
        }
        for a in 0..n {
            let e = g.demand[a][f] / tot;
            eta[a].push(e);
            phi[a].add(g.demand[a][f] * g.bandwidth_price);
            phi[a].add(-e * g.storage_price);
        }
    }
    let phi: Vec<f64> = phi.iter().map(CompensatedSum::value).collect();
    let (subsidies, subsidy_total) = subsidies(g, &phi);
    Ok(ValueLedger {
        cached_set: cached.to_vec(),
        total_saving: savings(g, cached),
        phi,
        eta_shares: Some(eta),
        zeta_shares: None,
        subsidies,
        subsidy_total,
    })
}

/// Split of the storage cost by each ANO's share of the hit traffic.
pub fn zeta_distribution(g: &CoGameInstance, cached: &[usize]) -> Result<ValueLedger> {
    let hits: Vec<f64> = g.demand.iter().map(|d| csum(cached.iter().map(|&f| d[f]))).collect();
    let total = csum(hits.iter().copied());
    if !(total > 0.0) {
        return Err(invalid("cached set attracts no traffic"));
    }
    let zeta: Vec<f64> = hits.iter().map(|h| h / total).collect();
    let store = cached.len() as f64 * g.storage_price;
    let phi: Vec<f64> = hits.iter().zip(&zeta).map(|(h, z)| h * g.bandwidth_price - z * store).collect();
    let (subsidies, subsidy_total) = subsidies(g, &phi);
    Ok(ValueLedger {
        cached_set: cached.to_vec(),
        total_saving: savings(g, cached),
        phi,
        eta_shares: None,
        zeta_shares: Some(zeta),
        subsidies,
        subsidy_total,
    })
}

/// Content set maximizing the total subsidy when costs are split by `eta`.
///
/// A file contributes `(sum_a r_a lambda_a)(b - s / sum_a lambda_a)`, so it is
/// kept iff that product is strictly positive.
pub fn subsidy_maximizing_set(g: &CoGameInstance) -> Vec<usize> {
    (0..g.files())
        .filter(|&f| {
            let tot = g.aggregate(f);
            let weighted: f64 = (0..g.anos.len()).map(|a| g.shares[a] * g.demand[a][f]).sum();
            tot > 0.0 && weighted * (g.bandwidth_price - g.storage_price / tot) > 0.0
        })
        .collect()
}

/// Players of the two-sided game: the provider and every ANO.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Player {
    Cp,
    Ano(AnoId),
}

pub const SHAPLEY_MAX_PLAYERS: usize = 8;

/// Exact Shapley value of the game where a coalition is worth the optimal
/// savings of its ANOs if the provider is in it and nothing otherwise.
///
/// Enumerates every arrival order. Index 0 of the result is the provider.
pub fn shapley_oracle(g: &CoGameInstance) -> Result<Vec<(Player, f64)>> {
    g.check()?;
    let n = g.anos.len() + 1;
    if n > SHAPLEY_MAX_PLAYERS {
        return Err(Error::TooLarge { size: n, limit: SHAPLEY_MAX_PLAYERS });
    }
    let value = coalition_values(g)?;
    let mut acc = vec![CompensatedSum::new(); n];
    let mut perm: Vec<usize> = (0..n).collect();
    let mut count: u64 = 0;
    loop {
        let mut mask = 0usize;
        for &p in &perm {
            let next = mask | 1 << p;
            acc[p].add(value[next] - value[mask]);
            mask = next;
        }
        count += 1;
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let players = std::iter::once(Player::Cp).chain(g.anos.iter().map(|&a| Player::Ano(a)));
    Ok(players.zip(acc).map(|(p, s)| (p, s.value() / count as f64)).collect())
}

/// `v(S)` for every bitmask over players (bit 0 = provider).
pub fn coalition_values(g: &CoGameInstance) -> Result<Vec<f64>> {
    let n = g.anos.len() + 1;
    let mut value = vec![0.0; 1 << n];
    for (mask, v) in value.iter_mut().enumerate() {
        if mask & 1 == 0 {
            continue;
        }
        let members: Vec<usize> = (1..n).filter(|i| mask >> i & 1 == 1).map(|i| i - 1).collect();
        let sub = g.restrict(&members);
        *v = savings(&sub, &optimal_set(&sub)?);
    }
    Ok(value)
}

fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).expect("exists");
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Settings of the approximate-verification experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationParams {
    pub files: usize,
    pub alpha: f64,
    /// Total demand of each ANO. ANO 0 keeps the natural ranking, the others
    /// get independent random rankings.
    pub demand: Vec<f64>,
    /// Per content.
    pub storage_price: f64,
    pub bandwidth_price: f64,
    /// Shares of ANOs other than the first.
    pub other_shares: Vec<f64>,
    /// Values of the first ANO's share to sweep.
    pub r1_grid: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl VerificationParams {
    /// Two ANOs at 160 and 80 Mb/s, Zipf(0.8), $3e-5 per content, $4 per Mb/s, r2 = 0.5.
    pub fn reference(files: usize) -> Self {
        VerificationParams {
            files,
            alpha: 0.8,
            demand: vec![160.0, 80.0],
            storage_price: 3e-5,
            bandwidth_price: 4.0,
            other_shares: vec![0.5],
            r1_grid: (1..=9).map(|i| i as f64 / 10.0).collect(),
            seeds: (0..10).collect(),
        }
    }
}

/// Outcome of one random ranking, independent of the shares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedLedger {
    pub seed: u64,
    pub cached: usize,
    pub total_saving: f64,
    pub hit_traffic: Vec<f64>,
    pub zeta_shares: Vec<f64>,
    pub phi_eta: Vec<f64>,
    pub phi_zeta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub r1: f64,
    /// Percent difference per ANO, averaged over seeds.
    pub err: Vec<f64>,
    pub err_tot: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub rows: Vec<ErrorRow>,
    pub seeds: Vec<SeedLedger>,
}

fn seed_ledger(p: &VerificationParams, weights: &[f64], seed: u64) -> SeedLedger {
    let n = p.demand.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ranks: Vec<Option<Vec<u32>>> = (0..n).map(|a| (a > 0).then(|| random_ranking(p.files, &mut rng))).collect();
    let threshold = p.storage_price / p.bandwidth_price;
    let mut hits = vec![CompensatedSum::new(); n];
    let mut eta_cost = vec![CompensatedSum::new(); n];
    let mut lam = vec![0.0; n];
    let mut cached = 0usize;
    for f in 0..p.files {
        for a in 0..n {
            let r = ranks[a].as_ref().map_or(f, |r| r[f] as usize);
            lam[a] = p.demand[a] * weights[r];
        }
        let tot: f64 = lam.iter().sum();
        if tot > threshold {
            cached += 1;
            for a in 0..n {
                hits[a].add(lam[a]);
                eta_cost[a].add(lam[a] / tot * p.storage_price);
            }
        }
    }
    let hit_traffic: Vec<f64> = hits.iter().map(CompensatedSum::value).collect();
    let hit_total = csum(hit_traffic.iter().copied());
    let zeta: Vec<f64> = hit_traffic.iter().map(|h| h / hit_total).collect();
    let store = cached as f64 * p.storage_price;
    let phi_eta = (0..n).map(|a| hit_traffic[a] * p.bandwidth_price - eta_cost[a].value()).collect();
    let phi_zeta = (0..n).map(|a| hit_traffic[a] * p.bandwidth_price - zeta[a] * store).collect();
    SeedLedger {
        seed,
        cached,
        total_saving: hit_total * p.bandwidth_price - store,
        hit_traffic,
        zeta_shares: zeta,
        phi_eta,
        phi_zeta,
    }
}

fn pct(approx: f64, exact: f64) -> f64 {
    (approx - exact) / exact * 100.0
}

/// Percentage error of the traffic-proportional subsidy estimate against the
/// exact per-file split, per ANO and in total, averaged over random rankings.
pub fn verification_error_experiment(p: &VerificationParams) -> Result<VerificationReport> {
    let n = p.demand.len();
    if n == 0 || p.other_shares.len() + 1 != n {
        return Err(invalid("need one share per ANO after the first"));
    }
    if p.seeds.is_empty() || p.files == 0 {
        return Err(invalid("need at least one seed and one file"));
    }
    if !(p.bandwidth_price > 0.0) || p.storage_price < 0.0 {
        return Err(invalid("prices must satisfy b > 0 and s >= 0"));
    }
    let weights = zipf_weights(p.files, p.alpha)?;
    let seeds: Vec<SeedLedger> = p.seeds.par_iter().map(|&s| seed_ledger(p, &weights, s)).collect();
    let mut rows = Vec::with_capacity(p.r1_grid.len());
    for &r1 in &p.r1_grid {
        let shares: Vec<f64> = std::iter::once(r1).chain(p.other_shares.iter().copied()).collect();
        let mut err = vec![CompensatedSum::new(); n];
        let mut err_tot = CompensatedSum::new();
        for s in &seeds {
            let sub_eta: Vec<f64> = (0..n).map(|a| shares[a] * s.phi_eta[a]).collect();
            let sub_zeta: Vec<f64> = (0..n).map(|a| shares[a] * s.phi_zeta[a]).collect();
            for a in 0..n {
                err[a].add(pct(sub_zeta[a], sub_eta[a]));
            }
            err_tot.add(pct(csum(sub_zeta.iter().copied()), csum(sub_eta.iter().copied())));
        }
        let k = seeds.len() as f64;
        rows.push(ErrorRow { r1, err: err.iter().map(|e| e.value() / k).collect(), err_tot: err_tot.value() / k });
    }
    Ok(VerificationReport { rows, seeds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn game(demand: Vec<Vec<f64>>, s: f64, b: f64) -> CoGameInstance {
        let n = demand.len();
        CoGameInstance::new(demand, s, b, vec![0.5; n]).unwrap()
    }

    #[test]
    fn threshold_is_strict() {
        let g = game(vec![vec![1e-5, 5e-6, 7.5e-6]], 3e-5, 4.0);
        assert_eq!(optimal_set(&g).unwrap(), vec![0]);
        let free = game(vec![vec![0.0, 1e-9, 2.0]], 0.0, 4.0);
        assert_eq!(optimal_set(&free).unwrap(), vec![1, 2]);
        let mut bad = free.clone();
        bad.bandwidth_price = 0.0;
        assert!(optimal_set(&bad).is_err());
    }

    #[test]
    fn savings_examples() {
        let g = game(vec![vec![2.0]], 4.0, 4.0);
        assert_eq!(savings(&g, &[]), 0.0);
        // lambda * b = 2s
        let g = game(vec![vec![2.0]], 4.0, 4.0);
        assert_eq!(savings(&g, &[0]), 4.0);
    }

    #[test]
    fn eta_ratio_and_symmetry() {
        let g = game(vec![vec![6.0], vec![2.0]], 1.0, 1.0);
        let l = eta_distribution(&g, &[0]).unwrap();
        assert_eq!(l.eta_shares.unwrap(), vec![vec![0.75], vec![0.25]]);
        let g = game(vec![vec![3.0, 1.0], vec![3.0, 1.0]], 0.5, 2.0);
        let l = eta_distribution(&g, &optimal_set(&g).unwrap()).unwrap();
        assert_eq!(l.phi[0], l.phi[1]);
        let g = game(vec![vec![0.0], vec![0.0]], 0.5, 2.0);
        assert!(eta_distribution(&g, &[0]).is_err());
    }

    #[test]
    fn zeta_examples() {
        // Same popularity law, T = 3 and 1.
        let g = game(vec![vec![1.5, 0.9, 0.6], vec![0.5, 0.3, 0.2]], 0.1, 1.0);
        for c in [vec![0], vec![0, 1], vec![1, 2]] {
            let z = zeta_distribution(&g, &c).unwrap().zeta_shares.unwrap();
            assert!((z[0] - 0.75).abs() < 1e-15 && (z[1] - 0.25).abs() < 1e-15);
            let e = eta_distribution(&g, &c).unwrap();
            let zl = zeta_distribution(&g, &c).unwrap();
            for a in 0..2 {
                assert!((e.phi[a] - zl.phi[a]).abs() <= 1e-9 * e.phi[a].abs());
            }
        }
        let single = game(vec![vec![1.0, 2.0]], 0.5, 1.0);
        let l = zeta_distribution(&single, &[0, 1]).unwrap();
        assert_eq!(l.zeta_shares.unwrap(), vec![1.0]);
        assert_eq!(l.phi[0], l.total_saving);
        assert!(zeta_distribution(&single, &[]).is_err());
    }

    #[test]
    fn zeta_sums_to_one_under_permutations() {
        let w = zipf_weights(200, 0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let p = random_ranking(200, &mut rng);
            let d2: Vec<f64> = (0..200).map(|f| 80.0 * w[p[f] as usize]).collect();
            let d1: Vec<f64> = w.iter().map(|x| 160.0 * x).collect();
            let g = game(vec![d1, d2], 0.05, 4.0);
            let z = zeta_distribution(&g, &optimal_set(&g).unwrap()).unwrap().zeta_shares.unwrap();
            assert!((z.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn optimal_set_beats_every_subset() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let files = rng.random_range(1..=10);
            let demand = (0..2).map(|_| (0..files).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
            let g = game(demand, rng.random_range(0.0..1.5), 1.0);
            let best = savings(&g, &optimal_set(&g).unwrap());
            for mask in 0u32..(1 << files) {
                let c: Vec<usize> = (0..files).filter(|f| mask >> f & 1 == 1).collect();
                assert!(savings(&g, &c) <= best + 1e-12);
            }
        }
    }

    #[test]
    fn shapley_small_games() {
        let g = game(vec![vec![3.0, 0.25]], 1.0, 1.0);
        let v = shapley_oracle(&g).unwrap();
        let e = savings(&g, &optimal_set(&g).unwrap());
        assert_eq!(v[0].1, e / 2.0);
        assert_eq!(v[1].1, e / 2.0);

        let g = game(vec![vec![3.0, 1.0], vec![0.0, 0.0]], 0.5, 1.0);
        let v = shapley_oracle(&g).unwrap();
        assert_eq!(v[2], (Player::Ano(AnoId(1)), 0.0));

        let big = game(vec![vec![1.0]; 8], 0.5, 1.0);
        assert!(matches!(shapley_oracle(&big), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn next_permutation_counts() {
        let mut p = vec![0, 1, 2, 3];
        let mut n = 1;
        while next_permutation(&mut p) {
            n += 1;
        }
        assert_eq!(n, 24);
    }

    #[test]
    fn experiment_small() {
        let p = VerificationParams::reference(2000);
        let rep = verification_error_experiment(&p).unwrap();
        assert_eq!(rep.rows.len(), 9);
        let mid = &rep.rows[4];
        assert_eq!(mid.r1, 0.5);
        assert!(mid.err_tot.abs() < 1e-9);
        for r in &rep.rows {
            for a in 0..2 {
                assert!((r.err[a] - mid.err[a]).abs() <= 1e-9 * mid.err[a].abs().max(1e-9));
            }
        }
    }
}
