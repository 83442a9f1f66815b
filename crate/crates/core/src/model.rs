//! Domain types and exact probability evaluations shared by the samplers.

use crate::error::{BaconError, Result};
use crate::matrix::{popcount, popcount_and, words_for};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

/// Prior on the mass parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MassPrior {
    Fixed,
    Gamma { shape: f64, rate: f64 },
}

/// Poisson-Dirichlet hyperparameters.
///
/// The discount always carries the mixture prior `½δ₀ + ½U(0,1)`; only the
/// mass prior is configurable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdpHyper {
    pub mass: f64,
    pub discount: f64,
    pub mass_prior: MassPrior,
}

impl PdpHyper {
    pub fn new(mass: f64, discount: f64) -> Result<Self> {
        let h = Self { mass, discount, mass_prior: MassPrior::Fixed };
        h.validate()?;
        Ok(h)
    }

    pub fn with_mass_prior(mut self, prior: MassPrior) -> Result<Self> {
        self.mass_prior = prior;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(BaconError::Config(format!("mass must be > 0, got {}", self.mass)));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(BaconError::Config(format!("discount must lie in [0, 1), got {}", self.discount)));
        }
        if let MassPrior::Gamma { shape, rate } = self.mass_prior {
            if !(shape > 0.0 && rate > 0.0) {
                return Err(BaconError::Config("gamma mass prior needs shape, rate > 0".into()));
            }
        }
        Ok(())
    }
}

/// Covariate-to-cluster allocation with contiguous 0-based labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationState {
    labels: Vec<usize>,
    sizes: Vec<usize>,
}

/// Bookkeeping produced by [`AllocationState::remove`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Removal {
    /// The cluster still has members.
    Kept,
    /// Cluster `vacated` emptied; the former last cluster now uses its slot.
    Emptied { vacated: usize },
}

const UNASSIGNED: usize = usize::MAX;

impl AllocationState {
    /// Builds an allocation from arbitrary labels, relabeling clusters by
    /// order of first appearance.
    pub fn from_labels(raw: &[usize]) -> Self {
        let mut map = std::collections::HashMap::new();
        let mut labels = Vec::with_capacity(raw.len());
        let mut sizes = Vec::new();
        for &l in raw {
            let next = map.len();
            let k = *map.entry(l).or_insert(next);
            if k == sizes.len() {
                sizes.push(0);
            }
            sizes[k] += 1;
            labels.push(k);
        }
        Self { labels, sizes }
    }

    pub fn singletons(p: usize) -> Self {
        Self { labels: (0..p).collect(), sizes: vec![1; p] }
    }

    pub fn one_cluster(p: usize) -> Self {
        Self { labels: vec![0; p], sizes: if p > 0 { vec![p] } else { vec![] } }
    }

    pub fn p(&self) -> usize {
        self.labels.len()
    }

    pub fn q(&self) -> usize {
        self.sizes.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, j: usize) -> usize {
        self.labels[j]
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn members(&self, k: usize) -> Vec<usize> {
        (0..self.p()).filter(|&j| self.labels[j] == k).collect()
    }

    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.q()];
        for (j, &k) in self.labels.iter().enumerate() {
            out[k].push(j);
        }
        out
    }

    /// Detaches covariate `j`. An emptied cluster is filled by swapping in
    /// the last cluster so labels stay contiguous.
    pub fn remove(&mut self, j: usize) -> Removal {
        let k = self.labels[j];
        self.labels[j] = UNASSIGNED;
        self.sizes[k] -= 1;
        if self.sizes[k] > 0 {
            return Removal::Kept;
        }
        let last = self.sizes.len() - 1;
        if k != last {
            for l in self.labels.iter_mut() {
                if *l == last {
                    *l = k;
                }
            }
        }
        self.sizes.swap_remove(k);
        Removal::Emptied { vacated: k }
    }

    /// Attaches a detached covariate to cluster `k`; `k == q` opens a new one.
    pub fn assign(&mut self, j: usize, k: usize) {
        debug_assert_eq!(self.labels[j], UNASSIGNED);
        assert!(k <= self.q());
        if k == self.q() {
            self.sizes.push(0);
        }
        self.sizes[k] += 1;
        self.labels[j] = k;
    }

    /// Labels relabeled by first appearance; equal iff the set partitions are equal.
    pub fn canonical_labels(&self) -> Vec<usize> {
        Self::from_labels(&self.labels).labels
    }

    pub fn same_partition(&self, other: &Self) -> bool {
        self.canonical_labels() == other.canonical_labels()
    }

    /// Labels counted from 1, as written to output files.
    pub fn one_based(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l + 1).collect()
    }

    pub fn check(&self) -> Result<()> {
        let mut counts = vec![0usize; self.q()];
        for &l in &self.labels {
            if l >= self.q() {
                return Err(BaconError::Numeric(format!("label {l} out of range")));
            }
            counts[l] += 1;
        }
        if counts != self.sizes || counts.contains(&0) {
            return Err(BaconError::Numeric("allocation sizes out of sync".into()));
        }
        Ok(())
    }
}

/// Binary latent vectors (one bit-packed column per cluster) and their
/// shared Bernoulli rate.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMatrix {
    n: usize,
    words: usize,
    bits: Vec<u64>,
    pub p_star: f64,
    pub lambda: f64,
}

impl LatentMatrix {
    pub fn new(n: usize, q: usize, p_star: f64, lambda: f64) -> Self {
        let words = words_for(n);
        Self { n, words, bits: vec![0; words * q], p_star, lambda }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn q(&self) -> usize {
        if self.words == 0 {
            0
        } else {
            self.bits.len() / self.words
        }
    }

    #[inline]
    pub fn column(&self, k: usize) -> &[u64] {
        &self.bits[k * self.words..(k + 1) * self.words]
    }

    #[inline]
    pub fn column_mut(&mut self, k: usize) -> &mut [u64] {
        &mut self.bits[k * self.words..(k + 1) * self.words]
    }

    pub fn get(&self, i: usize, k: usize) -> bool {
        crate::matrix::get_bit(self.column(k), i)
    }

    pub fn set(&mut self, i: usize, k: usize, v: bool) {
        crate::matrix::set_bit(self.column_mut(k), i, v)
    }

    pub fn push_column(&mut self, col: &[u64]) {
        assert_eq!(col.len(), self.words);
        self.bits.extend_from_slice(col);
    }

    /// Mirrors [`AllocationState::remove`]: the last column fills slot `k`.
    pub fn swap_remove_column(&mut self, k: usize) {
        let q = self.q();
        let w = self.words;
        if k != q - 1 {
            let (head, tail) = self.bits.split_at_mut((q - 1) * w);
            head[k * w..(k + 1) * w].copy_from_slice(&tail[..w]);
        }
        self.bits.truncate((q - 1) * w);
    }

    pub fn ones(&self) -> u64 {
        popcount(&self.bits) as u64
    }

    pub fn column_values(&self, k: usize) -> Vec<u8> {
        (0..self.n).map(|i| u8::from(self.get(i, k))).collect()
    }

    /// Dense `n x q` 0/1 rows.
    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.n).map(|i| (0..self.q()).map(|k| u8::from(self.get(i, k))).collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<u8>], q: usize, p_star: f64, lambda: f64) -> Self {
        let mut m = Self::new(rows.len(), q, p_star, lambda);
        for (i, r) in rows.iter().enumerate() {
            for (k, &v) in r.iter().enumerate() {
                m.set(i, k, v == 1);
            }
        }
        m
    }
}

/// 2x2 contamination channel `Q`, stored through its concordance vector `r`
/// and free matrix `Q*`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContaminationModel {
    pub r: [f64; 2],
    pub q_star: [[f64; 2]; 2],
    pub r_floor: f64,
    pub alpha: f64,
    pub r_alpha: f64,
    pub r_beta: f64,
}

impl Default for ContaminationModel {
    fn default() -> Self {
        Self { r: [0.9, 0.9], q_star: [[0.5, 0.5], [0.5, 0.5]], r_floor: 0.85, alpha: 1.0, r_alpha: 1.0, r_beta: 1.0 }
    }
}

impl ContaminationModel {
    /// Rows `q_s = r_s·1_s + (1 − r_s)·q*_s`.
    pub fn derive_q(&self) -> [[f64; 2]; 2] {
        let mut q = [[0.0; 2]; 2];
        for s in 0..2 {
            for t in 0..2 {
                let unit = if s == t { 1.0 } else { 0.0 };
                q[s][t] = self.r[s] * unit + (1.0 - self.r[s]) * self.q_star[s][t];
            }
        }
        q
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r_floor > 0.5 && self.r_floor < 1.0) {
            return Err(BaconError::Config(format!("r_floor must lie in (0.5, 1), got {}", self.r_floor)));
        }
        if !(self.alpha > 0.0 && self.r_alpha > 0.0 && self.r_beta > 0.0) {
            return Err(BaconError::Config("alpha, r_alpha and r_beta must be > 0".into()));
        }
        for s in 0..2 {
            if !(self.r[s] > self.r_floor && self.r[s] <= 1.0) {
                return Err(BaconError::Numeric(format!("r[{s}] = {} outside (r*, 1]", self.r[s])));
            }
            let row = self.q_star[s];
            if row.iter().any(|v| *v < 0.0) || (row[0] + row[1] - 1.0).abs() > 1e-9 {
                return Err(BaconError::Numeric(format!("q*[{s}] is not a probability vector")));
            }
        }
        Ok(())
    }
}

/// Table of latent-to-observed transition counts `n_st`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionCounts {
    pub n00: u64,
    pub n01: u64,
    pub n10: u64,
    pub n11: u64,
}

impl TransitionCounts {
    pub fn get(&self, s: usize, t: usize) -> u64 {
        match (s, t) {
            (0, 0) => self.n00,
            (0, 1) => self.n01,
            (1, 0) => self.n10,
            _ => self.n11,
        }
    }

    pub fn row_sum(&self, s: usize) -> u64 {
        self.get(s, 0) + self.get(s, 1)
    }

    pub fn total(&self) -> u64 {
        self.n00 + self.n01 + self.n10 + self.n11
    }

    pub fn add(&mut self, other: &TransitionCounts) {
        self.n00 += other.n00;
        self.n01 += other.n01;
        self.n10 += other.n10;
        self.n11 += other.n11;
    }

    /// Counts from bit-packed columns of length `n` with known popcounts.
    #[inline]
    pub fn from_packed(x: &[u64], v: &[u64], n: usize, x_ones: u32, v_ones: u32) -> Self {
        let n11 = popcount_and(x, v) as u64;
        let n10 = v_ones as u64 - n11;
        let n01 = x_ones as u64 - n11;
        let n00 = n as u64 - n11 - n10 - n01;
        Self { n00, n01, n10, n11 }
    }
}

/// `n_st = #{i : v_i = s, x_i = t}`.
pub fn transition_counts(x_col: &[u8], v_col: &[u8]) -> Result<TransitionCounts> {
    if x_col.len() != v_col.len() {
        return Err(BaconError::Data(format!("covariate has length {}, latent vector has length {}", x_col.len(), v_col.len())));
    }
    let mut c = TransitionCounts::default();
    for (&x, &v) in x_col.iter().zip(v_col) {
        match (v, x) {
            (0, 0) => c.n00 += 1,
            (0, _) => c.n01 += 1,
            (_, 0) => c.n10 += 1,
            _ => c.n11 += 1,
        }
    }
    Ok(c)
}

/// `Σ n_st·ln q_st`. A zero entry of `q` paired with a positive count yields `-inf`.
pub fn log_contamination_likelihood(counts: &TransitionCounts, q: &[[f64; 2]; 2]) -> f64 {
    let mut acc = 0.0;
    for s in 0..2 {
        for t in 0..2 {
            let n = counts.get(s, t);
            if n > 0 {
                acc += n as f64 * q[s][t].ln();
            }
        }
    }
    acc
}

/// Element-wise `ln q_st` with entries floored at 1e-300.
pub fn log_q_floored(q: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut l = [[0.0; 2]; 2];
    for s in 0..2 {
        for t in 0..2 {
            l[s][t] = q[s][t].max(1e-300).ln();
        }
    }
    l
}

/// Extended Chinese-restaurant seating probabilities for the next covariate
/// given a contiguous prefix of labels. The last entry is the new table.
pub fn crp_conditional(labels_prefix: &[usize], hyper: &PdpHyper) -> Vec<f64> {
    let q = labels_prefix.iter().map(|l| l + 1).max().unwrap_or(0);
    let mut w = vec![0.0; q + 1];
    for &l in labels_prefix {
        w[l] += 1.0;
    }
    for x in w.iter_mut().take(q) {
        *x -= hyper.discount;
    }
    w[q] = hyper.mass + q as f64 * hyper.discount;
    let total: f64 = w.iter().sum();
    w.iter().map(|x| x / total).collect()
}

/// Draws a partition of `p` items by sequential extended CRP seating.
pub fn sample_pdp_partition<R: rand::Rng + ?Sized>(rng: &mut R, p: usize, mass: f64, discount: f64) -> AllocationState {
    let mut labels = Vec::with_capacity(p);
    let mut sizes: Vec<usize> = Vec::new();
    for j in 0..p {
        let q = sizes.len() as f64;
        let u = rng.random::<f64>() * (mass + j as f64);
        let mut acc = mass + q * discount;
        let mut k = sizes.len();
        if u >= acc {
            for (c, &n) in sizes.iter().enumerate() {
                acc += n as f64 - discount;
                if u < acc {
                    k = c;
                    break;
                }
            }
            // rounding at the top edge
            if k == sizes.len() {
                k = sizes.len() - 1;
            }
        }
        if k == sizes.len() {
            sizes.push(0);
        }
        sizes[k] += 1;
        labels.push(k);
    }
    AllocationState { labels, sizes }
}

/// `Σ_{k=1}^{q-1} ln(M + k·d)`.
fn ln_rising_mass(q: usize, mass: f64, discount: f64) -> f64 {
    if q <= 1 {
        return 0.0;
    }
    if discount == 0.0 {
        return (q - 1) as f64 * mass.ln();
    }
    if discount < 1e-3 || q < 16 {
        return (1..q).map(|k| (mass + k as f64 * discount).ln()).sum();
    }
    let z = mass / discount;
    (q - 1) as f64 * discount.ln() + ln_gamma(z + q as f64) - ln_gamma(z + 1.0)
}

/// Log exchangeable partition probability for a partition given by its
/// cluster-size histogram `(size, multiplicity)`.
pub fn log_eppf_histogram(hist: &[(usize, usize)], mass: f64, discount: f64) -> f64 {
    let p: usize = hist.iter().map(|(s, m)| s * m).sum();
    let q: usize = hist.iter().map(|(_, m)| m).sum();
    if p == 0 {
        return 0.0;
    }
    let mut acc = ln_rising_mass(q, mass, discount) - (ln_gamma(mass + p as f64) - ln_gamma(mass + 1.0));
    let base = ln_gamma(1.0 - discount);
    for &(size, mult) in hist {
        if size > 1 {
            acc += mult as f64 * (ln_gamma(size as f64 - discount) - base);
        }
    }
    acc
}

pub fn size_histogram(sizes: &[usize]) -> Vec<(usize, usize)> {
    let mut s = sizes.to_vec();
    s.sort_unstable();
    let mut out: Vec<(usize, usize)> = Vec::new();
    for v in s {
        match out.last_mut() {
            Some((size, m)) if *size == v => *m += 1,
            _ => out.push((v, 1)),
        }
    }
    out
}

/// Log probability of the allocation's set partition under the PDP prior.
pub fn log_eppf(state: &AllocationState, hyper: &PdpHyper) -> f64 {
    log_eppf_histogram(&size_histogram(state.sizes()), hyper.mass, hyper.discount)
}

/// Upper bound `C(q,2)·(p*² + q*²)ⁿ` on the probability that two latent
/// vectors coincide, clamped to `[0, 1]`.
pub fn identical_latent_bound(q: usize, n: usize, p_star: f64) -> f64 {
    if q < 2 {
        return 0.0;
    }
    let pairs = (q * (q - 1) / 2) as f64;
    let rate = p_star * p_star + (1.0 - p_star) * (1.0 - p_star);
    (pairs.ln() + n as f64 * rate.ln()).exp().clamp(0.0, 1.0)
}
