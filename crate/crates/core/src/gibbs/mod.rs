//! Gibbs sampler for allocations, latent vectors and the contamination channel.

pub mod qsampler;
mod run;

pub use qsampler::{update_concordance, update_qstar};
pub use run::*;

use crate::error::{BaconError, Result};
use crate::matrix::{popcount, words_for, BinaryDesignMatrix};
use crate::model::{
    log_eppf_histogram, log_q_floored, size_histogram, AllocationState, ContaminationModel, LatentMatrix, MassPrior, PdpHyper, Removal,
    TransitionCounts,
};
use crate::special::{gauss_legendre_unit, log_sum_exp, sample_log_weights};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Complete sampler state for the clustering stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringChainState {
    pub alloc: AllocationState,
    pub latent: LatentMatrix,
    pub contam: ContaminationModel,
    pub hyper: PdpHyper,
    pub sweep_index: u64,
}

impl ClusteringChainState {
    /// Debug-build consistency check between allocation and latent columns.
    pub fn check(&self) -> Result<()> {
        self.alloc.check()?;
        if self.latent.q() != self.alloc.q() {
            return Err(BaconError::Numeric(format!("latent columns {} != clusters {}", self.latent.q(), self.alloc.q())));
        }
        if !(self.latent.p_star > 0.0 && self.latent.p_star < 1.0) {
            return Err(BaconError::Numeric(format!("p_star = {} outside (0,1)", self.latent.p_star)));
        }
        self.contam.validate()?;
        self.hyper.validate()
    }

    #[inline]
    fn debug_check(&self) {
        if cfg!(debug_assertions) {
            if let Err(e) = self.check() {
                panic!("chain invariant violated: {e}");
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanOrder {
    Systematic,
    Random,
}

/// Which blocks run in a sweep and how many times each; zero disables a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepSchedule {
    pub order: ScanOrder,
    pub allocation: u32,
    pub latent: u32,
    pub p_star: u32,
    pub contamination: u32,
    pub discount: u32,
    pub mass: u32,
}

impl Default for SweepSchedule {
    fn default() -> Self {
        Self { order: ScanOrder::Systematic, allocation: 1, latent: 1, p_star: 1, contamination: 1, discount: 1, mass: 1 }
    }
}

impl SweepSchedule {
    /// Blocks used once the allocation is frozen.
    pub fn frozen_allocation(update_contamination: bool) -> Self {
        Self {
            order: ScanOrder::Systematic,
            allocation: 0,
            latent: 1,
            p_star: 1,
            contamination: u32::from(update_contamination),
            discount: 0,
            mass: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let total = self.allocation + self.latent + self.p_star + self.contamination + self.discount + self.mass;
        if total == 0 {
            return Err(BaconError::Config("sweep schedule enables no updates".into()));
        }
        Ok(())
    }
}

/// Log weight of covariate `j` joining an existing cluster with `size`
/// remaining members.
#[inline]
fn existing_log_weight(size: usize, d: f64, c: &TransitionCounts, lq: &[[f64; 2]; 2]) -> f64 {
    (size as f64 - d).ln() + c.n00 as f64 * lq[0][0] + c.n01 as f64 * lq[0][1] + c.n10 as f64 * lq[1][0] + c.n11 as f64 * lq[1][1]
}

/// `ln P(x_ij = t)` for a fresh latent element, marginal over `v_ij`.
fn marginal_log_emission(p_star: f64, q: &[[f64; 2]; 2]) -> [f64; 2] {
    let q0 = 1.0 - p_star;
    [(q0 * q[0][0] + p_star * q[1][0]).max(1e-300).ln(), (q0 * q[0][1] + p_star * q[1][1]).max(1e-300).ln()]
}

/// Unnormalized log weights `ln ξ_jk` for the current (detached) covariate,
/// existing clusters first and the new cluster last.
pub fn allocation_log_weights(
    x_col: &[u64],
    x_ones: u32,
    n: usize,
    alloc: &AllocationState,
    latent: &LatentMatrix,
    contam: &ContaminationModel,
    hyper: &PdpHyper,
) -> Vec<f64> {
    let q = contam.derive_q();
    let lq = log_q_floored(&q);
    let qm = alloc.q();
    let mut w = Vec::with_capacity(qm + 1);
    for k in 0..qm {
        let v = latent.column(k);
        let c = TransitionCounts::from_packed(x_col, v, n, x_ones, popcount(v));
        w.push(existing_log_weight(alloc.sizes()[k], hyper.discount, &c, &lq));
    }
    let em = marginal_log_emission(latent.p_star, &q);
    let n1 = x_ones as f64;
    let n0 = n as f64 - n1;
    w.push((hyper.mass + qm as f64 * hyper.discount).ln() + n0 * em[0] + n1 * em[1]);
    w
}

/// Draws a latent column for a new cluster whose only member is `x_col`.
fn draw_new_latent<R: Rng + ?Sized>(rng: &mut R, x_col: &[u64], n: usize, p_star: f64, q: &[[f64; 2]; 2]) -> Vec<u64> {
    let q0 = 1.0 - p_star;
    let prob1 = |t: usize| {
        let on = p_star * q[1][t];
        let off = q0 * q[0][t];
        if on + off > 0.0 {
            on / (on + off)
        } else {
            p_star
        }
    };
    let p_given = [prob1(0), prob1(1)];
    let mut col = vec![0u64; words_for(n)];
    for i in 0..n {
        let t = usize::from(crate::matrix::get_bit(x_col, i));
        if rng.random::<f64>() < p_given[t] {
            crate::matrix::set_bit(&mut col, i, true);
        }
    }
    col
}

/// Resamples the allocation of covariate `j`; a newly opened cluster gets a
/// latent column drawn from its element-wise conditional.
pub fn update_allocation<R: Rng + ?Sized>(rng: &mut R, j: usize, state: &mut ClusteringChainState, x: &BinaryDesignMatrix) {
    if let Removal::Emptied { vacated } = state.alloc.remove(j) {
        state.latent.swap_remove_column(vacated);
    }
    let x_col = x.column(j);
    let x_ones = x.column_ones(j);
    let w = allocation_log_weights(x_col, x_ones, x.n(), &state.alloc, &state.latent, &state.contam, &state.hyper);
    let k = sample_log_weights(rng, &w);
    if k == state.alloc.q() {
        let col = draw_new_latent(rng, x_col, x.n(), state.latent.p_star, &state.contam.derive_q());
        state.latent.push_column(&col);
    }
    state.alloc.assign(j, k);
}

/// Per-cluster row sums `w_ik = Σ_{j: c_j = k} x_ij`, cluster-major.
pub fn cluster_row_sums(alloc: &AllocationState, x: &BinaryDesignMatrix) -> Vec<u32> {
    let n = x.n();
    let mut w = vec![0u32; n * alloc.q()];
    for j in 0..x.p() {
        let base = alloc.label(j) * n;
        for (wi, &word) in x.column(j).iter().enumerate() {
            let mut bits = word;
            while bits != 0 {
                let b = bits.trailing_zeros() as usize;
                w[base + wi * 64 + b] += 1;
                bits &= bits - 1;
            }
        }
    }
    w
}

/// Redraws every latent element from its Bernoulli full conditional.
pub fn update_latent<R: Rng + ?Sized>(rng: &mut R, state: &mut ClusteringChainState, x: &BinaryDesignMatrix) {
    let n = x.n();
    let w = cluster_row_sums(&state.alloc, x);
    let lq = log_q_floored(&state.contam.derive_q());
    let ps = state.latent.p_star;
    let prior_logit = ps.ln() - (1.0 - ps).ln();
    let slope = (lq[1][1] - lq[1][0]) - (lq[0][1] - lq[0][0]);
    let per_member = lq[1][0] - lq[0][0];
    let mut table = Vec::new();
    for k in 0..state.alloc.q() {
        let nk = state.alloc.sizes()[k];
        table.clear();
        table.extend((0..=nk).map(|wk| {
            let logit = prior_logit + nk as f64 * per_member + wk as f64 * slope;
            1.0 / (1.0 + (-logit).exp())
        }));
        let col = state.latent.column_mut(k);
        col.iter_mut().for_each(|b| *b = 0);
        for i in 0..n {
            if rng.random::<f64>() < table[w[k * n + i] as usize] {
                col[i / 64] |= 1u64 << (i % 64);
            }
        }
    }
}

/// Conjugate Beta update of the shared latent rate.
pub fn update_p_star<R: Rng + ?Sized>(rng: &mut R, latent: &mut LatentMatrix) {
    let total = (latent.n() * latent.q()) as f64;
    let ones = latent.ones() as f64;
    let half = latent.lambda / 2.0;
    let draw = Beta::new(half + ones, half + total - ones).expect("positive shapes").sample(rng);
    // Keep strictly inside (0,1) so log-odds stay finite.
    latent.p_star = draw.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
}

/// Global latent-to-observed transition counts over all `(i, j)`.
pub fn global_transition_counts(alloc: &AllocationState, latent: &LatentMatrix, x: &BinaryDesignMatrix) -> TransitionCounts {
    let mut total = TransitionCounts::default();
    let v_ones: Vec<u32> = (0..latent.q()).map(|k| popcount(latent.column(k))).collect();
    for j in 0..x.p() {
        let k = alloc.label(j);
        let c = TransitionCounts::from_packed(x.column(j), latent.column(k), x.n(), x.column_ones(j), v_ones[k]);
        total.add(&c);
    }
    total
}

/// Nodes, log weights of the continuous discount prior part on `(0,1)`.
pub struct DiscountQuadrature {
    nodes: Vec<f64>,
    log_weights: Vec<f64>,
}

impl Default for DiscountQuadrature {
    fn default() -> Self {
        Self::new(51)
    }
}

impl DiscountQuadrature {
    pub fn new(points: usize) -> Self {
        let (nodes, w) = gauss_legendre_unit(points);
        Self { nodes, log_weights: w.iter().map(|x| x.ln()).collect() }
    }

    /// `ln(P[d > 0 | c] / P[d = 0 | c])` under the `½δ₀ + ½U(0,1)` prior.
    pub fn log_odds(&self, alloc: &AllocationState, mass: f64) -> f64 {
        let hist = size_histogram(alloc.sizes());
        let terms: Vec<f64> = self.nodes.iter().zip(&self.log_weights).map(|(&d, &lw)| lw + log_eppf_histogram(&hist, mass, d)).collect();
        log_sum_exp(&terms) - log_eppf_histogram(&hist, mass, 0.0)
    }
}

/// Independence Metropolis–Hastings step for `d` with the prior as proposal.
/// Returns whether the proposal was accepted.
pub fn update_discount<R: Rng + ?Sized>(rng: &mut R, alloc: &AllocationState, hyper: &mut PdpHyper) -> bool {
    let proposal = if rng.random::<bool>() { 0.0 } else { rng.random::<f64>() };
    let hist = size_histogram(alloc.sizes());
    let log_ratio = log_eppf_histogram(&hist, hyper.mass, proposal) - log_eppf_histogram(&hist, hyper.mass, hyper.discount);
    if log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio {
        hyper.discount = proposal;
        true
    } else {
        false
    }
}

/// Random-walk Metropolis step on `ln M` under a Gamma prior; a no-op when
/// the mass is fixed.
pub fn update_mass<R: Rng + ?Sized>(rng: &mut R, alloc: &AllocationState, hyper: &mut PdpHyper, step: f64) -> bool {
    let MassPrior::Gamma { shape, rate } = hyper.mass_prior else {
        return false;
    };
    let hist = size_histogram(alloc.sizes());
    let target = |m: f64| log_eppf_histogram(&hist, m, hyper.discount) + shape * m.ln() - rate * m;
    let z: f64 = StandardNormal.sample(rng);
    let proposal = hyper.mass * (step * z).exp();
    if !(proposal.is_finite() && proposal > 0.0) {
        return false;
    }
    let log_ratio = target(proposal) - target(hyper.mass);
    if log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio {
        hyper.mass = proposal;
        true
    } else {
        false
    }
}

/// Per-sweep diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepInfo {
    pub discount_log_odds: f64,
    pub discount_positive: bool,
}

/// One full sweep in the fixed block order: allocations, latent vectors,
/// `p*`, `(r, Q*)`, `d`, `M`.
pub fn sweep<R: Rng + ?Sized>(
    rng: &mut R,
    state: &mut ClusteringChainState,
    x: &BinaryDesignMatrix,
    schedule: &SweepSchedule,
    quad: &DiscountQuadrature,
    order_buf: &mut Vec<usize>,
) -> SweepInfo {
    for _ in 0..schedule.allocation {
        order_buf.clear();
        order_buf.extend(0..x.p());
        if schedule.order == ScanOrder::Random {
            order_buf.shuffle(rng);
        }
        for &j in order_buf.iter() {
            update_allocation(rng, j, state, x);
        }
        state.debug_check();
    }
    for _ in 0..schedule.latent {
        update_latent(rng, state, x);
    }
    for _ in 0..schedule.p_star {
        update_p_star(rng, &mut state.latent);
    }
    if schedule.contamination > 0 {
        let counts = global_transition_counts(&state.alloc, &state.latent, x);
        for _ in 0..schedule.contamination {
            update_concordance(rng, &mut state.contam, &counts);
            update_qstar(rng, &mut state.contam, &counts);
        }
    }
    for _ in 0..schedule.discount {
        update_discount(rng, &state.alloc, &mut state.hyper);
    }
    for _ in 0..schedule.mass {
        update_mass(rng, &state.alloc, &mut state.hyper, 0.5);
    }
    state.sweep_index += 1;
    state.debug_check();
    let discount_log_odds = if schedule.discount > 0 { quad.log_odds(&state.alloc, state.hyper.mass) } else { f64::NAN };
    SweepInfo { discount_log_odds, discount_positive: state.hyper.discount > 0.0 }
}
