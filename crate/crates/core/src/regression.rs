//! Spike-and-slab regression of a scalar response on cluster representatives
//! under a Zellner g-prior with the intercept inside the prior.

use crate::error::{BaconError, Result};
use crate::matrix::{popcount_xor, BinaryDesignMatrix};
use crate::model::{AllocationState, LatentMatrix};
use crate::rng::{substream, ChainRng};
use crate::special::sample_log_weights;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

/// How each cluster is represented in the regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepresentativeMode {
    /// Sampled member, uniform prior over members.
    Sampled,
    /// Member with the smallest summed taxicab distance to the others.
    Median,
    /// Latent vector from the least-squares configuration.
    Latent,
}

impl std::str::FromStr for RepresentativeMode {
    type Err = BaconError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" | "sampled" => Ok(Self::Sampled),
            "b" | "median" => Ok(Self::Median),
            "c" | "latent" => Ok(Self::Latent),
            _ => Err(BaconError::Config(format!("unknown representative mode '{s}' (a|b|c)"))),
        }
    }
}

/// Noise-variance treatment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoisePrior {
    Known { sigma2: f64 },
    InverseGamma { a0: f64, b0: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionPriors {
    /// g-prior scale `σ_β²`.
    pub sigma_beta2: f64,
    pub noise: NoisePrior,
    /// Ignore the response when updating `γ` and skip the `(β, σ²)` block,
    /// so the chain samples the truncated inclusion prior.
    pub prior_only: bool,
}

impl Default for RegressionPriors {
    fn default() -> Self {
        Self { sigma_beta2: 100.0, noise: NoisePrior::InverseGamma { a0: 0.01, b0: 0.01 }, prior_only: false }
    }
}

impl RegressionPriors {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_beta2 > 0.0) {
            return Err(BaconError::Config("sigma_beta2 must be > 0".into()));
        }
        match self.noise {
            NoisePrior::Known { sigma2 } if !(sigma2 > 0.0) => Err(BaconError::Config("sigma2 must be > 0".into())),
            NoisePrior::InverseGamma { a0, b0 } if !(a0 > 0.0 && b0 > 0.0) => Err(BaconError::Config("a0, b0 must be > 0".into())),
            _ => Ok(()),
        }
    }
}

/// Ingredients of the g-prior posterior for one design.
struct Fit {
    chol: Cholesky<f64, Dyn>,
    /// `U'y`
    uty: DVector<f64>,
    /// `y'y − g/(1+g)·y'Py`
    s: f64,
    k: usize,
}

fn design(cols: &[&[f64]], n: usize) -> DMatrix<f64> {
    let mut u = DMatrix::from_element(n, cols.len() + 1, 1.0);
    for (c, col) in cols.iter().enumerate() {
        for i in 0..n {
            u[(i, c + 1)] = col[i];
        }
    }
    u
}

fn fit(cols: &[&[f64]], y: &[f64], g: f64) -> Option<Fit> {
    let n = y.len();
    let u = design(cols, n);
    let yv = DVector::from_column_slice(y);
    let utu = u.tr_mul(&u);
    let scale = (0..utu.nrows()).map(|i| utu[(i, i)]).fold(0.0, f64::max);
    let chol = Cholesky::new(utu)?;
    let l = chol.l_dirty();
    // Exact rank deficiency in 0/1 designs leaves a pivot at rounding level.
    if (0..l.nrows()).any(|i| l[(i, i)] * l[(i, i)] <= 1e-10 * scale) {
        return None;
    }
    let uty = u.tr_mul(&yv);
    let z = chol.l().solve_lower_triangular(&uty)?;
    let ypy = z.norm_squared();
    let s = yv.norm_squared() - g / (1.0 + g) * ypy;
    Some(Fit { chol, uty, s: s.max(0.0), k: cols.len() + 1 })
}

/// Log marginal likelihood of `y` given the included columns, with the
/// intercept and slopes integrated under the g-prior and `σ²` either known
/// or integrated under its inverse-gamma prior. Singular designs give `-inf`.
pub fn marginal_log_likelihood(cols: &[&[f64]], y: &[f64], sigma_beta2: f64, noise: NoisePrior) -> f64 {
    let Some(f) = fit(cols, y, sigma_beta2) else {
        return f64::NEG_INFINITY;
    };
    evidence_from_fit(&f, y.len(), sigma_beta2, noise)
}

fn evidence_from_fit(f: &Fit, n: usize, g: f64, noise: NoisePrior) -> f64 {
    let nf = n as f64;
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let penalty = -0.5 * f.k as f64 * (1.0 + g).ln();
    match noise {
        NoisePrior::Known { sigma2 } => -0.5 * nf * (ln2pi + sigma2.ln()) + penalty - f.s / (2.0 * sigma2),
        NoisePrior::InverseGamma { a0, b0 } => {
            -0.5 * nf * ln2pi + penalty + a0 * b0.ln() - ln_gamma(a0) + ln_gamma(a0 + nf / 2.0) - (a0 + nf / 2.0) * (b0 + f.s / 2.0).ln()
        }
    }
}

/// Posterior mean of `(β₀, β_γ)` given `γ`: the OLS estimate shrunk by `g/(1+g)`.
pub fn posterior_mean_beta(cols: &[&[f64]], y: &[f64], sigma_beta2: f64) -> Option<Vec<f64>> {
    let f = fit(cols, y, sigma_beta2)?;
    let ols = f.chol.solve(&f.uty);
    let shrink = sigma_beta2 / (1.0 + sigma_beta2);
    Some(ols.iter().map(|b| shrink * b).collect())
}

/// One way of representing a cluster: a covariate (or latent vector) with
/// its training and test values.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// Covariate index, `None` for a latent vector.
    pub column: Option<usize>,
    pub train: Vec<f64>,
    pub test: Vec<f64>,
}

/// Regression inputs conditional on the clustering point estimates.
#[derive(Debug, Clone)]
pub struct RegressionData {
    pub y: Vec<f64>,
    pub mode: RepresentativeMode,
    /// Representative candidates per cluster; one unless mode is `Sampled`.
    pub candidates: Vec<Vec<Candidate>>,
    pub n_test: usize,
    /// Constant subtracted from the responses; added back to predictions.
    pub offset: f64,
}

fn column_f64(x: &BinaryDesignMatrix, j: usize) -> Vec<f64> {
    (0..x.n()).map(|i| if x.get(i, j) { 1.0 } else { 0.0 }).collect()
}

/// Member with the smallest summed taxicab distance to the other members
/// (ties → lowest column index).
pub fn median_member(x: &BinaryDesignMatrix, members: &[usize]) -> usize {
    let mut best = (u64::MAX, usize::MAX);
    for &a in members {
        let total: u64 = members.iter().map(|&b| popcount_xor(x.column(a), x.column(b)) as u64).sum();
        if (total, a) < best {
            best = (total, a);
        }
    }
    best.1
}

impl RegressionData {
    /// `x_train` holds the rows used to fit (and to cluster); `x_test` the
    /// held-out rows with the same columns. `latent` is required in mode `Latent`.
    pub fn new(
        x_train: &BinaryDesignMatrix,
        x_test: &BinaryDesignMatrix,
        y: Vec<f64>,
        alloc: &AllocationState,
        mode: RepresentativeMode,
        latent: Option<&LatentMatrix>,
    ) -> Result<Self> {
        if y.len() != x_train.n() {
            return Err(BaconError::Data(format!("{} responses for {} training rows", y.len(), x_train.n())));
        }
        if y.len() < 3 {
            return Err(BaconError::Data("need at least 3 training responses".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(BaconError::Data("responses must be finite".into()));
        }
        if x_test.p() != x_train.p() || alloc.p() != x_train.p() {
            return Err(BaconError::Data("train/test/allocation column counts disagree".into()));
        }
        let clusters = alloc.clusters();
        let cand = |j: usize| Candidate { column: Some(j), train: column_f64(x_train, j), test: column_f64(x_test, j) };
        let candidates = match mode {
            RepresentativeMode::Sampled => clusters.iter().map(|m| m.iter().map(|&j| cand(j)).collect()).collect(),
            RepresentativeMode::Median => clusters.iter().map(|m| vec![cand(median_member(x_train, m))]).collect(),
            RepresentativeMode::Latent => {
                let v = latent.ok_or_else(|| BaconError::Config("latent mode needs a latent configuration".into()))?;
                if v.q() != alloc.q() || v.n() != x_train.n() {
                    return Err(BaconError::Data("latent configuration does not match allocation/training rows".into()));
                }
                clusters
                    .iter()
                    .enumerate()
                    .map(|(k, m)| {
                        let nearest =
                            *m.iter().min_by_key(|&&j| (popcount_xor(x_train.column(j), v.column(k)), j)).expect("non-empty cluster");
                        let train = (0..v.n()).map(|i| if v.get(i, k) { 1.0 } else { 0.0 }).collect();
                        vec![Candidate { column: None, train, test: column_f64(x_test, nearest) }]
                    })
                    .collect()
            }
        };
        Ok(Self { y, mode, candidates, n_test: x_test.n(), offset: 0.0 })
    }

    /// Centres the responses at their training mean. The intercept sits
    /// inside the g-prior, so without centring the evidence depends on the
    /// origin of `y`: a mean far from zero inflates every residual sum by
    /// `ȳ²/(1+g)·n` and drowns real signal.
    pub fn centered(mut self) -> Self {
        let shift = self.y.iter().sum::<f64>() / self.y.len() as f64;
        self.y.iter_mut().for_each(|v| *v -= shift);
        self.offset += shift;
        self
    }

    pub fn q(&self) -> usize {
        self.candidates.len()
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
}

/// Sampler state for the regression stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionState {
    pub gamma: Vec<bool>,
    pub omega1: f64,
    /// Index into each cluster's candidate list.
    pub reps: Vec<usize>,
    /// Intercept followed by one coefficient per cluster (0 when excluded).
    pub beta: Vec<f64>,
    pub sigma2: f64,
}

impl RegressionState {
    pub fn q1(&self) -> usize {
        self.gamma.iter().filter(|&&g| g).count()
    }

    pub fn initial(data: &RegressionData) -> Self {
        let n = data.n() as f64;
        let mean = data.y.iter().sum::<f64>() / n;
        let var = data.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let mut beta = vec![0.0; data.q() + 1];
        beta[0] = mean;
        Self { gamma: vec![false; data.q()], omega1: 0.5, reps: vec![0; data.q()], beta, sigma2: var.max(1e-8) }
    }
}

fn included_cols<'a>(data: &'a RegressionData, gamma: &[bool], reps: &[usize]) -> Vec<&'a [f64]> {
    (0..data.q()).filter(|&k| gamma[k]).map(|k| data.candidates[k][reps[k]].train.as_slice()).collect()
}

fn log_evidence(data: &RegressionData, gamma: &[bool], reps: &[usize], priors: &RegressionPriors) -> f64 {
    if priors.prior_only {
        return 0.0;
    }
    marginal_log_likelihood(&included_cols(data, gamma, reps), &data.y, priors.sigma_beta2, priors.noise)
}

/// Resamples each included cluster's representative from its conditional;
/// excluded clusters draw uniformly over members.
pub fn update_representatives<R: Rng + ?Sized>(rng: &mut R, state: &mut RegressionState, data: &RegressionData, priors: &RegressionPriors) {
    if data.mode != RepresentativeMode::Sampled {
        return;
    }
    for k in 0..data.q() {
        let m = data.candidates[k].len();
        if m == 1 {
            state.reps[k] = 0;
            continue;
        }
        if !state.gamma[k] || priors.prior_only {
            state.reps[k] = rng.random_range(0..m);
            continue;
        }
        let w: Vec<f64> = (0..m)
            .map(|c| {
                let mut reps = state.reps.clone();
                reps[k] = c;
                log_evidence(data, &state.gamma, &reps, priors)
            })
            .collect();
        if w.iter().all(|v| !v.is_finite()) {
            continue;
        }
        state.reps[k] = sample_log_weights(rng, &w);
    }
}

/// Sequential Gibbs flips of the inclusion indicators followed by the
/// conjugate `ω₁` draw. Moves reaching `q₁ ≥ n − 1` have probability 0.
pub fn update_gamma<R: Rng + ?Sized>(rng: &mut R, state: &mut RegressionState, data: &RegressionData, priors: &RegressionPriors) {
    let n = data.n();
    let prior_log_odds = state.omega1.ln() - (1.0 - state.omega1).ln();
    let mut current = log_evidence(data, &state.gamma, &state.reps, priors);
    for k in 0..data.q() {
        let q1_without = state.q1() - usize::from(state.gamma[k]);
        let mut alt = state.gamma.clone();
        alt[k] = !alt[k];
        let (ev_in, ev_out) = if state.gamma[k] {
            (current, log_evidence(data, &alt, &state.reps, priors))
        } else {
            (log_evidence(data, &alt, &state.reps, priors), current)
        };
        let allowed = q1_without + 1 < n - 1;
        let include = if !allowed || ev_in == f64::NEG_INFINITY {
            false
        } else if ev_out == f64::NEG_INFINITY {
            true
        } else {
            let logit = prior_log_odds + ev_in - ev_out;
            rng.random::<f64>() < 1.0 / (1.0 + (-logit).exp())
        };
        state.gamma[k] = include;
        current = if include { ev_in } else { ev_out };
    }
    let q1 = state.q1() as f64;
    let q = data.q() as f64;
    state.omega1 = Beta::new(1.0 + q1, 1.0 + q - q1).expect("positive shapes").sample(rng);
}

/// Draws `σ²` (collapsed over `β`) and then `β` from its Gaussian conditional.
pub fn update_beta_sigma<R: Rng + ?Sized>(
    rng: &mut R,
    state: &mut RegressionState,
    data: &RegressionData,
    priors: &RegressionPriors,
) -> Result<()> {
    let cols = included_cols(data, &state.gamma, &state.reps);
    let g = priors.sigma_beta2;
    let f = fit(&cols, &data.y, g).ok_or_else(|| BaconError::Numeric("singular regression design".into()))?;
    let n = data.n() as f64;
    state.sigma2 = match priors.noise {
        NoisePrior::Known { sigma2 } => sigma2,
        NoisePrior::InverseGamma { a0, b0 } => {
            let prec = Gamma::new(a0 + n / 2.0, 1.0 / (b0 + f.s / 2.0)).expect("positive shapes").sample(rng);
            (1.0 / prec).max(f64::MIN_POSITIVE)
        }
    };
    let shrink = g / (1.0 + g);
    let mean = f.chol.solve(&f.uty) * shrink;
    let z = DVector::from_iterator(f.k, (0..f.k).map(|_| StandardNormal.sample(rng)));
    // (U'U)^{-1} = L^{-T} L^{-1}
    let noise = f.chol.l().transpose().solve_upper_triangular(&z).ok_or_else(|| BaconError::Numeric("triangular solve failed".into()))?;
    let draw = mean + noise * (state.sigma2 * shrink).sqrt();
    state.beta.iter_mut().for_each(|b| *b = 0.0);
    state.beta[0] = draw[0];
    let mut c = 1;
    for k in 0..data.q() {
        if state.gamma[k] {
            state.beta[k + 1] = draw[c];
            c += 1;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegressionChainConfig {
    pub burn_in: usize,
    pub kept: usize,
    pub thin: usize,
    pub seed: u64,
    pub chain: u64,
}

impl Default for RegressionChainConfig {
    fn default() -> Self {
        Self { burn_in: 2000, kept: 5000, thin: 5, seed: 1, chain: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct Stage2Output {
    pub samples: Vec<RegressionState>,
    /// Posterior inclusion probability per cluster.
    pub inclusion: Vec<f64>,
    /// Per-cluster, per-candidate representative frequencies.
    pub representative: Vec<Vec<f64>>,
    /// Mean number of included clusters over kept sweeps.
    pub mean_q1: f64,
    pub q1_trace: Vec<usize>,
}

/// Regression stage: representatives → `γ` → `ω₁` → `(β, σ²)` each sweep.
pub fn run_stage2(data: &RegressionData, priors: &RegressionPriors, config: &RegressionChainConfig) -> Result<Stage2Output> {
    priors.validate()?;
    if config.kept == 0 || config.thin == 0 {
        return Err(BaconError::Config("regression chain needs kept > 0 and thin > 0".into()));
    }
    let mut rng: ChainRng = substream(config.seed, "stage2", config.chain, "regression");
    let mut state = RegressionState::initial(data);
    if data.mode == RepresentativeMode::Sampled {
        for k in 0..data.q() {
            state.reps[k] = rng.random_range(0..data.candidates[k].len());
        }
    }
    let q = data.q();
    let mut incl = vec![0u64; q];
    let mut rep_counts: Vec<Vec<u64>> = data.candidates.iter().map(|c| vec![0; c.len()]).collect();
    let mut samples = Vec::new();
    let mut q1_trace = Vec::with_capacity(config.kept);
    for t in 0..config.burn_in + config.kept {
        update_representatives(&mut rng, &mut state, data, priors);
        update_gamma(&mut rng, &mut state, data, priors);
        if !priors.prior_only {
            update_beta_sigma(&mut rng, &mut state, data, priors)?;
        }
        debug_assert!(state.q1() < data.n() - 1);
        if t < config.burn_in {
            continue;
        }
        for k in 0..q {
            incl[k] += u64::from(state.gamma[k]);
            rep_counts[k][state.reps[k]] += 1;
        }
        q1_trace.push(state.q1());
        if (t - config.burn_in + 1) % config.thin == 0 {
            samples.push(state.clone());
        }
    }
    let kept = config.kept as f64;
    Ok(Stage2Output {
        samples,
        inclusion: incl.iter().map(|&c| c as f64 / kept).collect(),
        representative: rep_counts.iter().map(|r| r.iter().map(|&c| c as f64 / kept).collect()).collect(),
        mean_q1: q1_trace.iter().sum::<usize>() as f64 / kept,
        q1_trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Posterior predictive mean and central 95% interval for every test row.
pub fn predict(samples: &[RegressionState], data: &RegressionData, seed: u64) -> Result<Vec<Prediction>> {
    if samples.is_empty() {
        return Err(BaconError::Data("no regression samples to predict from".into()));
    }
    let mut rng = substream(seed, "predict", 0, "noise");
    let mut out = Vec::with_capacity(data.n_test);
    let mut draws = Vec::with_capacity(samples.len());
    for i in 0..data.n_test {
        let mut mean = 0.0;
        draws.clear();
        for s in samples {
            let mut eta = data.offset + s.beta[0];
            for k in 0..data.q() {
                if s.gamma[k] {
                    eta += s.beta[k + 1] * data.candidates[k][s.reps[k]].test[i];
                }
            }
            mean += eta;
            let z: f64 = StandardNormal.sample(&mut rng);
            draws.push(eta + s.sigma2.sqrt() * z);
        }
        draws.sort_by(f64::total_cmp);
        out.push(Prediction {
            mean: mean / samples.len() as f64,
            lower: quantile_sorted(&draws, 0.025),
            upper: quantile_sorted(&draws, 0.975),
        });
    }
    Ok(out)
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(xs: &[f64], p: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let h = p * (xs.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    xs[lo] + (h - lo as f64) * (xs[hi] - xs[lo])
}

/// Posterior summary of one coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaSummary {
    pub cluster: usize,
    pub inclusion: f64,
    /// Mean over samples where the cluster is included (NaN if never).
    pub mean_if_included: f64,
}

pub fn beta_summaries(out: &Stage2Output) -> Vec<BetaSummary> {
    (0..out.inclusion.len())
        .map(|k| {
            let vals: Vec<f64> = out.samples.iter().filter(|s| s.gamma[k]).map(|s| s.beta[k + 1]).collect();
            let mean = if vals.is_empty() { f64::NAN } else { vals.iter().sum::<f64>() / vals.len() as f64 };
            BetaSummary { cluster: k, inclusion: out.inclusion[k], mean_if_included: mean }
        })
        .collect()
}
