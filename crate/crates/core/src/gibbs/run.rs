use super::{sweep, ClusteringChainState, DiscountQuadrature, SweepSchedule};
use crate::error::{BaconError, Result};
use crate::matrix::BinaryDesignMatrix;
use crate::model::{AllocationState, ContaminationModel, LatentMatrix, PdpHyper};
use crate::rng::{substream, ChainRng};
use serde::{Deserialize, Serialize};

/// Hyperparameters and starting values for the clustering chains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteringPriors {
    /// Mass, mass prior and the initial discount.
    pub hyper: PdpHyper,
    pub lambda: f64,
    /// Prior shapes plus initial `r` and `Q*`.
    pub contam: ContaminationModel,
    /// Single-linkage taxicab threshold for the initial allocation.
    pub init_threshold: f64,
}

impl Default for ClusteringPriors {
    fn default() -> Self {
        Self {
            hyper: PdpHyper { mass: 20.0, discount: 0.25, mass_prior: crate::model::MassPrior::Fixed },
            lambda: 1.0,
            contam: ContaminationModel::default(),
            init_threshold: 0.3,
        }
    }
}

impl ClusteringPriors {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if !(self.lambda > 0.0) {
            return Err(BaconError::Config(format!("lambda must be > 0, got {}", self.lambda)));
        }
        self.contam.validate()?;
        if !(0.0..=1.0).contains(&self.init_threshold) {
            return Err(BaconError::Config("init_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Chain length, thinning and seeding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub burn_in: usize,
    /// Post-burn-in sweeps.
    pub kept: usize,
    pub thin: usize,
    pub schedule: SweepSchedule,
    pub seed: u64,
    pub chain: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self { burn_in: 5000, kept: 5000, thin: 5, schedule: SweepSchedule::default(), seed: 1, chain: 0 }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kept == 0 {
            return Err(BaconError::Config("chain has zero post-burn-in sweeps".into()));
        }
        if self.thin == 0 {
            return Err(BaconError::Config("thin must be >= 1".into()));
        }
        self.schedule.validate()
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut a: usize) -> usize {
        while self.0[a] != a {
            self.0[a] = self.0[self.0[a]];
            a = self.0[a];
        }
        a
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Single-linkage clusters: columns within mean taxicab distance
/// `threshold` of each other are chained together.
pub fn single_linkage(x: &BinaryDesignMatrix, threshold: f64) -> AllocationState {
    let p = x.p();
    let mut uf = UnionFind((0..p).collect());
    let limit = (threshold * x.n() as f64).floor() as u32;
    for j1 in 0..p {
        for j2 in (j1 + 1)..p {
            if crate::matrix::popcount_xor(x.column(j1), x.column(j2)) <= limit {
                uf.union(j1, j2);
            }
        }
    }
    let roots: Vec<usize> = (0..p).map(|j| uf.find(j)).collect();
    AllocationState::from_labels(&roots)
}

/// Latent columns set to the within-cluster majority (ties → 0).
pub fn majority_latent(x: &BinaryDesignMatrix, alloc: &AllocationState, p_star: f64, lambda: f64) -> LatentMatrix {
    let n = x.n();
    let w = super::cluster_row_sums(alloc, x);
    let mut latent = LatentMatrix::new(n, alloc.q(), p_star, lambda);
    for k in 0..alloc.q() {
        let nk = alloc.sizes()[k] as u32;
        for i in 0..n {
            if 2 * w[k * n + i] > nk {
                latent.set(i, k, true);
            }
        }
    }
    latent
}

fn global_rate(x: &BinaryDesignMatrix) -> f64 {
    let ones: u64 = (0..x.p()).map(|j| x.column_ones(j) as u64).sum();
    let total = (x.n() * x.p()).max(1) as f64;
    (ones as f64 / total).clamp(0.01, 0.99)
}

/// Chain state with the given allocation and majority-vote latent vectors.
pub fn state_with_allocation(x: &BinaryDesignMatrix, alloc: AllocationState, priors: &ClusteringPriors) -> Result<ClusteringChainState> {
    priors.validate()?;
    if alloc.p() != x.p() {
        return Err(BaconError::Data(format!("allocation covers {} covariates, matrix has {}", alloc.p(), x.p())));
    }
    alloc.check()?;
    let latent = majority_latent(x, &alloc, global_rate(x), priors.lambda);
    Ok(ClusteringChainState { alloc, latent, contam: priors.contam, hyper: priors.hyper, sweep_index: 0 })
}

/// Single-linkage starting state for the clustering chain.
pub fn initial_state(x: &BinaryDesignMatrix, priors: &ClusteringPriors) -> Result<ClusteringChainState> {
    if x.p() == 0 || x.n() == 0 {
        return Err(BaconError::Data("design matrix is empty".into()));
    }
    state_with_allocation(x, single_linkage(x, priors.init_threshold), priors)
}

/// Thinned snapshot of the clustering chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Sample {
    pub sweep: u64,
    pub q: usize,
    pub d: f64,
    pub mass: f64,
    pub p_star: f64,
    pub r: [f64; 2],
    /// 0-based cluster labels.
    pub labels: Vec<u32>,
}

/// Pairwise co-clustering counts over post-burn-in sweeps.
#[derive(Debug, Clone, PartialEq)]
pub struct CoClustering {
    p: usize,
    counts: Vec<u32>,
    sweeps: u32,
}

impl CoClustering {
    pub fn new(p: usize) -> Self {
        Self { p, counts: vec![0; p * p], sweeps: 0 }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn sweeps(&self) -> u32 {
        self.sweeps
    }

    pub fn accumulate(&mut self, alloc: &AllocationState) {
        for members in alloc.clusters() {
            for (a, &j1) in members.iter().enumerate() {
                let row = j1 * self.p;
                for &j2 in &members[a + 1..] {
                    self.counts[row + j2] += 1;
                }
            }
        }
        self.sweeps += 1;
    }

    /// Posterior co-clustering probability `π̂_{j1 j2}`; the diagonal is 1.
    pub fn prob(&self, j1: usize, j2: usize) -> f64 {
        if j1 == j2 {
            return 1.0;
        }
        let (a, b) = if j1 < j2 { (j1, j2) } else { (j2, j1) };
        if self.sweeps == 0 {
            return 0.0;
        }
        self.counts[a * self.p + b] as f64 / self.sweeps as f64
    }

    /// Dense symmetric row-major matrix.
    pub fn to_dense(&self) -> Vec<f64> {
        let p = self.p;
        let mut out = vec![0.0; p * p];
        for a in 0..p {
            for b in 0..p {
                out[a * p + b] = self.prob(a, b);
            }
        }
        out
    }

    /// Pools another chain's counts into this one.
    pub fn merge(&mut self, other: &CoClustering) -> Result<()> {
        if other.p != self.p {
            return Err(BaconError::Data("cannot pool co-clustering counts of different sizes".into()));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.sweeps += other.sweeps;
        Ok(())
    }

    /// Builds an accumulator from stored allocations.
    pub fn from_allocations<'a>(p: usize, allocs: impl IntoIterator<Item = &'a AllocationState>) -> Self {
        let mut c = Self::new(p);
        for a in allocs {
            c.accumulate(a);
        }
        c
    }
}

/// Everything produced by a clustering run.
#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub samples: Vec<Stage1Sample>,
    pub cocluster: CoClustering,
    /// Conditional `ln(P[d>0]/P[d=0])` after every post-burn-in sweep.
    pub discount_log_odds: Vec<f64>,
    /// `1{d > 0}` after every post-burn-in sweep.
    pub discount_positive: Vec<bool>,
    pub final_state: ClusteringChainState,
}

impl Stage1Output {
    pub fn allocations(&self) -> Vec<AllocationState> {
        self.samples.iter().map(|s| AllocationState::from_labels(&s.labels.iter().map(|&l| l as usize).collect::<Vec<_>>())).collect()
    }

    pub fn mean_log_odds(&self) -> f64 {
        let finite: Vec<f64> = self.discount_log_odds.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            f64::NAN
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        }
    }
}

fn snapshot(state: &ClusteringChainState) -> Stage1Sample {
    Stage1Sample {
        sweep: state.sweep_index,
        q: state.alloc.q(),
        d: state.hyper.discount,
        mass: state.hyper.mass,
        p_star: state.latent.p_star,
        r: state.contam.r,
        labels: state.alloc.labels().iter().map(|&l| l as u32).collect(),
    }
}

/// Runs the clustering chain from an explicit state.
pub fn run_stage1_from(
    mut state: ClusteringChainState,
    x: &BinaryDesignMatrix,
    config: &ChainConfig,
    rng: &mut ChainRng,
) -> Result<Stage1Output> {
    config.validate()?;
    let quad = DiscountQuadrature::default();
    let mut buf = Vec::with_capacity(x.p());
    for _ in 0..config.burn_in {
        sweep(rng, &mut state, x, &config.schedule, &quad, &mut buf);
    }
    let mut out = Stage1Output {
        samples: Vec::with_capacity(config.kept / config.thin + 1),
        cocluster: CoClustering::new(x.p()),
        discount_log_odds: Vec::with_capacity(config.kept),
        discount_positive: Vec::with_capacity(config.kept),
        final_state: state.clone(),
    };
    for t in 0..config.kept {
        let info = sweep(rng, &mut state, x, &config.schedule, &quad, &mut buf);
        out.cocluster.accumulate(&state.alloc);
        out.discount_log_odds.push(info.discount_log_odds);
        out.discount_positive.push(info.discount_positive);
        if (t + 1) % config.thin == 0 {
            out.samples.push(snapshot(&state));
        }
    }
    log::info!(
        "clustering chain {} done: q = {}, d = {:.3}, mean log-odds = {:.2}",
        config.chain,
        state.alloc.q(),
        state.hyper.discount,
        out.mean_log_odds()
    );
    out.final_state = state;
    Ok(out)
}

/// Clustering stage: single-linkage start, burn-in, then thinned sampling.
/// Co-clustering counts accumulate over every post-burn-in sweep.
pub fn run_stage1(x: &BinaryDesignMatrix, priors: &ClusteringPriors, config: &ChainConfig) -> Result<Stage1Output> {
    config.validate()?;
    let state = initial_state(x, priors)?;
    let mut rng = substream(config.seed, "stage1", config.chain, "gibbs");
    run_stage1_from(state, x, config, &mut rng)
}

/// Thinned latent-stage snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSample {
    pub sweep: u64,
    pub p_star: f64,
    pub r: [f64; 2],
    pub q_star: [[f64; 2]; 2],
}

#[derive(Debug, Clone)]
pub struct Stage1iiOutput {
    /// Element-wise posterior mean of `v_ik`, row-major `n x q`.
    pub latent_mean: Vec<f64>,
    pub q: usize,
    pub samples: Vec<LatentSample>,
    /// Thinned latent matrices for downstream regression draws.
    pub draws: Vec<LatentMatrix>,
    pub final_state: ClusteringChainState,
}

impl Stage1iiOutput {
    pub fn mean(&self, i: usize, k: usize) -> f64 {
        self.latent_mean[i * self.q + k]
    }
}

/// Runs the latent stage from an explicit state with the allocation frozen.
pub fn run_stage1ii_from(
    mut state: ClusteringChainState,
    x: &BinaryDesignMatrix,
    config: &ChainConfig,
    rng: &mut ChainRng,
) -> Result<Stage1iiOutput> {
    config.validate()?;
    if config.schedule.allocation > 0 || config.schedule.discount > 0 || config.schedule.mass > 0 {
        return Err(BaconError::Config("latent stage must keep the allocation frozen".into()));
    }
    let quad = DiscountQuadrature::default();
    let mut buf = Vec::new();
    for _ in 0..config.burn_in {
        sweep(rng, &mut state, x, &config.schedule, &quad, &mut buf);
    }
    let (n, q) = (x.n(), state.alloc.q());
    let mut sums = vec![0u32; n * q];
    let mut samples = Vec::new();
    let mut draws = Vec::new();
    for t in 0..config.kept {
        sweep(rng, &mut state, x, &config.schedule, &quad, &mut buf);
        for k in 0..q {
            for i in 0..n {
                sums[i * q + k] += u32::from(state.latent.get(i, k));
            }
        }
        if (t + 1) % config.thin == 0 {
            samples.push(LatentSample {
                sweep: state.sweep_index,
                p_star: state.latent.p_star,
                r: state.contam.r,
                q_star: state.contam.q_star,
            });
            draws.push(state.latent.clone());
        }
    }
    let latent_mean = sums.iter().map(|&s| s as f64 / config.kept as f64).collect();
    Ok(Stage1iiOutput { latent_mean, q, samples, draws, final_state: state })
}

/// Latent stage: resamples `V`, `p*` and optionally `(r, Q*)` given a fixed allocation.
pub fn run_stage1ii(
    x: &BinaryDesignMatrix,
    fixed_alloc: &AllocationState,
    priors: &ClusteringPriors,
    config: &ChainConfig,
) -> Result<Stage1iiOutput> {
    let state = state_with_allocation(x, fixed_alloc.clone(), priors)?;
    let mut rng = substream(config.seed, "stage1ii", config.chain, "gibbs");
    run_stage1ii_from(state, x, config, &mut rng)
}
