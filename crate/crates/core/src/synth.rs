//! Seeded synthetic-data generators for the simulation protocols.

use crate::error::{BaconError, Result};
use crate::matrix::BinaryDesignMatrix;
use crate::model::{sample_pdp_partition, AllocationState};
use crate::rng::{substream, ChainRng};
use crate::special::log_add_exp;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

/// Ground truth behind a generated covariate matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTruth {
    /// 0-based true cluster labels.
    pub labels: Vec<u32>,
    pub q0: usize,
    /// True latent matrix as `n` rows of `q0` bits (PDP generator only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<Vec<Vec<u8>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_matrix: Option<[[f64; 2]; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<f64>,
}

impl ClusterTruth {
    pub fn allocation(&self) -> AllocationState {
        AllocationState::from_labels(&self.labels.iter().map(|&l| l as usize).collect::<Vec<_>>())
    }
}

/// Ground truth behind generated responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseTruth {
    /// True predictor columns, ascending.
    pub predictors: Vec<usize>,
    pub beta_star: f64,
    pub sigma0: f64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Generator name, parameters and seed with whatever truth it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub generator: String,
    pub seed: u64,
    pub params: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<ClusterTruth>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<ResponseTruth>,
}

/// Parameters of the PDP-model generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaconParams {
    pub n: usize,
    pub p: usize,
    pub d0: f64,
    pub m0: f64,
    pub p0: f64,
    pub r0: f64,
}

impl Default for BaconParams {
    fn default() -> Self {
        Self { n: 100, p: 250, d0: 0.4, m0: 20.0, p0: 5.0 / 7.0, r0: 0.925 }
    }
}

fn rng_for(seed: u64, name: &str) -> ChainRng {
    substream(seed, "synth", 0, name)
}

/// Covariates drawn from the clustering model: PDP partition, Bernoulli
/// latent vectors, and a contaminating channel with `r_s = r0` and
/// `q*_s ~ Dirichlet(1, 1)`.
pub fn gen_bacon(params: &BaconParams, seed: u64) -> Result<(BinaryDesignMatrix, TruthRecord)> {
    let BaconParams { n, p, d0, m0, p0, r0 } = *params;
    if n == 0 || p == 0 {
        return Err(BaconError::Config("n and p must be positive".into()));
    }
    if !(0.0..1.0).contains(&d0) || !(m0 > 0.0) || !(p0 > 0.0 && p0 < 1.0) || !(0.5..=1.0).contains(&r0) {
        return Err(BaconError::Config("generator parameters out of range".into()));
    }
    let mut rng = rng_for(seed, "bacon");
    let alloc = sample_pdp_partition(&mut rng, p, m0, d0);
    let q0 = alloc.q();
    let latent: Vec<Vec<u8>> = (0..n).map(|_| (0..q0).map(|_| u8::from(rng.random::<f64>() < p0)).collect()).collect();
    let mut q = [[0.0; 2]; 2];
    for (s, row) in q.iter_mut().enumerate() {
        let t: f64 = rng.random();
        let star = [t, 1.0 - t];
        for c in 0..2 {
            row[c] = (1.0 - r0) * star[c] + if c == s { r0 } else { 0.0 };
        }
    }
    let x = BinaryDesignMatrix::from_fn(n, p, |i, j| {
        let g = latent[i][alloc.label(j)] as usize;
        rng.random::<f64>() < q[g][1]
    });
    let truth = TruthRecord {
        generator: "bacon".into(),
        seed,
        params: serde_json::to_value(params).expect("serializable"),
        cluster: Some(ClusterTruth {
            labels: alloc.labels().iter().map(|&l| l as u32).collect(),
            q0,
            latent: Some(latent),
            q_matrix: Some(q),
            r: Some([r0, r0]),
            phi: None,
        }),
        response: None,
    };
    Ok((x, truth))
}

/// `ln S(m, j)` (Stirling numbers of the second kind) for `m ≤ n`, `j ≤ k`.
pub fn log_stirling2_table(n: usize, k: usize) -> Vec<Vec<f64>> {
    let mut t = vec![vec![f64::NEG_INFINITY; k + 1]; n + 1];
    t[0][0] = 0.0;
    for m in 1..=n {
        for j in 1..=k.min(m) {
            let join = if t[m - 1][j].is_finite() { (j as f64).ln() + t[m - 1][j] } else { f64::NEG_INFINITY };
            t[m][j] = log_add_exp(t[m - 1][j - 1], join);
        }
    }
    t
}

/// Partition of `n` items drawn uniformly among those with exactly `k` blocks.
pub fn uniform_partition_k_blocks<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> Result<AllocationState> {
    if k == 0 || k > n {
        return Err(BaconError::Config(format!("cannot split {n} items into {k} blocks")));
    }
    let t = log_stirling2_table(n, k);
    // Walk from item n down: item m opens its own block with probability
    // S(m-1, j-1)/S(m, j), otherwise joins one of the j blocks of the rest.
    let mut decision = vec![None; n];
    let mut j = k;
    for m in (1..=n).rev() {
        let p_single = if j >= 1 { (t[m - 1][j - 1] - t[m][j]).exp() } else { 0.0 };
        if j == m || rng.random::<f64>() < p_single {
            decision[m - 1] = None;
            j -= 1;
        } else {
            decision[m - 1] = Some(rng.random_range(0..j));
        }
    }
    let mut labels = vec![0usize; n];
    let mut blocks = 0;
    for m in 0..n {
        labels[m] = match decision[m] {
            None => {
                blocks += 1;
                blocks - 1
            }
            Some(b) => b,
        };
    }
    Ok(AllocationState::from_labels(&labels))
}

/// Latent Gaussian scores `z_ij = √φ·f_{i,c_j} + √(1−φ)·e_ij`, row-major `n x p`.
pub fn threshold_scores<R: Rng + ?Sized>(rng: &mut R, n: usize, alloc: &AllocationState, phi: f64) -> Vec<f64> {
    let p = alloc.p();
    let (a, b) = (phi.sqrt(), (1.0 - phi).sqrt());
    let mut z = vec![0.0; n * p];
    let mut f = vec![0.0; alloc.q()];
    for i in 0..n {
        for fk in f.iter_mut() {
            *fk = StandardNormal.sample(rng);
        }
        for j in 0..p {
            let e: f64 = StandardNormal.sample(rng);
            z[i * p + j] = a * f[alloc.label(j)] + b * e;
        }
    }
    z
}

const POISSON_CAP: usize = 1_000_000;

/// Covariates from thresholded equicorrelated Gaussians: a Poisson(p/8)
/// cluster count below ⌊p/4⌋, a uniform partition with exactly that many
/// blocks, and `x_ij = 1{z_ij > 0}`.
pub fn gen_threshold_normal(n: usize, p: usize, phi0: f64, seed: u64) -> Result<(BinaryDesignMatrix, TruthRecord)> {
    if !(phi0 > 0.0 && phi0 < 1.0) {
        return Err(BaconError::Config(format!("phi0 must lie in (0,1), got {phi0}")));
    }
    if n == 0 || p < 8 {
        return Err(BaconError::Config("threshold generator needs n > 0 and p >= 8".into()));
    }
    let mut rng = rng_for(seed, "threshold");
    let pois = Poisson::new(p as f64 / 8.0).map_err(|e| BaconError::Config(e.to_string()))?;
    let limit = p / 4;
    let mut q0 = None;
    for _ in 0..POISSON_CAP {
        let draw = pois.sample(&mut rng) as usize;
        if draw >= 1 && draw < limit {
            q0 = Some(draw);
            break;
        }
    }
    let q0 = q0.ok_or_else(|| BaconError::Numeric("cluster-count rejection loop hit its cap".into()))?;
    let alloc = uniform_partition_k_blocks(&mut rng, p, q0)?;
    let z = threshold_scores(&mut rng, n, &alloc, phi0);
    let x = BinaryDesignMatrix::from_fn(n, p, |i, j| z[i * p + j] > 0.0);
    let truth = TruthRecord {
        generator: "threshold".into(),
        seed,
        params: serde_json::json!({ "n": n, "p": p, "phi0": phi0 }),
        cluster: Some(ClusterTruth {
            labels: alloc.labels().iter().map(|&l| l as u32).collect(),
            q0,
            latent: None,
            q_matrix: None,
            r: None,
            phi: Some(phi0),
        }),
        response: None,
    };
    Ok((x, truth))
}

/// Response-generation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseParams {
    pub size_s: usize,
    pub beta_star: f64,
    pub sigma0: f64,
    pub window: (f64, f64),
    pub train_fraction: f64,
}

impl Default for ResponseParams {
    fn default() -> Self {
        Self { size_s: 10, beta_star: 1.2, sigma0: 0.5, window: (0.4, 0.6), train_fraction: 0.8 }
    }
}

/// Generated responses for every row of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseSet {
    pub y: Vec<f64>,
    pub truth: ResponseTruth,
}

const WINDOW_RESTARTS: usize = 2000;

/// Random predictor set whose pairwise mean taxicab distances all lie in
/// `window`: greedy random scans, restarted on dead ends.
pub fn select_in_window<R: Rng + ?Sized>(rng: &mut R, x: &BinaryDesignMatrix, size: usize, window: (f64, f64)) -> Result<Vec<usize>> {
    if size > x.p() {
        return Err(BaconError::Config(format!("cannot pick {size} of {} columns", x.p())));
    }
    let mut order: Vec<usize> = (0..x.p()).collect();
    for _ in 0..WINDOW_RESTARTS {
        order.shuffle(rng);
        let mut chosen: Vec<usize> = Vec::with_capacity(size);
        for &j in &order {
            if chosen.iter().all(|&c| {
                let d = x.mean_taxicab(c, j);
                d > window.0 && d < window.1
            }) {
                chosen.push(j);
                if chosen.len() == size {
                    chosen.sort_unstable();
                    return Ok(chosen);
                }
            }
        }
    }
    Err(BaconError::Data(format!("no {size} columns with pairwise taxicab distances in ({}, {})", window.0, window.1)))
}

/// Gaussian responses with mean `β*/2 + β*·Σ_{j∈S} x_ij` and a seeded
/// random train/test split.
pub fn gen_response(x: &BinaryDesignMatrix, params: &ResponseParams, seed: u64) -> Result<ResponseSet> {
    if !(params.sigma0 > 0.0) || !(params.train_fraction > 0.0 && params.train_fraction < 1.0) {
        return Err(BaconError::Config("sigma0 must be > 0 and train_fraction in (0,1)".into()));
    }
    let mut rng = rng_for(seed, "response");
    let predictors = select_in_window(&mut rng, x, params.size_s, params.window)?;
    let noise = Normal::new(0.0, params.sigma0).map_err(|e| BaconError::Config(e.to_string()))?;
    let y: Vec<f64> = (0..x.n())
        .map(|i| {
            let s = predictors.iter().filter(|&&j| x.get(i, j)).count() as f64;
            params.beta_star / 2.0 + params.beta_star * s + noise.sample(&mut rng)
        })
        .collect();
    let (train, test) = split_rows(&mut rng, x.n(), params.train_fraction);
    Ok(ResponseSet { y, truth: ResponseTruth { predictors, beta_star: params.beta_star, sigma0: params.sigma0, train, test } })
}

/// Random train/test split with `round(fraction·n)` training rows, both ascending.
pub fn split_rows<R: Rng + ?Sized>(rng: &mut R, n: usize, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_train = ((fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stirling_small_values() {
        let t = log_stirling2_table(10, 10);
        let s = |n: usize, k: usize| t[n][k].exp().round() as u64;
        assert_eq!(s(4, 2), 7);
        assert_eq!(s(5, 3), 25);
        assert_eq!(s(10, 4), 34105);
        // values far beyond f64 range stay finite in log space
        let big = log_stirling2_table(250, 31);
        assert!(big[250][31].is_finite() && big[250][31] > 700.0);
    }

    #[test]
    fn uniform_partition_is_uniform() {
        // S(5, 2) = 15 partitions, each with probability 1/15
        let mut rng = substream(3, "t", 0, "part");
        let reps = 60_000;
        let mut freq = std::collections::HashMap::new();
        for _ in 0..reps {
            let a = uniform_partition_k_blocks(&mut rng, 5, 2).unwrap();
            assert_eq!(a.q(), 2);
            *freq.entry(a.canonical_labels()).or_insert(0u32) += 1;
        }
        assert_eq!(freq.len(), 15);
        let p = 1.0 / 15.0;
        let sd = (p * (1.0 - p) / reps as f64).sqrt();
        for (_, c) in freq {
            assert!((c as f64 / reps as f64 - p).abs() < 4.5 * sd);
        }
    }

    #[test]
    fn bacon_without_contamination_copies_latent_vectors() {
        let params = BaconParams { n: 30, p: 40, r0: 1.0, ..Default::default() };
        let (x, truth) = gen_bacon(&params, 5).unwrap();
        let c = truth.cluster.unwrap();
        let v = c.latent.unwrap();
        for j in 0..40 {
            for i in 0..30 {
                assert_eq!(u8::from(x.get(i, j)), v[i][c.labels[j] as usize]);
            }
        }
    }

    #[test]
    fn bacon_cell_means_match_channel() {
        let params = BaconParams { n: 400, p: 250, r0: 0.875, ..Default::default() };
        let (x, truth) = gen_bacon(&params, 8).unwrap();
        let c = truth.cluster.unwrap();
        let v = c.latent.unwrap();
        let q = c.q_matrix.unwrap();
        for g in 0..2u8 {
            let (mut ones, mut total) = (0u64, 0u64);
            for j in 0..250 {
                for i in 0..400 {
                    if v[i][c.labels[j] as usize] == g {
                        total += 1;
                        ones += u64::from(x.get(i, j));
                    }
                }
            }
            let f = ones as f64 / total as f64;
            let pr = q[g as usize][1];
            assert!((f - pr).abs() < 3.0 * (pr * (1.0 - pr) / total as f64).sqrt() + 1e-12, "g={g}: {f} vs {pr}");
        }
    }

    #[test]
    fn generators_are_reproducible() {
        let (a, ta) = gen_bacon(&BaconParams { n: 20, p: 30, ..Default::default() }, 4).unwrap();
        let (b, tb) = gen_bacon(&BaconParams { n: 20, p: 30, ..Default::default() }, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (a, _) = gen_threshold_normal(20, 40, 0.9, 4).unwrap();
        let (b, _) = gen_threshold_normal(20, 40, 0.9, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn threshold_scores_have_target_correlation() {
        let mut rng = substream(9, "t", 0, "z");
        let alloc = AllocationState::from_labels(&[0, 0, 1]);
        let n = 20_000;
        let phi = 0.95;
        let z = threshold_scores(&mut rng, n, &alloc, phi);
        let corr = |a: usize, b: usize| {
            let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
            for i in 0..n {
                let (x, y) = (z[i * 3 + a], z[i * 3 + b]);
                sab += x * y;
                saa += x * x;
                sbb += y * y;
            }
            sab / (saa * sbb).sqrt()
        };
        // SE of a sample correlation ≈ (1 − ρ²)/√n
        assert!((corr(0, 1) - phi).abs() < 3.0 * (1.0 - phi * phi) / (n as f64).sqrt());
        assert!(corr(0, 2).abs() < 3.0 / (n as f64).sqrt());
        let (x, _) = gen_threshold_normal(4000, 16, 0.9, 2).unwrap();
        for j in 0..16 {
            let m = x.column_ones(j) as f64 / 4000.0;
            assert!((m - 0.5).abs() < 3.0 * (0.25f64 / 4000.0).sqrt());
        }
    }

    #[test]
    fn near_perfect_correlation_duplicates_columns() {
        let mut rng = substream(10, "t", 0, "z");
        let alloc = AllocationState::from_labels(&[0, 0, 0]);
        let z = threshold_scores(&mut rng, 500, &alloc, 1.0 - 1e-14);
        for i in 0..500 {
            let s: Vec<bool> = (0..3).map(|j| z[i * 3 + j] > 0.0).collect();
            assert!(s[0] == s[1] && s[1] == s[2]);
        }
    }

    #[test]
    fn response_moments_and_split() {
        let (x, _) = gen_bacon(&BaconParams { n: 2000, p: 120, r0: 0.875, ..Default::default() }, 11).unwrap();
        let params = ResponseParams { size_s: 5, ..Default::default() };
        let r = gen_response(&x, &params, 3).unwrap();
        let t = &r.truth;
        for (a, &j1) in t.predictors.iter().enumerate() {
            for &j2 in &t.predictors[a + 1..] {
                let d = x.mean_taxicab(j1, j2);
                assert!(d > 0.4 && d < 0.6);
            }
        }
        let n = 2000.0;
        let sums: Vec<f64> = (0..2000).map(|i| t.predictors.iter().filter(|&&j| x.get(i, j)).count() as f64).collect();
        let lhs = r.y.iter().sum::<f64>() / n - 0.6;
        let rhs = 1.2 * sums.iter().sum::<f64>() / n;
        assert!((lhs - rhs).abs() < 3.0 * 0.5 / n.sqrt());
        assert_eq!(t.train.len(), 1600);
        assert_eq!(t.train.len() + t.test.len(), 2000);
        assert!(t.train.iter().all(|i| !t.test.contains(i)));

        let zero = gen_response(&x, &ResponseParams { beta_star: 0.0, ..params }, 3).unwrap();
        let mean = zero.y.iter().sum::<f64>() / n;
        assert!(mean.abs() < 3.0 * 0.5 / n.sqrt());
    }

    #[test]
    fn infeasible_window_is_reported() {
        let x = BinaryDesignMatrix::from_fn(10, 5, |i, _| i % 2 == 0);
        let err = gen_response(&x, &ResponseParams { size_s: 3, ..Default::default() }, 1).unwrap_err();
        assert!(err.to_string().contains("0.4"));
    }
}
