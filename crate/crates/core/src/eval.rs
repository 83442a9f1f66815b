//! Scoring against ground truth, the k-means competitor and the taxicab
//! distance summary.

use crate::error::{BaconError, Result};
use crate::estimate::CoClusterMatrix;
use crate::matrix::{popcount_xor, BinaryDesignMatrix};
use crate::model::AllocationState;
use crate::regression::median_member;
use crate::rng::substream;
use rand::Rng;
use serde::{Deserialize, Serialize};

fn pairs(m: u64) -> u64 {
    m * m.saturating_sub(1) / 2
}

/// Number of covariate pairs on which two partitions agree about co-clustering.
pub fn agreeing_pairs(a: &AllocationState, b: &AllocationState) -> u64 {
    let p = a.p() as u64;
    let mut joint = std::collections::HashMap::<(usize, usize), u64>::new();
    for j in 0..a.p() {
        *joint.entry((a.label(j), b.label(j))).or_insert(0) += 1;
    }
    let both: u64 = joint.values().map(|&c| pairs(c)).sum();
    let in_a: u64 = a.sizes().iter().map(|&s| pairs(s as u64)).sum();
    let in_b: u64 = b.sizes().iter().map(|&s| pairs(s as u64)).sum();
    pairs(p) - (in_a + in_b - 2 * both)
}

/// Proportion of correctly clustered covariate pairs, averaged over samples.
pub fn tau(samples: &[AllocationState], truth: &AllocationState) -> Result<f64> {
    let p = truth.p();
    if p < 2 {
        return Err(BaconError::Data("tau needs at least two covariates".into()));
    }
    if samples.is_empty() {
        return Err(BaconError::Data("tau needs at least one sample".into()));
    }
    let total = pairs(p as u64) as f64;
    let mut acc = 0.0;
    for s in samples {
        if s.p() != p {
            return Err(BaconError::Data(format!("sample covers {} columns, truth {p}", s.p())));
        }
        acc += agreeing_pairs(s, truth) as f64 / total;
    }
    Ok(acc / samples.len() as f64)
}

/// τ̂ from a posterior co-clustering matrix; equal to [`tau`] over the
/// samples that built it, since τ̂ is linear in the pair indicators.
pub fn tau_from_cocluster(pihat: &CoClusterMatrix, truth: &AllocationState) -> Result<f64> {
    let p = truth.p();
    if p < 2 || pihat.p() != p {
        return Err(BaconError::Data("co-clustering matrix does not match truth".into()));
    }
    let mut acc = 0.0;
    for a in 0..p {
        for b in a + 1..p {
            let pr = pihat.get(a, b);
            acc += if truth.label(a) == truth.label(b) { pr } else { 1.0 - pr };
        }
    }
    Ok(acc / pairs(p as u64) as f64)
}

/// Empirical mean and standard deviation of per-sweep discount log-odds.
pub fn logbf_lower_bound(log_odds: &[f64]) -> Result<(f64, f64)> {
    mean_sd(log_odds).ok_or_else(|| BaconError::Data("no post-burn-in log-odds recorded".into()))
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

/// Cluster-level true positive and true negative rates: a column's credit is
/// the inclusion probability of the cluster it is estimated to belong to.
pub fn tpr_tnr(inclusion: &[f64], est_alloc: &AllocationState, true_s: &[usize]) -> Result<(f64, f64)> {
    if inclusion.len() != est_alloc.q() {
        return Err(BaconError::Data(format!("{} inclusion probabilities for {} clusters", inclusion.len(), est_alloc.q())));
    }
    let p = est_alloc.p();
    let mut in_s = vec![false; p];
    for &j in true_s {
        if j >= p {
            return Err(BaconError::Data(format!("true predictor {j} out of range")));
        }
        in_s[j] = true;
    }
    let (mut tp, mut ns, mut tn, mut nn) = (0.0, 0usize, 0.0, 0usize);
    for j in 0..p {
        let pi = inclusion[est_alloc.label(j)];
        if in_s[j] {
            tp += pi;
            ns += 1;
        } else {
            tn += 1.0 - pi;
            nn += 1;
        }
    }
    let rate = |x: f64, m: usize| if m == 0 { f64::NAN } else { x / m as f64 };
    Ok((rate(tp, ns), rate(tn, nn)))
}

/// `1 − Σ(y − ŷ)² / Σ(y − ȳ)²` over the test set.
pub fn pct_mse_reduction(y_test: &[f64], yhat: &[f64], ybar_train: f64) -> Result<f64> {
    if y_test.is_empty() || y_test.len() != yhat.len() {
        return Err(BaconError::Data("test responses and predictions must be non-empty and aligned".into()));
    }
    let sse: f64 = y_test.iter().zip(yhat).map(|(y, f)| (y - f).powi(2)).sum();
    let sst: f64 = y_test.iter().map(|y| (y - ybar_train).powi(2)).sum();
    if sst == 0.0 {
        return Err(BaconError::Numeric("every test response equals the training mean".into()));
    }
    Ok(1.0 - sse / sst)
}

/// Equal-tailed credible interval of `level` from unsorted draws.
pub fn credible_interval(draws: &[f64], level: f64) -> Option<(f64, f64)> {
    if draws.is_empty() {
        return None;
    }
    let mut s = draws.to_vec();
    s.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Some((crate::regression::quantile_sorted(&s, tail), crate::regression::quantile_sorted(&s, 1.0 - tail)))
}

/// Result of the best k-means restart.
#[derive(Debug, Clone, PartialEq)]
pub struct KmeansResult {
    pub alloc: AllocationState,
    pub sse: f64,
    /// SSE after each Lloyd iteration of the winning restart.
    pub sse_trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KmeansConfig {
    pub restarts: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        Self { restarts: 20, max_iter: 100, seed: 0 }
    }
}

/// Squared distance from column `j` to a centroid with squared norm `cnorm`.
fn dist2(x: &BinaryDesignMatrix, j: usize, c: &[f64], cnorm: f64) -> f64 {
    let mut dot = 0.0;
    let col = x.column(j);
    for (w, &word) in col.iter().enumerate() {
        let mut bits = word;
        while bits != 0 {
            let t = bits.trailing_zeros() as usize;
            dot += c[w * 64 + t];
            bits &= bits - 1;
        }
    }
    (x.column_ones(j) as f64 - 2.0 * dot + cnorm).max(0.0)
}

fn column_as_f64(x: &BinaryDesignMatrix, j: usize) -> Vec<f64> {
    (0..x.n()).map(|i| f64::from(u8::from(x.get(i, j)))).collect()
}

fn kmeans_once<R: Rng + ?Sized>(
    rng: &mut R,
    x: &BinaryDesignMatrix,
    cols: &[usize],
    k: usize,
    max_iter: usize,
) -> (Vec<usize>, f64, Vec<f64>) {
    let m = cols.len();
    let n = x.n();
    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = vec![column_as_f64(x, cols[rng.random_range(0..m)])];
    let mut best = vec![f64::INFINITY; m];
    while centers.len() < k {
        let c = centers.last().expect("nonempty");
        let cn: f64 = c.iter().map(|v| v * v).sum();
        for (t, &j) in cols.iter().enumerate() {
            best[t] = best[t].min(dist2(x, j, c, cn));
        }
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = m - 1;
            for (t, &b) in best.iter().enumerate() {
                if u < b {
                    idx = t;
                    break;
                }
                u -= b;
            }
            idx
        } else {
            rng.random_range(0..m)
        };
        centers.push(column_as_f64(x, cols[pick]));
    }
    let mut assign = vec![usize::MAX; m];
    let mut trace = Vec::new();
    for _ in 0..max_iter {
        let norms: Vec<f64> = centers.iter().map(|c| c.iter().map(|v| v * v).sum()).collect();
        let mut changed = false;
        let mut sse = 0.0;
        for (t, &j) in cols.iter().enumerate() {
            let (mut bk, mut bd) = (0, f64::INFINITY);
            for (kk, c) in centers.iter().enumerate() {
                let d = dist2(x, j, c, norms[kk]);
                if d < bd {
                    bd = d;
                    bk = kk;
                }
            }
            changed |= assign[t] != bk;
            assign[t] = bk;
            sse += bd;
        }
        // an empty cluster keeps its previous centre
        let mut sums = vec![vec![0.0; n]; k];
        let mut counts = vec![0usize; k];
        for (t, &j) in cols.iter().enumerate() {
            counts[assign[t]] += 1;
            let s = &mut sums[assign[t]];
            for i in 0..n {
                if x.get(i, j) {
                    s[i] += 1.0;
                }
            }
        }
        for kk in 0..k {
            if counts[kk] > 0 {
                let inv = 1.0 / counts[kk] as f64;
                centers[kk] = sums[kk].iter().map(|v| v * inv).collect();
            }
        }
        let norms: Vec<f64> = centers.iter().map(|c| c.iter().map(|v| v * v).sum()).collect();
        let after: f64 = cols.iter().enumerate().map(|(t, &j)| dist2(x, j, &centers[assign[t]], norms[assign[t]])).sum();
        debug_assert!(after <= sse + 1e-9 * (1.0 + sse));
        trace.push(after);
        if !changed {
            break;
        }
    }
    let sse = *trace.last().expect("at least one iteration");
    (assign, sse, trace)
}

fn kmeans_columns(
    x: &BinaryDesignMatrix,
    cols: &[usize],
    k: usize,
    cfg: &KmeansConfig,
    purpose: &str,
) -> Result<(Vec<usize>, f64, Vec<f64>)> {
    if k < 1 {
        return Err(BaconError::Config("k-means needs at least one cluster".into()));
    }
    if k > cols.len() {
        return Err(BaconError::Config(format!("k-means asked for {k} clusters of {} columns", cols.len())));
    }
    if cfg.restarts == 0 || cfg.max_iter == 0 {
        return Err(BaconError::Config("k-means restarts and max_iter must be positive".into()));
    }
    let mut best: Option<(Vec<usize>, f64, Vec<f64>)> = None;
    for r in 0..cfg.restarts {
        let mut rng = substream(cfg.seed, "kmeans", r as u64, purpose);
        let run = kmeans_once(&mut rng, x, cols, k, cfg.max_iter);
        if best.as_ref().is_none_or(|b| run.1 < b.1) {
            best = Some(run);
        }
    }
    Ok(best.expect("restarts > 0"))
}

/// Lloyd's algorithm on the columns of `x` as points of `R^n`, k-means++
/// seeded, best of `cfg.restarts` by SSE.
pub fn kmeans_baseline(x: &BinaryDesignMatrix, k: usize, cfg: &KmeansConfig) -> Result<KmeansResult> {
    let cols: Vec<usize> = (0..x.p()).collect();
    let (assign, sse, sse_trace) = kmeans_columns(x, &cols, k, cfg, "baseline")?;
    Ok(KmeansResult { alloc: AllocationState::from_labels(&assign), sse, sse_trace })
}

/// Median-taxicab representative column of each cluster: the candidate
/// predictors handed to downstream regression tools.
pub fn cluster_representatives(x: &BinaryDesignMatrix, alloc: &AllocationState) -> Vec<usize> {
    (0..alloc.q()).map(|k| median_member(x, &alloc.members(k))).collect()
}

/// Median pairwise mean taxicab distance within a set of columns (0 for singletons).
pub fn median_within_distance(x: &BinaryDesignMatrix, members: &[usize]) -> f64 {
    let mut d = Vec::new();
    for (a, &j1) in members.iter().enumerate() {
        for &j2 in &members[a + 1..] {
            d.push(x.mean_taxicab(j1, j2));
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    crate::regression::quantile_sorted(&d, 0.5)
}

/// Exploratory clustering by repeated splitting: start from one cluster and
/// split the cluster with the largest within-cluster median taxicab distance
/// by 2-means until every cluster is below `threshold`.
pub fn eda_split_clusters(x: &BinaryDesignMatrix, threshold: f64, cfg: &KmeansConfig) -> Result<AllocationState> {
    let p = x.p();
    let mut clusters: Vec<Vec<usize>> = vec![(0..p).collect()];
    let mut spread: Vec<f64> = vec![median_within_distance(x, &clusters[0])];
    loop {
        let (worst, &w) = spread.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).expect("nonempty");
        if w < threshold || clusters[worst].len() < 2 {
            break;
        }
        let members = clusters.swap_remove(worst);
        spread.swap_remove(worst);
        let (assign, _, _) = kmeans_columns(x, &members, 2, cfg, "eda")?;
        let mut halves = [Vec::new(), Vec::new()];
        for (t, &j) in members.iter().enumerate() {
            halves[assign[t]].push(j);
        }
        if halves.iter().any(Vec::is_empty) {
            // identical points: split arbitrarily so the loop still terminates
            let mid = members.len() / 2;
            halves = [members[..mid].to_vec(), members[mid..].to_vec()];
        }
        for h in halves {
            spread.push(median_within_distance(x, &h));
            clusters.push(h);
        }
    }
    let mut labels = vec![0usize; p];
    for (k, c) in clusters.iter().enumerate() {
        for &j in c {
            labels[j] = k;
        }
    }
    Ok(AllocationState::from_labels(&labels))
}

/// Distribution of pairwise mean taxicab distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxicabSummary {
    pub pairs: u64,
    pub mean: f64,
    /// `(probability, value)` pairs, linear interpolation between order statistics.
    pub quantiles: Vec<(f64, f64)>,
    /// Equal-width bins over `[0, 1]`; distance 1 falls in the last bin.
    pub bin_counts: Vec<u64>,
}

/// Exact summary of the `p(p−1)/2` column distances; distances are
/// multiples of `1/n`, so a count per mismatch total is lossless.
pub fn taxicab_summary(x: &BinaryDesignMatrix, bins: usize) -> Result<TaxicabSummary> {
    let (n, p) = (x.n(), x.p());
    if p < 2 || n == 0 || bins == 0 {
        return Err(BaconError::Data("taxicab summary needs p >= 2, n >= 1 and bins >= 1".into()));
    }
    let mut by_count = vec![0u64; n + 1];
    for j1 in 0..p {
        for j2 in j1 + 1..p {
            by_count[popcount_xor(x.column(j1), x.column(j2)) as usize] += 1;
        }
    }
    let total = pairs(p as u64);
    let mean = by_count.iter().enumerate().map(|(k, &c)| k as f64 * c as f64).sum::<f64>() / (total as f64 * n as f64);
    let mut bin_counts = vec![0u64; bins];
    for (k, &c) in by_count.iter().enumerate() {
        bin_counts[((k * bins) / n).min(bins - 1)] += c;
    }
    // the order statistic of rank r (0-based) is the smallest k whose
    // cumulative count exceeds r
    let order_stat = |r: u64| -> f64 {
        let mut cum = 0;
        for (k, &c) in by_count.iter().enumerate() {
            cum += c;
            if cum > r {
                return k as f64 / n as f64;
            }
        }
        1.0
    };
    let quantiles = [0.05, 0.25, 0.5, 0.75, 0.95]
        .iter()
        .map(|&pr| {
            let h = (total - 1) as f64 * pr;
            let lo = h.floor() as u64;
            let (a, b) = (order_stat(lo), order_stat((lo + 1).min(total - 1)));
            (pr, a + (h - lo as f64) * (b - a))
        })
        .collect();
    Ok(TaxicabSummary { pairs: total, mean, quantiles, bin_counts })
}

impl TaxicabSummary {
    pub fn quantile(&self, pr: f64) -> Option<f64> {
        self.quantiles.iter().find(|(q, _)| (q - pr).abs() < 1e-12).map(|&(_, v)| v)
    }
}

/// Summary scores of one fitted run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tau_hat: Option<f64>,
    pub q_hat: Option<usize>,
    pub q0: Option<usize>,
    pub logbf_mean: Option<f64>,
    pub logbf_sd: Option<f64>,
    pub d_ci: Option<(f64, f64)>,
    /// Posterior fraction of sweeps with `d = 0`.
    pub d_zero_mass: Option<f64>,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub pct_mse_reduction: Option<f64>,
    pub model_size: Option<f64>,
    pub runtime_per_sweep_ms: Option<f64>,
    pub kmeans_tau: Option<f64>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau_hat", self.tau_hat),
            ("tpr", self.tpr),
            ("tnr", self.tnr),
            ("d_zero_mass", self.d_zero_mass),
            ("kmeans_tau", self.kmeans_tau),
        ] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(BaconError::Numeric(format!("{name} = {v} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }

    /// Long-format rows for the replicate table.
    pub fn rows(&self, method: &str, replicate: usize) -> Vec<ReplicateRow> {
        let mut out = Vec::new();
        let mut push = |metric: &str, v: Option<f64>| {
            if let Some(value) = v {
                out.push(ReplicateRow { method: method.into(), replicate, metric: metric.into(), value });
            }
        };
        push("tau_hat", self.tau_hat);
        push("q_hat", self.q_hat.map(|v| v as f64));
        push("q0", self.q0.map(|v| v as f64));
        push("logbf_mean", self.logbf_mean);
        push("logbf_sd", self.logbf_sd);
        push("d_ci_lo", self.d_ci.map(|c| c.0));
        push("d_ci_hi", self.d_ci.map(|c| c.1));
        push("d_zero_mass", self.d_zero_mass);
        push("tpr", self.tpr);
        push("tnr", self.tnr);
        push("pct_mse_reduction", self.pct_mse_reduction);
        push("model_size", self.model_size);
        push("runtime_per_sweep_ms", self.runtime_per_sweep_ms);
        push("kmeans_tau", self.kmeans_tau);
        out
    }
}

/// One row of the replicate table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub method: String,
    pub replicate: usize,
    pub metric: String,
    pub value: f64,
}
