//! Least-squares point estimates of the partition and the latent matrix.

use crate::error::{BaconError, Result};
use crate::gibbs::CoClustering;
use crate::model::{AllocationState, LatentMatrix};

/// Symmetric posterior co-clustering probabilities with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CoClusterMatrix {
    p: usize,
    values: Vec<f32>,
}

impl CoClusterMatrix {
    /// Validates symmetry, unit diagonal and range.
    pub fn from_dense(p: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != p * p {
            return Err(BaconError::Data(format!("expected {} entries, got {}", p * p, values.len())));
        }
        for a in 0..p {
            if (values[a * p + a] - 1.0).abs() > 1e-6 {
                return Err(BaconError::Data(format!("diagonal entry {a} is not 1")));
            }
            for b in 0..p {
                let v = values[a * p + b];
                if !(0.0..=1.0).contains(&v) || (v - values[b * p + a]).abs() > 1e-6 {
                    return Err(BaconError::Data(format!("entry ({a},{b}) out of range or asymmetric")));
                }
            }
        }
        Ok(Self { p, values })
    }

    pub fn from_counts(c: &CoClustering) -> Self {
        let values = c.to_dense().into_iter().map(|v| v as f32).collect();
        Self { p: c.p(), values }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.p + b] as f64
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    fn sum_sq_upper(&self) -> f64 {
        let mut s = 0.0;
        for a in 0..self.p {
            for b in (a + 1)..self.p {
                s += self.get(a, b).powi(2);
            }
        }
        s
    }
}

/// `Σ_{j1<j2} (1{c_j1 = c_j2} − π̂_j1j2)²`.
pub fn allocation_loss(alloc: &AllocationState, pihat: &CoClusterMatrix) -> f64 {
    allocation_loss_with(alloc, pihat, pihat.sum_sq_upper())
}

fn allocation_loss_with(alloc: &AllocationState, pihat: &CoClusterMatrix, base: f64) -> f64 {
    let mut loss = base;
    for members in alloc.clusters() {
        for (i, &a) in members.iter().enumerate() {
            for &b in &members[i + 1..] {
                loss += 1.0 - 2.0 * pihat.get(a, b);
            }
        }
    }
    loss
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsAllocation {
    pub alloc: AllocationState,
    pub loss: f64,
    /// Position in the sample sequence.
    pub index: usize,
}

/// Sampled partition closest to `π̂` in squared loss; earliest wins ties.
pub fn least_squares_allocation(samples: &[AllocationState], pihat: &CoClusterMatrix) -> Result<LsAllocation> {
    if samples.is_empty() {
        return Err(BaconError::Data("no allocation samples".into()));
    }
    let base = pihat.sum_sq_upper();
    let mut best: Option<LsAllocation> = None;
    for (index, s) in samples.iter().enumerate() {
        if s.p() != pihat.p() {
            return Err(BaconError::Data(format!("sample {index} has {} covariates, π̂ has {}", s.p(), pihat.p())));
        }
        let loss = allocation_loss_with(s, pihat, base);
        if best.as_ref().is_none_or(|b| loss < b.loss) {
            best = Some(LsAllocation { alloc: s.clone(), loss, index });
        }
    }
    Ok(best.expect("non-empty"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsConfiguration {
    pub latent: LatentMatrix,
    pub loss: f64,
    pub index: usize,
}

/// `Σ_{i,k} (v_ik − mean_ik)²` with `means` row-major `n x q`.
pub fn configuration_loss(v: &LatentMatrix, means: &[f64]) -> f64 {
    let q = v.q();
    let mut loss = 0.0;
    for i in 0..v.n() {
        for k in 0..q {
            let x = if v.get(i, k) { 1.0 } else { 0.0 };
            loss += (x - means[i * q + k]).powi(2);
        }
    }
    loss
}

/// Sampled latent matrix closest to the element-wise posterior means.
pub fn least_squares_configuration(samples: &[LatentMatrix], means: &[f64]) -> Result<LsConfiguration> {
    if samples.is_empty() {
        return Err(BaconError::Data("no latent samples".into()));
    }
    let mut best: Option<LsConfiguration> = None;
    for (index, s) in samples.iter().enumerate() {
        if s.n() * s.q() != means.len() || s.n() != samples[0].n() || s.q() != samples[0].q() {
            return Err(BaconError::Data(format!("latent sample {index} has mismatched dimensions")));
        }
        let loss = configuration_loss(s, means);
        if best.as_ref().is_none_or(|b| loss < b.loss) {
            best = Some(LsConfiguration { latent: s.clone(), loss, index });
        }
    }
    Ok(best.expect("non-empty"))
}
