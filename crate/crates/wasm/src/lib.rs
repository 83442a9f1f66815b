//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export returns a JSON string so the page needs no glue beyond the
//! generated bindings. The `*_json` functions are plain Rust and are what the
//! native tests exercise.

use bacon_core::estimate::{least_squares_allocation, CoClusterMatrix};
use bacon_core::eval::{kmeans_baseline, tau, KmeansConfig};
use bacon_core::gibbs::{run_stage1, ChainConfig, ClusteringPriors};
use bacon_core::model::{identical_latent_bound, log_eppf, sample_pdp_partition, ContaminationModel, PdpHyper};
use bacon_core::rng::substream;
use bacon_core::synth::{gen_bacon, BaconParams};
use bacon_core::Result;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Upper bound on `p` for the clustering demo; the heatmap is `p × p`.
pub const MAX_DEMO_P: usize = 120;

#[derive(Debug, Serialize)]
pub struct PartitionDraw {
    /// Block sizes, largest first.
    pub sizes: Vec<usize>,
    pub q: usize,
    pub log_eppf: f64,
    /// Prior mean number of blocks.
    pub expected_q: f64,
}

/// `E[K_p]` by the exact recursion `E[K_{i+1}] = E[K_i] + (M + d·E[K_i]) / (M + i)`.
pub fn expected_blocks(p: usize, mass: f64, discount: f64) -> f64 {
    let mut k = 0.0;
    for i in 0..p {
        k += if i == 0 { 1.0 } else { (mass + discount * k) / (mass + i as f64) };
    }
    k
}

pub fn pdp_partition_draw(p: usize, mass: f64, discount: f64, seed: u64) -> Result<PartitionDraw> {
    let hyper = PdpHyper::new(mass, discount)?;
    if p == 0 {
        return Err(bacon_core::BaconError::Config("p must be positive".into()));
    }
    let mut rng = substream(seed, "demo", 0, "partition");
    let alloc = sample_pdp_partition(&mut rng, p, mass, discount);
    let mut sizes = alloc.sizes().to_vec();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    Ok(PartitionDraw { q: alloc.q(), log_eppf: log_eppf(&alloc, &hyper), expected_q: expected_blocks(p, mass, discount), sizes })
}

#[derive(Debug, Serialize)]
pub struct ClusterDemo {
    pub p: usize,
    pub q0: usize,
    pub q_hat: usize,
    pub tau: f64,
    pub kmeans_tau: f64,
    pub d_mean: f64,
    /// Column order grouping the estimated clusters.
    pub order: Vec<usize>,
    /// Co-clustering probabilities in `order`, row-major `p × p`.
    pub heatmap: Vec<f32>,
}

/// Simulates a dataset, runs a short clustering chain and scores it.
pub fn cluster_demo_run(n: usize, p: usize, d0: f64, r0: f64, sweeps: usize, seed: u64) -> Result<ClusterDemo> {
    if !(2..=MAX_DEMO_P).contains(&p) || sweeps < 2 {
        return Err(bacon_core::BaconError::Config(format!("need 2 <= p <= {MAX_DEMO_P} and sweeps >= 2")));
    }
    let params = BaconParams { n, p, d0, r0, ..BaconParams::default() };
    let (x, truth) = gen_bacon(&params, seed)?;
    let truth = truth.cluster.expect("bacon generator records clusters").allocation();
    let config = ChainConfig { burn_in: sweeps / 2, kept: sweeps - sweeps / 2, thin: 1, seed, ..ChainConfig::default() };
    let out = run_stage1(&x, &ClusteringPriors::default(), &config)?;
    let samples = out.allocations();
    let pihat = CoClusterMatrix::from_counts(&out.cocluster);
    let ls = least_squares_allocation(&samples, &pihat)?;
    let km = kmeans_baseline(&x, truth.q(), &KmeansConfig { seed, ..KmeansConfig::default() })?;

    let order: Vec<usize> = ls.alloc.clusters().into_iter().flatten().collect();
    let heatmap = order.iter().flat_map(|&a| order.iter().map(move |&b| (a, b))).map(|(a, b)| pihat.get(a, b) as f32).collect();
    Ok(ClusterDemo {
        p,
        q0: truth.q(),
        q_hat: ls.alloc.q(),
        tau: tau(&samples, &truth)?,
        kmeans_tau: tau(std::slice::from_ref(&km.alloc), &truth)?,
        d_mean: out.samples.iter().map(|s| s.d).sum::<f64>() / out.samples.len() as f64,
        order,
        heatmap,
    })
}

#[derive(Debug, Serialize)]
pub struct ChannelView {
    pub q: [[f64; 2]; 2],
    /// Bound on the chance that two of `q` latent vectors coincide.
    pub identical_bound: f64,
}

pub fn channel_view(r: [f64; 2], q_star_off: [f64; 2], clusters: usize, n: usize, p_star: f64) -> Result<ChannelView> {
    let contam = ContaminationModel {
        r,
        q_star: [[1.0 - q_star_off[0], q_star_off[0]], [q_star_off[1], 1.0 - q_star_off[1]]],
        r_floor: 0.5 + 1e-9,
        ..ContaminationModel::default()
    };
    contam.validate()?;
    if !(0.0..=1.0).contains(&p_star) {
        return Err(bacon_core::BaconError::Config("p_star must lie in [0, 1]".into()));
    }
    Ok(ChannelView { q: contam.derive_q(), identical_bound: identical_latent_bound(clusters, n, p_star) })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsValue> {
    match r {
        Ok(v) => serde_json::to_string(&v).map_err(|e| JsValue::from_str(&e.to_string())),
        Err(e) => Err(JsValue::from_str(&e.to_string())),
    }
}

#[wasm_bindgen]
pub fn pdp_partition(p: usize, mass: f64, discount: f64, seed: u32) -> std::result::Result<String, JsValue> {
    to_js(pdp_partition_draw(p, mass, discount, seed.into()))
}

#[wasm_bindgen]
pub fn cluster_demo(n: usize, p: usize, d0: f64, r0: f64, sweeps: usize, seed: u32) -> std::result::Result<String, JsValue> {
    to_js(cluster_demo_run(n, p, d0, r0, sweeps, seed.into()))
}

#[wasm_bindgen]
pub fn contamination(r0: f64, r1: f64, q01: f64, q10: f64, clusters: usize, n: usize, p_star: f64) -> std::result::Result<String, JsValue> {
    to_js(channel_view([r0, r1], [q01, q10], clusters, n, p_star))
}
