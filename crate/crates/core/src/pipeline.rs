//! Staged orchestration over a run directory: clustering → least-squares
//! allocation → latent stage → least-squares configuration → regression →
//! prediction, then scoring. Each stage records a hash of its inputs and is
//! skipped when rerun with the same hash and its artifacts present.

use crate::config::{hex_digest, RunConfig};
use crate::error::{BaconError, Result};
use crate::estimate::{least_squares_allocation, least_squares_configuration, CoClusterMatrix};
use crate::eval::{self, EvalReport, KmeansConfig, ReplicateRow};
use crate::gibbs::{run_stage1, run_stage1ii, CoClustering, Stage1Output};
use crate::io::{self, ChainRecord, Manifest};
use crate::matrix::BinaryDesignMatrix;
use crate::model::{AllocationState, LatentMatrix};
use crate::regression::{predict, run_stage2, RegressionData, RegressionState, RepresentativeMode};
use crate::rng::substream;
use crate::synth::{gen_bacon, gen_response, gen_threshold_normal, split_rows, TruthRecord};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Configuration hash and seed attached to every JSON artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

impl Stamp {
    pub fn of(cfg: &RunConfig) -> Self {
        Self { config_hash: cfg.hash(), seed: cfg.seed }
    }
}

/// Artifact locations inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn chain(&self, name: &str) -> PathBuf {
        self.root.join("chains").join(name)
    }

    fn create(&self) -> Result<()> {
        let chains = self.root.join("chains");
        std::fs::create_dir_all(&chains).map_err(|e| BaconError::io(&chains, e))
    }
}

pub const CONFIG_JSON: &str = "config.json";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const DESIGN_CSV: &str = "design.csv";
pub const RAW_MATRIX_CSV: &str = "matrix.csv";
pub const RESPONSES_CSV: &str = "responses.csv";
pub const TRAIN_IDS: &str = "train_ids.txt";
pub const TRUTH_JSON: &str = "truth.json";
pub const STAGES_JSON: &str = "stages.json";
pub const COCLUSTER_BIN: &str = "cocluster.bin";
pub const LS_ALLOCATION_JSON: &str = "ls_allocation.json";
pub const STAGE1_SUMMARY_JSON: &str = "stage1_summary.json";
pub const LS_CONFIGURATION_CSV: &str = "ls_configuration.csv";
pub const REGRESSION_CSV: &str = "regression.csv";
pub const STAGE2_SUMMARY_JSON: &str = "stage2_summary.json";
pub const PREDICTIONS_CSV: &str = "predictions.csv";
pub const EVAL_JSON: &str = "eval.json";
pub const REPLICATES_CSV: &str = "replicates.csv";
pub const STAGE1B_CHAIN: &str = "stage1b.ndjson";
pub const STAGE2_CHAIN: &str = "stage2.ndjson";

pub fn stage1_chain_name(chain: usize) -> String {
    format!("stage1_chain{chain}.ndjson")
}

/// Ingested data with the train/test split.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Filtered design matrix over all subjects.
    pub x: BinaryDesignMatrix,
    pub manifest: Manifest,
    /// Responses aligned to rows, if any were supplied.
    pub y: Option<Vec<f64>>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn x_train(&self) -> BinaryDesignMatrix {
        self.x.select_rows(&self.train)
    }

    pub fn x_test(&self) -> BinaryDesignMatrix {
        self.x.select_rows(&self.test)
    }

    pub fn y_train(&self) -> Option<Vec<f64>> {
        self.y.as_ref().map(|y| self.train.iter().map(|&i| y[i]).collect())
    }

    fn hash(&self) -> String {
        let mut buf = Vec::new();
        for j in 0..self.x.p() {
            buf.extend(self.x.column_ids()[j].as_bytes());
            buf.extend(self.x.column(j).iter().flat_map(|w| w.to_le_bytes()));
        }
        if let Some(y) = &self.y {
            buf.extend(y.iter().flat_map(|v| v.to_le_bytes()));
        }
        buf.extend(self.train.iter().flat_map(|&i| (i as u64).to_le_bytes()));
        hex_digest(&buf)
    }
}

fn out_dir(cfg: &RunConfig) -> RunDir {
    RunDir::new(&cfg.out_dir)
}

/// Reads the configured source, filters constant columns and writes
/// `design.csv` and `manifest.json`.
pub fn ingest(cfg: &RunConfig) -> Result<(BinaryDesignMatrix, Manifest)> {
    let dir = out_dir(cfg);
    dir.create()?;
    let (x, manifest) = if !cfg.adjacency_dir.is_empty() {
        io::ingest_bundle(&io::AdjacencyBundle::read_dir(Path::new(&cfg.adjacency_dir))?)?
    } else if !cfg.matrix.is_empty() {
        io::ingest_matrix_csv(Path::new(&cfg.matrix))?
    } else {
        return Err(BaconError::Config("ingest needs `matrix` or `adjacency_dir`".into()));
    };
    io::write_matrix_csv(&dir.path(DESIGN_CSV), &x, Some(&manifest.subjects))?;
    io::write_json(&dir.path(MANIFEST_JSON), &manifest)?;
    log::info!("ingested {} subjects x {} covariates ({} constant removed)", x.n(), x.p(), manifest.removed.len());
    Ok((x, manifest))
}

/// Generates a synthetic dataset into the run directory and ingests it.
pub fn synth(cfg: &RunConfig) -> Result<TruthRecord> {
    cfg.validate()?;
    let dir = out_dir(cfg);
    dir.create()?;
    let (x, mut truth) = match cfg.synth_generator.as_str() {
        "bacon" => gen_bacon(&cfg.bacon_params(), cfg.seed)?,
        _ => gen_threshold_normal(cfg.synth_n, cfg.synth_p, cfg.synth_phi0, cfg.seed)?,
    };
    let subjects: Vec<String> = (1..=x.n()).map(|i| format!("S{i}")).collect();
    io::write_matrix_csv(&dir.path(RAW_MATRIX_CSV), &x, Some(&subjects))?;
    if cfg.synth_response {
        let r = gen_response(&x, &cfg.response_params(), cfg.seed)?;
        let rows: Vec<io::Response> = subjects.iter().zip(&r.y).map(|(s, &y)| io::Response { subject_id: s.clone(), y }).collect();
        io::write_csv_rows(&dir.path(RESPONSES_CSV), &rows)?;
        let ids: String = r.truth.train.iter().map(|&i| format!("{}\n", subjects[i])).collect();
        std::fs::write(dir.path(TRAIN_IDS), ids).map_err(|e| BaconError::io(dir.path(TRAIN_IDS), e))?;
        truth.response = Some(r.truth);
    }
    io::write_json(&dir.path(TRUTH_JSON), &truth)?;
    let ingest_cfg = RunConfig { matrix: dir.path(RAW_MATRIX_CSV).display().to_string(), adjacency_dir: String::new(), ..cfg.clone() };
    ingest(&ingest_cfg)?;
    Ok(truth)
}

fn existing(cfg_value: &str, fallback: PathBuf) -> Option<PathBuf> {
    if !cfg_value.is_empty() {
        Some(PathBuf::from(cfg_value))
    } else if fallback.exists() {
        Some(fallback)
    } else {
        None
    }
}

/// Loads the design matrix (ingesting first if a source is configured),
/// aligns responses and forms the split.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = out_dir(cfg);
    let (x, manifest) = if !cfg.matrix.is_empty() || !cfg.adjacency_dir.is_empty() {
        ingest(cfg)?
    } else if dir.path(DESIGN_CSV).exists() && dir.path(MANIFEST_JSON).exists() {
        let (x, _) = io::read_matrix_csv(&dir.path(DESIGN_CSV))?;
        (x, io::read_json(&dir.path(MANIFEST_JSON))?)
    } else {
        return Err(BaconError::Data(format!("no input data in {}: run ingest or synth first", dir.root().display())));
    };
    let n = x.n();
    let y = match existing(&cfg.responses, dir.path(RESPONSES_CSV)) {
        Some(p) => {
            let rows = io::read_responses(&p)?;
            let by_id: HashMap<&str, f64> = rows.iter().map(|r| (r.subject_id.as_str(), r.y)).collect();
            if by_id.len() != rows.len() {
                return Err(BaconError::Data(format!("{}: duplicate subject ids", p.display())));
            }
            let y = manifest
                .subjects
                .iter()
                .map(|s| by_id.get(s.as_str()).copied().ok_or_else(|| BaconError::Data(format!("no response for subject {s}"))))
                .collect::<Result<Vec<f64>>>()?;
            Some(y)
        }
        None => None,
    };
    let (train, test) = if y.is_none() {
        ((0..n).collect(), Vec::new())
    } else if let Some(p) = existing(&cfg.train_ids, dir.path(TRAIN_IDS)) {
        let text = std::fs::read_to_string(&p).map_err(|e| BaconError::io(&p, e))?;
        let ids: std::collections::HashSet<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        if let Some(bad) = ids.iter().find(|id| !manifest.subjects.iter().any(|s| s == *id)) {
            return Err(BaconError::Data(format!("training id {bad} is not a subject")));
        }
        (0..n).partition(|&i| ids.contains(manifest.subjects[i].as_str()))
    } else {
        let mut rng = substream(cfg.seed, "split", 0, "rows");
        split_rows(&mut rng, n, cfg.train_fraction)
    };
    if train.len() < 3 {
        return Err(BaconError::Data("fewer than three training subjects".into()));
    }
    Ok(Dataset { x, manifest, y, train, test })
}

/// Least-squares allocation artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsAllocationFile {
    pub q: usize,
    /// 1-based labels over the design-matrix columns.
    pub labels: Vec<u32>,
    pub loss: f64,
    pub sweep: u64,
    pub chain: usize,
    pub stamp: Stamp,
}

impl LsAllocationFile {
    pub fn allocation(&self) -> AllocationState {
        AllocationState::from_labels(&self.labels.iter().map(|&l| l as usize).collect::<Vec<_>>())
    }
}

/// Clustering-stage summaries pooled over chains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Summary {
    pub chains: usize,
    pub samples: usize,
    pub mean_q: f64,
    pub d_ci: (f64, f64),
    pub d_zero_mass: f64,
    pub logbf_mean: f64,
    pub logbf_sd: f64,
    pub runtime_per_sweep_ms: f64,
    pub stamp: Stamp,
}

/// Regression-stage summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Summary {
    pub mean_q1: f64,
    /// Clusters with posterior inclusion probability above one half.
    pub model_size: usize,
    pub ybar_train: f64,
    pub stamp: Stamp,
}

/// One member row of `regression.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionRow {
    /// 1-based cluster.
    pub cluster: usize,
    pub column_id: String,
    pub representative_prob: f64,
    pub inclusion: f64,
    /// Posterior mean of the coefficient over sweeps that include the cluster.
    pub beta_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub subject_id: String,
    pub y: Option<f64>,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Outcome of [`fit`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FitSummary {
    pub ran: Vec<String>,
    pub skipped: Vec<String>,
}

type StageHashes = BTreeMap<String, String>;

fn read_stage_hashes(dir: &RunDir) -> StageHashes {
    io::read_json(&dir.path(STAGES_JSON)).unwrap_or_default()
}

fn up_to_date(dir: &RunDir, hashes: &StageHashes, stage: &str, hash: &str, artifacts: &[PathBuf]) -> bool {
    hashes.get(stage).map(String::as_str) == Some(hash) && artifacts.iter().all(|p| p.exists()) && dir.root().exists()
}

fn stage_hash(parts: &[&str]) -> String {
    hex_digest(parts.join("\u{1f}").as_bytes())
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

/// Runs the configured stages, skipping any whose inputs are unchanged.
pub fn fit(cfg: &RunConfig) -> Result<FitSummary> {
    cfg.validate()?;
    let stages = cfg.stage_set()?;
    let dir = out_dir(cfg);
    dir.create()?;
    io::write_json(&dir.path(CONFIG_JSON), &serde_json::json!({ "config": cfg, "stamp": Stamp::of(cfg) }))?;
    let data = load_dataset(cfg)?;
    let mut hashes = read_stage_hashes(&dir);
    let mut summary = FitSummary::default();
    let data_hash = data.hash();
    let priors = cfg.clustering_priors()?;
    let h1 = stage_hash(&["1", &data_hash, &json(&priors), &json(&cfg.chain_config(0)), &cfg.chains.to_string()]);
    let h1b = stage_hash(&["1b", &h1, &json(&cfg.latent_chain_config())]);
    let mode = cfg.representative_mode()?;
    let upstream = if mode == RepresentativeMode::Latent { &h1b } else { &h1 };
    let h2 = stage_hash(&[
        "2",
        upstream,
        &json(&cfg.regression_priors()?),
        &json(&cfg.regression_chain()),
        &cfg.mode,
        &cfg.center_response.to_string(),
    ]);

    let mut run_stage = |name: &str, hash: &str, artifacts: Vec<PathBuf>, body: &mut dyn FnMut() -> Result<()>| -> Result<()> {
        if up_to_date(&dir, &hashes, name, hash, &artifacts) {
            log::info!("stage {name} up to date");
            summary.skipped.push(name.to_string());
            return Ok(());
        }
        body()?;
        hashes.insert(name.to_string(), hash.to_string());
        io::write_json(&dir.path(STAGES_JSON), &hashes)?;
        summary.ran.push(name.to_string());
        Ok(())
    };
    if stages.clustering {
        let arts = vec![dir.path(LS_ALLOCATION_JSON), dir.path(COCLUSTER_BIN), dir.path(STAGE1_SUMMARY_JSON)];
        run_stage("1", &h1, arts, &mut || stage1(cfg, &dir, &data))?;
    }
    if stages.latent {
        require_stage(&read_stage_hashes(&dir), "1", &h1, "latent stage")?;
        let arts = vec![dir.path(LS_CONFIGURATION_CSV), dir.chain(STAGE1B_CHAIN)];
        run_stage("1b", &h1b, arts, &mut || stage1b(cfg, &dir, &data))?;
    }
    if stages.regression {
        require_stage(&read_stage_hashes(&dir), "1", &h1, "regression stage")?;
        if mode == RepresentativeMode::Latent {
            require_stage(&read_stage_hashes(&dir), "1b", &h1b, "latent-mode regression")?;
        }
        let arts = vec![dir.path(REGRESSION_CSV), dir.path(PREDICTIONS_CSV), dir.chain(STAGE2_CHAIN)];
        run_stage("2", &h2, arts, &mut || {
            stage2(cfg, &dir, &data)?;
            predict_stage(cfg, &dir, &data).map(|_| ())
        })?;
    }
    Ok(summary)
}

fn require_stage(hashes: &StageHashes, stage: &str, hash: &str, what: &str) -> Result<()> {
    if hashes.get(stage).map(String::as_str) != Some(hash) {
        return Err(BaconError::Data(format!("{what} needs stage {stage} outputs for this configuration; run it first")));
    }
    Ok(())
}

fn stage1(cfg: &RunConfig, dir: &RunDir, data: &Dataset) -> Result<()> {
    let x = data.x_train();
    let priors = cfg.clustering_priors()?;
    let stamp = Stamp::of(cfg);
    let runs: Vec<Result<(Stage1Output, f64)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.chains)
            .map(|c| {
                let (x, cc) = (&x, cfg.chain_config(c as u64));
                s.spawn(move || {
                    let t0 = Instant::now();
                    let out = run_stage1(x, &priors, &cc)?;
                    Ok((out, t0.elapsed().as_secs_f64()))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("chain thread panicked")).collect()
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let mut pooled = CoClustering::new(x.p());
    let mut allocs = Vec::new();
    let mut origin = Vec::new();
    let (mut ds, mut log_odds, mut zero, mut secs) = (Vec::new(), Vec::new(), 0usize, 0.0);
    for (c, (out, t)) in runs.iter().enumerate() {
        io::write_ndjson(&dir.chain(&stage1_chain_name(c)), out.samples.iter().map(ChainRecord::from))?;
        pooled.merge(&out.cocluster)?;
        for (a, s) in out.allocations().into_iter().zip(&out.samples) {
            allocs.push(a);
            origin.push((c, s.sweep));
        }
        ds.extend(out.samples.iter().map(|s| s.d));
        log_odds.extend(out.discount_log_odds.iter().copied().filter(|v| v.is_finite()));
        zero += out.discount_positive.iter().filter(|&&b| !b).count();
        secs += t;
    }
    let pihat = CoClusterMatrix::from_counts(&pooled);
    io::write_cocluster(&dir.path(COCLUSTER_BIN), &pihat)?;
    let ls = least_squares_allocation(&allocs, &pihat)?;
    let (chain, sweep) = origin[ls.index];
    io::write_json(
        &dir.path(LS_ALLOCATION_JSON),
        &LsAllocationFile {
            q: ls.alloc.q(),
            labels: ls.alloc.one_based().iter().map(|&l| l as u32).collect(),
            loss: ls.loss,
            sweep,
            chain,
            stamp: stamp.clone(),
        },
    )?;
    let (logbf_mean, logbf_sd) = eval::mean_sd(&log_odds).unwrap_or((f64::NAN, f64::NAN));
    let sweeps = (cfg.burn_in + cfg.kept) * cfg.chains;
    let summary = Stage1Summary {
        chains: cfg.chains,
        samples: allocs.len(),
        mean_q: allocs.iter().map(|a| a.q() as f64).sum::<f64>() / allocs.len() as f64,
        d_ci: eval::credible_interval(&ds, 0.95).unwrap_or((f64::NAN, f64::NAN)),
        d_zero_mass: zero as f64 / (cfg.kept * cfg.chains) as f64,
        logbf_mean,
        logbf_sd,
        runtime_per_sweep_ms: 1e3 * secs / sweeps as f64,
        stamp,
    };
    io::write_json(&dir.path(STAGE1_SUMMARY_JSON), &summary)?;
    log::info!("clustering stage: q_hat = {}, d CI = ({:.3}, {:.3})", ls.alloc.q(), summary.d_ci.0, summary.d_ci.1);
    Ok(())
}

fn read_ls_allocation(dir: &RunDir) -> Result<LsAllocationFile> {
    let p = dir.path(LS_ALLOCATION_JSON);
    if !p.exists() {
        return Err(BaconError::Data("least-squares allocation missing: run stage 1 first".into()));
    }
    io::read_json(&p)
}

fn stage1b(cfg: &RunConfig, dir: &RunDir, data: &Dataset) -> Result<()> {
    let x = data.x_train();
    let alloc = read_ls_allocation(dir)?.allocation();
    if alloc.p() != x.p() {
        return Err(BaconError::Data("least-squares allocation does not match the design matrix".into()));
    }
    let out = run_stage1ii(&x, &alloc, &cfg.clustering_priors()?, &cfg.latent_chain_config())?;
    io::write_ndjson(&dir.chain(STAGE1B_CHAIN), out.samples.iter())?;
    let ls = least_squares_configuration(&out.draws, &out.latent_mean)?;
    let mut rows = Vec::with_capacity(x.n());
    let header: Vec<String> = std::iter::once("subject_id".to_string()).chain((1..=ls.latent.q()).map(|k| format!("k{k}"))).collect();
    rows.push(header);
    for (r, &i) in data.train.iter().enumerate() {
        let mut row = vec![data.manifest.subjects[i].clone()];
        row.extend((0..ls.latent.q()).map(|k| if ls.latent.get(r, k) { "1".to_string() } else { "0".to_string() }));
        rows.push(row);
    }
    let path = dir.path(LS_CONFIGURATION_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(|e| BaconError::Data(e.to_string()))?;
    for r in rows {
        w.write_record(&r).map_err(|e| BaconError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| BaconError::io(&path, e))?;
    Ok(())
}

fn read_ls_configuration(dir: &RunDir, q: usize) -> Result<LatentMatrix> {
    let path = dir.path(LS_CONFIGURATION_CSV);
    if !path.exists() {
        return Err(BaconError::Data("least-squares configuration missing: run stage 1b first".into()));
    }
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| BaconError::Data(e.to_string()))?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| BaconError::Data(e.to_string()))?;
        rows.push(rec.iter().skip(1).map(|f| u8::from(f == "1")).collect::<Vec<u8>>());
    }
    Ok(LatentMatrix::from_rows(&rows, q, 0.5, 1.0))
}

fn regression_data(cfg: &RunConfig, dir: &RunDir, data: &Dataset) -> Result<(RegressionData, AllocationState)> {
    let y = data.y_train().ok_or_else(|| BaconError::Data("regression needs responses".into()))?;
    if data.test.is_empty() {
        log::warn!("no test subjects; predictions will be empty");
    }
    let alloc = read_ls_allocation(dir)?.allocation();
    let mode = cfg.representative_mode()?;
    let latent = if mode == RepresentativeMode::Latent { Some(read_ls_configuration(dir, alloc.q())?) } else { None };
    let mut rd = RegressionData::new(&data.x_train(), &data.x_test(), y, &alloc, mode, latent.as_ref())?;
    if cfg.center_response {
        rd = rd.centered();
    }
    Ok((rd, alloc))
}

fn stage2(cfg: &RunConfig, dir: &RunDir, data: &Dataset) -> Result<()> {
    let (rd, alloc) = regression_data(cfg, dir, data)?;
    let out = run_stage2(&rd, &cfg.regression_priors()?, &cfg.regression_chain())?;
    io::write_ndjson(&dir.chain(STAGE2_CHAIN), out.samples.iter())?;
    let ids = data.x.column_ids();
    let betas = crate::regression::beta_summaries(&out);
    let mut rows = Vec::new();
    for k in 0..rd.q() {
        for (c, cand) in rd.candidates[k].iter().enumerate() {
            let prob = out.representative[k][c];
            let members: Vec<usize> = match cand.column {
                Some(j) => vec![j],
                None => alloc.members(k),
            };
            for j in members {
                rows.push(RegressionRow {
                    cluster: k + 1,
                    column_id: ids[j].clone(),
                    representative_prob: if cand.column.is_some() { prob } else { 0.0 },
                    inclusion: out.inclusion[k],
                    beta_mean: betas[k].mean_if_included,
                });
            }
        }
        if rd.mode == RepresentativeMode::Median {
            let chosen = rd.candidates[k][0].column;
            for j in alloc.members(k).into_iter().filter(|&j| Some(j) != chosen) {
                rows.push(RegressionRow {
                    cluster: k + 1,
                    column_id: ids[j].clone(),
                    representative_prob: 0.0,
                    inclusion: out.inclusion[k],
                    beta_mean: betas[k].mean_if_included,
                });
            }
        }
    }
    io::write_csv_rows(&dir.path(REGRESSION_CSV), &rows)?;
    let y = data.y_train().expect("checked in regression_data");
    io::write_json(
        &dir.path(STAGE2_SUMMARY_JSON),
        &Stage2Summary {
            mean_q1: out.mean_q1,
            model_size: out.inclusion.iter().filter(|&&p| p > 0.5).count(),
            ybar_train: y.iter().sum::<f64>() / y.len() as f64,
            stamp: Stamp::of(cfg),
        },
    )
}

fn predict_stage(cfg: &RunConfig, dir: &RunDir, data: &Dataset) -> Result<Vec<PredictionRow>> {
    let (rd, _) = regression_data(cfg, dir, data)?;
    let chain = dir.chain(STAGE2_CHAIN);
    if !chain.exists() {
        return Err(BaconError::Data("regression samples missing: run stage 2 first".into()));
    }
    let samples: Vec<RegressionState> = io::read_ndjson(&chain)?;
    let preds = predict(&samples, &rd, cfg.seed)?;
    let rows: Vec<PredictionRow> = data
        .test
        .iter()
        .zip(&preds)
        .map(|(&i, p)| PredictionRow {
            subject_id: data.manifest.subjects[i].clone(),
            y: data.y.as_ref().map(|y| y[i]),
            mean: p.mean,
            lower: p.lower,
            upper: p.upper,
        })
        .collect();
    io::write_csv_rows(&dir.path(PREDICTIONS_CSV), &rows)?;
    Ok(rows)
}

/// Recomputes test predictions from stored regression samples.
pub fn predict_only(cfg: &RunConfig) -> Result<Vec<PredictionRow>> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    predict_stage(cfg, &out_dir(cfg), &data)
}

/// Restricts raw-column truth to the retained design-matrix columns.
pub fn truth_on_design(truth: &TruthRecord, manifest: &Manifest) -> (Option<AllocationState>, Option<Vec<usize>>) {
    let alloc = truth.cluster.as_ref().map(|c| {
        let labels: Vec<usize> = manifest.retained.iter().map(|e| c.labels[e.raw_index] as usize).collect();
        AllocationState::from_labels(&labels)
    });
    let preds = truth
        .response
        .as_ref()
        .map(|r| manifest.retained.iter().enumerate().filter(|(_, e)| r.predictors.contains(&e.raw_index)).map(|(j, _)| j).collect());
    (alloc, preds)
}

#[derive(Serialize, Deserialize)]
struct EvalFile {
    #[serde(flatten)]
    report: EvalReport,
    stamp: Stamp,
}

/// Scores whatever the run directory holds against synthetic truth.
pub fn evaluate(cfg: &RunConfig) -> Result<EvalReport> {
    let dir = out_dir(cfg);
    let data = load_dataset(cfg)?;
    let truth: Option<TruthRecord> = if dir.path(TRUTH_JSON).exists() { Some(io::read_json(&dir.path(TRUTH_JSON))?) } else { None };
    let (true_alloc, true_preds) = truth.as_ref().map(|t| truth_on_design(t, &data.manifest)).unwrap_or((None, None));
    let mut rep = EvalReport::default();
    if let Ok(ls) = read_ls_allocation(&dir) {
        let alloc = ls.allocation();
        rep.q_hat = Some(alloc.q());
        if let Some(ta) = &true_alloc {
            let mut samples = Vec::new();
            for c in 0..cfg.chains {
                let recs: Vec<ChainRecord> = io::read_ndjson(&dir.chain(&stage1_chain_name(c)))?;
                samples.extend(recs.iter().map(|r| AllocationState::from_labels(&r.zero_based())));
            }
            rep.tau_hat = Some(eval::tau(&samples, ta)?);
            rep.q0 = Some(ta.q());
            let x = data.x_train();
            let km = eval::kmeans_baseline(&x, ta.q().min(x.p()), &KmeansConfig { seed: cfg.seed, ..KmeansConfig::default() })?;
            rep.kmeans_tau = Some(eval::tau(&[km.alloc], ta)?);
        }
        if let Ok(s) = io::read_json::<Stage1Summary>(&dir.path(STAGE1_SUMMARY_JSON)) {
            rep.logbf_mean = Some(s.logbf_mean);
            rep.logbf_sd = Some(s.logbf_sd);
            rep.d_ci = Some(s.d_ci);
            rep.d_zero_mass = Some(s.d_zero_mass);
            rep.runtime_per_sweep_ms = Some(s.runtime_per_sweep_ms);
        }
        if dir.path(REGRESSION_CSV).exists() {
            let rows: Vec<RegressionRow> = io::read_csv_rows(&dir.path(REGRESSION_CSV))?;
            let mut inclusion = vec![0.0; alloc.q()];
            rows.iter().for_each(|r| inclusion[r.cluster - 1] = r.inclusion);
            rep.model_size = Some(inclusion.iter().filter(|&&p| p > 0.5).count() as f64);
            if let Some(tp) = &true_preds {
                let (tpr, tnr) = eval::tpr_tnr(&inclusion, &alloc, tp)?;
                rep.tpr = Some(tpr);
                rep.tnr = Some(tnr);
            }
        }
    }
    if dir.path(PREDICTIONS_CSV).exists() {
        let rows: Vec<PredictionRow> = io::read_csv_rows(&dir.path(PREDICTIONS_CSV))?;
        if let (Some(ytr), false) = (data.y_train(), rows.is_empty()) {
            let ybar = ytr.iter().sum::<f64>() / ytr.len() as f64;
            let y: Option<Vec<f64>> = rows.iter().map(|r| r.y).collect();
            if let Some(y) = y {
                let yhat: Vec<f64> = rows.iter().map(|r| r.mean).collect();
                rep.pct_mse_reduction = eval::pct_mse_reduction(&y, &yhat, ybar).ok();
            }
        }
    }
    rep.validate()?;
    io::write_json(&dir.path(EVAL_JSON), &EvalFile { report: rep.clone(), stamp: Stamp::of(cfg) })?;
    Ok(rep)
}

/// Synthesizes, fits and scores `count` datasets with seeds `seed..seed+count`,
/// writing the long-format `replicates.csv`.
pub fn run_replicates(cfg: &RunConfig, count: usize) -> Result<Vec<ReplicateRow>> {
    cfg.validate()?;
    let dir = out_dir(cfg);
    dir.create()?;
    let rep_cfg = |r: usize| RunConfig {
        seed: cfg.seed + r as u64,
        out_dir: dir.path(&format!("rep{r:03}")).display().to_string(),
        matrix: String::new(),
        adjacency_dir: String::new(),
        responses: String::new(),
        train_ids: String::new(),
        ..cfg.clone()
    };
    let one = |r: usize| -> Result<EvalReport> {
        let rc = rep_cfg(r);
        synth(&rc)?;
        fit(&rc)?;
        evaluate(&rc)
    };
    let par = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).max(1);
    let mut reports = Vec::with_capacity(count);
    for chunk in (0..count).collect::<Vec<_>>().chunks(par) {
        let res: Vec<Result<EvalReport>> = std::thread::scope(|s| {
            let hs: Vec<_> = chunk.iter().map(|&r| s.spawn(move || one(r))).collect();
            hs.into_iter().map(|h| h.join().expect("replicate thread panicked")).collect()
        });
        for r in res {
            reports.push(r?);
        }
    }
    let mut rows = Vec::new();
    for (r, rep) in reports.iter().enumerate() {
        let kt = rep.kmeans_tau;
        let bacon_only = EvalReport { kmeans_tau: None, ..rep.clone() };
        rows.extend(bacon_only.rows("bacon", r));
        if let Some(v) = kt {
            rows.push(ReplicateRow { method: "kmeans".into(), replicate: r, metric: "tau_hat".into(), value: v });
        }
    }
    io::write_csv_rows(&dir.path(REPLICATES_CSV), &rows)?;
    Ok(rows)
}

/// Plain-text digest of a run directory.
pub fn report(cfg: &RunConfig) -> Result<String> {
    let dir = out_dir(cfg);
    let mut s = format!("run directory: {}\n", dir.root().display());
    if let Ok(m) = io::read_json::<Manifest>(&dir.path(MANIFEST_JSON)) {
        s += &format!("subjects: {}  covariates: {} of {} raw\n", m.subjects.len(), m.retained.len(), m.raw_columns);
    }
    if let Ok(ls) = read_ls_allocation(&dir) {
        s += &format!("least-squares allocation: q = {} (loss {:.3}, chain {}, sweep {})\n", ls.q, ls.loss, ls.chain, ls.sweep);
    }
    if let Ok(st) = io::read_json::<Stage1Summary>(&dir.path(STAGE1_SUMMARY_JSON)) {
        s += &format!(
            "discount: 95% CI ({:.3}, {:.3}), P(d = 0) = {:.3}, log-BF lower bound {:.2} (sd {:.2})\n",
            st.d_ci.0, st.d_ci.1, st.d_zero_mass, st.logbf_mean, st.logbf_sd
        );
        s += &format!("runtime: {:.3} ms per sweep\n", st.runtime_per_sweep_ms);
    }
    if let Ok(st) = io::read_json::<Stage2Summary>(&dir.path(STAGE2_SUMMARY_JSON)) {
        s += &format!("regression: mean q1 = {:.2}, median-probability model size = {}\n", st.mean_q1, st.model_size);
    }
    if let Ok(rows) = io::read_csv_rows::<RegressionRow>(&dir.path(REGRESSION_CSV)) {
        let mut seen = std::collections::BTreeSet::new();
        let mut top: Vec<&RegressionRow> = rows.iter().filter(|r| seen.insert(r.cluster)).collect();
        top.sort_by(|a, b| b.inclusion.total_cmp(&a.inclusion));
        for r in top.iter().take(10).filter(|r| r.inclusion > 0.5) {
            s += &format!("  cluster {:>4}: inclusion {:.3}, beta {:.3}\n", r.cluster, r.inclusion, r.beta_mean);
        }
    }
    if let Ok(e) = io::read_json::<EvalReport>(&dir.path(EVAL_JSON)) {
        s += &format!("evaluation: {}\n", serde_json::to_string(&e).expect("serializable"));
    }
    Ok(s)
}
